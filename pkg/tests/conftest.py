import pytest

from ptune.bench.world import KBConfig, PretrainConfig, build_world, pretrain_model

TINY_KB = KBConfig(n_relations=2, n_entities=30)


def tiny_pretrain(steps=200):
    return PretrainConfig(steps=steps, batch_size=32, lr=5e-3, d_model=16, n_heads=2, d_ff=32,
                          n_layers=1)


@pytest.fixture(scope="session")
def tiny_world():
    return build_world(TINY_KB)


@pytest.fixture(scope="session")
def tiny_models(tiny_world):
    return {att: pretrain_model(tiny_world, att, tiny_pretrain())[0]
            for att in ("causal", "bidirectional")}


_CRITERIA: dict = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    _CRITERIA[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
