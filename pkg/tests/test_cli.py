import json

import pytest

from ptune import store
from ptune.cli import main, resolve, ConfigError
from ptune.records import read_csv, read_jsonl

KB = ["--n-relations", "2", "--n-entities", "30"]


@pytest.fixture(scope="module")
def model_path(tmp_path_factory):
    out = tmp_path_factory.mktemp("pre")
    assert main(["pretrain", "--attention", "causal", "--steps", "40", "--batch-size", "8",
                 "--out", str(out), *KB]) == 0
    return out / "model-causal.ptck"


def outputs(path):
    """Every deterministic output file: bytes by relative name (record.json holds wall time)."""
    return {p.relative_to(path).as_posix(): p.read_bytes()
            for p in sorted(path.rglob("*")) if p.is_file() and p.name != "record.json"}


def test_pretrain_writes_checkpoint_and_stream(model_path):
    out = model_path.parent
    assert store.load(model_path, "model").attention == "causal"
    recs = read_jsonl(out / "metrics.jsonl")
    assert recs[-1]["step"] == 40 and recs[-1]["metric"] == "loss"
    assert {"seed", "config_hash", "split", "value"} <= set(recs[0])
    rec = json.loads((out / "record.json").read_text())
    assert rec["config_hash"] == recs[0]["config_hash"]
    assert len(read_csv(out / "pretrain_loss.csv")) == 40


@pytest.mark.parametrize("argv", [
    ["probe"],
    ["tune", "--mode", "PT", "--steps", "6", "--eval-every", "3"],
    ["tune", "--mode", "MP_FT", "--steps", "2", "--eval-every", "2", "--relations", "born_in"],
    ["sweep", "--pt-steps", "4", "--eval-every", "2"],
    ["fewshot", "--seeds", "0,1", "--steps", "2", "--eval-every", "1", "--grid-lr", "1e-3",
     "--grid-batch", "16", "--n-full-dev", "20"],
])
def test_reruns_are_byte_identical(model_path, tmp_path, argv):
    runs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert main([*argv, "--model", str(model_path), "--out", str(out)]) == 0
        runs.append(outputs(out))
    assert runs[0] == runs[1]
    assert "metrics.jsonl" in runs[0]


def test_matrix_csv_parses_and_marks_the_frozen_check(model_path, tmp_path):
    out = tmp_path / "m"
    assert main(["matrix", "--models", f"c={model_path}", "--modes", "PT", "--pt-steps", "3",
                 "--eval-every", "3", "--out", str(out), *KB]) == 0
    rows = read_csv(out / "matrix.csv")
    assert {r["mode"] for r in rows} == {"PT"}
    assert {r["frozen_lm_check"] for r in rows} == {"pass"}
    assert [r["relation"] for r in rows] == ["born_in", "citizen_of", "ALL"]
    assert all(0.0 <= float(r["p_at_1"]) <= 1.0 for r in rows)
    assert "(frozen)" in (out / "matrix.txt").read_text()


def test_pt_probe_reads_tuned_caches(model_path, tmp_path):
    tuned = tmp_path / "t"
    assert main(["tune", "--model", str(model_path), "--mode", "PT", "--steps", "4",
                 "--eval-every", "2", "--out", str(tuned)]) == 0
    rows = read_csv(tuned / "tune.csv")
    probed = tmp_path / "p"
    assert main(["probe", "--model", str(model_path), "--mode", "PT", "--prompts", str(tuned),
                 "--out", str(probed)]) == 0
    got = {r["relation"]: float(r["p_at_1"]) for r in read_csv(probed / "probe.csv")}
    for r in rows:
        assert got[r["relation"]] == float(r["test_p_at_1"])
    assert main(["probe", "--model", str(model_path), "--mode", "PT", "--prompts", str(tmp_path),
                 "--out", str(probed)]) == 1


def test_single_seed_fewshot_leaves_std_empty(model_path, tmp_path):
    out = tmp_path / "f"
    assert main(["fewshot", "--model", str(model_path), "--seeds", "3", "--steps", "2", "--eval-every", "1",
                 "--grid-lr", "1e-3", "--grid-batch", "16", "--n-full-dev", "20", "--out", str(out)]) == 0
    rows = read_csv(out / "fewshot.csv")
    assert [r["mode"] for r in rows] == ["MP_ZERO_SHOT", "MP_FT", "PT_FT"]
    assert all(r["std"] == "" and r["n_seeds"] == "1" for r in rows)


@pytest.mark.parametrize("argv", [
    ["probe", "--model", "nowhere.ptck"],
    ["tune", "--mode", "MP_ZERO_SHOT"],
    ["tune", "--mode", "LoRA"],
    ["fewshot", "--dev32", "64"],
    ["probe", "--relations", "flies_to"],
    ["probe", "--template", "[X:sub] [MASK] [MASK]"],
    ["pretrain", "--attention", "sideways"],
    ["pretrain", "--shift", "-1"],
    ["probe", "--no-such-flag"],
])
def test_configuration_errors_exit_1(model_path, tmp_path, argv, capsys):
    if "--model" not in argv and argv[0] != "pretrain":
        argv = [*argv, "--model", str(model_path)]
    assert main([*argv, "--out", str(tmp_path / "o")]) == 1
    assert capsys.readouterr().err


def test_damaged_checkpoint_exits_2(model_path, tmp_path, capsys):
    bad = tmp_path / "bad.ptck"
    bad.write_bytes(model_path.read_bytes()[:-3])
    assert main(["probe", "--model", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "hash mismatch" in capsys.readouterr().err


def test_config_file_and_flag_precedence(tmp_path, monkeypatch):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"probe": {"mode": "PT", "seed": 5}}))
    monkeypatch.setenv("PTUNE_SEED", "9")
    s = resolve("probe", {"mode": "MP"}, str(cfg))
    assert s["mode"] == "MP" and s["seed"] == 5
    assert resolve("probe", {}, None)["seed"] == 9
    assert resolve("probe", {"seed": 1}, None)["seed"] == 1
    monkeypatch.delenv("PTUNE_SEED")
    assert resolve("probe", {}, None)["seed"] == 0
    cfg.write_text(json.dumps({"probe": {"colour": "red"}}))
    with pytest.raises(ConfigError, match="colour"):
        resolve("probe", {}, str(cfg))
    cfg.write_text("{not json")
    with pytest.raises(ConfigError, match="JSON"):
        resolve("probe", {}, str(cfg))


def test_env_seed_reaches_the_record(model_path, tmp_path, monkeypatch):
    monkeypatch.setenv("PTUNE_SEED", "7")
    assert main(["probe", "--model", str(model_path), "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "record.json").read_text())["seed"] == 7
    assert {r["seed"] for r in read_jsonl(tmp_path / "metrics.jsonl")} == {7}
    monkeypatch.setenv("PTUNE_SEED", "seven")
    assert main(["probe", "--model", str(model_path), "--out", str(tmp_path)]) == 1
