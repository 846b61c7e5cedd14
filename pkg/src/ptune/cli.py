"""``ptune`` command line: pretrain, probe, tune, matrix, fewshot, sweep.

Settings resolve as flag > config file (JSON) > built-in default. The
resolved settings are written to ``record.json`` in the output directory and
their hash is stamped on every metrics line. Exit status is 0 on success, 1
for configuration problems and 2 for runtime or numeric failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import store
from .bench import fewshot as fs
from .bench import probing
from .bench.world import (DEFAULT_PRETRAIN, KBConfig, PretrainConfig, World, build_world,
                          pretrain_model, pretrained)
from .model import LanguageModel, Vocab
from .optim import OptimizerConfig
from .prompt import PromptEncoder, TemplateSpec, freeze
from .records import (ExperimentRecord, MetricsStream, Timer, format_table, git_describe,
                      write_csv)
from .tuning import PromptTask, TrainingDiverged, TuningMode, grid_search, train_loop

log = logging.getLogger("ptune")


class ConfigError(Exception):
    """Bad settings: exit status 1."""


# -- settings ----------------------------------------------------------------------

KB_DEFAULTS = {
    "kb_seed": 0, "n_relations": 8, "n_entities": 200, "templates_per_relation": 5,
    "frames_per_triple": 1, "extra_frame_rate": 0.3, "train_skew": 0.0,
}
TUNE_DEFAULTS = {
    "pt_lr": 3e-3, "pt_steps": 400, "ft_lr": 1e-3, "ft_steps": 200, "tune_batch": 16,
    "eval_every": 50, "patience": None,
}

DEFAULTS = {
    "pretrain": {**KB_DEFAULTS, "attention": "causal", "steps": None, "batch_size": None,
                 "lr": None, "shift": None, "out": "runs/pretrain"},
    "probe": {"model": None, "mode": "MP_ZERO_SHOT", "template": None, "prompts": None,
              "relations": None, "out": "runs/probe"},
    "tune": {"model": None, "mode": "PT", "template": None, "relations": None,
             "optimizer": "adam", "lr": None, "batch_size": None, "steps": None,
             "weight_decay": 0.0, "grid_lr": None, "grid_batch": None,
             "eval_every": 50, "patience": None, "out": "runs/tune"},
    "matrix": {**KB_DEFAULTS, **TUNE_DEFAULTS, "models": None, "modes": "MP_ZERO_SHOT,FT,MP_FT,PT",
               "seeds": None, "pretrain_steps": None, "cache_dir": None, "jobs": 1,
               "out": "runs/matrix"},
    "fewshot": {**KB_DEFAULTS, "model": None, "attention": "bidirectional", "seeds": "0,1,2,3,4",
                "dev32": 32, "n_full_dev": 400, "steps": 200, "eval_every": 40,
                "grid_lr": "1e-3,3e-3", "grid_batch": "16,32", "pretrain_steps": None,
                "cache_dir": None, "jobs": 1, "out": "runs/fewshot"},
    "sweep": {**TUNE_DEFAULTS, "model": None, "with_pt": True, "out": "runs/sweep"},
}


def _floats(text, name) -> list[float]:
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"{name}: expected comma-separated numbers, got {text!r}") from None


def _ints(text, name) -> list[int]:
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"{name}: expected comma-separated integers, got {text!r}") from None


def _env_seed() -> int | None:
    raw = os.environ.get("PTUNE_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"PTUNE_SEED must be an integer, got {raw!r}") from None


def resolve(command: str, flags: dict, config_path: str | None) -> dict:
    """Merge defaults, the config file and explicit flags; unknown keys are errors."""
    settings = dict(DEFAULTS[command])
    settings["seed"] = None
    allowed = set(settings)
    if config_path:
        try:
            data = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {config_path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"config {config_path} must hold a JSON object")
        section = data.get(command, data) if isinstance(data.get(command), dict) else data
        unknown = sorted(set(section) - allowed)
        if unknown:
            raise ConfigError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
        settings.update(section)
    settings.update(flags)
    if settings["seed"] is None:
        env = _env_seed()
        settings["seed"] = 0 if env is None else env
    if not isinstance(settings["seed"], int):
        raise ConfigError(f"seed must be an integer, got {settings['seed']!r}")
    return settings


def kb_config(s: dict) -> KBConfig:
    try:
        return KBConfig(seed=int(s["kb_seed"]), n_relations=int(s["n_relations"]),
                        n_entities=int(s["n_entities"]),
                        templates_per_relation=int(s["templates_per_relation"]),
                        frames_per_triple=int(s["frames_per_triple"]),
                        extra_frame_rate=float(s["extra_frame_rate"]),
                        train_skew=float(s["train_skew"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad knowledge-base setting: {exc}") from None


def _world(cfg: KBConfig) -> World:
    try:
        return build_world(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _out(s: dict) -> Path:
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    metrics = out / "metrics.jsonl"
    if metrics.exists():
        metrics.unlink()  # a run owns its stream
    return out


def _hashed(s: dict) -> dict:
    """Settings that define the experiment (where it is written does not)."""
    return {k: v for k, v in s.items() if k != "out"}


def _stream(out: Path, s: dict, command: str) -> MetricsStream:
    return MetricsStream(out / "metrics.jsonl", s["seed"], store.config_hash(_hashed(s)), command=command)


def _record(command: str, s: dict, out: Path, metrics: dict, checkpoints, timer: Timer) -> None:
    ExperimentRecord(command, _hashed(s), s["seed"], metrics, [str(Path(p).relative_to(out)) for p in checkpoints],
                     git_describe(), round(timer.elapsed, 3)).write(out / "record.json")


def _load_model(path) -> tuple[LanguageModel, World, KBConfig]:
    """A pretrained model plus the world it was trained on (from its header)."""
    if path is None:
        raise ConfigError("--model is required (a checkpoint written by `ptune pretrain`)")
    if not Path(path).exists():
        raise ConfigError(f"model checkpoint not found: {path}")
    ck = store.load_checkpoint(path, "model")
    kbd = ck.extra.get("kb")
    if kbd is None:
        raise ConfigError(f"{path} does not record its knowledge-base settings")
    cfg = KBConfig(**kbd)
    world = _world(cfg)
    model = store.from_checkpoint(ck)
    if model.config.vocab_size != len(world.vocab):
        raise ConfigError(f"{path}: vocabulary size {model.config.vocab_size} does not match "
                          f"the rebuilt world ({len(world.vocab)})")
    return model, world, cfg


def _relations(s: dict, world: World) -> list[str]:
    names = [r.name for r in world.kb.relations]
    if not s.get("relations"):
        return names
    wanted = [r.strip() for r in str(s["relations"]).split(",") if r.strip()]
    bad = [r for r in wanted if r not in names]
    if bad:
        raise ConfigError(f"unknown relation(s) {bad}; available: {names}")
    return wanted


def _template(text: str | None):
    if text is None:
        return None
    try:
        return TemplateSpec.parse(text)
    except ValueError as exc:
        raise ConfigError(f"bad template {text!r}: {exc}") from None


def _mode(text) -> TuningMode:
    try:
        return TuningMode.parse(str(text))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _probe_config(s: dict) -> probing.ProbeConfig:
    try:
        return probing.ProbeConfig(
            pt=OptimizerConfig(kind="adam", lr=float(s["pt_lr"]), batch_size=int(s["tune_batch"]),
                               max_steps=int(s["pt_steps"])),
            ft=OptimizerConfig(kind="adamw", lr=float(s["ft_lr"]), batch_size=int(s["tune_batch"]),
                               max_steps=int(s["ft_steps"]), weight_decay=0.01),
            eval_every=int(s["eval_every"]), patience=s["patience"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad tuning setting: {exc}") from None


def _pretrain_config(attention: str, s: dict, steps=None, batch=None, lr=None) -> PretrainConfig:
    base = DEFAULT_PRETRAIN[attention]
    kw = {"seed": s["seed"]}
    if steps is not None:
        kw["steps"] = int(steps)
    if batch is not None:
        kw["batch_size"] = int(batch)
    if lr is not None:
        kw["lr"] = float(lr)
    if s.get("shift") is not None:
        kw["shift"] = int(s["shift"])
    return replace(base, **kw)


def _model_for(world: World, cfg: KBConfig, attention: str, s: dict) -> LanguageModel:
    """Pretrain inline, reusing a checkpoint from ``cache_dir`` when present."""
    pc = _pretrain_config(attention, s, steps=s.get("pretrain_steps"))
    return pretrained(world, attention, pc, cache_dir=s.get("cache_dir"), kb_config=cfg)


# -- subcommands ----------------------------------------------------------------------


def cmd_pretrain(s: dict) -> int:
    if s["attention"] not in ("causal", "bidirectional"):
        raise ConfigError(f"attention must be causal or bidirectional, got {s['attention']!r}")
    cfg = kb_config(s)
    world = _world(cfg)
    pc = _pretrain_config(s["attention"], s, s["steps"], s["batch_size"], s["lr"])
    if pc.steps < 0 or pc.batch_size < 1 or pc.shift < 0:
        raise ConfigError("steps and shift must be >= 0 and batch size >= 1")
    out = _out(s)
    stream = _stream(out, s, "pretrain")
    with Timer() as timer:
        model, result = pretrain_model(world, s["attention"], pc,
                                       log_fn=lambda step, v: stream.emit(step, "train", "loss", v))
    ck = store.save(model, out / f"model-{s['attention']}.ptck",
                    extra={"kb": asdict(cfg), "pretrain": asdict(pc)})
    write_csv(out / "pretrain_loss.csv",
              [{"step": i + 1, "loss": v} for i, v in enumerate(result.losses)], ["step", "loss"])
    final = float(np.mean(result.losses[-100:])) if result.losses else None
    _record("pretrain", s, out, {"final_loss": final, "fingerprint": model.fingerprint()}, [ck], timer)
    print(f"pretrained {s['attention']} model: {pc.steps} steps, final loss "
          f"{'n/a' if final is None else f'{final:.4f}'} -> {ck}")
    return 0


def _load_prompts(path, relations) -> dict:
    """PT prompt sources per relation from a ``tune`` output directory."""
    if path is None:
        raise ConfigError("--prompts is required for PT probing (the output directory of `ptune tune`)")
    base = Path(path)
    out = {}
    for rel in relations:
        f = base / "caches" / f"{rel}.ptck"
        if not f.exists():
            raise ConfigError(f"no frozen prompt cache for {rel} at {f}")
        out[rel] = store.load(f, "cache")
    return out


def cmd_probe(s: dict) -> int:
    mode = _mode(s["mode"])
    if mode not in (TuningMode.MP_ZERO_SHOT, TuningMode.PT):
        raise ConfigError(f"probe evaluates MP or PT prompts; use `tune` for {mode.value}")
    model, world, _ = _load_model(s["model"])
    rels = _relations(s, world)
    spec = _template(s["template"])
    prompts = None
    if mode is TuningMode.PT:
        spec = spec or TemplateSpec.lama(model.attention)
        if spec.n_prompt == 0:
            raise ConfigError("a PT template needs at least one [P*k] block")
        prompts = _load_prompts(s["prompts"], rels)
        for rel, cache in prompts.items():
            if cache.m != spec.n_prompt:
                raise ConfigError(f"cache for {rel} holds {cache.m} vectors, template needs {spec.n_prompt}")
    out = _out(s)
    with Timer() as timer:
        if spec is None:
            template = {r.name: r.manual[0] for r in world.kb.relations}
        else:
            if spec.n_prompt and mode is TuningMode.MP_ZERO_SHOT:
                raise ConfigError("MP probing needs a template without [P*k] blocks")
            template = spec
        try:
            res = probing.probe(model, world.kb, template, prompts=prompts, relations=rels)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    rows = [{"relation": r, "mode": mode.value, "p_at_1": p, "n": len(world.kb.split("test", r))}
            for r, p in res.relation_p1.items()]
    rows.append({"relation": "ALL", "mode": mode.value, "p_at_1": res.aggregate, "n": len(res.predictions)})
    write_csv(out / "probe.csv", rows, ["relation", "mode", "p_at_1", "n"])
    write_csv(out / "predictions.csv",
              [dict(zip(("subject", "relation", "gold", "predicted"), p)) for p in res.predictions],
              ["subject", "relation", "gold", "predicted"])
    stream = _stream(out, s, "probe")
    for r in rows:
        stream.emit(0, "test", "p_at_1", r["p_at_1"], relation=r["relation"], mode=mode.value)
    _record("probe", s, out, {"p_at_1": res.aggregate}, [], timer)
    print(format_table([[r["relation"], f"{100 * r['p_at_1']:.1f}"] for r in rows], ["relation", "P@1"]))
    return 0


def cmd_tune(s: dict) -> int:
    mode = _mode(s["mode"])
    if not mode.trains_anything:
        raise ConfigError("MP_ZERO_SHOT has nothing to train; evaluate it with `ptune probe --mode MP`")
    if s["optimizer"] not in ("adam", "adamw"):
        raise ConfigError(f"optimizer must be adam or adamw, got {s['optimizer']!r}")
    model, world, _ = _load_model(s["model"])
    rels = _relations(s, world)
    spec = _template(s["template"])
    if spec is not None and mode.uses_encoder and spec.n_prompt == 0:
        raise ConfigError(f"{mode.value} needs a template with [P*k] blocks")
    if spec is not None and not mode.uses_encoder and spec.n_prompt:
        raise ConfigError(f"{mode.value} uses a template without [P*k] blocks")
    pc = probing.ProbeConfig()
    base = pc.pt if mode.uses_encoder else pc.ft
    try:
        base = replace(base, kind=s["optimizer"], weight_decay=float(s["weight_decay"]),
                       **({"lr": float(s["lr"])} if s["lr"] is not None else {}),
                       **({"batch_size": int(s["batch_size"])} if s["batch_size"] is not None else {}),
                       **({"max_steps": int(s["steps"])} if s["steps"] is not None else {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad optimizer setting: {exc}") from None
    grid_lr = _floats(s["grid_lr"], "grid_lr") if s["grid_lr"] else None
    grid_bs = _ints(s["grid_batch"], "grid_batch") if s["grid_batch"] else None
    out = _out(s)
    stream = _stream(out, s, "tune")
    seed = s["seed"]
    rows, grid_rows, ckpts = [], [], []
    fp_before = model.fingerprint()
    with Timer() as timer:
        for rel in rels:
            rspec = spec or probing.template_for(mode, world.kb, rel, model.attention)
            task = PromptTask(probing.instances_for(world.kb, rspec, "train", rel),
                              probing.instances_for(world.kb, rspec, "dev", rel), name=rel)

            def factory(rspec=rspec):
                lm = model.copy() if mode.trains_lm else model
                enc = PromptEncoder(rspec.n_prompt, model.config.d_model, seed=seed) if mode.uses_encoder else None
                return lm, enc

            cb = lambda ev, rel=rel: stream({**ev, "relation": rel})
            if grid_lr or grid_bs:
                grid = grid_search(task, factory, mode, grid_lr or [base.lr], grid_bs or [base.batch_size],
                                   base, seed=seed, patience=s["patience"], eval_every=int(s["eval_every"]),
                                   on_event=cb)
                for (lr, bs), v in sorted(grid.cells.items()):
                    grid_rows.append({"relation": rel, "lr": lr, "batch_size": bs, "dev_accuracy": v,
                                      "selected": int((lr, bs) == grid.best)})
                res, lm, enc = grid.results[grid.best]
            else:
                lm, enc = factory()
                res = train_loop(task, lm, enc, mode, base, patience=s["patience"],
                                 eval_every=int(s["eval_every"]), seed=seed, on_event=cb)
            test = probing.probe(lm, world.kb, rspec, prompts=enc, relations=[rel]).relation_p1[rel]
            stream.emit(res.steps_run, "test", "p_at_1", test, relation=rel)
            rows.append({"relation": rel, "mode": mode.value, "best_dev": res.best_metric,
                         "best_step": res.best_step, "test_p_at_1": test})
            if enc is not None:
                ckpts.append(store.save(enc, out / "encoders" / f"{rel}.ptck"))
                ckpts.append(store.save(freeze(enc), out / "caches" / f"{rel}.ptck"))
            if mode.trains_lm:
                ckpts.append(store.save(lm, out / "models" / f"{rel}.ptck"))
    frozen_ok = None
    if not mode.trains_lm:
        frozen_ok = model.fingerprint() == fp_before
        if not frozen_ok:
            raise probing.FrozenLMViolation("language model parameters changed during a frozen-LM run")
    write_csv(out / "tune.csv", rows, ["relation", "mode", "best_dev", "best_step", "test_p_at_1"])
    if grid_rows:
        write_csv(out / "grid.csv", grid_rows, ["relation", "lr", "batch_size", "dev_accuracy", "selected"])
    mean = float(np.mean([r["test_p_at_1"] for r in rows]))
    _record("tune", s, out, {"test_p_at_1_mean": mean, "lm_frozen": frozen_ok}, ckpts, timer)
    print(format_table([[r["relation"], f"{100 * r['best_dev']:.1f}", f"{100 * r['test_p_at_1']:.1f}"]
                        for r in rows], ["relation", "dev", "test P@1"]))
    if frozen_ok is not None:
        print(f"frozen-LM hash check: {'unchanged' if frozen_ok else 'CHANGED'}")
    return 0


def _matrix_cell(args):
    name, state, mcfg, kbc, mode, seed, pcfg = args
    world = build_world(kbc)
    model = LanguageModel(mcfg)
    model.load_state_dict(state)
    before = model.fingerprint()
    res, _ = probing.evaluate_mode(model, world.kb, mode, pcfg, seed=seed)
    frozen = model.fingerprint() == before
    return (name, mode, seed), res.relation_p1, res.aggregate, frozen


def _pool_map(fn, jobs, items):
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def _models(s: dict, world: World, cfg: KBConfig) -> dict:
    if s["models"]:
        out = {}
        for item in str(s["models"]).split(","):
            if "=" not in item:
                raise ConfigError(f"--models expects name=path pairs, got {item!r}")
            name, path = item.split("=", 1)
            model, _, mcfg = _load_model(path)
            if mcfg != cfg:
                raise ConfigError(f"{path} was pretrained on a different knowledge base")
            out[name.strip()] = model
        return out
    return {att: _model_for(world, cfg, att, s) for att in ("causal", "bidirectional")}


def cmd_matrix(s: dict) -> int:
    modes = [_mode(m) for m in str(s["modes"]).split(",") if m.strip()]
    if not modes:
        raise ConfigError("--modes is empty")
    seeds = _ints(s["seeds"], "seeds") if s["seeds"] is not None else [s["seed"]]
    jobs = int(s["jobs"])
    if jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    cfg = kb_config(s)
    pcfg = _probe_config(s)
    world = _world(cfg)
    out = _out(s)
    stream = _stream(out, s, "matrix")
    with Timer() as timer:
        models = _models(s, world, cfg)
        cells = [(name, models[name].state_dict(), models[name].config, cfg, mode.value, seed, pcfg)
                 for name in sorted(models) for mode in modes
                 for seed in (seeds if mode.trains_anything else seeds[:1])]
        results = sorted(_pool_map(_matrix_cell, jobs, cells), key=lambda r: (r[0][0], modes.index(TuningMode(r[0][1])), r[0][2]))
    rows = []
    for (name, mode, seed), per, agg, frozen in results:
        check = ("pass" if frozen else "FAIL") if mode == "PT" else ""
        for rel, p in per.items():
            rows.append({"model": name, "mode": mode, "seed": seed, "relation": rel, "p_at_1": p,
                         "frozen_lm_check": check})
        rows.append({"model": name, "mode": mode, "seed": seed, "relation": "ALL", "p_at_1": agg,
                     "frozen_lm_check": check})
        stream.emit(0, "test", "p_at_1", agg, model=name, mode=mode, cell_seed=seed)
    write_csv(out / "matrix.csv", rows, ["model", "mode", "seed", "relation", "p_at_1", "frozen_lm_check"])
    table = []
    summary = {}
    for name in sorted(models):
        line = [name]
        for mode in modes:
            vals = [agg for (n, m, _), _, agg, _ in results if n == name and m == mode.value]
            frozen = all(f for (n, m, _), _, _, f in results if n == name and m == mode.value)
            mean = 100 * float(np.mean(vals))
            summary[f"{name}/{mode.value}"] = mean
            line.append(f"{mean:.1f}" + ("" if mode is not TuningMode.PT else (" (frozen)" if frozen else " (CHANGED)")))
        table.append(line)
    text = format_table(table, ["model"] + [m.value for m in modes])
    (out / "matrix.txt").write_text(text + "\n", encoding="utf-8")
    _record("matrix", s, out, summary, [], timer)
    print(text)
    if any(not f for (_, m, _), _, _, f in results if m == "PT"):
        raise probing.FrozenLMViolation("a PT cell changed the language model")
    return 0


def cmd_fewshot(s: dict) -> int:
    seeds = _ints(s["seeds"], "seeds")
    if not seeds:
        raise ConfigError("--seeds is empty")
    dev32 = int(s["dev32"])
    if dev32 > 32:
        raise ConfigError(f"dev32 must be no larger than the 32-example train set, got {dev32}")
    if dev32 < 1:
        raise ConfigError("dev32 must hold at least one example")
    jobs = int(s["jobs"])
    if jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    fcfg = fs.FewShotConfig(lrs=tuple(_floats(s["grid_lr"], "grid_lr")),
                            batch_sizes=tuple(_ints(s["grid_batch"], "grid_batch")),
                            max_steps=int(s["steps"]), eval_every=int(s["eval_every"]))
    if s["model"]:
        model, world, _ = _load_model(s["model"])
    else:
        if s["attention"] not in ("causal", "bidirectional"):
            raise ConfigError(f"attention must be causal or bidirectional, got {s['attention']!r}")
        cfg = kb_config(s)
        world = _world(cfg)
        model = None
    out = _out(s)
    stream = _stream(out, s, "fewshot")
    with Timer() as timer:
        if model is None:
            model = _model_for(world, cfg, s["attention"], s)
        items = [(seed, model.state_dict(), model.config, fcfg, dev32, int(s["n_full_dev"]),
                  world.vocab.to_list()) for seed in seeds]
        results = sorted(_pool_map(_fewshot_run, jobs, items), key=lambda r: r["seed"])
    rows = []
    for r in results:
        for mode in ("MP_ZERO_SHOT", "MP_FT", "PT_FT"):
            res = r[mode]
            rows.append({"seed": r["seed"], "mode": mode, "full_dev_accuracy": res.full_dev_accuracy,
                         "dev32_accuracy": res.dev32_accuracy,
                         "selected_lr": res.selected[0] if res.selected else None,
                         "selected_batch": res.selected[1] if res.selected else None})
            stream.emit(0, "full_dev", "accuracy", res.full_dev_accuracy, mode=mode, run_seed=r["seed"])
    write_csv(out / "fewshot_runs.csv", rows,
              ["seed", "mode", "full_dev_accuracy", "dev32_accuracy", "selected_lr", "selected_batch"])
    summary_rows, summary = [], {}
    for mode in ("MP_ZERO_SHOT", "MP_FT", "PT_FT"):
        vals = np.array([row["full_dev_accuracy"] for row in rows if row["mode"] == mode])
        std = float(np.std(vals, ddof=1)) if len(vals) > 1 else None
        summary_rows.append({"mode": mode, "n_seeds": len(vals), "mean": float(vals.mean()), "std": std})
        summary[mode] = {"mean": float(vals.mean()), "std": std}
    write_csv(out / "fewshot.csv", summary_rows, ["mode", "n_seeds", "mean", "std"])
    _record("fewshot", s, out, summary, [], timer)
    print(format_table([[r["mode"], f"{100 * r['mean']:.1f}", "" if r["std"] is None else f"{100 * r['std']:.1f}"]
                        for r in summary_rows], ["mode", "mean acc", "std"]))
    return 0


def _fewshot_run(args) -> dict:
    seed, state, mcfg, fcfg, dev32, n_full, tokens = args
    model = LanguageModel(mcfg)
    model.load_state_dict(state)
    vocab = Vocab(tokens)
    task = fs.build_fewshot(seed, n_dev32=dev32, n_full_dev=n_full)
    out = {"seed": seed}
    for mode in ("MP_ZERO_SHOT", "MP_FT", "PT_FT"):
        out[mode] = fs.fewshot_eval(task, model, vocab, mode, fcfg, seed=seed)
    return out


def cmd_sweep(s: dict) -> int:
    model, world, _ = _load_model(s["model"])
    pcfg = _probe_config(s)
    out = _out(s)
    stream = _stream(out, s, "sweep")
    with Timer() as timer:
        rows = probing.sensitivity_sweep(model, world.kb, with_pt=bool(s["with_pt"]), config=pcfg,
                                         seed=s["seed"])
    flat, table = [], []
    for r in rows:
        for k, (text, p) in enumerate(r.template_p1.items()):
            flat.append({"relation": r.relation, "template": text, "index": k, "p_at_1": p})
            stream.emit(0, "test", "p_at_1", p, relation=r.relation, template=text)
        if r.pt_p1 is not None:
            stream.emit(0, "test", "p_at_1", r.pt_p1, relation=r.relation, template="PT")
        table.append([r.relation, f"{100 * r.worst:.1f}", f"{100 * r.best:.1f}", f"{100 * r.spread:.1f}",
                      "" if r.pt_p1 is None else f"{100 * r.pt_p1:.1f}"])
    write_csv(out / "sweep_templates.csv", flat, ["relation", "index", "template", "p_at_1"])
    write_csv(out / "sweep.csv", [{"relation": r.relation, "min": r.worst, "max": r.best, "spread": r.spread,
                                   "pt": r.pt_p1} for r in rows], ["relation", "min", "max", "spread", "pt"])
    _record("sweep", s, out, {"mean_spread": float(np.mean([r.spread for r in rows]))}, [], timer)
    print(format_table(table, ["relation", "min", "max", "spread", "PT"]))
    return 0


COMMANDS = {"pretrain": cmd_pretrain, "probe": cmd_probe, "tune": cmd_tune,
            "matrix": cmd_matrix, "fewshot": cmd_fewshot, "sweep": cmd_sweep}


# -- argument parsing -------------------------------------------------------------


def _add(p, *names, **kw):
    p.add_argument(*names, default=argparse.SUPPRESS, **kw)


def _kb_flags(p):
    g = p.add_argument_group("knowledge base")
    _add(g, "--kb-seed", type=int, help="seed of the synthetic knowledge base (default 0)")
    _add(g, "--n-relations", type=int)
    _add(g, "--n-entities", type=int)
    _add(g, "--templates-per-relation", type=int)
    _add(g, "--frames-per-triple", type=int)
    _add(g, "--extra-frame-rate", type=float)
    _add(g, "--train-skew", type=float)


def _tune_flags(p):
    g = p.add_argument_group("per-relation tuning")
    _add(g, "--pt-lr", type=float)
    _add(g, "--pt-steps", type=int)
    _add(g, "--ft-lr", type=float)
    _add(g, "--ft-steps", type=int)
    _add(g, "--tune-batch", type=int)
    _add(g, "--eval-every", type=int)
    _add(g, "--patience", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ptune", description="P-tuning desk lab.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", default=None, help="JSON settings file; flags override it")
        _add(p, "--seed", type=int, help="run seed (falls back to $PTUNE_SEED, then 0)")
        _add(p, "--out", help="output directory")
        return p

    p = command("pretrain", "pretrain a tiny LM on the synthetic corpus")
    _add(p, "--attention", choices=["causal", "bidirectional"])
    _add(p, "--steps", type=int)
    _add(p, "--batch-size", type=int)
    _add(p, "--lr", type=float)
    _add(p, "--shift", type=int, help="max random position offset per batch")
    _kb_flags(p)

    p = command("probe", "cloze P@1 with a manual template or frozen PT prompts")
    _add(p, "--model", help="pretrained model checkpoint")
    _add(p, "--mode", help="MP (manual prompt) or PT")
    _add(p, "--template", help='e.g. "[X:sub] was born in [MASK] ."')
    _add(p, "--prompts", help="output directory of `ptune tune --mode PT`")
    _add(p, "--relations", help="comma-separated relation names")

    p = command("tune", "train prompts and/or the LM per relation")
    _add(p, "--model")
    _add(p, "--mode", help="FT, MP_FT, PT or PT_FT")
    _add(p, "--template")
    _add(p, "--relations")
    _add(p, "--optimizer", choices=["adam", "adamw"])
    _add(p, "--lr", type=float)
    _add(p, "--batch-size", type=int)
    _add(p, "--steps", type=int)
    _add(p, "--weight-decay", type=float)
    _add(p, "--grid-lr", help="comma-separated learning rates")
    _add(p, "--grid-batch", help="comma-separated batch sizes")
    _add(p, "--eval-every", type=int)
    _add(p, "--patience", type=int)

    p = command("matrix", "modes x models P@1 table")
    _add(p, "--models", help="name=path pairs; default pretrains both models")
    _add(p, "--modes")
    _add(p, "--seeds", help="comma-separated tuning seeds")
    _add(p, "--pretrain-steps", type=int)
    _add(p, "--cache-dir")
    _add(p, "--jobs", type=int)
    _kb_flags(p)
    _tune_flags(p)

    p = command("fewshot", "32-example polarity task: MP zero-shot, MP_FT, PT_FT")
    _add(p, "--model")
    _add(p, "--attention", choices=["causal", "bidirectional"])
    _add(p, "--seeds")
    _add(p, "--dev32", type=int)
    _add(p, "--n-full-dev", type=int)
    _add(p, "--steps", type=int)
    _add(p, "--eval-every", type=int)
    _add(p, "--grid-lr")
    _add(p, "--grid-batch")
    _add(p, "--pretrain-steps", type=int)
    _add(p, "--cache-dir")
    _add(p, "--jobs", type=int)
    _kb_flags(p)

    p = command("sweep", "P@1 spread across manual templates, with PT alongside")
    _add(p, "--model")
    p.add_argument("--no-pt", dest="with_pt", action="store_false", default=argparse.SUPPRESS)
    _tune_flags(p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors; ours is 1
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        settings = resolve(args.command, flags, args.config)
        return COMMANDS[args.command](settings)
    except ConfigError as exc:
        print(f"ptune {args.command}: configuration error: {exc}", file=sys.stderr)
        return 1
    except (store.CheckpointError, TrainingDiverged, FloatingPointError, probing.FrozenLMViolation) as exc:
        print(f"ptune {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
