"""Experiment records, CSV tables and the JSON-lines metrics stream.

Everything written here is deterministic given the same inputs: keys are
sorted, floats are written with ``repr`` precision, and wall-clock time is
kept out of the metric files (it lives only in the record file).
"""

from __future__ import annotations

import csv
import io
import json
import subprocess
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .store import canonical_json, config_hash


def git_describe(cwd=None) -> str | None:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=cwd,
                             capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None if out.returncode == 0 else None


class MetricsStream:
    """Append-only JSON lines; each line is flushed so readers can tail it."""

    def __init__(self, path, seed: int, config_hash: str, **context):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.seed = seed
        self.config_hash = config_hash
        self.context = context
        self.count = 0

    def emit(self, step: int, split: str, metric: str, value, **extra) -> None:
        rec = {"step": int(step), "split": split, "metric": metric,
               "value": None if value is None or value != value else float(value),
               "seed": self.seed, "config_hash": self.config_hash}
        rec.update(self.context)
        rec.update(extra)
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(canonical_json(rec) + "\n")
        self.count += 1

    def __call__(self, event: Mapping) -> None:
        ev = dict(event)
        self.emit(ev.pop("step"), ev.pop("split"), ev.pop("metric"), ev.pop("value"), **ev)


def read_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line]


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else v


def write_csv(path, rows: Sequence[Mapping], columns: Sequence[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(row.get(c)) for c in columns])
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@dataclass
class ExperimentRecord:
    command: str
    config: dict
    seed: int
    metrics: dict = field(default_factory=dict)
    checkpoints: list = field(default_factory=list)
    git: str | None = None
    wall_clock_s: float = 0.0

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["config_hash"] = self.config_hash
        return d

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
        return path


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        self.elapsed = 0.0
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
        return False


def format_table(rows: Iterable[Sequence], header: Sequence[str]) -> str:
    """Plain fixed-width table for terminal output."""
    rows = [[str(c) for c in r] for r in rows]
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(header)]
    line = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    out = [line(header), line(["-" * w for w in widths])]
    out += [line(r) for r in rows]
    return "\n".join(out)
