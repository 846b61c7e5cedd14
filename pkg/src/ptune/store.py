"""Single-file checkpoints for models, prompt encoders, caches and train state.

Layout (format version 1)::

    offset  size  content
    0       8     magic  b"PTUNECK\\x01"
    8       8     header length H, unsigned little-endian
    16      H     header, UTF-8 JSON with sorted keys
    16+H    ...   body: float32 little-endian arrays, back to back

The header holds ``format_version``, ``kind``, ``config`` (constructor
arguments), ``config_hash`` (SHA-256 of the canonical config JSON),
``extra`` (kind-specific JSON), ``manifest`` (one entry per array, sorted by
name: ``name``, ``shape``, ``offset`` and ``nbytes`` relative to the body
start), ``body_nbytes`` and ``body_sha256``.

Files are written to a temporary sibling and renamed into place. Equal
objects always produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import LanguageModel, ModelConfig
from .optim import AdamState
from .prompt import PromptCache, PromptEncoder
from .tuning import TrainState

MAGIC = b"PTUNECK\x01"
FORMAT_VERSION = 1
KINDS = ("model", "encoder", "cache", "train_state")


class CheckpointError(Exception):
    def __init__(self, message: str, path=None):
        super().__init__(f"{path}: {message}" if path is not None else message)
        self.path = path


class FormatVersionError(CheckpointError):
    pass


class KindMismatchError(CheckpointError):
    pass


class IntegrityError(CheckpointError):
    pass


class NonFiniteError(CheckpointError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


@dataclass
class Checkpoint:
    kind: str
    config: dict
    arrays: dict
    extra: dict
    header: dict | None = None

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)


# -- object <-> checkpoint ---------------------------------------------------------


def _float(x: float):
    return None if x is None or not np.isfinite(x) else float(x)


def to_checkpoint(obj, extra: dict | None = None) -> Checkpoint:
    extra = dict(extra or {})
    if isinstance(obj, LanguageModel):
        return Checkpoint("model", obj.config.to_dict(), dict(obj.state_dict()), extra)
    if isinstance(obj, PromptEncoder):
        return Checkpoint("encoder", obj.config(), dict(obj.state_dict()), extra)
    if isinstance(obj, PromptCache):
        return Checkpoint("cache", dict(obj.meta), {"vectors": obj.vectors}, extra)
    if isinstance(obj, TrainState):
        arrays = {}
        for name, arr in obj.adam.m.items():
            arrays[f"adam.m/{name}"] = arr
        for name, arr in obj.adam.v.items():
            arrays[f"adam.v/{name}"] = arr
        for name, arr in obj.best_params.items():
            arrays[f"best/{name}"] = arr
        extra.update(
            step=obj.step, adam_step=obj.adam.step, best_metric=_float(obj.best_metric),
            best_step=obj.best_step, patience_used=obj.patience_used,
            rng_state=obj.rng_state,
            history=[{k: _float(v) if isinstance(v, float) else v for k, v in h.items()}
                     for h in obj.history],
        )
        return Checkpoint("train_state", {"seed": obj.seed}, arrays, extra)
    raise TypeError(f"cannot checkpoint object of type {type(obj).__name__}")


def from_checkpoint(ck: Checkpoint):
    if ck.kind == "model":
        model = LanguageModel(ModelConfig(**ck.config))
        model.load_state_dict(ck.arrays)
        return model
    if ck.kind == "encoder":
        cfg = ck.config
        enc = PromptEncoder(cfg["m"], cfg["d"], hidden=cfg["hidden"], seed=cfg["seed"],
                            bypass=cfg["bypass"])
        enc.load_state_dict(ck.arrays)
        return enc
    if ck.kind == "cache":
        return PromptCache(ck.arrays["vectors"], meta=dict(ck.config))
    if ck.kind == "train_state":
        e = ck.extra
        adam = AdamState(step=e["adam_step"])
        best = {}
        for key, arr in ck.arrays.items():
            group, name = key.split("/", 1)
            {"adam.m": adam.m, "adam.v": adam.v, "best": best}[group][name] = arr.copy()
        return TrainState(
            step=e["step"], adam=adam,
            best_metric=-np.inf if e["best_metric"] is None else e["best_metric"],
            best_step=e["best_step"], patience_used=e["patience_used"], seed=ck.config["seed"],
            rng_state=e["rng_state"], best_params=best, history=list(e["history"]),
        )
    raise CheckpointError(f"unknown checkpoint kind {ck.kind!r}")


# -- bytes ---------------------------------------------------------------------------


def encode(ck: Checkpoint, force: bool = False) -> bytes:
    names = sorted(ck.arrays)
    manifest, chunks, offset = [], [], 0
    for name in names:
        arr = np.ascontiguousarray(ck.arrays[name], dtype="<f4")
        if not force and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"array {name!r} holds NaN/Inf (pass force=True to save anyway)")
        raw = arr.tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    body = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": ck.kind,
        "config": ck.config,
        "config_hash": config_hash(ck.config),
        "extra": ck.extra,
        "manifest": manifest,
        "body_nbytes": len(body),
        "body_sha256": hashlib.sha256(body).hexdigest(),
    }
    head = canonical_json(header).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + body


def decode(blob: bytes, path=None, expected_kind: str | None = None) -> Checkpoint:
    if len(blob) < 16 or blob[:7] != MAGIC[:7]:
        raise IntegrityError("not a checkpoint file (bad magic or truncated)", path)
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + hlen:
        raise IntegrityError("hash mismatch: file truncated inside the header", path)
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"unreadable header ({exc})", path) from None
    version = header.get("format_version")
    if version != FORMAT_VERSION or blob[7] != FORMAT_VERSION:
        raise FormatVersionError(f"format version {version} is not supported "
                                 f"(this build reads version {FORMAT_VERSION})", path)
    kind = header.get("kind")
    if expected_kind is not None and kind != expected_kind:
        raise KindMismatchError(f"expected a {expected_kind!r} checkpoint, found {kind!r}", path)
    body = blob[16 + hlen:]
    digest = hashlib.sha256(body).hexdigest()
    if len(body) != header["body_nbytes"] or digest != header["body_sha256"]:
        raise IntegrityError(f"hash mismatch: body has {len(body)} bytes / sha256 {digest[:12]}..., "
                             f"header expects {header['body_nbytes']} bytes / "
                             f"{header['body_sha256'][:12]}...", path)
    arrays = {}
    for entry in header["manifest"]:
        raw = body[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).astype(np.float32)
    return Checkpoint(kind, header["config"], arrays, header.get("extra", {}), header)


def save(obj, path, force: bool = False, extra: dict | None = None) -> Path:
    """Write ``obj`` atomically; returns the path."""
    path = Path(path)
    ck = obj if isinstance(obj, Checkpoint) else to_checkpoint(obj, extra)
    blob = encode(ck, force=force)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(blob)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint ({exc.strerror or exc})", path) from exc
    return path


def load_checkpoint(path, expected_kind: str | None = None) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint ({exc.strerror or exc})", path) from exc
    return decode(blob, path, expected_kind)


def load(path, expected_kind: str | None = None):
    """Reconstruct the saved object, checking kind, version and body hash."""
    return from_checkpoint(load_checkpoint(path, expected_kind))
