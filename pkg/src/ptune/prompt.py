"""Templates, the bi-LSTM prompt encoder, and input assembly.

A template is an ordered list of segments::

    [P*3] [X:sub] [P*3] [MASK] [P*3]

``[P*k]`` is a block of k pseudo tokens, ``[X:name]`` a context slot,
``[MASK]`` the single target slot and any other whitespace-separated word an
anchor token taken from the vocabulary.

Assembly turns a bound template into the embedding rows the language model
reads. Pseudo-token rows come from a prompt source (a live
:class:`PromptEncoder` or a frozen :class:`PromptCache`), every other row is
an embedding-table lookup. For bidirectional models the target row holds
``e([MASK])``; for causal models the target contributes no row and the
prediction is read one row earlier.
"""

from __future__ import annotations

import copy
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor, no_tape
from .model import LanguageModel, Vocab


@dataclass(frozen=True)
class PromptBlock:
    count: int
    tokens: tuple | None = None  # concrete words, for manual prompts only

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("prompt block count must be >= 0")
        if self.tokens is not None and len(self.tokens) != self.count:
            raise ValueError(f"prompt block of {self.count} given {len(self.tokens)} tokens")


@dataclass(frozen=True)
class ContextSlot:
    name: str


@dataclass(frozen=True)
class Anchor:
    token: str


@dataclass(frozen=True)
class TargetSlot:
    pass


Segment = Union[PromptBlock, ContextSlot, Anchor, TargetSlot]

_BLOCK = re.compile(r"^\[P\*(\d+)\]$")
_SLOT = re.compile(r"^\[X:([A-Za-z_][\w-]*)\]$")


@dataclass(frozen=True)
class TemplateSpec:
    segments: tuple

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        targets = sum(isinstance(s, TargetSlot) for s in self.segments)
        if targets != 1:
            raise ValueError(f"template needs exactly one target slot, found {targets}")
        names = [s.name for s in self.segments if isinstance(s, ContextSlot)]
        if len(names) != len(set(names)):
            raise ValueError(f"duplicate context slot names in {names}")

    @classmethod
    def parse(cls, text: str) -> "TemplateSpec":
        segs: list[Segment] = []
        for word in text.split():
            if word == "[MASK]":
                segs.append(TargetSlot())
            elif m := _BLOCK.match(word):
                segs.append(PromptBlock(int(m.group(1))))
            elif m := _SLOT.match(word):
                segs.append(ContextSlot(m.group(1)))
            elif word.startswith("[P*") or word.startswith("[X"):
                raise ValueError(f"malformed template segment {word!r}")
            else:
                segs.append(Anchor(word))
        return cls(tuple(segs))

    @classmethod
    def lama(cls, attention: str, blocks: Sequence[int] | None = None) -> "TemplateSpec":
        """The (3, sub, 3, obj, 3) / (3, sub, 3, obj) probing layouts."""
        if blocks is None:
            blocks = (3, 3, 3) if attention == "bidirectional" else (3, 3, 0)
        a, b, c = blocks
        segs = [PromptBlock(a), ContextSlot("sub"), PromptBlock(b), TargetSlot()]
        if c:
            segs.append(PromptBlock(c))
        return cls(tuple(s for s in segs if not (isinstance(s, PromptBlock) and s.count == 0)))

    def __str__(self) -> str:
        out = []
        for s in self.segments:
            if isinstance(s, PromptBlock):
                out.append(" ".join(s.tokens) if s.tokens else f"[P*{s.count}]")
            elif isinstance(s, ContextSlot):
                out.append(f"[X:{s.name}]")
            elif isinstance(s, Anchor):
                out.append(s.token)
            else:
                out.append("[MASK]")
        return " ".join(out)

    @property
    def n_prompt(self) -> int:
        return sum(s.count for s in self.segments if isinstance(s, PromptBlock))

    @property
    def slot_names(self) -> list[str]:
        return [s.name for s in self.segments if isinstance(s, ContextSlot)]

    @property
    def n_anchors(self) -> int:
        return sum(isinstance(s, Anchor) for s in self.segments)

    @property
    def is_discrete(self) -> bool:
        return all(s.tokens is not None for s in self.segments if isinstance(s, PromptBlock))

    def length(self, context_lengths: Mapping[str, int], attention: str) -> int:
        n = self.n_prompt + sum(context_lengths[name] for name in self.slot_names) + self.n_anchors
        if attention == "bidirectional":
            return n + 1
        before = 0
        for seg in self.segments:
            if isinstance(seg, TargetSlot):
                break
            before += (seg.count if isinstance(seg, PromptBlock) else
                       context_lengths[seg.name] if isinstance(seg, ContextSlot) else 1)
        return n + (1 if before == 0 else 0)  # causal start row, see layout()


@dataclass
class TemplateInstance:
    spec: TemplateSpec
    vocab: Vocab
    contexts: dict
    target: int | None = None

    def __post_init__(self):
        missing = set(self.spec.slot_names) - set(self.contexts)
        if missing:
            raise ValueError(f"unbound context slots: {sorted(missing)}")
        self.contexts = {k: [int(i) for i in v] for k, v in self.contexts.items()}


def bind(spec: TemplateSpec, vocab: Vocab, target: int | str | None = None, **contexts) -> TemplateInstance:
    """Convenience binder accepting words or ids for contexts and target."""
    ctx = {}
    for name, value in contexts.items():
        if isinstance(value, str):
            value = vocab.encode(value)
        elif isinstance(value, (int, np.integer)):
            value = [int(value)]
        ctx[name] = [vocab.id(v) if isinstance(v, str) else v for v in value]
    if isinstance(target, str):
        target = vocab.id(target)
    return TemplateInstance(spec, vocab, ctx, target)


# -- prompt encoder ----------------------------------------------------------


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor):
    """One LSTM step on rows of ``x`` (N, d); gate order input, forget, cell, output."""
    gates = ad.add(ad.add(ad.matmul(x, w_x), ad.matmul(h, w_h)), b)
    return _lstm_gates(gates, c)


def _lstm_gates(gates: Tensor, c: Tensor):
    H = gates.shape[-1] // 4
    i = ad.sigmoid(gates[..., 0:H])
    f = ad.sigmoid(gates[..., H:2 * H])
    g = ad.tanh(gates[..., 2 * H:3 * H])
    o = ad.sigmoid(gates[..., 3 * H:4 * H])
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_new = ad.mul(o, ad.tanh(c_new))
    return h_new, c_new


class PromptEncoder:
    """m free vectors passed through a bi-LSTM and a two-layer ReLU MLP.

    Output row i is ``MLP([fwd_i : bwd_i])`` where ``fwd_i`` is the forward
    LSTM state after reading raw vectors 0..i and ``bwd_i`` the backward LSTM
    state after reading m-1..i. With ``bypass`` the raw vectors are returned
    unchanged.
    """

    def __init__(self, m: int, d: int, hidden: int | None = None, seed: int = 0,
                 bypass: bool = False, init_std: float = 0.02):
        self.m, self.d = m, d
        self.hidden_size = H = hidden or d
        self.bypass = bypass
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.params: dict[str, Parameter] = {}

        def new(name, data):
            p = Parameter(np.asarray(data, dtype=np.float32), "prompt." + name)
            self.params[p.name] = p

        for i in range(m):
            new(f"raw.{i}", rng.normal(0.0, init_std, size=d))
        k = 1.0 / np.sqrt(H)
        for direction in ("fwd", "bwd"):
            new(f"lstm_{direction}.w_x", rng.uniform(-k, k, size=(d, 4 * H)))
            new(f"lstm_{direction}.w_h", rng.uniform(-k, k, size=(H, 4 * H)))
            new(f"lstm_{direction}.b", rng.uniform(-k, k, size=4 * H))
        k1 = 1.0 / np.sqrt(2 * H)
        new("mlp.w1", rng.uniform(-k1, k1, size=(2 * H, 2 * d)))
        new("mlp.b1", rng.uniform(-k1, k1, size=2 * d))
        k2 = 1.0 / np.sqrt(2 * d)
        new("mlp.w2", rng.uniform(-k2, k2, size=(2 * d, d)))
        new("mlp.b2", rng.uniform(-k2, k2, size=d))

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.trainable = flag

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise KeyError(f"state mismatch on parameters: {sorted(set(state) ^ set(self.params))}")
        for name, p in self.params.items():
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    def copy(self) -> "PromptEncoder":
        return copy.deepcopy(self)

    def config(self) -> dict:
        return {"m": self.m, "d": self.d, "hidden": self.hidden_size,
                "bypass": self.bypass, "seed": self.seed}

    def raw(self) -> Tensor:
        return ad.concat([ad.reshape(self.params[f"prompt.raw.{i}"], (1, self.d))
                          for i in range(self.m)], axis=0)

    def _direction(self, proj: Tensor, name: str, order) -> list:
        P = self.params
        H = self.hidden_size
        h = Tensor(np.zeros((1, H), dtype=np.float32))
        c = Tensor(np.zeros((1, H), dtype=np.float32))
        outs = [None] * self.m
        for t in order:
            gates = ad.add(ad.add(proj[t:t + 1], ad.matmul(h, P[f"prompt.lstm_{name}.w_h"])),
                           P[f"prompt.lstm_{name}.b"])
            h, c = _lstm_gates(gates, c)
            outs[t] = h
        return outs

    def encode(self, raw: Tensor | None = None) -> Tensor:
        """The m prompt embeddings, shape ``(m, d)``, recorded on the active tape.

        ``raw`` overrides the stored free vectors (used by gradient checks).
        """
        if self.m == 0:
            return Tensor(np.zeros((0, self.d), dtype=np.float32))
        raw = self.raw() if raw is None else raw
        if self.bypass:
            return raw
        P = self.params
        fwd = self._direction(ad.matmul(raw, P["prompt.lstm_fwd.w_x"]), "fwd", range(self.m))
        bwd = self._direction(ad.matmul(raw, P["prompt.lstm_bwd.w_x"]), "bwd",
                              range(self.m - 1, -1, -1))
        both = ad.concat([ad.concat(fwd, axis=0), ad.concat(bwd, axis=0)], axis=1)
        hid = ad.relu(ad.add(ad.matmul(both, P["prompt.mlp.w1"]), P["prompt.mlp.b1"]))
        return ad.add(ad.matmul(hid, P["prompt.mlp.w2"]), P["prompt.mlp.b2"])


@dataclass
class PromptCache:
    """Frozen encoder output; all that inference needs."""

    vectors: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vectors = np.array(self.vectors, dtype=np.float32)
        self.vectors.setflags(write=False)

    @property
    def m(self) -> int:
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    def encode(self) -> Tensor:
        return Tensor(self.vectors)


def freeze(encoder: PromptEncoder) -> PromptCache:
    with no_tape():
        h = encoder.encode()
    return PromptCache(h.data.copy(), meta=encoder.config())


# -- assembly ------------------------------------------------------------------


@dataclass
class AssembledBatch:
    embeds: Tensor          # (B, L, d)
    key_mask: np.ndarray    # (B, L) bool, False on padding
    target_positions: np.ndarray  # (B,) index the target occupies (or would)
    targets: np.ndarray     # (B,) gold ids, -100 when unbound
    lengths: np.ndarray     # (B,) unpadded lengths


def layout(instance: TemplateInstance, attention: str, discrete: bool) -> tuple[list, int]:
    """Row recipe for one instance: ``("p", j)`` for pseudo token j, ``("t", id)``
    for a vocabulary lookup. Returns the rows and the target position."""
    vocab = instance.vocab
    rows: list[tuple[str, int]] = []
    target_pos = -1
    j = 0
    for seg in instance.spec.segments:
        if isinstance(seg, PromptBlock):
            if discrete:
                if seg.tokens is None:
                    raise ValueError("discrete assembly needs concrete tokens in every prompt block")
                rows.extend(("t", _lookup(vocab, w)) for w in seg.tokens)
            else:
                rows.extend(("p", j + k) for k in range(seg.count))
            j += seg.count
        elif isinstance(seg, ContextSlot):
            rows.extend(("t", i) for i in instance.contexts[seg.name])
        elif isinstance(seg, Anchor):
            rows.append(("t", _lookup(vocab, seg.token)))
        else:
            target_pos = len(rows)
            if attention == "bidirectional":
                rows.append(("t", Vocab.mask_id))
    if attention == "causal" and target_pos == 0:
        # nothing precedes the target: a lone [MASK] row stands in as a start token
        rows.insert(0, ("t", Vocab.mask_id))
        target_pos = 1
    return rows, target_pos


def _lookup(vocab: Vocab, word: str) -> int:
    if word not in vocab:
        raise ValueError(f"template token {word!r} is not in the vocabulary")
    return vocab.id(word)


def assemble_batch(model: LanguageModel, instances: Sequence[TemplateInstance],
                   prompts=None, discrete: bool = False) -> AssembledBatch:
    """Assemble instances into one right-padded batch.

    ``prompts`` is a PromptEncoder, PromptCache or an ``(m, d)`` tensor of
    already-encoded vectors. With ``discrete=True`` every prompt block must
    carry concrete tokens and no prompt source is used.
    """
    if not instances:
        raise ValueError("nothing to assemble")
    attention = model.attention
    layouts = [layout(inst, attention, discrete) for inst in instances]
    m = 0 if discrete else instances[0].spec.n_prompt
    h = None
    if m:
        if prompts is None:
            raise ValueError(f"template has {m} pseudo tokens but no prompt source was given")
        h = prompts if isinstance(prompts, Tensor) else prompts.encode()
        if h.shape[0] != m:
            raise ValueError(f"prompt source provides {h.shape[0]} vectors, template needs {m}")
    elif prompts is not None and not discrete:
        pm = prompts.shape[0] if isinstance(prompts, Tensor) else prompts.m
        if pm != 0:
            raise ValueError(f"prompt source provides {pm} vectors, template needs 0")

    lengths = np.array([len(rows) for rows, _ in layouts])
    L = int(lengths.max())
    if L > model.config.max_len:
        raise ValueError(f"assembled length {L} exceeds model max_len {model.config.max_len}")
    codes = np.full((len(instances), L), Vocab.pad_id + m, dtype=np.int64)
    for b, (rows, _) in enumerate(layouts):
        for k, (kind, val) in enumerate(rows):
            codes[b, k] = val if kind == "p" else val + m
    key_mask = np.arange(L)[None, :] < lengths[:, None]
    if m:
        table = ad.concat([h, model.params["lm.tok_emb"]], axis=0)
        embeds = ad.embedding(table, codes)
    else:
        embeds = model.embed(codes)
    return AssembledBatch(
        embeds=embeds,
        key_mask=key_mask,
        target_positions=np.array([pos for _, pos in layouts]),
        targets=np.array([-100 if inst.target is None else inst.target for inst in instances]),
        lengths=lengths,
    )


def assemble_discrete(model: LanguageModel, instance: TemplateInstance) -> tuple[Tensor, int]:
    """Manual-prompt assembly: every row is an embedding lookup."""
    batch = assemble_batch(model, [instance], discrete=True)
    return ad.reshape(batch.embeds, batch.embeds.shape[1:]), int(batch.target_positions[0])


def assemble_continuous(model: LanguageModel, instance: TemplateInstance, prompts) -> tuple[Tensor, int]:
    """Pseudo-token rows from ``prompts``; everything else from the embedding table."""
    batch = assemble_batch(model, [instance], prompts=prompts)
    return ad.reshape(batch.embeds, batch.embeds.shape[1:]), int(batch.target_positions[0])
