"""Tiny pre-LN transformer language models.

One class covers both attention modes: ``causal`` (GPT-style, trained on
next-token prediction) and ``bidirectional`` (BERT-style, trained on masked
token prediction). Either accepts token ids or a ready-made embedding
sequence, and the id path is literally ``embed`` followed by the embedding
path, so splicing continuous vectors into the input is exact.

Parameter count, with V = vocab size, d = model dim, f = feed-forward dim,
n = layers and T = max sequence length::

    V*d + T*d                       token + position tables
    + n * (3*d*d + 3*d              fused q/k/v projection
           + d*d + d                attention output
           + d*f + f + f*d + d      feed-forward
           + 4*d)                   two layernorms
    + 2*d                           final layernorm
    + V                             output bias
    + V*d                           only when the head is untied
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Tensor
from .optim import AdamState, OptimizerConfig, adam_step

PAD, MASK, UNK = "[PAD]", "[MASK]", "[UNK]"
RESERVED = (PAD, MASK, UNK)
ATTENTION_MODES = ("causal", "bidirectional")


class Vocab:
    """Bijective token <-> id map with reserved ids 0, 1, 2 for [PAD], [MASK], [UNK]."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens: list[str] = list(RESERVED)
        self._ids: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            if tok in self._ids:
                if tok in RESERVED:
                    continue
                raise ValueError(f"duplicate token {tok!r}")
            if not tok or any(c.isspace() for c in tok):
                raise ValueError(f"tokens must be non-empty and whitespace-free: {tok!r}")
            self._ids[tok] = len(self.tokens)
            self.tokens.append(tok)

    pad_id = 0
    mask_id = 1
    unk_id = 2

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, tok: str) -> bool:
        return tok in self._ids

    def id(self, tok: str) -> int:
        try:
            return self._ids[tok]
        except KeyError:
            raise KeyError(f"token {tok!r} is not in the vocabulary") from None

    def encode(self, words: Sequence[str] | str) -> list[int]:
        if isinstance(words, str):
            words = words.split()
        return [self.id(w) for w in words]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def to_list(self) -> list[str]:
        return self.tokens[len(RESERVED):]


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_len: int = 64
    attention: str = "causal"
    tie_head: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.attention not in ATTENTION_MODES:
            raise ValueError(f"attention must be one of {ATTENTION_MODES}, got {self.attention!r}")
        if self.vocab_size < len(RESERVED) + 1:
            raise ValueError("vocab_size too small")

    def n_params(self) -> int:
        V, d, f, n, T = self.vocab_size, self.d_model, self.d_ff, self.n_layers, self.max_len
        per_layer = 3 * d * d + 3 * d + d * d + d + d * f + f + f * d + d + 4 * d
        total = V * d + T * d + n * per_layer + 2 * d + V
        return total + (0 if self.tie_head else V * d)

    def to_dict(self) -> dict:
        return asdict(self)


class LanguageModel:
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        d, f, V = config.d_model, config.d_ff, config.vocab_size
        self.params: dict[str, Parameter] = {}

        def new(name, shape, kind="normal"):
            if kind == "normal":
                data = rng.normal(0.0, 0.02, size=shape)
            elif kind == "ones":
                data = np.ones(shape)
            else:
                data = np.zeros(shape)
            p = Parameter(data.astype(np.float32), "lm." + name)
            self.params[p.name] = p
            return p

        new("tok_emb", (V, d))
        new("pos_emb", (config.max_len, d))
        for i in range(config.n_layers):
            b = f"block{i}."
            new(b + "ln1.gamma", (d,), "ones")
            new(b + "ln1.beta", (d,), "zeros")
            new(b + "attn.w_qkv", (d, 3 * d))
            new(b + "attn.b_qkv", (3 * d,), "zeros")
            new(b + "attn.w_out", (d, d))
            new(b + "attn.b_out", (d,), "zeros")
            new(b + "ln2.gamma", (d,), "ones")
            new(b + "ln2.beta", (d,), "zeros")
            new(b + "mlp.w_in", (d, f))
            new(b + "mlp.b_in", (f,), "zeros")
            new(b + "mlp.w_out", (f, d))
            new(b + "mlp.b_out", (d,), "zeros")
        new("ln_f.gamma", (d,), "ones")
        new("ln_f.beta", (d,), "zeros")
        new("head.bias", (V,), "zeros")
        if not config.tie_head:
            new("head.weight", (d, V))

    # -- bookkeeping ------------------------------------------------------

    @property
    def attention(self) -> str:
        return self.config.attention

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.trainable = flag

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"state mismatch on parameters: {sorted(missing)}")
        for name, p in self.params.items():
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    def copy(self) -> "LanguageModel":
        return copy.deepcopy(self)

    def fingerprint(self) -> str:
        """SHA-256 over every parameter's bytes in sorted-name order."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data, dtype="<f4").tobytes())
        return h.hexdigest()

    # -- forward ----------------------------------------------------------

    def embed(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise IndexError(f"token id out of range for vocab of size {self.config.vocab_size}")
        if ids.size == 0:
            return Tensor(np.zeros(ids.shape + (self.config.d_model,), dtype=np.float32))
        return ad.embedding(self.params["lm.tok_emb"], ids)

    def attention_mask(self, length: int, key_mask: np.ndarray | None) -> np.ndarray | None:
        mask = None
        if self.attention == "causal":
            mask = np.tril(np.ones((length, length), dtype=bool))[None, None]
        if key_mask is not None:
            km = np.asarray(key_mask, dtype=bool)[:, None, None, :]
            mask = km if mask is None else (mask & km)
        return mask

    def hidden(self, inputs, key_mask: np.ndarray | None = None,
               offsets: np.ndarray | None = None) -> Tensor:
        """Final-layernormed hidden states, shape ``(B, L, d)``.

        ``offsets`` (one per row) start the position table further in; only
        pretraining uses it.
        """
        x = inputs if isinstance(inputs, Tensor) else self.embed(np.atleast_2d(inputs))
        if x.ndim == 2:
            x = ad.reshape(x, (1,) + x.shape)
        B, L, d = x.shape
        top = L if offsets is None else L + int(np.max(offsets))
        if top > self.config.max_len:
            raise ValueError(f"sequence length {top} exceeds max_len {self.config.max_len}")
        if L == 0:
            raise ValueError("empty input sequence")
        P = self.params
        H = self.config.n_heads
        dh = d // H
        mask = self.attention_mask(L, key_mask)
        if offsets is None:
            h = ad.add(x, ad.index(P["lm.pos_emb"], slice(0, L)))
        else:
            idx = np.asarray(offsets, dtype=np.int64)[:, None] + np.arange(L)
            h = ad.add(x, ad.embedding(P["lm.pos_emb"], idx))
        for i in range(self.config.n_layers):
            b = f"lm.block{i}."
            a = ad.layernorm(h, P[b + "ln1.gamma"], P[b + "ln1.beta"])
            qkv = ad.add(ad.matmul(a, P[b + "attn.w_qkv"]), P[b + "attn.b_qkv"])
            qkv = ad.transpose(ad.reshape(qkv, (B, L, 3, H, dh)), (2, 0, 3, 1, 4))
            q, k, v = qkv[0], qkv[1], qkv[2]
            scores = ad.mul(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(dh))
            att = ad.matmul(ad.softmax(scores, mask), v)
            att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (B, L, d))
            h = ad.add(h, ad.add(ad.matmul(att, P[b + "attn.w_out"]), P[b + "attn.b_out"]))
            m = ad.layernorm(h, P[b + "ln2.gamma"], P[b + "ln2.beta"])
            m = ad.relu(ad.add(ad.matmul(m, P[b + "mlp.w_in"]), P[b + "mlp.b_in"]))
            h = ad.add(h, ad.add(ad.matmul(m, P[b + "mlp.w_out"]), P[b + "mlp.b_out"]))
        return ad.layernorm(h, P["lm.ln_f.gamma"], P["lm.ln_f.beta"])

    def project(self, h: Tensor) -> Tensor:
        """Map hidden states (any leading shape) to vocabulary logits."""
        w = self.params.get("lm.head.weight")
        if w is None:
            w = ad.transpose(self.params["lm.tok_emb"])
        if h.ndim == 1:
            h = ad.reshape(h, (1, -1))
            return ad.reshape(ad.add(ad.matmul(h, w), self.params["lm.head.bias"]), (-1,))
        return ad.add(ad.matmul(h, w), self.params["lm.head.bias"])

    def forward(self, inputs, key_mask: np.ndarray | None = None) -> Tensor:
        """Logits at every position. Unbatched input gives ``(L, V)``."""
        single = (isinstance(inputs, Tensor) and inputs.ndim == 2) or (
            not isinstance(inputs, Tensor) and np.ndim(inputs) == 1)
        logits = self.project(self.hidden(inputs, key_mask))
        if single:
            logits = ad.reshape(logits, logits.shape[1:])
        return logits

    __call__ = forward

    def logits_at(self, inputs, positions: np.ndarray, key_mask: np.ndarray | None = None) -> Tensor:
        """Logits at one position per row: ``(B, V)`` for ``positions`` of shape ``(B,)``."""
        h = self.hidden(inputs, key_mask)
        B, L, d = h.shape
        positions = np.asarray(positions, dtype=np.int64)
        rows = ad.embedding(ad.reshape(h, (B * L, d)), np.arange(B) * L + positions)
        return self.project(rows)


def read_position(target_position: int, attention: str) -> int:
    """Row whose output predicts the target: the row itself for bidirectional
    models (it holds [MASK]), the row just before it for causal ones."""
    if attention == "causal":
        if target_position < 1:
            raise ValueError("causal models need at least one position before the target")
        return target_position - 1
    return target_position


def target_logits(model: LanguageModel, assembled, target_position, key_mask=None) -> Tensor:
    """Vocabulary logits used to predict the target slot.

    ``assembled`` is an ``(L, d)`` tensor with an int ``target_position``
    (returns ``(V,)``), or a ``(B, L, d)`` batch with an array of positions
    (returns ``(B, V)``).
    """
    if np.ndim(target_position) == 0:
        pos = read_position(int(target_position), model.attention)
        out = model.logits_at(assembled, np.array([pos]), key_mask)
        return ad.reshape(out, (-1,))
    pos = np.array([read_position(int(p), model.attention) for p in target_position])
    return model.logits_at(assembled, pos, key_mask)


# -- pretraining -----------------------------------------------------------


@dataclass
class PretrainResult:
    losses: list = field(default_factory=list)

    def window_means(self, window: int) -> list[float]:
        n = len(self.losses) // window
        return [float(np.mean(self.losses[i * window:(i + 1) * window])) for i in range(n)]


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    L = max(len(s) for s in seqs)
    ids = np.full((len(seqs), L), pad_id, dtype=np.int64)
    keep = np.zeros((len(seqs), L), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        keep[i, :len(s)] = True
    return ids, keep


def lm_batch(seqs, attention: str, rng: np.random.Generator, mask_rate: float = 0.15):
    """Inputs, targets and key mask for one pretraining batch.

    Causal: targets are the next token. Bidirectional: a ``mask_rate``
    fraction of real positions (at least one per row) is replaced by [MASK]
    and only those positions carry targets.
    """
    ids, keep = pad_batch(seqs)
    targets = np.full(ids.shape, -100, dtype=np.int64)
    if attention == "causal":
        targets[:, :-1] = np.where(keep[:, 1:], ids[:, 1:], -100)
        return ids, targets, keep
    chosen = (rng.random(ids.shape) < mask_rate) & keep
    for i in np.flatnonzero(~chosen.any(axis=1)):
        chosen[i, rng.integers(keep[i].sum())] = True
    targets[chosen] = ids[chosen]
    inputs = np.where(chosen, Vocab.mask_id, ids)
    return inputs, targets, keep


def lm_loss(model: LanguageModel, inputs, targets, key_mask, offsets=None) -> Tensor:
    """Cross-entropy over the positions that carry a target."""
    h = model.hidden(inputs, key_mask, offsets)
    B, L, d = h.shape
    flat = targets.reshape(-1)
    rows = np.flatnonzero(flat != -100)
    picked = ad.embedding(ad.reshape(h, (B * L, d)), rows)
    return ad.cross_entropy(model.project(picked), flat[rows])


def pretrain(model: LanguageModel, corpus: Sequence[Sequence[int]], steps: int,
             config: OptimizerConfig | None = None, seed: int = 0,
             mask_rate: float = 0.15, log=None, shift: int = 0) -> PretrainResult:
    """Train ``model`` in place on ``corpus``; returns the per-step loss curve.

    With ``shift > 0`` each batch starts its positions at a random offset in
    ``[0, shift]`` (capped so the batch fits), so facts are seen at positions
    other than the sentence start.
    """
    if not corpus:
        raise ValueError("pretraining corpus is empty")
    if shift < 0:
        raise ValueError("shift must be >= 0")
    config = config or OptimizerConfig(kind="adamw", lr=1e-3, max_steps=steps)
    rng = np.random.default_rng(seed)
    state = AdamState()
    result = PretrainResult()
    params = model.parameters()
    model.set_trainable(True)
    for step in range(1, steps + 1):
        rows = [corpus[i] for i in rng.integers(len(corpus), size=config.batch_size)]
        inputs, targets, keep = lm_batch(rows, model.attention, rng, mask_rate)
        offsets = None
        if shift:
            room = min(shift, model.config.max_len - inputs.shape[1])
            offsets = rng.integers(0, room + 1, size=len(rows))
        model.zero_grad()
        with Tape() as tape:
            loss = lm_loss(model, inputs, targets, keep, offsets)
            tape.backward(loss)
        value = float(loss.data)
        if not np.isfinite(value):
            raise FloatingPointError(f"pretraining diverged at step {step}")
        adam_step(params, state, config)
        result.losses.append(value)
        if log is not None and (step % 100 == 0 or step == steps):
            log(step, value)
    model.zero_grad()
    return result
