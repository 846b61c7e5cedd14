"""Tuning regimes, the training loop with early stopping, and grid search.

A regime decides which parameters move:

==============  ==============================  ====================
mode            template                        trained
==============  ==============================  ====================
MP_ZERO_SHOT    manual prompt                   nothing
FT              context + target only           language model
MP_FT           manual prompt                   language model
PT              pseudo tokens (+ anchors)       prompt encoder
PT_FT           pseudo tokens (+ anchors)       both
==============  ==============================  ====================
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, no_tape
from .model import LanguageModel, target_logits
from .optim import AdamState, OptimizerConfig, adam_step
from .prompt import PromptEncoder, TemplateInstance, assemble_batch

log = logging.getLogger(__name__)


class TuningMode(str, enum.Enum):
    MP_ZERO_SHOT = "MP_ZERO_SHOT"
    FT = "FT"
    MP_FT = "MP_FT"
    PT = "PT"
    PT_FT = "PT_FT"

    @classmethod
    def parse(cls, text: str) -> "TuningMode":
        key = text.strip().upper().replace("+", "_")
        aliases = {"MP": "MP_ZERO_SHOT", "ZERO_SHOT": "MP_ZERO_SHOT"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(f"unknown tuning mode {text!r}; "
                             f"choose from {[m.value for m in cls]}") from None

    @property
    def uses_encoder(self) -> bool:
        return self in (TuningMode.PT, TuningMode.PT_FT)

    @property
    def trains_lm(self) -> bool:
        return self in (TuningMode.FT, TuningMode.MP_FT, TuningMode.PT_FT)

    @property
    def trains_anything(self) -> bool:
        return self is not TuningMode.MP_ZERO_SHOT


class TrainingDiverged(FloatingPointError):
    pass


def trainable_mask(model: LanguageModel, encoder: PromptEncoder | None, mode) -> set[str]:
    """Names of the parameters ``mode`` optimizes."""
    mode = TuningMode(mode)
    if mode.uses_encoder and encoder is None:
        raise ValueError(f"{mode.value} needs a prompt encoder")
    names: set[str] = set()
    if mode.trains_lm:
        names |= set(model.params)
    if mode.uses_encoder:
        names |= set(encoder.params)
    return names


def apply_mask(model: LanguageModel, encoder: PromptEncoder | None, names: set[str]) -> list:
    """Set trainable flags from ``names``; returns the trainable parameters."""
    out = []
    for p in list(model.parameters()) + (encoder.parameters() if encoder else []):
        p.trainable = p.name in names
        p.grad = None
        if p.trainable:
            out.append(p)
    return out


# -- task plumbing ---------------------------------------------------------------


@dataclass
class PromptTask:
    """Bound training and development instances for one template.

    ``candidates`` restricts both the loss and the argmax to a subset of
    vocabulary ids (a verbalizer); ``None`` means the whole vocabulary.
    """

    train: list
    dev: list
    candidates: np.ndarray | None = None
    name: str = "task"

    @property
    def spec(self):
        return self.train[0].spec if self.train else self.dev[0].spec


def prediction_logits(model: LanguageModel, instances: Sequence[TemplateInstance], prompts=None,
                      candidates: np.ndarray | None = None):
    """Target logits ``(B, V)`` (or ``(B, K)`` over candidates) plus gold ids.

    Gold ids are mapped into candidate positions when candidates are given.
    """
    discrete = instances[0].spec.n_prompt == 0 or prompts is None
    batch = assemble_batch(model, instances, prompts=None if discrete else prompts, discrete=discrete)
    logits = target_logits(model, batch.embeds, batch.target_positions, batch.key_mask)
    gold = batch.targets
    if candidates is not None:
        onehot = np.zeros((model.config.vocab_size, len(candidates)), dtype=np.float32)
        onehot[candidates, np.arange(len(candidates))] = 1.0
        logits = ad.matmul(logits, onehot)
        lookup = {int(c): k for k, c in enumerate(candidates)}
        gold = np.array([lookup.get(int(g), -100) for g in gold])
    return logits, gold


def predict(model: LanguageModel, instances: Sequence[TemplateInstance], prompts=None,
            candidates: np.ndarray | None = None, batch_size: int = 256) -> np.ndarray:
    """Top-1 vocabulary ids for each instance."""
    preds = []
    source = prompts
    with no_tape():
        if isinstance(prompts, PromptEncoder):
            source = prompts.encode()  # encode once for the whole pass
        for i in range(0, len(instances), batch_size):
            chunk = instances[i:i + batch_size]
            logits, _ = prediction_logits(model, chunk, source, candidates)
            top = np.argmax(logits.data, axis=-1)
            preds.append(top if candidates is None else np.asarray(candidates)[top])
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy(model, instances, prompts=None, candidates=None) -> float:
    if not instances:
        raise ValueError("cannot evaluate on an empty set")
    preds = predict(model, instances, prompts, candidates)
    gold = np.array([inst.target for inst in instances])
    return float(np.mean(preds == gold))


# -- training state -----------------------------------------------------------


@dataclass
class TrainState:
    step: int = 0
    adam: AdamState = field(default_factory=AdamState)
    best_metric: float = -np.inf
    best_step: int = 0
    patience_used: int = 0
    seed: int = 0
    rng_state: dict | None = None
    best_params: dict = field(default_factory=dict)
    history: list = field(default_factory=list)


@dataclass
class TrainResult:
    best_metric: float
    best_step: int
    steps_run: int
    history: list
    losses: list
    state: TrainState
    stopped_early: bool


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng((seed, epoch)).permutation(n)


def train_loop(task: PromptTask, model: LanguageModel, encoder: PromptEncoder | None, mode,
               config: OptimizerConfig, patience: int | None = 5, eval_every: int = 50,
               seed: int = 0, state: TrainState | None = None,
               on_event: Callable[[dict], None] | None = None,
               encoder_lr: float | None = None, max_steps: int | None = None) -> TrainResult:
    """Optimize the parameters selected by ``mode`` on ``task.train``.

    Dev accuracy is measured every ``eval_every`` steps and at the end. The
    best-scoring parameters are restored before returning. ``patience=None``
    disables early stopping; ``patience=0`` stops at the first evaluation
    that fails to improve. ``max_steps`` stops the run early without touching
    the schedule length (for resuming): an interrupted run skips the
    off-cadence evaluation and keeps its live weights, so saving the
    parameters plus ``result.state`` and calling again continues bitwise.
    """
    mode = TuningMode(mode)
    if not mode.trains_anything:
        raise ValueError("MP_ZERO_SHOT trains nothing; evaluate it directly")
    if not task.train:
        raise ValueError("empty training set")
    if patience is not None and not task.dev:
        raise ValueError("early stopping needs a non-empty dev set")
    names = trainable_mask(model, encoder if mode.uses_encoder else None, mode)
    params = apply_mask(model, encoder if mode.uses_encoder else None, names)
    if encoder is not None and not mode.uses_encoder:
        encoder.set_trainable(False)
    scales = None
    if encoder_lr is not None and mode is TuningMode.PT_FT:
        scales = {name: encoder_lr / config.lr for name in encoder.params}
    prompts = encoder if mode.uses_encoder else None

    st = state if state is not None else TrainState(seed=seed)
    n = len(task.train)
    bs = min(config.batch_size, n)
    per_epoch = -(-n // bs)
    losses: list[float] = []
    stop = False
    stop_at = config.max_steps if max_steps is None else min(max_steps, config.max_steps)

    def evaluate():
        metric = accuracy(model, task.dev, prompts, task.candidates) if task.dev else float("nan")
        st.history.append({"step": st.step, "split": "dev", "metric": "accuracy", "value": metric})
        if on_event:
            on_event(st.history[-1])
        improved = task.dev and metric > st.best_metric
        if improved or not st.best_params:
            if improved:
                st.best_metric, st.best_step = metric, st.step
                st.patience_used = 0
            st.best_params = {p.name: p.data.copy() for p in params}
            return False
        st.patience_used += 1
        return patience is not None and st.patience_used > patience

    if st.step == 0 and not st.best_params:
        evaluate()
    while st.step < stop_at and not stop:
        epoch, k = divmod(st.step, per_epoch)
        order = _epoch_order(st.seed, epoch, n)
        idx = order[k * bs:(k + 1) * bs]
        batch = [task.train[i] for i in idx]
        for p in params:
            p.grad = None
        with Tape() as tape:
            logits, gold = prediction_logits(model, batch, prompts, task.candidates)
            loss = ad.cross_entropy(logits, gold)
            tape.backward(loss)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDiverged(f"loss became {value} at step {st.step + 1} ({mode.value})")
        adam_step(params, st.adam, config, scales=scales)
        st.step += 1
        losses.append(value)
        due = st.step % eval_every == 0 or st.step == config.max_steps
        if on_event and due:
            on_event({"step": st.step, "split": "train", "metric": "loss", "value": value})
        if due:
            stop = evaluate()

    if st.step < config.max_steps and not stop:
        for p in params:
            p.grad = None
        return TrainResult(st.best_metric, st.best_step, st.step, list(st.history), losses, st, False)
    # restore best
    lookup = {p.name: p for p in params}
    for name, arr in st.best_params.items():
        lookup[name].data = arr.copy()
    for p in params:
        p.grad = None
    return TrainResult(st.best_metric, st.best_step, st.step, list(st.history), losses, st, stop)


# -- grid search -------------------------------------------------------------------


@dataclass
class GridResult:
    best: tuple
    cells: dict
    results: dict


def grid_search(task: PromptTask, model_factory: Callable[[], tuple], mode,
                lrs: Sequence[float], batch_sizes: Sequence[int], base: OptimizerConfig,
                seed: int = 0, **train_kwargs) -> GridResult:
    """Train one fresh (model, encoder) pair per (lr, batch size) cell.

    The best cell maximises the dev metric; ties go to the lower learning
    rate, then the smaller batch.
    """
    if not lrs or not batch_sizes:
        raise ValueError("grid must be non-empty")
    cells, results = {}, {}
    for lr in lrs:
        for bs in batch_sizes:
            model, encoder = model_factory()
            cfg = replace(base, lr=lr, batch_size=bs)
            res = train_loop(task, model, encoder, mode, cfg, seed=seed, **train_kwargs)
            cells[(lr, bs)] = res.best_metric
            results[(lr, bs)] = (res, model, encoder)
    best = min(cells, key=lambda c: (-cells[c], c[0], c[1]))
    return GridResult(best, cells, results)
