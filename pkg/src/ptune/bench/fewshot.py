"""Few-shot polarity classification with a 32-example train set and dev32.

Sentences are bags of lexicon words; the label is whichever polarity has
more words. The pretraining corpus teaches word-level polarity only
("joy is good ."), so sentence-level classification has to be learned from
the 32 examples. The verbalizer tokens never occur in the corpus, so the
untuned model has no reason to prefer either label.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ..model import LanguageModel, Vocab
from ..optim import OptimizerConfig
from ..prompt import PromptEncoder, TemplateSpec, bind
from ..tuning import PromptTask, TuningMode, accuracy, grid_search
from .audit import AuditedSplit, phase

POSITIVE = ("joy love bright calm kind brave sweet fresh gentle lucky "
            "warm clever proud happy fair smart tidy neat rich cheer").split()
NEGATIVE = ("pain hate dark cold cruel weak sour stale harsh grim "
            "rude lazy sad ugly dull angry dirty poor bitter gloomy").split()
NEUTRAL = ("table river paper window stone cloud street chair bottle garden "
           "wall road train box lamp door field glass coin hill").split()
LABELS = ("positive", "negative")
VERBALIZER = {"positive": "yes", "negative": "no"}
MANUAL_TEMPLATE = "[X:sent] is it good ? [MASK] ."
PT_TEMPLATE = "[X:sent] [P*3] [MASK] ."


def lexicon_words() -> list[str]:
    glue = ["it", "was", "good", "bad", "plain", "is", ".", "?"]
    return list(POSITIVE) + list(NEGATIVE) + list(NEUTRAL) + glue + list(VERBALIZER.values())


def lexicon_sentences() -> list[list[str]]:
    """Word-level polarity statements for the pretraining corpus."""
    out = [[w, "is", "good", "."] for w in POSITIVE]
    out += [[w, "is", "bad", "."] for w in NEGATIVE]
    out += [[w, "is", "plain", "."] for w in NEUTRAL]
    return out


@dataclass(frozen=True)
class Example:
    words: tuple
    label: str


def generate_examples(n: int, seed: int, min_len: int = 4, max_len: int = 7) -> list[Example]:
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        k = int(rng.integers(min_len, max_len + 1))
        kinds = rng.choice(3, size=k, p=[0.3, 0.3, 0.4])
        pos, neg = int((kinds == 0).sum()), int((kinds == 1).sum())
        if pos == neg:
            continue
        words = [str(rng.choice((POSITIVE, NEGATIVE, NEUTRAL)[c])) for c in kinds]
        out.append(Example(tuple(words), "positive" if pos > neg else "negative"))
    return out


@dataclass
class FewShotTask:
    train32: list
    dev32: list
    full_dev: AuditedSplit
    verbalizer: dict = field(default_factory=lambda: dict(VERBALIZER))
    seed: int = 0

    def __post_init__(self):
        if len(self.dev32) > len(self.train32):
            raise ValueError(f"dev32 ({len(self.dev32)}) may be no larger than train ({len(self.train32)})")
        if set(map(id, self.train32)) & set(map(id, self.dev32)):
            raise ValueError("train32 and dev32 overlap")

    def candidates(self, vocab: Vocab) -> np.ndarray:
        toks = [self.verbalizer[label] for label in LABELS]
        if len(set(toks)) != len(toks):
            raise ValueError(f"verbalizer tokens collide: {self.verbalizer}")
        return np.array([vocab.id(t) for t in toks])

    def instances(self, spec: TemplateSpec, vocab: Vocab, examples: Sequence[Example]) -> list:
        return [bind(spec, vocab, target=self.verbalizer[ex.label], sent=list(ex.words))
                for ex in examples]


def build_fewshot(seed: int, pool: Sequence[Example] | None = None, n_train: int = 32,
                  n_dev32: int = 32, n_full_dev: int = 400) -> FewShotTask:
    """Label-balanced train32 plus a disjoint dev32 drawn from the unused pool."""
    if n_dev32 > n_train:
        raise ValueError(f"dev32 size {n_dev32} exceeds the train size {n_train}")
    if pool is None:
        pool = generate_examples(4 * n_train, seed=10_000 + seed)
    if len(pool) < 2 * n_train:
        raise ValueError(f"pool of {len(pool)} examples is too small (need {2 * n_train})")
    rng = np.random.default_rng(seed)
    by_label = {lab: [i for i, ex in enumerate(pool) if ex.label == lab] for lab in LABELS}
    per = n_train // len(LABELS)
    train_idx: list[int] = []
    for lab in LABELS:
        idx = by_label[lab]
        if len(idx) < per:
            raise ValueError(f"not enough {lab} examples for a balanced train set")
        train_idx += [idx[k] for k in rng.permutation(len(idx))[:per]]
    rest = [i for i in range(len(pool)) if i not in set(train_idx)]
    while len(train_idx) < n_train:  # odd remainders
        train_idx.append(rest.pop(int(rng.integers(len(rest)))))
    rest = [rest[k] for k in rng.permutation(len(rest))]
    train32 = [pool[i] for i in sorted(train_idx)]
    dev32 = [pool[i] for i in rest[:n_dev32]]
    full = AuditedSplit(generate_examples(n_full_dev, seed=20_000 + seed), name="full_dev")
    return FewShotTask(train32, dev32, full, seed=seed)


@dataclass(frozen=True)
class FewShotConfig:
    lrs: tuple = (1e-3, 3e-3)
    batch_sizes: tuple = (16, 32)
    max_steps: int = 200
    eval_every: int = 40
    patience: int | None = None
    pt_template: str = PT_TEMPLATE
    manual_template: str = MANUAL_TEMPLATE


@dataclass
class FewShotResult:
    mode: str
    full_dev_accuracy: float
    dev32_accuracy: float | None
    selected: tuple | None
    cells: dict


def fewshot_eval(task: FewShotTask, model: LanguageModel, vocab: Vocab, mode,
                 config: FewShotConfig = FewShotConfig(), seed: int = 0,
                 optimizer: OptimizerConfig | None = None) -> FewShotResult:
    """Grid-search on dev32, then report the selected run on the full dev set.

    The full dev split is only read after selection has finished.
    """
    mode = TuningMode(mode)
    cands = task.candidates(vocab)
    if mode is TuningMode.PT_FT or mode is TuningMode.PT:
        spec = TemplateSpec.parse(config.pt_template)
    else:
        spec = TemplateSpec.parse(config.manual_template)

    if mode is TuningMode.MP_ZERO_SHOT:
        with phase("report"):
            acc = accuracy(model, task.instances(spec, vocab, task.full_dev), None, cands)
        return FewShotResult(mode.value, acc, None, None, {})

    ptask = PromptTask(task.instances(spec, vocab, task.train32),
                       task.instances(spec, vocab, task.dev32), candidates=cands, name="fewshot")

    def factory():
        lm = model.copy()
        enc = PromptEncoder(spec.n_prompt, model.config.d_model, seed=seed) if mode.uses_encoder else None
        return lm, enc

    base = optimizer or OptimizerConfig(kind="adamw", lr=config.lrs[0], schedule="linear",
                                        max_steps=config.max_steps)
    base = replace(base, max_steps=config.max_steps)
    with phase("selection"):
        grid = grid_search(ptask, factory, mode, config.lrs, config.batch_sizes, base, seed=seed,
                           patience=config.patience, eval_every=config.eval_every)
    res, lm, enc = grid.results[grid.best]
    with phase("report"):
        acc = accuracy(lm, task.instances(spec, vocab, task.full_dev), enc, cands)
    return FewShotResult(mode.value, acc, grid.cells[grid.best], grid.best, dict(grid.cells))
