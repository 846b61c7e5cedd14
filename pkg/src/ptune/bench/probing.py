"""Cloze probing with Precision@1, the mode matrix and the sensitivity sweep."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from ..model import LanguageModel
from ..optim import OptimizerConfig
from ..prompt import PromptEncoder, TemplateSpec, bind
from ..tuning import PromptTask, TrainResult, TuningMode, predict, train_loop
from .audit import phase
from .kb import KnowledgeBase

FT_TEMPLATE = "[X:sub] [MASK]"

# Reference numbers for context only; nothing here is asserted.
REFERENCE = {
    "lama34k_bert_base": {"MP": 31.1, "PT": 48.3},
    "p17_manual_spread": {"min": 19.78, "max": 51.08},
}


class FrozenLMViolation(AssertionError):
    """A PT run changed language-model parameters."""


@dataclass
class ClozeResult:
    relation_p1: dict               # relation -> P@1
    aggregate: float
    predictions: list               # (subject, relation, gold, predicted) per test triple
    template: str = ""

    def recount(self) -> float:
        if not self.predictions:
            return 0.0
        return sum(g == p for _, _, g, p in self.predictions) / len(self.predictions)


def _spec(template) -> TemplateSpec:
    return template if isinstance(template, TemplateSpec) else TemplateSpec.parse(str(template))


def instances_for(kb: KnowledgeBase, spec: TemplateSpec, split: str, relation: str) -> list:
    vocab = kb.vocab
    out = []
    for t in kb.split(split, relation):
        if t.object not in vocab:
            raise ValueError(f"object {t.object!r} is not a single vocabulary token")
        out.append(bind(spec, vocab, target=t.object, sub=t.subject))
    return out


def probe(model: LanguageModel, kb: KnowledgeBase, template, split: str = "test",
          prompts=None, relations: Sequence[str] | None = None) -> ClozeResult:
    """Top-1 accuracy of ``template`` on ``split`` triples.

    ``template`` is one template for every relation, or a mapping from
    relation name to template. ``prompts`` is a mapping (or a single source)
    of encoders/caches for templates with pseudo tokens.
    """
    rels = list(relations) if relations is not None else [r.name for r in kb.relations]
    per, preds = {}, []
    vocab = kb.vocab
    for rel in rels:
        spec = _spec(template[rel] if isinstance(template, Mapping) else template)
        src = prompts.get(rel) if isinstance(prompts, Mapping) else prompts
        with phase("report"):
            triples = kb.split(split, rel)
            insts = instances_for(kb, spec, split, rel)
        top = predict(model, insts, src if spec.n_prompt else None)
        hits = 0
        for t, p in zip(triples, top):
            word = vocab.decode([int(p)])[0]
            preds.append((t.subject, rel, t.object, word))
            hits += word == t.object
        per[rel] = hits / len(triples) if triples else 0.0
    agg = sum(g == p for _, _, g, p in preds) / len(preds) if preds else 0.0
    label = str(template) if not isinstance(template, Mapping) else "per-relation"
    return ClozeResult(per, agg, preds, label)


# -- tuning per relation ----------------------------------------------------------


@dataclass(frozen=True)
class ProbeConfig:
    """Per-relation tuning budget for the trained modes."""
    pt: OptimizerConfig = OptimizerConfig(kind="adam", lr=3e-3, batch_size=16, max_steps=400)
    ft: OptimizerConfig = OptimizerConfig(kind="adamw", lr=1e-3, batch_size=16, max_steps=200,
                                          weight_decay=0.01)
    eval_every: int = 50
    patience: int | None = None
    pt_blocks: tuple | None = None   # None: 3,3,3 bidirectional / 3,3 causal


def template_for(mode, kb: KnowledgeBase, relation: str, attention: str,
                 config: ProbeConfig = ProbeConfig()) -> TemplateSpec:
    mode = TuningMode(mode)
    if mode.uses_encoder:
        return TemplateSpec.lama(attention, config.pt_blocks)
    if mode is TuningMode.FT:
        return TemplateSpec.parse(FT_TEMPLATE)
    return TemplateSpec.parse(kb.relation(relation).manual[0])


@dataclass
class RelationRun:
    relation: str
    mode: str
    model: LanguageModel
    encoder: PromptEncoder | None
    result: TrainResult | None
    spec: TemplateSpec


def tune_relation(model: LanguageModel, kb: KnowledgeBase, relation: str, mode,
                  config: ProbeConfig = ProbeConfig(), seed: int = 0,
                  on_event: Callable[[dict], None] | None = None) -> RelationRun:
    """Train ``mode`` for one relation on its prompt-train split.

    Modes that train the LM work on a private copy; PT shares ``model`` and
    verifies its fingerprint afterwards.
    """
    mode = TuningMode(mode)
    spec = template_for(mode, kb, relation, model.attention, config)
    if not mode.trains_anything:
        return RelationRun(relation, mode.value, model, None, None, spec)
    lm = model.copy() if mode.trains_lm else model
    enc = PromptEncoder(spec.n_prompt, model.config.d_model, seed=seed) if mode.uses_encoder else None
    opt = config.pt if mode.uses_encoder else config.ft
    with phase("train"):
        task = PromptTask(instances_for(kb, spec, "train", relation),
                          instances_for(kb, spec, "dev", relation), name=relation)
        before = lm.fingerprint() if not mode.trains_lm else None
        res = train_loop(task, lm, enc, mode, opt, patience=config.patience,
                         eval_every=config.eval_every, seed=seed, on_event=on_event)
    if before is not None and lm.fingerprint() != before:
        raise FrozenLMViolation(f"{mode.value} on {relation} modified the language model")
    return RelationRun(relation, mode.value, lm, enc, res, spec)


def evaluate_mode(model: LanguageModel, kb: KnowledgeBase, mode, config: ProbeConfig = ProbeConfig(),
                  seed: int = 0, on_event=None) -> tuple[ClozeResult, list]:
    """Tune every relation under ``mode`` and probe the test split."""
    per, preds, runs = {}, [], []
    for rel in kb.relations:
        run = tune_relation(model, kb, rel.name, mode, config, seed=seed,
                            on_event=None if on_event is None else
                            (lambda ev, r=rel.name: on_event({**ev, "relation": r})))
        res = probe(run.model, kb, run.spec, prompts=run.encoder, relations=[rel.name])
        per.update(res.relation_p1)
        preds.extend(res.predictions)
        runs.append(run)
    agg = sum(g == p for _, _, g, p in preds) / len(preds) if preds else 0.0
    return ClozeResult(per, agg, preds, TuningMode(mode).value), runs


@dataclass
class MatrixRow:
    model: str
    mode: str
    relation: str
    seed: int
    p_at_1: float


def mode_matrix(models: Mapping[str, LanguageModel], kb: KnowledgeBase,
                modes: Sequence = ("MP_ZERO_SHOT", "FT", "MP_FT", "PT"),
                config: ProbeConfig = ProbeConfig(), seeds: Sequence[int] = (0,),
                on_event=None) -> tuple[list, dict]:
    """One ClozeResult per (model, mode, seed), plus flat per-relation rows.

    Untrained modes do not depend on the seed and are evaluated once.
    """
    rows: list[MatrixRow] = []
    results: dict = {}
    for name in sorted(models):
        for mode in modes:
            mode = TuningMode(mode)
            for seed in (seeds if mode.trains_anything else seeds[:1]):
                cb = None if on_event is None else (
                    lambda ev, n=name, m=mode.value, s=seed: on_event({**ev, "model": n, "mode": m, "seed": s}))
                res, _ = evaluate_mode(models[name], kb, mode, config, seed=seed, on_event=cb)
                results[(name, mode.value, seed)] = res
                rows.extend(MatrixRow(name, mode.value, rel, seed, p) for rel, p in res.relation_p1.items())
    return rows, results


# -- sensitivity -------------------------------------------------------------------


@dataclass
class SweepRow:
    relation: str
    template_p1: dict               # template text -> P@1
    pt_p1: float | None = None

    @property
    def best(self) -> float:
        return max(self.template_p1.values())

    @property
    def worst(self) -> float:
        return min(self.template_p1.values())

    @property
    def spread(self) -> float:
        return self.best - self.worst


def sensitivity_sweep(model: LanguageModel, kb: KnowledgeBase,
                      templates: Mapping[str, Sequence[str]] | None = None,
                      with_pt: bool = True, config: ProbeConfig = ProbeConfig(),
                      seed: int = 0) -> list[SweepRow]:
    """P@1 of every manual template per relation, paired with a PT run."""
    rows = []
    for rel in kb.relations:
        texts = list(templates[rel.name]) if templates is not None else list(rel.manual)
        if len(texts) < 3:
            raise ValueError(f"{rel.name}: a sweep needs at least 3 templates, got {len(texts)}")
        scores = {}
        for text in texts:
            scores[text] = probe(model, kb, text, relations=[rel.name]).relation_p1[rel.name]
        pt = None
        if with_pt:
            run = tune_relation(model, kb, rel.name, TuningMode.PT, config, seed=seed)
            pt = probe(model, kb, run.spec, prompts=run.encoder, relations=[rel.name]).relation_p1[rel.name]
        rows.append(SweepRow(rel.name, scores, pt))
    return rows


def best_manual(model: LanguageModel, kb: KnowledgeBase) -> dict:
    """Per-relation maximum test P@1 over the relation's manual templates."""
    return {r.name: max(probe(model, kb, t, relations=[r.name]).relation_p1[r.name] for t in r.manual)
            for r in kb.relations}
