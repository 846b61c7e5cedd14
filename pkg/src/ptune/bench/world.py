"""The shared benchmark world: one KB, one vocabulary, one corpus, two models.

Both the causal and the bidirectional model are pretrained on the same
corpus (KB fact sentences plus the polarity lexicon for the few-shot task)
over the same vocabulary, so every comparison between them is like for like.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .. import store
from ..model import LanguageModel, ModelConfig, PretrainResult, pretrain
from ..optim import OptimizerConfig
from . import fewshot
from .kb import KnowledgeBase, generate_kb

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class KBConfig:
    seed: int = 0
    n_relations: int = 8
    n_entities: int = 200
    templates_per_relation: int = 5
    frames_per_triple: int = 1
    extra_frame_rate: float = 0.3
    train_skew: float = 0.0


@dataclass(frozen=True)
class PretrainConfig:
    steps: int
    batch_size: int
    lr: float = 2e-3
    shift: int = 0
    seed: int = 0
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_len: int = 32

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(kind="adamw", lr=self.lr, batch_size=self.batch_size,
                               max_steps=self.steps)


# The masked objective sees ~15% of positions per sentence, so it needs more
# passes over the corpus than next-token prediction to absorb the facts.
DEFAULT_PRETRAIN = {
    "causal": PretrainConfig(steps=2500, batch_size=64, shift=4),
    "bidirectional": PretrainConfig(steps=6000, batch_size=128, lr=4e-3, shift=4),
}


@dataclass
class World:
    kb: KnowledgeBase
    corpus: list = field(repr=False)

    @property
    def vocab(self):
        return self.kb.vocab


def build_world(config: KBConfig = KBConfig()) -> World:
    kb = generate_kb(config.seed, n_relations=config.n_relations, n_entities=config.n_entities,
                     templates_per_relation=config.templates_per_relation,
                     frames_per_triple=config.frames_per_triple,
                     extra_frame_rate=config.extra_frame_rate, train_skew=config.train_skew,
                     extra_words=fewshot.lexicon_words())
    sentences = kb.fact_sentences() + fewshot.lexicon_sentences()
    return World(kb, [kb.vocab.encode(s) for s in sentences])


def model_config(world: World, attention: str, pc: PretrainConfig) -> ModelConfig:
    return ModelConfig(vocab_size=len(world.vocab), d_model=pc.d_model, n_layers=pc.n_layers,
                       n_heads=pc.n_heads, d_ff=pc.d_ff, max_len=pc.max_len,
                       attention=attention, seed=pc.seed)


def pretrain_model(world: World, attention: str, pc: PretrainConfig | None = None,
                   log_fn=None) -> tuple[LanguageModel, PretrainResult]:
    pc = pc or DEFAULT_PRETRAIN[attention]
    model = LanguageModel(model_config(world, attention, pc))
    result = pretrain(model, world.corpus, pc.steps, pc.optimizer(), seed=pc.seed, log=log_fn,
                      shift=pc.shift)
    return model, result


def pretrained(world: World, attention: str, pc: PretrainConfig | None = None,
               cache_dir=None, kb_config: KBConfig = KBConfig()) -> LanguageModel:
    """Pretrain, or reuse a checkpoint in ``cache_dir`` keyed by the configs and the corpus."""
    pc = pc or DEFAULT_PRETRAIN[attention]
    if cache_dir is None:
        return pretrain_model(world, attention, pc)[0]
    # the corpus and vocabulary can change without any config field changing
    key = store.config_hash({"kb": asdict(kb_config), "pretrain": asdict(pc),
                             "attention": attention, "format": store.FORMAT_VERSION,
                             "vocab": world.vocab.tokens, "corpus": world.corpus})[:16]
    path = Path(cache_dir) / f"{attention}-{key}.ptck"
    if path.exists():
        try:
            return store.load(path, "model")
        except store.CheckpointError as exc:
            log.warning("ignoring unreadable cached model: %s", exc)
    model, _ = pretrain_model(world, attention, pc)
    store.save(model, path, extra={"kb": asdict(kb_config), "pretrain": asdict(pc)})
    return model
