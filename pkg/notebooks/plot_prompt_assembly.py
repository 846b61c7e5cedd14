"""
Templates, prompt vectors and assembly
======================================

A template mixes pseudo prompt blocks, context slots, anchors and one
target. Assembly turns a bound template into the embedding rows the LM
reads: encoder outputs for pseudo tokens, table lookups for the rest.
"""

import numpy as np

from ptune.model import LanguageModel, ModelConfig, Vocab
from ptune.prompt import PromptEncoder, TemplateSpec, assemble_continuous, bind, freeze

spec = TemplateSpec.parse("[P*3] [X:sub] [P*3] [MASK] [P*3]")
print(spec, "| prompt tokens:", spec.n_prompt, "| slots:", spec.slot_names)

# the causal layout drops the trailing block and reads before the target
print(TemplateSpec.lama("causal"))

vocab = Vocab(["paris", "alice", "born", "in", "."])
lm = LanguageModel(ModelConfig(vocab_size=len(vocab), d_model=16, n_heads=2, d_ff=32, max_len=16,
                               attention="bidirectional"))
inst = bind(spec, vocab, target="paris", sub=["alice"])

# bi-LSTM over the free vectors, then a two-layer MLP
enc = PromptEncoder(spec.n_prompt, lm.config.d_model, seed=0)
rows, target = assemble_continuous(lm, inst, enc)
print("assembled:", rows.shape, "target at", target)

# once tuned, the encoder output can be frozen into a plain table
cache = freeze(enc)
rows_cached, _ = assemble_continuous(lm, inst, cache)
print("cache equals encoder:", np.array_equal(rows.data, rows_cached.data))
