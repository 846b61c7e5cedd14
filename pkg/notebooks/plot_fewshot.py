"""
Few-shot polarity with dev32
============================

32 training sentences, a dev32 drawn from unused examples for model
selection, and a 400-sentence dev set read only once at the end. The
verbalizer maps each label to one token; prediction is the argmax over
those two logits.
"""

import os

from ptune.bench.audit import AuditedSplit
from ptune.bench.fewshot import FewShotConfig, build_fewshot, fewshot_eval
from ptune.bench.world import build_world, pretrained

cache = os.environ.get("PTUNE_CACHE", os.path.expanduser("~/.cache/ptune"))
world = build_world()
lm = pretrained(world, "bidirectional", cache_dir=cache)

task = build_fewshot(seed=0)
print("train32:", len(task.train32), "dev32:", len(task.dev32), "verbalizer:", task.verbalizer)
print(task.train32[0])

cfg = FewShotConfig()
for mode in ("MP_ZERO_SHOT", "MP_FT", "PT_FT"):
    r = fewshot_eval(task, lm, world.vocab, mode, cfg, seed=0)
    print(f"{mode:13s} full dev {r.full_dev_accuracy:.3f}  selected {r.selected}")

# the audit log: full dev was only touched while reporting
assert isinstance(task.full_dev, AuditedSplit)
print("full dev read in phases:", task.full_dev.phases())
