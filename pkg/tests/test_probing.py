import pytest

from ptune.bench.audit import AuditedSplit, phase
from ptune.bench.probing import (FT_TEMPLATE, FrozenLMViolation, probe, sensitivity_sweep,
                                 template_for, tune_relation, ProbeConfig)
from ptune.optim import OptimizerConfig

TINY = ProbeConfig(pt=OptimizerConfig(kind="adam", lr=1e-2, batch_size=8, max_steps=20),
                   ft=OptimizerConfig(kind="adamw", lr=1e-3, batch_size=8, max_steps=5), eval_every=10)


def rigged(model, vocab, word):
    """A copy that predicts ``word`` at every position."""
    m = model.copy()
    m.params["lm.head.bias"].data[vocab.id(word)] = 1e4
    return m


def test_always_right_and_always_wrong(tiny_world, tiny_models):
    kb = tiny_world.kb
    rel = "citizen_of"
    test = kb.splits[rel]["test"]
    gold = test[0].object
    n_gold = sum(t.object == gold for t in test)
    m = rigged(tiny_models["bidirectional"], kb.vocab, gold)
    res = probe(m, kb, kb.relation(rel).manual[0], relations=[rel])
    assert res.relation_p1[rel] == n_gold / len(test)
    wrong = rigged(tiny_models["bidirectional"], kb.vocab, "was")
    assert probe(wrong, kb, kb.relation(rel).manual[0], relations=[rel]).relation_p1[rel] == 0.0


def test_aggregate_recounts_from_predictions(tiny_world, tiny_models):
    res = probe(tiny_models["causal"], tiny_world.kb, "[X:sub] was born in [MASK] .")
    assert res.aggregate == res.recount()
    assert len(res.predictions) == len(tiny_world.kb.split("test"))
    hits = sum(res.relation_p1[r] * len(tiny_world.kb.split("test", r)) for r in res.relation_p1)
    assert hits / len(res.predictions) == pytest.approx(res.aggregate)


def test_templates_per_mode(tiny_world):
    kb = tiny_world.kb
    assert str(template_for("PT", kb, "born_in", "causal")) == "[P*3] [X:sub] [P*3] [MASK]"
    assert str(template_for("FT", kb, "born_in", "causal")) == FT_TEMPLATE
    assert str(template_for("MP_FT", kb, "born_in", "causal")) == kb.relation("born_in").manual[0]


def test_tuning_never_reads_test(tiny_world, tiny_models):
    kb = tiny_world.kb
    rel = "born_in"
    orig = kb.splits[rel]["test"]
    audited = AuditedSplit(orig, name="test")
    kb.splits[rel]["test"] = audited
    try:
        run = tune_relation(tiny_models["causal"], kb, rel, "PT", TINY)
        assert audited.reads == []
        probe(tiny_models["causal"], kb, run.spec, prompts=run.encoder, relations=[rel])
        assert audited.phases() == {"report"}
    finally:
        kb.splits[rel]["test"] = orig


def test_frozen_check_fires_when_the_lm_moves(tiny_world, tiny_models, monkeypatch):
    import ptune.bench.probing as probing
    real = probing.train_loop

    def sneaky(task, lm, *a, **kw):
        res = real(task, lm, *a, **kw)
        lm.params["lm.head.bias"].data[0] += 1.0
        return res

    monkeypatch.setattr(probing, "train_loop", sneaky)
    with pytest.raises(FrozenLMViolation, match="born_in"):
        tune_relation(tiny_models["causal"].copy(), tiny_world.kb, "born_in", "PT", TINY)


def test_ft_modes_leave_the_shared_model_alone(tiny_world, tiny_models):
    lm = tiny_models["causal"]
    before = lm.fingerprint()
    run = tune_relation(lm, tiny_world.kb, "born_in", "MP_FT", TINY)
    assert lm.fingerprint() == before and run.model is not lm


def test_identical_templates_have_zero_spread(tiny_world, tiny_models):
    kb = tiny_world.kb
    same = {r.name: [r.manual[0]] * 3 for r in kb.relations}
    rows = sensitivity_sweep(tiny_models["bidirectional"], kb, same, with_pt=False)
    assert all(r.spread == 0.0 and r.pt_p1 is None for r in rows)
    with pytest.raises(ValueError, match="at least 3"):
        sensitivity_sweep(tiny_models["bidirectional"], kb, {r.name: r.manual[:2] for r in kb.relations})


def test_reading_held_out_data_outside_report_is_visible():
    split = AuditedSplit([1, 2], name="x")
    with phase("selection"):
        list(split)
    assert split.phases() == {"selection"}
