import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ptune import autodiff as ad
from ptune.autodiff import Tape, Tensor
from ptune.model import LanguageModel, ModelConfig, Vocab, target_logits
from ptune.prompt import (Anchor, ContextSlot, PromptBlock, PromptCache, PromptEncoder, TargetSlot,
                          TemplateSpec, assemble_batch, assemble_continuous, assemble_discrete, bind,
                          freeze, layout, lstm_cell)

VOCAB = Vocab("? . is the capital of paris france rome italy a b c d".split())


def lm(attention):
    return LanguageModel(ModelConfig(vocab_size=len(VOCAB), d_model=8, n_heads=2, d_ff=16,
                                     n_layers=1, max_len=24, attention=attention))


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def numpy_lstm_step(x, h, c, w_x, w_h, b):
    """Reference LSTM step; gate blocks i, f, g, o."""
    z = x @ w_x + h @ w_h + b
    H = h.shape[-1]
    i, f, g, o = sigmoid(z[:, :H]), sigmoid(z[:, H:2 * H]), np.tanh(z[:, 2 * H:3 * H]), sigmoid(z[:, 3 * H:])
    c2 = f * c + i * g
    return o * np.tanh(c2), c2


def test_parse_and_render_roundtrip():
    text = "[P*3] [X:sub] [P*3] [MASK] [P*3]"
    spec = TemplateSpec.parse(text)
    assert str(spec) == text
    assert spec.n_prompt == 9 and spec.slot_names == ["sub"] and spec.n_anchors == 0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.one_of(st.integers(1, 4).map(lambda k: f"[P*{k}]"),
                          st.sampled_from(["?", ".", "is", "the"])), max_size=4),
       st.integers(0, 4))
def test_parse_render_property(parts, where):
    words = parts[:where] + ["[X:a]", "[MASK]"] + parts[where:]
    spec = TemplateSpec.parse(" ".join(words))
    assert str(TemplateSpec.parse(str(spec))) == str(spec)


@pytest.mark.parametrize("bad", ["[X:a] b", "[MASK] [MASK]", "[X:a] [X:a] [MASK]", "[P*x] [MASK]",
                                 "[X:] [MASK]"])
def test_malformed_templates(bad):
    with pytest.raises(ValueError):
        TemplateSpec.parse(bad)


def test_lama_layouts():
    assert str(TemplateSpec.lama("bidirectional")) == "[P*3] [X:sub] [P*3] [MASK] [P*3]"
    assert str(TemplateSpec.lama("causal")) == "[P*3] [X:sub] [P*3] [MASK]"


def test_bidirectional_lama_layout_rows():
    inst = bind(TemplateSpec.lama("bidirectional"), VOCAB, target="paris", sub="france")
    rows, pos = layout(inst, "bidirectional", discrete=False)
    f = VOCAB.id("france")
    assert rows == [("p", 0), ("p", 1), ("p", 2), ("t", f), ("p", 3), ("p", 4), ("p", 5),
                    ("t", Vocab.mask_id), ("p", 6), ("p", 7), ("p", 8)]
    assert pos == 7


def test_causal_lama_layout_reads_last_row():
    inst = bind(TemplateSpec.lama("causal"), VOCAB, target="paris", sub="france")
    rows, pos = layout(inst, "causal", discrete=False)
    assert len(rows) == 7 and pos == 7
    m = lm("causal")
    e, tpos = assemble_continuous(m, inst, PromptEncoder(6, 8))
    assert e.shape == (7, 8) and tpos == 7


def test_anchor_between_premise_and_hypothesis():
    spec = TemplateSpec.parse("[X:pre] [P*2] [X:hyp] ? [P*2] [MASK]")
    inst = bind(spec, VOCAB, pre="a b", hyp="c")
    rows, pos = layout(inst, "bidirectional", discrete=False)
    assert rows[5] == ("t", VOCAB.id("?"))
    assert pos == 8


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=4), st.integers(1, 4), st.integers(0, 2),
       st.sampled_from(["causal", "bidirectional"]))
def test_length_arithmetic(blocks, ctx_len, anchors, attention):
    segs = [PromptBlock(k) for k in blocks] + [ContextSlot("x")] + [Anchor("?")] * anchors + [TargetSlot()]
    spec = TemplateSpec(tuple(segs))
    inst = bind(spec, VOCAB, x=["a"] * ctx_len)
    rows, _ = layout(inst, attention, discrete=False)
    expected = sum(blocks) + ctx_len + anchors + (1 if attention == "bidirectional" else 0)
    assert len(rows) == expected == spec.length({"x": ctx_len}, attention)


def test_unknown_anchor_or_unbound_slot():
    with pytest.raises(ValueError, match="vocabulary"):
        assemble_discrete(lm("causal"), bind(TemplateSpec.parse("[X:s] zebra [MASK]"), VOCAB, s="a"))
    with pytest.raises(ValueError, match="unbound"):
        bind(TemplateSpec.parse("[X:s] [MASK]"), VOCAB)


def test_discrete_assembly_equals_embedding_lookup():
    m = lm("bidirectional")
    inst = bind(TemplateSpec.parse("the capital of [X:sub] is [MASK] ."), VOCAB, target="paris", sub="france")
    e, pos = assemble_discrete(m, inst)
    ids = VOCAB.encode("the capital of france is [MASK] .")
    np.testing.assert_array_equal(e.data, m.params["lm.tok_emb"].data[ids])
    assert pos == 5


def test_continuous_rows_carry_prompt_vectors_in_order():
    m = lm("bidirectional")
    enc = PromptEncoder(9, 8, seed=3)
    inst = bind(TemplateSpec.lama("bidirectional"), VOCAB, target="paris", sub="france")
    e, _ = assemble_continuous(m, inst, enc)
    h = enc.encode().data
    np.testing.assert_array_equal(e.data[[0, 1, 2, 4, 5, 6, 8, 9, 10]], h)
    np.testing.assert_array_equal(e.data[3], m.params["lm.tok_emb"].data[VOCAB.id("france")])
    np.testing.assert_array_equal(e.data[7], m.params["lm.tok_emb"].data[Vocab.mask_id])


def test_prompt_count_mismatch():
    m = lm("causal")
    inst = bind(TemplateSpec.lama("causal"), VOCAB, sub="france")
    with pytest.raises(ValueError, match="needs 6"):
        assemble_continuous(m, inst, PromptEncoder(4, 8))
    with pytest.raises(ValueError, match="no prompt source"):
        assemble_batch(m, [inst])


def test_lstm_cell_matches_numpy_reference():
    rng = np.random.default_rng(0)
    x, h, c = rng.normal(size=(2, 5)), rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    w_x, w_h, b = rng.normal(size=(5, 12)), rng.normal(size=(3, 12)), rng.normal(size=12)
    h2, c2 = lstm_cell(*(Tensor(a) for a in (x, h, c, w_x, w_h, b)))
    rh, rc = numpy_lstm_step(x, h, c, w_x, w_h, b)
    np.testing.assert_allclose(h2.data, rh, rtol=1e-10)
    np.testing.assert_allclose(c2.data, rc, rtol=1e-10)


def test_encoder_matches_manual_bilstm_mlp():
    enc = PromptEncoder(4, 6, hidden=5, seed=1)
    P = {k: v.data.astype(np.float64) for k, v in enc.params.items()}
    raw = np.stack([P[f"prompt.raw.{i}"] for i in range(4)])

    def run(name, order):
        h, c = np.zeros((1, 5)), np.zeros((1, 5))
        out = {}
        for t in order:
            h, c = numpy_lstm_step(raw[t:t + 1], h, c, P[f"prompt.lstm_{name}.w_x"],
                                   P[f"prompt.lstm_{name}.w_h"], P[f"prompt.lstm_{name}.b"])
            out[t] = h[0]
        return np.stack([out[t] for t in range(4)])

    both = np.concatenate([run("fwd", range(4)), run("bwd", range(3, -1, -1))], axis=1)
    hid = np.maximum(both @ P["prompt.mlp.w1"] + P["prompt.mlp.b1"], 0)
    want = hid @ P["prompt.mlp.w2"] + P["prompt.mlp.b2"]
    np.testing.assert_allclose(enc.encode().data, want, rtol=1e-4, atol=1e-6)


def test_bypass_returns_raw_vectors():
    enc = PromptEncoder(3, 4, bypass=True)
    np.testing.assert_array_equal(enc.encode().data, enc.raw().data)


def test_every_raw_vector_reaches_every_output():
    # bi-LSTM association: output j depends on raw i for all i, j
    enc = PromptEncoder(4, 6, seed=2)
    for j in range(4):
        enc.zero_grad()
        with Tape() as tape:
            tape.backward(ad.sum(enc.encode()[j]))
        for i in range(4):
            assert np.abs(enc.params[f"prompt.raw.{i}"].grad).max() > 0


def test_gradient_reaches_every_encoder_parameter_through_the_lm():
    m = lm("bidirectional")
    m.set_trainable(False)
    enc = PromptEncoder(9, 8, seed=0)
    inst = bind(TemplateSpec.lama("bidirectional"), VOCAB, target="paris", sub="france")
    with Tape() as tape:
        batch = assemble_batch(m, [inst], enc)
        loss = ad.cross_entropy(target_logits(m, batch.embeds, batch.target_positions), batch.targets)
        tape.backward(loss)
    for p in enc.parameters():
        assert p.grad is not None and np.abs(p.grad).max() > 0, p.name
    assert all(p.grad is None for p in m.parameters())


def test_cache_is_read_only_and_equivalent():
    enc = PromptEncoder(6, 8, seed=4)
    cache = freeze(enc)
    np.testing.assert_array_equal(cache.vectors, enc.encode().data)
    with pytest.raises(ValueError):
        cache.vectors[0, 0] = 1.0
    m = lm("causal")
    insts = [bind(TemplateSpec.lama("causal"), VOCAB, target="rome", sub=s) for s in ("italy", "a b")]
    live = assemble_batch(m, insts, enc)
    frozen = assemble_batch(m, insts, cache)
    np.testing.assert_array_equal(live.embeds.data, frozen.embeds.data)
    np.testing.assert_array_equal(live.key_mask, [[True] * 7 + [False], [True] * 8])


def test_encoder_state_roundtrip():
    a, b = PromptEncoder(3, 4, seed=0), PromptEncoder(3, 4, seed=9)
    b.load_state_dict(a.state_dict())
    np.testing.assert_array_equal(a.encode().data, b.encode().data)
    assert isinstance(freeze(a), PromptCache)


def test_object_first_template_gets_a_causal_start_row():
    spec = TemplateSpec.parse("[MASK] is the capital of [X:sub] .")
    inst = bind(spec, VOCAB, target="paris", sub="france")
    rows, pos = layout(inst, "causal", discrete=False)
    assert rows[0] == ("t", Vocab.mask_id) and pos == 1
    assert len(rows) == spec.length({"sub": 1}, "causal") == 7
    e, tpos = assemble_discrete(lm("causal"), inst)
    assert target_logits(lm("causal"), e, tpos).shape == (len(VOCAB),)
