import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ptune.model import (LanguageModel, ModelConfig, Vocab, lm_batch, pretrain, read_position,
                         target_logits)
from ptune.optim import OptimizerConfig


def small(attention="causal", **kw):
    kw.setdefault("vocab_size", 20)
    return LanguageModel(ModelConfig(d_model=16, n_layers=2, n_heads=2, d_ff=32, max_len=12,
                                     attention=attention, **kw))


def test_vocab_reserves_special_ids():
    v = Vocab(["a", "b", "[MASK]"])
    assert v.decode([0, 1, 2]) == ["[PAD]", "[MASK]", "[UNK]"]
    assert v.encode("a b") == [3, 4]
    assert Vocab(v.to_list()).tokens == v.tokens
    with pytest.raises(ValueError):
        Vocab(["a", "a"])
    with pytest.raises(KeyError):
        v.id("zzz")


@pytest.mark.parametrize("tie", [True, False])
@pytest.mark.parametrize("dims", [(20, 16, 32, 2, 12), (50, 8, 16, 1, 5), (7, 4, 4, 3, 3)])
def test_parameter_count_matches_closed_form(tie, dims):
    V, d, f, n, T = dims
    cfg = ModelConfig(vocab_size=V, d_model=d, d_ff=f, n_layers=n, max_len=T, n_heads=2, tie_head=tie)
    # counted independently: embeddings, per-layer weights and biases, final LN, head
    per_layer = (d * 3 * d + 3 * d) + (d * d + d) + (d * f + f) + (f * d + d) + 2 * (2 * d)
    expected = V * d + T * d + n * per_layer + 2 * d + V + (0 if tie else d * V)
    assert cfg.n_params() == expected
    assert LanguageModel(cfg).n_params() == expected


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=20, d_model=10, n_heads=3)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=20, attention="sideways")


def test_causal_model_cannot_see_the_future():
    m = small("causal")
    rng = np.random.default_rng(0)
    ids = rng.integers(3, 20, size=8)
    changed = ids.copy()
    changed[5:] = rng.integers(3, 20, size=3)
    a = m(ids).data
    b = m(changed).data
    np.testing.assert_array_equal(a[:5], b[:5])
    assert not np.array_equal(a[5:], b[5:])


def test_bidirectional_model_sees_both_sides():
    m = small("bidirectional")
    ids = np.arange(3, 11)
    changed = ids.copy()
    changed[-1] = 15
    assert not np.array_equal(m(ids).data[0], m(changed).data[0])


def test_embedding_path_equals_id_path_bitwise():
    for att in ("causal", "bidirectional"):
        m = small(att)
        ids = np.array([[3, 4, 5, 6], [7, 8, 9, 10]])
        np.testing.assert_array_equal(m(ids).data, m(m.embed(ids)).data)


def test_padding_does_not_change_real_positions():
    m = small("bidirectional")
    ids = np.array([[3, 4, 5, 0, 0]])
    keep = np.array([[True, True, True, False, False]])
    padded = m(ids, key_mask=keep).data[0, :3]
    np.testing.assert_allclose(padded, m(ids[:, :3]).data[0], atol=1e-5)


def test_logits_at_gathers_rows():
    m = small("causal")
    ids = np.array([[3, 4, 5, 6], [7, 8, 9, 10]])
    full = m(ids).data
    got = m.logits_at(ids, np.array([1, 3])).data
    np.testing.assert_allclose(got, full[[0, 1], [1, 3]], atol=1e-6)


def test_read_position_by_mode():
    assert read_position(4, "causal") == 3
    assert read_position(4, "bidirectional") == 4
    with pytest.raises(ValueError):
        read_position(0, "causal")


def test_target_logits_single_and_batch():
    m = small("bidirectional")
    e = m.embed(np.array([3, 1, 4]))
    single = target_logits(m, e, 1).data
    assert single.shape == (20,)
    # one-row and full-sequence projections may round differently in BLAS
    np.testing.assert_allclose(single, m(np.array([3, 1, 4])).data[1], rtol=1e-5, atol=1e-7)


def test_too_long_input_is_rejected():
    with pytest.raises(ValueError, match="max_len"):
        small()(np.arange(13) % 20)
    with pytest.raises(IndexError):
        small()(np.array([25]))


def test_state_roundtrip_and_fingerprint():
    a, b = small(seed=1), small(seed=2)
    assert a.fingerprint() != b.fingerprint()
    b.load_state_dict(a.state_dict())
    assert a.fingerprint() == b.fingerprint()
    with pytest.raises(KeyError):
        b.load_state_dict({})


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 9), min_size=1, max_size=6), st.integers(0, 1000))
def test_masked_batches_mask_at_least_one_real_token(lengths, seed):
    seqs = [list(range(3, 3 + n)) for n in lengths]
    inputs, targets, keep = lm_batch(seqs, "bidirectional", np.random.default_rng(seed))
    chosen = targets != -100
    assert np.all(chosen.any(axis=1))
    assert not np.any(chosen & ~keep)
    assert np.all(inputs[chosen] == Vocab.mask_id)
    assert np.all(inputs[~chosen] == np.where(keep, inputs, 0)[~chosen])


def test_causal_batches_shift_targets():
    inputs, targets, keep = lm_batch([[3, 4, 5], [6, 7]], "causal", np.random.default_rng(0))
    np.testing.assert_array_equal(targets, [[4, 5, -100], [7, -100, -100]])


def test_pretrain_learns_a_tiny_corpus_and_is_deterministic():
    corpus = [[3, 4, 5, 6], [7, 8, 9, 10]]
    runs = []
    for _ in range(2):
        m = small("causal", seed=0)
        res = pretrain(m, corpus, 150, OptimizerConfig(lr=1e-2, batch_size=4, max_steps=150))
        runs.append((m.fingerprint(), res.losses))
    assert runs[0] == runs[1]
    assert np.mean(runs[0][1][-10:]) < 0.1 * runs[0][1][0]


def test_offsets_equal_a_rolled_position_table():
    m = small("causal")
    ids = np.array([[3, 4, 5], [6, 7, 8]])
    got = m.hidden(ids, offsets=np.array([2, 0])).data
    rolled = m.copy()
    rolled.params["lm.pos_emb"].data[:] = np.roll(m.params["lm.pos_emb"].data, -2, axis=0)
    np.testing.assert_array_equal(got[0], rolled.hidden(ids[:1]).data[0])
    np.testing.assert_array_equal(got[1], m.hidden(ids[1:]).data[0])
    with pytest.raises(ValueError, match="exceeds"):
        m.hidden(ids, offsets=np.array([m.config.max_len, 0]))


def test_pretrain_shift_and_errors():
    m = small("bidirectional")
    res = pretrain(m, [[3, 4, 5]], 3, OptimizerConfig(batch_size=2, max_steps=3), shift=4)
    assert len(res.losses) == 3
    with pytest.raises(ValueError, match="empty"):
        pretrain(m, [], 1)
    with pytest.raises(ValueError):
        pretrain(m, [[3]], 1, shift=-1)


def test_zero_steps_leaves_initialization():
    m = small()
    before = m.fingerprint()
    pretrain(m, [[3, 4]], 0)
    assert m.fingerprint() == before
