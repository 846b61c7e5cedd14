import json
import struct

import numpy as np
import pytest

from ptune import store
from ptune.model import LanguageModel, ModelConfig, Vocab
from ptune.optim import AdamState
from ptune.prompt import PromptEncoder, TemplateSpec, assemble_batch, bind, freeze
from ptune.tuning import TrainState


def tiny_model(seed=0, attention="causal"):
    return LanguageModel(ModelConfig(vocab_size=12, d_model=8, n_heads=2, d_ff=8, n_layers=1,
                                     max_len=16, attention=attention, seed=seed))


def train_state(rng):
    names = ["prompt.raw.0", "prompt.mlp.w1"]
    adam = AdamState(step=int(rng.integers(1, 50)),
                     m={n: rng.normal(size=(3, 2)).astype(np.float32) for n in names},
                     v={n: rng.random((3, 2)).astype(np.float32) for n in names})
    return TrainState(step=adam.step, adam=adam, best_metric=float(rng.random()), best_step=3,
                      patience_used=1, seed=int(rng.integers(100)), rng_state=None,
                      best_params={n: rng.normal(size=(3, 2)).astype(np.float32) for n in names},
                      history=[{"step": 0, "split": "dev", "metric": "accuracy", "value": float("nan")},
                               {"step": 5, "split": "dev", "metric": "accuracy", "value": 0.5}])


def random_object(kind, rng):
    if kind == "model":
        return tiny_model(seed=int(rng.integers(1000)), attention=["causal", "bidirectional"][int(rng.integers(2))])
    if kind == "encoder":
        return PromptEncoder(int(rng.integers(1, 6)), 4, seed=int(rng.integers(1000)))
    if kind == "cache":
        return freeze(PromptEncoder(int(rng.integers(1, 6)), 4, seed=int(rng.integers(1000))))
    return train_state(rng)


def arrays(obj):
    return store.to_checkpoint(obj).arrays


@pytest.mark.parametrize("kind", store.KINDS)
def test_roundtrip_fifty_random_objects(kind, tmp_path):
    rng = np.random.default_rng(0)
    for i in range(50):
        obj = random_object(kind, rng)
        path = store.save(obj, tmp_path / f"{kind}{i}.ptck")
        back = store.load(path, kind)
        a, b = arrays(obj), arrays(back)
        assert sorted(a) == sorted(b)
        for name in a:
            assert np.asarray(a[name], dtype=np.float32).tobytes() == b[name].tobytes()


def test_train_state_fields_survive(tmp_path):
    st = train_state(np.random.default_rng(1))
    back = store.load(store.save(st, tmp_path / "s.ptck"), "train_state")
    assert (back.step, back.best_step, back.patience_used, back.seed) == (st.step, 3, 1, st.seed)
    assert back.adam.step == st.adam.step
    assert back.history[0]["value"] is None and back.history[1]["value"] == 0.5


def test_identical_objects_give_identical_bytes(tmp_path):
    a = store.save(tiny_model(3), tmp_path / "a.ptck").read_bytes()
    b = store.save(tiny_model(3), tmp_path / "b.ptck").read_bytes()
    assert a == b


def test_header_layout(tmp_path):
    blob = store.save(tiny_model(), tmp_path / "m.ptck").read_bytes()
    assert blob[:8] == b"PTUNECK\x01"
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen])
    assert header["format_version"] == 1 and header["kind"] == "model"
    names = [e["name"] for e in header["manifest"]]
    assert names == sorted(names)
    assert header["body_nbytes"] == len(blob) - 16 - hlen
    assert header["config_hash"] == store.config_hash(header["config"])


def test_truncated_file_reports_hash_mismatch(tmp_path):
    path = store.save(tiny_model(), tmp_path / "m.ptck")
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(store.IntegrityError, match="hash mismatch"):
        store.load(path)


def test_flipped_body_byte_is_detected(tmp_path):
    path = store.save(tiny_model(), tmp_path / "m.ptck")
    blob = bytearray(path.read_bytes())
    blob[-1] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(store.IntegrityError):
        store.load(path)


def test_wrong_kind_names_both(tmp_path):
    path = store.save(tiny_model(), tmp_path / "m.ptck")
    with pytest.raises(store.KindMismatchError, match="'encoder'.*'model'"):
        store.load(path, "encoder")


def test_newer_version_is_refused(tmp_path):
    path = store.save(tiny_model(), tmp_path / "m.ptck")
    blob = path.read_bytes()
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen])
    header["format_version"] = 2
    head = store.canonical_json(header).encode()
    path.write_bytes(b"PTUNECK\x02" + struct.pack("<Q", len(head)) + head + blob[16 + hlen:])
    with pytest.raises(store.FormatVersionError, match="version 2"):
        store.load(path)


def test_error_categories_are_distinct():
    kinds = {store.FormatVersionError, store.KindMismatchError, store.IntegrityError}
    assert len(kinds) == 3 and all(issubclass(k, store.CheckpointError) for k in kinds)


def test_nan_needs_force(tmp_path):
    m = tiny_model()
    m.params["lm.head.bias"].data[0] = np.nan
    with pytest.raises(store.NonFiniteError):
        store.save(m, tmp_path / "m.ptck")
    assert not (tmp_path / "m.ptck").exists()
    store.save(m, tmp_path / "m.ptck", force=True)
    assert np.isnan(store.load(tmp_path / "m.ptck").params["lm.head.bias"].data[0])


def test_unwritable_path_names_the_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(store.CheckpointError, match="file"):
        store.save(tiny_model(), blocker / "m.ptck")
    with pytest.raises(store.CheckpointError, match="missing"):
        store.load(tmp_path / "missing.ptck")


def test_reloaded_cache_assembles_bitwise(tmp_path):
    vocab = Vocab("a b c d".split())
    m = LanguageModel(ModelConfig(vocab_size=len(vocab), d_model=8, n_heads=2, d_ff=8, n_layers=1,
                                  max_len=16, attention="bidirectional"))
    enc = PromptEncoder(9, 8, seed=5)
    cache = store.load(store.save(freeze(enc), tmp_path / "c.ptck"), "cache")
    insts = [bind(TemplateSpec.lama("bidirectional"), vocab, target="b", sub=s) for s in ("a", "c d")]
    live = assemble_batch(m, insts, enc).embeds.data
    reloaded = assemble_batch(m, insts, cache).embeds.data
    assert live.tobytes() == reloaded.tobytes()
