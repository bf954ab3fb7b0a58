import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from omnifuse.checkpoint import (
    BadMagic,
    CorruptPayload,
    DigestMismatch,
    TruncatedPayload,
    UnsupportedVersion,
    load_checkpoint,
    read_container,
    read_manifest,
    save_checkpoint,
    write_container,
)
from omnifuse.distill import build_mt, build_student
from omnifuse.embeddings import EmbeddingSet
from omnifuse.engine import Dense, Rng, Sequential
from omnifuse.fusion import AutoencoderConfig, fit_autoencoder, fit_pca, fit_rescaler
from omnifuse.tasks import TaskSpec
from omnifuse.world import ExpertSpec, WorldConfig, gen_world, sample_task, train_experts


def same_state(a, b):
    sa, sb = a.state(), b.state()
    return sa.keys() == sb.keys() and all(np.array_equal(sa[k], sb[k]) for k in sa)


class TestContainer:
    def test_empty_roundtrip(self, tmp_path):
        p = write_container(tmp_path / "e.omnf", "blank", {}, {"k": 1}, seed=3, config_digest="ab")
        manifest, tensors = read_container(p)
        assert tensors == {}
        assert manifest["meta"] == {"k": 1} and manifest["seed"] == 3 and manifest["payload_bytes"] == 0

    def test_dtypes_restored(self, tmp_path):
        t = {"i": np.array([[1, -2], [3, 2 ** 40]]), "b": np.array([True, False, True]), "f": np.array([0.1, -0.0])}
        _, out = read_container(write_container(tmp_path / "d.omnf", "x", t))
        assert out["i"].dtype == np.int64 and np.array_equal(out["i"], t["i"])
        assert out["b"].dtype == np.bool_ and np.array_equal(out["b"], t["b"])
        assert np.array_equal(out["f"].view(np.int64), t["f"].view(np.int64))

    def test_header_layout(self, tmp_path):
        raw = write_container(tmp_path / "h.omnf", "x", {"a": np.ones(2)}).read_bytes()
        magic, version, mlen = struct.unpack_from("<4sIQ", raw)
        assert (magic, version) == (b"OMNF", 1)
        assert len(raw) == 16 + mlen + 16

    def test_unsupported_dtype(self, tmp_path):
        with pytest.raises(TypeError):
            write_container(tmp_path / "f.omnf", "x", {"a": np.ones(2, dtype=np.float32)})

    @settings(max_examples=30, deadline=None)
    @given(st.dictionaries(st.text("abcxyz/", min_size=1, max_size=6),
                           hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4)),
                           max_size=4))
    def test_any_float_tensors_bit_exact(self, tmp_path_factory, tensors):
        path = tmp_path_factory.mktemp("h") / "t.omnf"
        _, out = read_container(write_container(path, "x", tensors))
        assert out.keys() == tensors.keys()
        for k, v in tensors.items():
            assert out[k].shape == v.shape
            assert out[k].tobytes() == v.tobytes()


class TestDefects:
    @pytest.fixture
    def blob(self, tmp_path):
        p = write_container(tmp_path / "ok.omnf", "x", {"a": np.arange(6.0)}, config_digest="d" * 64)
        return p, p.read_bytes()

    def test_bad_magic(self, blob, tmp_path):
        p, raw = blob
        p.write_bytes(b"ZZZZ" + raw[4:])
        with pytest.raises(BadMagic):
            read_container(p)

    def test_not_a_checkpoint(self, tmp_path):
        p = tmp_path / "junk"
        p.write_bytes(b"hi")
        with pytest.raises(BadMagic):
            read_container(p)

    def test_version_bump(self, blob):
        p, raw = blob
        p.write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
        with pytest.raises(UnsupportedVersion):
            read_container(p)

    @pytest.mark.parametrize("cut", [6, 30, -1, -20])
    def test_truncated(self, blob, cut):
        p, raw = blob
        p.write_bytes(raw[:cut])
        with pytest.raises(TruncatedPayload):
            read_container(p)

    def test_flipped_payload_byte(self, blob):
        p, raw = blob
        p.write_bytes(raw[:-3] + bytes([raw[-3] ^ 1]) + raw[-2:])
        with pytest.raises(CorruptPayload):
            read_container(p)

    def test_digest_mismatch(self, blob):
        p, _ = blob
        assert read_container(p, expected_digest="d" * 64)[1]["a"][5] == 5.0
        with pytest.raises(DigestMismatch):
            read_container(p, expected_digest="e" * 64)


class TestObjects:
    def test_sequential(self, tmp_path, np_rng):
        net = Sequential([Dense(5, 4, "elu", rng=Rng(0)), Dense(4, 2, rng=Rng(1))], name="net")
        back = load_checkpoint(save_checkpoint(net, tmp_path / "n.omnf"))
        x = np_rng.normal(size=(3, 5))
        assert same_state(net, back)
        assert np.array_equal(net.forward(x), back.forward(x))

    def test_student_and_mt(self, tmp_path, np_rng):
        s = build_student(8, 4, Rng(0), hidden=(6,))
        s2 = load_checkpoint(save_checkpoint(s, tmp_path / "s.omnf"))
        assert same_state(s.backbone, s2.backbone) and s2.mode == s.mode
        mt = build_mt(8, [2, 3], Rng(1), hidden=(6,))
        mt2 = load_checkpoint(save_checkpoint(mt, tmp_path / "m.omnf"))
        assert same_state(mt.backbone, mt2.backbone) and same_state(mt.decoder, mt2.decoder)

    @pytest.mark.parametrize("kind", ["pca", "ae", "vae"])
    def test_fusion(self, tmp_path, np_rng, kind):
        x = np_rng.normal(size=(40, 6))
        if kind == "pca":
            op = fit_pca(x, 3, ["a", "b"], [2, 4])
        else:
            op, _ = fit_autoencoder(kind, x, x, AutoencoderConfig(latent=3, epochs=1), Rng(2), ["a", "b"], [2, 4])
        back = load_checkpoint(save_checkpoint(op, tmp_path / "f.omnf"))
        assert np.array_equal(op.encode(x), back.encode(x))
        assert np.array_equal(op.decode_flat(op.encode(x)), back.decode_flat(back.encode(x)))

    def test_rescaler_and_embeddings(self, tmp_path, np_rng):
        e = EmbeddingSet(["a", "b"], [np_rng.normal(size=(7, 2)), np_rng.normal(size=(7, 3))])
        e2 = load_checkpoint(save_checkpoint(e, tmp_path / "e.omnf"))
        assert e2.names == e.names and all(np.array_equal(p, q) for p, q in zip(e.matrices, e2.matrices))
        r = fit_rescaler(e)
        r2 = load_checkpoint(save_checkpoint(r, tmp_path / "r.omnf"))
        assert all(np.array_equal(p, q) for p, q in zip(r.apply(e).matrices, r2.apply(e).matrices))

    def test_world_bank_dataset(self, tmp_path):
        cfg = WorldConfig(d_x=16, render_hidden=8, n_identities=6)
        w = gen_world(4, cfg)
        w2 = load_checkpoint(save_checkpoint(w, tmp_path / "w.omnf", seed=4))
        assert np.array_equal(w.render_maps[1].w2, w2.render_maps[1].w2)
        bank = train_experts(w, [ExpertSpec("e", "expression", "classification", 3, hidden=(8,), epochs=1,
                                            n_train=50, n_val=20)], Rng(0))
        bank2 = load_checkpoint(save_checkpoint(bank, tmp_path / "b.omnf"))
        assert same_state(bank.experts[0].encoder, bank2.experts[0].encoder)
        assert bank2.experts[0].spec == bank.experts[0].spec
        ds = sample_task(w, TaskSpec("id", "identity-pairs", "identity", 1, 20, 20, 20, n_pairs=10,
                                     missing_rate=0.1), Rng(0))
        ds2 = load_checkpoint(save_checkpoint(ds, tmp_path / "d.omnf"))
        assert np.array_equal(ds.observations, ds2.observations)
        assert np.array_equal(ds.missing, ds2.missing) and ds2.missing.dtype == np.bool_
        for split in ds.pairs:
            assert all(np.array_equal(a, b) for a, b in zip(ds.pairs[split], ds2.pairs[split]))
        assert np.array_equal(ds.latents.nuisance, ds2.latents.nuisance)

    def test_manifest_fields(self, tmp_path):
        p = save_checkpoint(build_student(4, 2, Rng(0), hidden=(3,)), tmp_path / "s.omnf", seed=7,
                            config_digest="c" * 64)
        m = read_manifest(p)
        assert m["content_type"] == "student" and m["seed"] == 7 and m["format_version"] == 1
        assert len(m["payload_sha256"]) == 64

    def test_unknown_object(self, tmp_path):
        with pytest.raises(TypeError):
            save_checkpoint(object(), tmp_path / "x.omnf")

    def test_same_object_same_bytes(self, tmp_path):
        s = build_student(4, 2, Rng(0), hidden=(3,))
        a = save_checkpoint(s, tmp_path / "a.omnf").read_bytes()
        assert a == save_checkpoint(s, tmp_path / "b.omnf").read_bytes()
