import numpy as np
import pytest

from blocksc import checkpoint as ck
from blocksc.anderson import AndersonConfig
from blocksc.denoiser import ModelParams, ScalarParams, init_denoiser
from blocksc.dictionary import Dictionary, normalize_atoms
from blocksc.pipeline import ModelBundle, load_model_bundle, save_model_bundle


class TestContainer:
    def test_array_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        entries = {
            "a.matrix": rng.normal(size=(3, 4)),
            "b.vector": rng.normal(size=7).astype(np.float32),
            "c.counter": np.int64(42),
            "d.text": ck.pack_str("hello world"),
        }
        p = tmp_path / "x.dqc1"
        ck.save_checkpoint(p, entries)
        back = ck.load_checkpoint(p)
        assert set(back) == set(entries)
        assert np.array_equal(back["a.matrix"], entries["a.matrix"])
        assert back["b.vector"].dtype == np.float32
        assert int(back["c.counter"]) == 42
        assert ck.unpack_str(back["d.text"]) == "hello world"

    def test_save_load_save_byte_identical(self, tmp_path):
        rng = np.random.default_rng(1)
        entries = {"w": rng.normal(size=(5, 5)), "meta": ck.pack_str("{}")}
        p1 = tmp_path / "a.dqc1"
        p2 = tmp_path / "b.dqc1"
        ck.save_checkpoint(p1, entries)
        ck.save_checkpoint(p2, ck.load_checkpoint(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.dqc1"
        p.write_bytes(b"NOTDQC10{}\n")
        with pytest.raises(ValueError, match="DQC1"):
            ck.load_checkpoint(p)


def small_bundle(seed=0):
    rng = np.random.default_rng(seed)
    D = Dictionary(normalize_atoms(rng.normal(size=(4, 6))))
    params = ModelParams(init_denoiser(4, hidden=3, seed=seed),
                         ScalarParams.from_values(0.8, 0.1))
    return ModelBundle(dictionary=D, params=params, engine="deq",
                       variant="fast", n=4,
                       anderson=AndersonConfig(m=4, max_iters=12, tol=1e-6),
                       K=6, support_size=2, meta={"sigma_255": 50})


class TestModelBundle:
    def test_round_trip_preserves_everything(self, tmp_path):
        bundle = small_bundle()
        p = tmp_path / "model.dqc1"
        save_model_bundle(p, bundle)
        back, opt = load_model_bundle(p)
        assert opt == {}
        assert np.array_equal(back.dictionary.atoms, bundle.dictionary.atoms)
        for w1, w2 in zip(back.params.denoiser.weights,
                          bundle.params.denoiser.weights):
            assert np.array_equal(w1, w2)
        assert back.engine == "deq" and back.variant == "fast"
        assert back.n == 4 and back.K == 6 and back.support_size == 2
        assert back.anderson == bundle.anderson
        assert back.meta["sigma_255"] == 50
        assert float(back.params.scalars.raw_b) == float(
            bundle.params.scalars.raw_b)

    def test_resave_byte_identical(self, tmp_path):
        bundle = small_bundle(seed=1)
        p1 = tmp_path / "m1.dqc1"
        p2 = tmp_path / "m2.dqc1"
        save_model_bundle(p1, bundle)
        back, _ = load_model_bundle(p1)
        save_model_bundle(p2, back)
        assert p1.read_bytes() == p2.read_bytes()

    def test_optimizer_entries_round_trip(self, tmp_path):
        bundle = small_bundle(seed=2)
        opt = {"optimizer.t": np.float64(7),
               "optimizer.m.scalars.raw_b": np.float64(0.25)}
        p = tmp_path / "m.dqc1"
        save_model_bundle(p, bundle, optimizer_entries=opt)
        _, opt_back = load_model_bundle(p)
        assert float(opt_back["optimizer.t"]) == 7.0
        assert float(opt_back["optimizer.m.scalars.raw_b"]) == 0.25
