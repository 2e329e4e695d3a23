import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import softmax

from tokvid.predictors import (LOGIT_FLOOR, CountingPredictor, MLPPredictor, OraclePredictor,
                               TabularPredictor, UniformPredictor, batch_predict,
                               load_checkpoint, nearest_anchors, oracle_predict,
                               read_checkpoint_header, timestep_embedding)
from tokvid.synthetic import CapacityError, Dynamics, SyntheticProcess, exact_chunk_conditional


def process(eps=0.0, n=1, d=3, dynamics=Dynamics.CYCLIC_SHIFT):
    return SyntheticProcess(num_data=d, tokens_per_frame=n, dynamics=dynamics, noise=eps)


class TestOracle:
    def test_clean_chunk_reproduces_input(self):
        p = process(0.1, n=2)
        x = np.array([[0, 2], [1, 0], [2, 1]])
        logits = oracle_predict(x, p)
        assert np.array_equal(logits.argmax(-1), x)
        assert np.all(np.isfinite(logits))

    def test_deterministic_shift(self):
        p = process(0.0, n=3)
        M = p.vocab.mask_id
        x = np.array([[0, 1, 2], [M, M, M]])
        probs = softmax(oracle_predict(x, p), axis=-1)
        assert probs[1].argmax(-1).tolist() == [1, 2, 0]
        assert np.all(probs[1].max(-1) == 1.0)

    def test_noisy_posterior(self):
        # uniform resampling spreads eps over all three ids, including the successor
        eps = 0.1
        p = process(eps)
        x = np.array([[0], [p.vocab.mask_id]])
        for method in ("chain", "enumerate"):
            probs = softmax(oracle_predict(x, p, method), axis=-1)[1, 0, :3]
            assert np.allclose(probs, [eps / 3, 1 - eps + eps / 3, eps / 3], rtol=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 2), st.sampled_from([0.0, 0.1, 0.5]),
           st.sampled_from(list(Dynamics)), st.integers(0, 2**32 - 1))
    def test_two_paths_agree_and_normalize(self, k, n, eps, dyn, seed):
        p = process(eps, n=n, dynamics=dyn)
        rng = np.random.default_rng(seed)
        clean = np.array([[rng.integers(3)] * n])
        for _ in range(k - 1):
            clean = np.vstack([clean, p.successor[clean[-1]]])
        x = np.where(rng.random(clean.shape) < 0.5, p.vocab.mask_id, clean)
        chain = softmax(oracle_predict(x, p, "chain"), axis=-1)
        enum = softmax(oracle_predict(x, p, "enumerate"), axis=-1)
        assert np.allclose(chain, enum, rtol=0, atol=1e-12)
        assert np.all(np.abs(chain.sum(-1) - 1) <= 1e-9)
        # independent path: marginals of the exhaustive conditional
        dist = exact_chunk_conditional(p, x)
        if dist.positions.shape[0]:
            masked_probs = chain[x == p.vocab.mask_id][:, :3]
            assert np.allclose(masked_probs, dist.marginals(), atol=1e-12)

    def test_batch_matches_rows(self):
        p = process(0.2, n=2)
        rng = np.random.default_rng(0)
        x = np.where(rng.random((6, 3, 2)) < 0.5, 3, rng.integers(0, 3, size=(6, 3, 2)))
        batched = OraclePredictor(p).predict(x)
        rows = np.stack([oracle_predict(r, p) for r in x])
        assert np.allclose(batched, rows, atol=1e-12)

    def test_capacity(self):
        p = SyntheticProcess(num_data=10, tokens_per_frame=4, noise=0.1)
        x = np.full((3, 4), p.vocab.mask_id)
        x[0] = 0  # 10^8 completions
        with pytest.raises(CapacityError):
            oracle_predict(x, p, "enumerate")
        # the chain path has no budget
        assert oracle_predict(np.full((20, 4), p.vocab.mask_id), p).shape == (20, 4, 11)

    def test_ignores_t(self):
        p = process(0.1, n=2)
        x = np.array([[0, 1], [3, 3]])
        o = OraclePredictor(p)
        assert np.array_equal(o.predict(x, np.ones(2)), o.predict(x, np.zeros(2)))

    def test_rejects_bad_method(self):
        with pytest.raises(ValueError):
            OraclePredictor(process(), "magic")


class TestCounting:
    def test_counts_calls_not_rows(self):
        c = CountingPredictor(UniformPredictor(process().vocab))
        c.predict(np.zeros((2, 1)), np.zeros(2))
        c.predict(np.zeros((5, 2, 1)), np.zeros((5, 2)))
        assert c.count == 2
        assert c.reset() == 2 and c.count == 0

    def test_batch_predict_loops_for_unbatched_models(self):
        class Single:
            vocab = process().vocab

            def predict(self, x, t):
                assert x.ndim == 2
                return np.zeros(x.shape + (4,))

        assert batch_predict(Single(), np.zeros((3, 2, 1)), np.zeros((3, 2))).shape == (3, 2, 1, 4)

    def test_uniform_pins_visible(self):
        u = UniformPredictor(process().vocab)
        logits = u.predict(np.array([[1], [3]]))
        assert logits[0, 0].argmax() == 1
        assert logits[1, 0, 3] == LOGIT_FLOOR and np.all(logits[1, 0, :3] == 0)


class TestAnchors:
    def test_nearest_visible(self):
        M = 9
        x = np.array([[[M], [4], [M], [M], [7], [M]]])
        pt, pd, nt, nd = nearest_anchors(x, M)
        assert pt[0, :, 0].tolist() == [-1, -1, 4, 4, 4, 7]
        assert pd[0, :, 0].tolist() == [0, 0, 1, 2, 3, 1]
        assert nt[0, :, 0].tolist() == [4, 7, 7, 7, -1, -1]
        assert nd[0, :, 0].tolist() == [1, 3, 2, 1, 0, 0]

    def test_tabular_keys_distinct_by_anchor_and_distance(self):
        p = process(n=1)
        model = TabularPredictor(p.vocab, max_dist=4)
        M = p.vocab.mask_id
        keys = model.keys(np.array([[[0], [M], [M], [1], [M]]]))[0, :, 0]
        assert len({keys[1], keys[2], keys[4]}) == 3
        all_masked = model.keys(np.full((1, 3, 1), M))
        assert np.all(all_masked == model.num_keys - 1)


class TestTrainable:
    @pytest.mark.parametrize("cls", [TabularPredictor, MLPPredictor])
    def test_checkpoint_round_trip(self, cls, tmp_path):
        p = process(n=2)
        model = cls(p.vocab, seed=3) if cls is MLPPredictor else cls(p.vocab, init_scale=1.0, seed=3)
        model.save(tmp_path / "m.tvck", extra={"mode": "constant"})
        back = load_checkpoint(tmp_path / "m.tvck")
        assert back.kind == model.kind and back.config() == model.config()
        for name in model.params:
            assert back.params[name].dtype == np.float32
            assert np.array_equal(back.params[name], model.params[name])
        x = np.array([[[0, 1], [3, 3], [3, 2]]])
        t = np.array([[1.0, 0.3, 0.6]])
        assert np.array_equal(back.predict(x, t), model.predict(x, t))
        assert read_checkpoint_header(tmp_path / "m.tvck")["extra"]["mode"] == "constant"

    def test_checkpoint_rejects_garbage(self, tmp_path):
        (tmp_path / "bad").write_bytes(b"NOPE" + bytes(8))
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "bad")
        model = TabularPredictor(process().vocab)
        model.save(tmp_path / "m")
        (tmp_path / "long").write_bytes((tmp_path / "m").read_bytes() + b"\0\0\0\0")
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "long")

    @pytest.mark.parametrize("cls", [TabularPredictor, MLPPredictor])
    def test_single_and_batched_predict_agree(self, cls):
        p = process(n=2)
        model = cls(p.vocab, seed=1)
        x = np.array([[[0, 3], [3, 1]], [[3, 3], [2, 3]]])
        t = np.array([[1.0, 0.5], [0.2, 0.7]])
        batched = model.predict(x, t)
        for b in range(2):
            assert np.allclose(model.predict(x[b], t[b]), batched[b])

    def test_visible_positions_pinned(self):
        p = process(n=2)
        model = MLPPredictor(p.vocab, seed=0)
        x = np.array([[0, 3], [3, 2]])
        logits = model.predict(x, np.array([1.0, 0.5]))
        assert logits[0, 0].argmax() == 0 and logits[1, 1].argmax() == 2

    def test_mlp_depends_on_t(self):
        p = process(n=1)
        model = MLPPredictor(p.vocab, seed=0)
        x = np.array([[0], [3]])
        assert not np.allclose(model.predict(x, np.array([1.0, 0.1])),
                               model.predict(x, np.array([1.0, 0.9])))

    def test_timestep_embedding(self):
        e = timestep_embedding(np.array([0.0, 0.25]), 4)
        assert e.shape == (2, 4)
        assert np.allclose(e[0], [0, 0, 1, 1])

    def test_astype_is_a_copy(self):
        model = MLPPredictor(process().vocab)
        wide = model.astype(np.float64)
        wide.params["b1"][:] = 7
        assert wide.params["w1"].dtype == np.float64
        assert np.all(model.params["b1"] == 0) and model.params["w1"].dtype == np.float32
