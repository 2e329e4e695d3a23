import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tokvid.nfe import num_chunks, plan_nfe, predicted_nfe
from tokvid.predictors import CountingPredictor, OraclePredictor, UniformPredictor
from tokvid.rollout import (PlanError, RolloutError, autoregressive_mode, full_sequence_mode,
                            plan_chunks, rollout_video)
from tokvid.samplers import SamplerConfig, sample_chunk
from tokvid.synthetic import SyntheticProcess, gen_video
from tokvid.types import Vocabulary

VOCAB = Vocabulary(4)


def as_tuples(plan):
    return [(st.context_start, st.m, st.h) for st in plan.steps]


class TestPlan:
    def test_single_chunk(self):
        plan = plan_chunks(16, 16, 2, 14)
        assert as_tuples(plan) == [(0, 2, 14)]

    def test_two_x_trace(self):
        plan = plan_chunks(32, 16, 2, 14)
        # c=2 h=14; c=16 h=14; final R=2 widens context to 14
        assert as_tuples(plan) == [(0, 2, 14), (14, 2, 14), (16, 14, 2)]
        assert len(plan) == num_chunks(32, 16, 14) == 3

    def test_ar_trace_matches_table_count(self):
        m, s = autoregressive_mode(36)
        plan = plan_chunks(72, 36, m, s)
        assert len(plan) == 37
        assert plan_nfe("mgm", plan, 20, tokens_per_frame=1024) == 740

    def test_trace_differs_from_ell_when_stride_short(self):
        # stride 1 with m=12 leaves 60 single-frame chunks; the ell formula counts 37
        plan = plan_chunks(72, 36, 12, 1)
        assert len(plan) == 60
        assert num_chunks(72, 36, 1) == 37
        assert predicted_nfe("mgm", 72, 36, 12, 1) == 740
        assert plan_nfe("mgm", plan, 20, tokens_per_frame=1024) == 1200

    @pytest.mark.parametrize("L,k,m,s", [(10, 4, 1, 4), (1, 4, 1, 1), (10, 4, 0, 1),
                                         (10, 4, 4, 1), (10, 4, 1, 0)])
    def test_infeasible(self, L, k, m, s):
        with pytest.raises(PlanError):
            plan_chunks(L, k, m, s)

    def test_plan_invariants_exhaustive(self):
        cases = 0
        for k in range(2, 14):
            for m in range(1, k):
                for s in range(1, k - m + 1):
                    for L in range(m + 1, m + 50):
                        plan = plan_chunks(L, k, m, s)
                        cases += 1
                        assert sum(st.h for st in plan.steps) == L - m
                        assert all(st.h >= 1 and st.m + st.h <= k for st in plan.steps)
                        c = m
                        for st in plan.steps:
                            assert st.context_start + st.m == c
                            c += st.h
                        last = plan.steps[-1]
                        R = L - (last.context_start + last.m)
                        if R <= s and last.context_start > 0:
                            assert last.m == k - R
                        if s == k - m and L >= k:
                            assert len(plan) == num_chunks(L, k, s)
        assert cases >= 10**4

    def test_modes(self):
        assert autoregressive_mode(16) == (15, 1)
        assert full_sequence_mode(16, 2) == (2, 14)
        assert full_sequence_mode(36, 12) == (12, 24)
        with pytest.raises(PlanError):
            autoregressive_mode(1)
        with pytest.raises(PlanError):
            full_sequence_mode(4, 4)


class TestRollout:
    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 7), st.integers(0, 2**32 - 1), st.sampled_from(["mgm", "fm", "df"]))
    def test_exact_length_and_overlap(self, k, seed, mode):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(1, k))
        s = int(rng.integers(1, k - m + 1))
        L = int(rng.integers(m + 1, 5 * k))
        ctx = rng.integers(0, 3, size=(m, 2))
        res = rollout_video(UniformPredictor(VOCAB), SamplerConfig(mode, steps=3), ctx, L, k, s,
                            VOCAB, rng)
        assert res.video.length == L
        assert np.array_equal(res.video.frames[:m], ctx)
        assert not np.any(res.video.frames == VOCAB.mask_id)
        for st_, ctx_used in zip(res.plan.steps, res.contexts):
            assert np.array_equal(ctx_used,
                                  res.video.frames[st_.context_start:st_.context_start + st_.m])

    def test_single_step_equals_one_sampler_call(self):
        ctx = np.array([[0, 1]])
        cfg = SamplerConfig("mgm", steps=4)
        res = rollout_video(UniformPredictor(VOCAB), cfg, ctx, 4, 4, 3, VOCAB,
                            np.random.default_rng(9))
        direct = sample_chunk(UniformPredictor(VOCAB), ctx, 4, cfg, VOCAB,
                              np.random.default_rng(9))
        assert np.array_equal(res.video.frames, direct)

    def test_oracle_ten_x_exact(self):
        p = SyntheticProcess(num_data=3, tokens_per_frame=2)
        truth = gen_video(p, 40, np.random.default_rng(0))
        res = rollout_video(OraclePredictor(p), SamplerConfig("mgm"), truth.frames[:1], 40, 4, 3,
                            p.vocab, np.random.default_rng(1))
        assert res.video == truth

    def test_ffs_shaped_mgm_count(self):
        c = CountingPredictor(UniformPredictor(VOCAB))
        res = rollout_video(c, SamplerConfig("mgm"), np.zeros((2, 32)), 160, 16, 14, VOCAB,
                            np.random.default_rng(0))
        assert len(res.plan) == 12 and c.count == 240

    def test_rolling_dispatch(self):
        c = CountingPredictor(UniformPredictor(VOCAB))
        res = rollout_video(c, SamplerConfig("rolling", steps=10), np.zeros((2, 1)), 20, 16, 14,
                            VOCAB, np.random.default_rng(0))
        assert res.video.length == 20 and c.count == 10 + 4 * 1 + 10

    def test_failure_carries_chunk_index(self):
        class Flaky(UniformPredictor):
            calls = 0

            def predict(self, x, t=None):
                Flaky.calls += 1
                if Flaky.calls > 3:
                    raise FloatingPointError("boom")
                return super().predict(x, t)

        with pytest.raises(RolloutError) as info:
            rollout_video(Flaky(VOCAB), SamplerConfig("mgm", steps=3), np.zeros((1, 8)), 10, 4,
                          3, VOCAB, np.random.default_rng(0))
        assert info.value.chunk_index == 1
        assert isinstance(info.value.__cause__, FloatingPointError)

    def test_infeasible_fails_before_model_calls(self):
        c = CountingPredictor(UniformPredictor(VOCAB))
        with pytest.raises(PlanError):
            rollout_video(c, SamplerConfig("mgm"), np.zeros((2, 1)), 10, 4, 3, VOCAB,
                          np.random.default_rng(0))
        assert c.count == 0
