import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kpopt.datagen import generate_dataset
from kpopt.detector import DetectionArrays, DifficultyProfile, KeypointDifficulty, fit_detector
from kpopt.optimizer import (WEIGHT_FLOOR, EvaluationError, OptimizationConfig, QuotaError, WeightVector,
                             apply_floor, candidate_groups, evaluate_performance, optimize, sample_keypoints,
                             update_weights)

pos_weights = st.lists(st.floats(1e-6, 10.0), min_size=2, max_size=12)


def sequential_set_probability(w, subset):
    """Probability that sequential proportional draws produce ``subset`` in any order."""
    total = 0.0
    for order in itertools.permutations(subset):
        p, left = 1.0, sum(w)
        for i in order:
            p *= w[i] / left
            left -= w[i]
        total += p
    return total


class TestSampling:
    def test_full_set(self):
        W = WeightVector.uniform(range(4))
        assert sorted(sample_keypoints(W, 4, rng=np.random.default_rng(0))) == [0, 1, 2, 3]

    def test_singleton_group(self):
        W = WeightVector.uniform(range(4))
        groups = {"a": [0], "b": [1, 2, 3]}
        for s in range(50):
            assert sample_keypoints(W, 2, groups, np.random.default_rng(s))[0] == 0

    def test_first_pick_frequencies(self):
        W = WeightVector((0, 1, 2), np.array([2.0, 1.0, 1.0]))
        rng = np.random.default_rng(1)
        picks = np.array([sample_keypoints(W, 1, rng=rng)[0] for _ in range(30000)])
        np.testing.assert_allclose(np.bincount(picks) / len(picks), [0.5, 0.25, 0.25], atol=0.02)

    def test_pair_frequencies_match_sequential_rule(self):
        w = [3.0, 1.0, 1.0, 0.5]
        W = WeightVector(tuple(range(4)), np.array(w))
        rng = np.random.default_rng(2)
        counts = {}
        n = 20000
        for _ in range(n):
            s = tuple(sorted(sample_keypoints(W, 2, rng=rng)))
            counts[s] = counts.get(s, 0) + 1
        for pair in itertools.combinations(range(4), 2):
            assert counts.get(pair, 0) / n == pytest.approx(sequential_set_probability(w, pair), abs=0.015)

    @given(pos_weights, st.integers(1, 12), st.integers(0, 2**32))
    def test_distinct_ids(self, w, K, seed):
        K = min(K, len(w))
        W = WeightVector(tuple(range(10, 10 + len(w))), np.array(w))
        s = sample_keypoints(W, K, rng=np.random.default_rng(seed))
        assert len(set(s)) == K and set(s) <= set(W.ids)

    def test_per_group_quotas(self):
        W = WeightVector.uniform(range(6))
        groups = {"a": [0, 1, 2], "b": [3, 4, 5]}
        s = sample_keypoints(W, 3, groups, np.random.default_rng(3), quotas={"a": 2, "b": 1})
        assert len([i for i in s if i < 3]) == 2 and len([i for i in s if i >= 3]) == 1

    @pytest.mark.parametrize("K,quotas", [(3, None), (4, {"a": 4, "b": 0})])
    def test_infeasible_quota(self, K, quotas):
        W = WeightVector.uniform(range(6))
        with pytest.raises(QuotaError):
            sample_keypoints(W, K, {"a": [0, 1, 2], "b": [3, 4, 5]}, np.random.default_rng(0), quotas)

    def test_global_too_many(self):
        with pytest.raises(QuotaError):
            sample_keypoints(WeightVector.uniform(range(3)), 4, rng=np.random.default_rng(0))

    def test_groups_require_labels(self, planar):
        assert candidate_groups(planar[1]) == {"link2": [0], "tip": [1]}


class TestUpdate:
    def test_equal_losses(self):
        W = WeightVector((0, 1, 2, 3), np.array([0.1, 0.2, 0.3, 0.4]))
        out = update_weights(W, (1, 3), [2.0, 2.0], 1.0)
        np.testing.assert_allclose(out.w, [0.1, 0.3, 0.3, 0.3], rtol=1e-15)

    def test_hand_evaluation(self):
        W = WeightVector((0, 1, 2), np.array([0.25, 0.25, 0.5]))
        out = update_weights(W, (0, 1), [0.0, math.log(3)], 1.0)
        np.testing.assert_allclose(out.w, [0.375, 0.125, 0.5], rtol=1e-14)

    def test_small_gamma_limit(self):
        W = WeightVector((0, 1), np.array([0.2, 0.8]))
        out = update_weights(W, (0, 1), [0.0, 100.0], 1e-12)
        np.testing.assert_allclose(out.w, [0.5, 0.5], rtol=1e-9)

    def test_overflow_guard(self):
        W = WeightVector.uniform(range(3))
        out = update_weights(W, (0, 1, 2), [1e6, 1e6 + 1, 1e6 + 2], 10.0)
        assert np.all(np.isfinite(out.w)) and out.w.sum() == pytest.approx(1.0, abs=1e-12)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            update_weights(WeightVector.uniform(range(2)), (0, 1), [1.0, math.nan], 1.0)

    @settings(max_examples=200)
    @given(pos_weights, st.data(), st.floats(1e-3, 10.0))
    def test_invariants(self, w, data, gamma):
        ids = tuple(range(len(w)))
        W = WeightVector(ids, np.array(w))
        sel = data.draw(st.lists(st.sampled_from(ids), min_size=1, unique=True))
        losses = np.array(data.draw(st.lists(st.floats(0, 50), min_size=len(sel), max_size=len(sel))))
        out = update_weights(W, sel, losses, gamma)
        assert abs(out.w.sum() - W.w.sum()) <= 1e-12 * max(1.0, W.w.sum())
        others = [i for i in ids if i not in sel]
        np.testing.assert_array_equal(out.w[others], W.w[others])
        new = out.w[list(sel)]
        for a, b in itertools.combinations(range(len(sel)), 2):
            if losses[a] < losses[b] and gamma * (losses[b] - losses[a]) > 1e-9:
                assert new[a] > new[b]
        assert np.all(apply_floor(out).w >= WEIGHT_FLOOR)

    def test_uniform_loss_fixpoint(self):
        W = WeightVector.uniform(range(5))
        out = update_weights(W, (0, 1, 2, 3, 4), np.full(5, 7.0), 1.0)
        np.testing.assert_array_equal(out.w, W.w)


@pytest.fixture(scope="module")
def noiseless(tool_scenario):
    sc = tool_scenario
    ds = generate_dataset(sc.chain, sc.camera, sc.candidates, sc.randomization, 20, 20, 2)
    prof = DifficultyProfile({k.id: KeypointDifficulty(0.0) for k in sc.candidates})
    return ds, prof


SET7 = (0, 5, 9, 14, 19, 24, 30)


class TestEvaluate:
    def test_noiseless_detector(self, noiseless):
        ds, prof = noiseless
        m = fit_detector(prof, SET7, ds)
        ev = evaluate_performance(SET7, m, ds, 50.0, np.random.default_rng(0))
        np.testing.assert_array_equal(ev.loss_2d, 0.0)
        assert np.all(ev.loss_3d < 1e-6)
        assert ev.pnp_ok.any()

    def test_lambda_zero(self, noiseless):
        ds, _ = noiseless
        prof = DifficultyProfile({k.id: KeypointDifficulty(3.0) for k in ds.candidates})
        m = fit_detector(prof, SET7, ds)
        ev = evaluate_performance(SET7, m, ds, 0.0, np.random.default_rng(1))
        np.testing.assert_array_equal(ev.loss_total, ev.loss_2d)

    def test_total_combines_losses(self, noiseless):
        ds, _ = noiseless
        prof = DifficultyProfile({k.id: KeypointDifficulty(3.0) for k in ds.candidates})
        m = fit_detector(prof, SET7, ds)
        ev = evaluate_performance(SET7, m, ds, 50.0, np.random.default_rng(1))
        np.testing.assert_allclose(ev.loss_total, ev.loss_2d + 50.0 * ev.loss_3d, rtol=1e-15)

    def _one_sample_detections(self, ds, offset):
        sid = ds.test_ids[0]
        truth = ds.sample(sid).pixels[[ds.index_of[k] for k in SET7]]
        uv = (truth + offset)[None]
        return sid, DetectionArrays(SET7, (sid,), uv, np.ones((1, 7)), np.ones((1, 7), bool))

    def test_pythagorean_offset(self, noiseless):
        ds, prof = noiseless
        sid, det = self._one_sample_detections(ds, [3.0, 4.0])
        one = type(ds)(ds.samples, tuple(i for i in ds.train_ids + ds.test_ids if i != sid), (sid,), ds.chain,
                       ds.camera, ds.candidates)
        if not np.all(np.isfinite(det.uv)):
            pytest.skip("a keypoint is behind the camera in this sample")
        ev = evaluate_performance(SET7, fit_detector(prof, SET7, one), one, 0.0, detections=det)
        np.testing.assert_allclose(ev.loss_2d, 5.0)

    def test_all_samples_skipped(self, noiseless):
        ds, prof = noiseless
        sel = SET7[:3]
        with pytest.raises(EvaluationError):
            evaluate_performance(sel, fit_detector(prof, sel, ds), ds, 1.0, np.random.default_rng(0))

    def test_threads_agree(self, small_tool_dataset, tool_scenario):
        ds = small_tool_dataset
        m = fit_detector(tool_scenario.profile, SET7, ds)
        a = evaluate_performance(SET7, m, ds, 50.0, np.random.default_rng(5), threads=1)
        b = evaluate_performance(SET7, m, ds, 50.0, np.random.default_rng(5), threads=4)
        np.testing.assert_allclose(a.loss_total, b.loss_total, rtol=1e-9)


class TestOptimize:
    def test_single_possible_set(self, noiseless, tool_scenario):
        ds, prof = noiseless
        cands = [k for k in tool_scenario.candidates if k.id in SET7]
        res = optimize(cands, ds.chain, ds.camera, prof, ds, OptimizationConfig(K=7, T=2, constraint="global"))
        assert res.best_set == tuple(sorted(SET7))
        assert res.history[0].selected and sorted(res.history[0].selected) == sorted(SET7)

    def test_history_invariants_and_determinism(self, small_tool_dataset, tool_scenario):
        sc, ds = tool_scenario, small_tool_dataset
        cfg = OptimizationConfig(K=7, T=6, seed=3)
        a = optimize(sc.candidates, sc.chain, sc.camera, sc.profile, ds, cfg)
        b = optimize(sc.candidates, sc.chain, sc.camera, sc.profile, ds, cfg)
        assert a.to_dict() == b.to_dict()
        errs = [h.mean_error for h in a.history]
        assert a.best_error == min(errs)
        assert a.best_set == tuple(sorted(a.history[int(np.argmin(errs))].selected))
        best = a.best_so_far()
        assert all(x >= y for x, y in zip(best, best[1:]))
        groups = candidate_groups(sc.candidates)
        for h in a.history:
            assert sorted(len(set(h.selected) & set(m)) for m in groups.values()) == [1] * 7
            w = np.array(list(h.weights.values()))
            assert np.all(w >= WEIGHT_FLOOR)

    def test_every_iteration_failing(self, noiseless, tool_scenario):
        ds, prof = noiseless
        cfg = OptimizationConfig(K=3, T=2, lam=1.0, constraint="global")
        with pytest.raises(EvaluationError):
            optimize(tool_scenario.candidates, ds.chain, ds.camera, prof, ds, cfg)

    def test_config_validation(self):
        for kw in ({"K": 0}, {"K": 3, "T": 0}, {"K": 3, "gamma": 0}, {"K": 3, "lam": -1},
                   {"K": 3, "constraint": "sometimes"}):
            with pytest.raises(ValueError):
                OptimizationConfig(**kw)

    def test_outputs(self, small_tool_dataset, tool_scenario, tmp_path):
        sc = tool_scenario
        res = optimize(sc.candidates, sc.chain, sc.camera, sc.profile, small_tool_dataset,
                       OptimizationConfig(K=7, T=3))
        res.write_convergence_csv(tmp_path / "c.csv")
        lines = (tmp_path / "c.csv").read_text().splitlines()
        assert lines[0] == "iteration,mean_error,best_error" and len(lines) == 4
        res.save(tmp_path / "r.json")
        assert (tmp_path / "r.json").read_text().endswith("\n")
