import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from condalign import theory as th

LOG4 = math.log(4.0)


def _random_joint(rng, b, k=2):
    m = rng.dirichlet(np.ones(b * k), size=2).T.reshape(b, k, 2)
    return th.DiscreteJoint(m / m.sum(axis=(0, 1), keepdims=True))


class TestWeightedLogMinimizer:
    def test_examples(self):
        np.testing.assert_allclose(th.lemma1_minimizer([1, 1]), [0.5, 0.5])
        np.testing.assert_allclose(th.lemma1_minimizer([1, 3]), [0.25, 0.75])

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            th.lemma1_minimizer([1.0, 0.0])

    def test_numeric_agrees(self):
        rng = np.random.default_rng(0)
        for i in range(10):
            alpha = rng.uniform(0.05, 5, rng.integers(2, 9))
            gap = np.abs(th.lemma1_minimizer(alpha) - th.lemma1_numeric(alpha, seed=i)).max()
            assert gap <= 1e-6

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(0.01, 100), min_size=2, max_size=8))
    def test_fixed_point_of_projected_gradient(self, alpha):
        alpha = np.array(alpha)
        theta = th.lemma1_minimizer(alpha)
        assert abs(theta.sum() - 1) <= 1e-12 and np.all(theta >= 0)
        grad = -alpha / theta
        np.testing.assert_allclose(grad, grad.mean(), rtol=1e-9)
        np.testing.assert_allclose(th.project_simplex(theta - 1e-3 * grad), theta, atol=1e-12)


class TestDomainConfusionObjective:
    def test_equal_is_log4(self):
        for p in ([0.2, 0.3, 0.5], [1.0, 0.0], np.full(7, 1 / 7)):
            assert abs(th.lemma2_objective(p, p) - LOG4) <= 1e-9

    def test_disjoint_blows_up(self):
        assert th.lemma2_objective([1, 0], [0, 1]) >= 20

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            th.lemma2_objective([0.5, 0.5], [1, 0, 0])

    def test_grid_minimum_at_p(self):
        rng = np.random.default_rng(1)
        for _ in range(3):
            p = rng.dirichlet(np.ones(3))
            q, v = th.lemma2_grid_search(p, step=0.02)
            assert np.abs(q - p).max() <= 0.02
            assert abs(v - LOG4) <= 5e-3

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(0.01, 1), min_size=3, max_size=3), st.lists(st.floats(0.01, 1), min_size=3, max_size=3))
    def test_symmetric_and_bounded(self, a, b):
        p, q = np.array(a) / sum(a), np.array(b) / sum(b)
        assert th.lemma2_objective(p, q) == pytest.approx(th.lemma2_objective(q, p), rel=1e-12)
        assert th.lemma2_objective(p, q) >= LOG4 - 1e-12

    def test_grid_search_agrees_with_pointwise_objective(self):
        p = np.array([0.05, 0.7, 0.25])
        grid = th.simplex_grid(3, 0.05)
        vals = [th.lemma2_objective(p, q) for q in grid]
        q, v = th.lemma2_grid_search(p, step=0.05)
        assert v == pytest.approx(min(vals), rel=1e-14)
        np.testing.assert_array_equal(q, grid[int(np.argmin(vals))])

    def test_simplex_grid(self):
        g = th.simplex_grid(3, 0.5)
        assert len(g) == 6
        np.testing.assert_allclose(g.sum(1), 1.0)


class TestOptimalJointPredictor:
    def test_single_bin_shared_class(self):
        dj = th.DiscreteJoint.from_tables([[1.0, 0.0]], [[1.0, 0.0]])
        np.testing.assert_allclose(th.prop1_optimal_predictor(dj), [[0.5, 0, 0.5, 0]])

    def test_source_only_bin(self):
        dj = th.DiscreteJoint.from_tables([[0.3, 0.2], [0.5, 0.0]], [[0.6, 0.4], [0.0, 0.0]])
        h = th.prop1_optimal_predictor(dj)
        assert np.all(h[1, 2:] == 0)

    def test_rows_and_zero_entries(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            m = rng.dirichlet(np.ones(8), size=2).T.reshape(4, 2, 2)
            m[rng.integers(0, 4), rng.integers(0, 2), rng.integers(0, 2)] = 0.0
            dj = th.DiscreteJoint(m / m.sum(axis=(0, 1), keepdims=True))
            h = th.prop1_optimal_predictor(dj)
            np.testing.assert_allclose(h.sum(1), 1.0, atol=1e-12)
            zero = np.concatenate([dj.source, dj.target], axis=1) == 0
            assert np.all(h[zero] == 0)

    def test_empty_bin_rejected(self):
        with pytest.raises(ValueError):
            th.prop1_optimal_predictor(th.DiscreteJoint.from_tables([[1, 0], [0, 0]], [[0.5, 0.5], [0, 0]]))

    def test_gradient_descent_reaches_closed_form(self):
        dj = _random_joint(np.random.default_rng(7), 4)
        fit = th.prop1_gradient_fit(dj, seed=0)
        assert np.abs(fit - th.prop1_optimal_predictor(dj)).max() <= 1e-4

    def test_domain_masses_validated(self):
        with pytest.raises(ValueError):
            th.DiscreteJoint(np.full((2, 2, 2), 0.3))


class TestAlignedDisjointMinimum:
    def test_aligned_disjoint_value(self):
        for k in (2, 3, 5):
            dj = th.aligned_disjoint_instance(k, k, seed=k)
            res = th.theorem1_check(dj)
            assert res["aligned"] and res["disjoint"]
            assert res["encoder_objective"] == pytest.approx(2 * math.log(2), abs=1e-12)

    def test_class_swapped_target_not_aligned(self):
        dj = th.DiscreteJoint.from_tables([[0.5, 0.0], [0.0, 0.5]], [[0.0, 0.5], [0.5, 0.0]])
        assert not th.theorem1_check(dj)["aligned"]

    def test_overlap_not_disjoint(self):
        dj = th.DiscreteJoint.from_tables([[0.25, 0.25], [0.5, 0.0]], [[0.25, 0.25], [0.5, 0.0]])
        res = th.theorem1_check(dj)
        assert res["aligned"] and not res["disjoint"]

    def test_perturbations_increase_objective(self):
        dj = th.aligned_disjoint_instance(3, 2, seed=1)
        base = th.encoder_objective(dj)
        deltas = [th.encoder_objective(p) - base for _, p in th.mass_perturbations(dj)]
        assert len(deltas) >= 50 and min(deltas) > 0

    def test_perturbations_move_mass_only(self):
        dj = th.aligned_disjoint_instance(2, 2, seed=0)
        for (dom, c, sb, db, frac), p in th.mass_perturbations(dj, fractions=[0.1]):
            np.testing.assert_allclose(p.mass[:, :, 1 - dom], dj.mass[:, :, 1 - dom])
            np.testing.assert_allclose(p.mass[:, :, dom].sum(0), dj.mass[:, :, dom].sum(0), atol=1e-12)


class TestHDivergence:
    def test_identical_distributions(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(500, 2)), rng.normal(size=(500, 2))
        assert th.h_divergence_proxy(a, b, seed=0) <= 0.15

    def test_separable(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(300, 2))
        assert th.h_divergence_proxy(a, a + [10.0, 0.0], seed=0) >= 1.8

    def test_matches_threshold_scan_in_1d(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(0, 1, (2000, 1)), rng.normal(2, 1, (2000, 1))
        best = th.threshold_scan_divergence(a, b, resolution=0.001)
        assert abs(th.h_divergence_proxy(a, b, seed=0) - best) <= 0.15

    def test_affine_invariance(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(0, 1, (600, 2)), rng.normal(0.8, 1, (600, 2))
        A = np.array([[2.0, 0.5], [-1.0, 3.0]])
        base = th.h_divergence_proxy(a, b, seed=0)
        moved = th.h_divergence_proxy(a @ A.T + 5, b @ A.T + 5, seed=0)
        assert abs(base - moved) <= 0.1

    def test_range_and_errors(self):
        rng = np.random.default_rng(4)
        v = th.h_divergence_proxy(rng.normal(size=(20, 3)), rng.normal(size=(20, 3)), seed=1, steps=50)
        assert 0.0 <= v <= 2.0
        with pytest.raises(ValueError):
            th.h_divergence_proxy(np.zeros((3, 2)), np.zeros((10, 2)))


class TestBinning:
    def test_kmeans_recovers_clusters(self):
        rng = np.random.default_rng(0)
        centres = np.array([[0, 0], [10, 0], [0, 10]])
        pts = np.vstack([c + rng.normal(0, 0.1, (50, 2)) for c in centres])
        found = th.kmeans(pts, m=3, seed=1)
        d = np.linalg.norm(found[:, None] - centres[None], axis=-1).min(1)
        assert d.max() < 0.1

    def test_discretize_masses(self):
        rng = np.random.default_rng(0)
        zs, zt = rng.normal(size=(40, 3)), rng.normal(size=(30, 3))
        dj = th.discretize(zs, np.arange(40) % 2, zt, np.arange(30) % 2, m=5, seed=0)
        np.testing.assert_allclose(dj.mass.sum(axis=(0, 1)), 1.0, atol=1e-12)
        assert dj.n_classes == 2 and dj.n_bins <= 5


class TestOracleSuite:
    def test_records_pass_and_serialise(self):
        recs = th.run_oracle_suite(seed=0, instances=1)
        assert {r.check for r in recs} == {"lemma1_minimizer", "lemma2_objective", "prop1_optimal_predictor",
                                           "theorem1_local_minimum"}
        for r in recs:
            doc = json.loads(r.to_json())
            assert set(doc) == {"check", "inputs_digest", "value", "pass", "tolerance"}
            assert doc["pass"] is True
