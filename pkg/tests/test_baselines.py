"""Baseline interpolators: exactness, symmetry, convex-hull property."""

import numpy as np
import pytest
import scipy.sparse as sp

from pgkrig import baselines as b
from pgkrig.graphs import GeoAdjacency


class TestIdw:
    def test_coincident_target_returns_observed_value(self):
        obs_pos = np.array([[0.0, 0.0], [10.0, 0.0]])
        vals = np.array([[3.0, 7.0]])
        out = b.idw(vals, obs_pos, np.array([[10.0, 0.0]]))
        assert out[0, 0] == 7.0

    def test_equidistant_pair_averages(self):
        obs_pos = np.array([[0.0, 0.0], [10.0, 0.0]])
        vals = np.array([10.0, 20.0])
        out = b.idw(vals, obs_pos, np.array([[5.0, 0.0]]))
        assert out[0] == pytest.approx(15.0)

    def test_three_node_hand_computation(self):
        # target at origin; observed at distances 1, 2, 4 with p=2
        obs_pos = np.array([[1.0, 0.0], [0.0, 2.0], [4.0, 0.0]])
        vals = np.array([10.0, 20.0, 40.0])
        w = np.array([1.0, 1.0 / 4.0, 1.0 / 16.0])
        expected = float(np.sum(w * vals) / np.sum(w))
        out = b.idw(vals, obs_pos, np.array([[0.0, 0.0]]))
        assert out[0] == pytest.approx(expected)

    def test_power_changes_locality(self):
        obs_pos = np.array([[1.0, 0.0], [3.0, 0.0]])
        vals = np.array([0.0, 10.0])
        target = np.array([[0.0, 0.0]])
        near_heavy = b.idw(vals, obs_pos, target, power=6.0)[0]
        flat = b.idw(vals, obs_pos, target, power=0.5)[0]
        assert near_heavy < flat

    def test_no_observed_errors(self):
        with pytest.raises(b.BaselineError):
            b.idw(np.zeros((2, 0)), np.zeros((0, 2)), np.array([[0.0, 0.0]]))

    def test_nonpositive_power_errors(self):
        with pytest.raises(b.BaselineError):
            b.idw(np.array([1.0]), np.array([[0.0, 0.0]]), np.array([[1.0, 0.0]]), power=0.0)

    def test_per_timestep_independence(self):
        rng = np.random.default_rng(0)
        obs_pos = rng.uniform(0, 10, size=(4, 2))
        vals = rng.normal(size=(3, 4))
        targets = rng.uniform(0, 10, size=(2, 2))
        full = b.idw(vals, obs_pos, targets)
        for t in range(3):
            step = b.idw(vals[t], obs_pos, targets)
            np.testing.assert_allclose(full[t], step)


class TestNearest:
    def test_single_observed_fills_everything(self):
        out = b.nearest(np.array([4.2]), np.array([[0.0, 0.0]]),
                        np.array([[1.0, 1.0], [9.0, 9.0]]))
        np.testing.assert_array_equal(out, [4.2, 4.2])

    def test_picks_closest(self):
        obs_pos = np.array([[0.0, 0.0], [10.0, 0.0]])
        vals = np.array([1.0, 2.0])
        out = b.nearest(vals, obs_pos, np.array([[2.0, 0.0], [8.0, 0.0]]))
        np.testing.assert_array_equal(out, [1.0, 2.0])


class TestGraphMean:
    def _geo(self, w):
        return GeoAdjacency(weights=sp.csr_matrix(w), threshold_xi=10.0, sigma_sq=1.0)

    def test_symmetric_pair_midpoint_mean(self):
        # node 2 equally tied to observed 0 and 1
        w = np.zeros((3, 3))
        w[2, 0] = w[0, 2] = 0.5
        w[2, 1] = w[1, 2] = 0.5
        out = b.graph_mean(np.array([10.0, 20.0]), self._geo(w),
                           observed_ids=np.array([0, 1]), target_ids=np.array([2]))
        assert out[0] == pytest.approx(15.0)

    def test_weighted_neighbors(self):
        w = np.zeros((3, 3))
        w[2, 0] = w[0, 2] = 3.0
        w[2, 1] = w[1, 2] = 1.0
        out = b.graph_mean(np.array([0.0, 8.0]), self._geo(w),
                           observed_ids=np.array([0, 1]), target_ids=np.array([2]))
        assert out[0] == pytest.approx((3.0 * 0.0 + 1.0 * 8.0) / 4.0)

    def test_isolated_target_global_mean_fallback(self):
        w = np.zeros((3, 3))
        out = b.graph_mean(np.array([[2.0, 4.0], [10.0, 30.0]]), self._geo(w),
                           observed_ids=np.array([0, 1]), target_ids=np.array([2]))
        np.testing.assert_allclose(out[:, 0], [3.0, 20.0])

    def test_no_observed_errors(self):
        with pytest.raises(b.BaselineError):
            b.graph_mean(np.zeros((2, 0)), self._geo(np.zeros((2, 2))),
                         observed_ids=np.array([], dtype=int), target_ids=np.array([0]))


class TestConvexHull:
    def test_all_baselines_stay_in_observed_range(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            k, mt, t = 5, 4, 3
            obs_pos = rng.uniform(0, 50, size=(k, 2))
            tgt_pos = rng.uniform(0, 50, size=(mt, 2))
            vals = rng.normal(10.0, 5.0, size=(t, k))
            lo, hi = vals.min(), vals.max()
            for est in (b.idw(vals, obs_pos, tgt_pos),
                        b.nearest(vals, obs_pos, tgt_pos)):
                assert np.all(est >= lo - 1e-12) and np.all(est <= hi + 1e-12)
            w = rng.random((k + mt, k + mt)) * (rng.random((k + mt, k + mt)) < 0.4)
            w = np.triu(w, 1)
            w = w + w.T
            gm = b.graph_mean(vals, GeoAdjacency(sp.csr_matrix(w), 10.0, 1.0),
                              observed_ids=np.arange(k),
                              target_ids=np.arange(k, k + mt))
            assert np.all(gm >= lo - 1e-12) and np.all(gm <= hi + 1e-12)
