import math

import numpy as np
import pytest

from helpers import brute_force_assignment, random_box
from tubeground import geometry
from tubeground.assignment import build_link_cost, build_train_cost, solve_assignment


class TestSolver:
    def test_two_by_two(self):
        a = solve_assignment([[1.0, 2.0], [2.0, 1.0]])
        assert a.pairs() == [(0, 0), (1, 1)]
        assert a.total == 2.0

    def test_zero_diagonal_forced(self):
        c = np.full((4, 4), 100.0)
        np.fill_diagonal(c, 0.0)
        a = solve_assignment(c)
        assert a.pairs() == [(0, 0), (1, 1), (2, 2), (3, 3)]
        assert a.total == 0.0

    def test_rectangular(self):
        a = solve_assignment([[1.0, 0.0, 2.0], [0.0, 1.0, 2.0]])
        assert a.pairs() == [(0, 1), (1, 0)]
        assert a.total == 0.0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            m = int(rng.integers(1, 7))
            n = int(rng.integers(1, 7))
            cost = rng.uniform(0, 10, size=(m, n))
            got = solve_assignment(cost)
            want_pairs, want_total = brute_force_assignment(cost)
            assert got.total == want_total
            assert got.pairs() == want_pairs

    def test_lexicographic_tie_break(self):
        # every matching of this matrix costs 2; the row-sorted pairing
        # (0,0),(1,1) is the lexicographically smallest optimum
        a = solve_assignment(np.ones((2, 2)))
        assert a.pairs() == [(0, 0), (1, 1)]
        # all-equal rectangular case, skipping a row is allowed
        b = solve_assignment(np.ones((3, 2)))
        assert b.pairs() == [(0, 0), (1, 1)]
        # crafted tie: two optimal pairings, prefer column 0 for row 0
        c = solve_assignment([[1.0, 1.0], [1.0, 1.0], [0.0, 3.0]])
        want_pairs, want_total = brute_force_assignment([[1.0, 1.0], [1.0, 1.0], [0.0, 3.0]])
        assert c.total == want_total
        assert c.pairs() == want_pairs

    def test_valid_partial_bijection_and_total(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            m = int(rng.integers(1, 9))
            n = int(rng.integers(1, 9))
            cost = rng.normal(size=(m, n))
            a = solve_assignment(cost)
            assert len(a.rows) == min(m, n)
            assert len(set(a.rows.tolist())) == len(a.rows)
            assert len(set(a.cols.tolist())) == len(a.cols)
            assert a.total == math.fsum(cost[r, c] for r, c in a.pairs())

    def test_transpose_has_same_optimal_value(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            cost = rng.uniform(0, 5, size=(int(rng.integers(2, 7)), int(rng.integers(2, 7))))
            assert solve_assignment(cost).total == pytest.approx(solve_assignment(cost.T).total, abs=1e-12)

    def test_row_shift_changes_cost_by_constant(self):
        rng = np.random.default_rng(3)
        cost = rng.uniform(0, 5, size=(4, 4))
        base = solve_assignment(cost)
        shifted = cost.copy()
        shifted[2] += 3.5
        after = solve_assignment(shifted)
        assert after.total == pytest.approx(base.total + 3.5, abs=1e-12)
        assert after.pairs() == base.pairs()

    def test_negative_entries_accepted(self):
        a = solve_assignment([[-1.0, 0.0], [0.0, -1.0]])
        assert a.pairs() == [(0, 0), (1, 1)]
        assert a.total == -2.0

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            solve_assignment(np.zeros((0, 3)))
        with pytest.raises(ValueError):
            solve_assignment([[np.inf, 1.0]])


class TestTrainCost:
    def test_perfect_prediction_zero_entry(self):
        gt_box = np.array([0.5, 0.5, 0.2, 0.2])
        boxes = np.tile(gt_box, (2, 3, 1))
        probs = np.zeros((2, 3, 5))
        probs[:, :, 1] = 1.0
        cost = build_train_cost(boxes, probs, np.tile(gt_box, (1, 2, 1)), np.array([1]))
        assert cost.shape == (3, 1)
        np.testing.assert_allclose(cost[0, 0], 0.0, atol=1e-12)

    def test_hand_computed_entry(self):
        # L1 = 4 * 0.5 = 2, confidence 0, GIoU from the geometry module
        pred = np.array([0.2, 0.2, 0.1, 0.1])
        gt = np.array([0.7, 0.7, 0.6, 0.6])
        boxes = pred[None, None, :]
        probs = np.zeros((1, 1, 4))
        probs[0, 0, 3] = 1.0  # all mass on a different slot
        cost = build_train_cost(boxes, probs, gt[None, None, :], np.array([0]))
        g = float(geometry.generalized_box_iou(
            geometry.box_cxcywh_to_xyxy(pred), geometry.box_cxcywh_to_xyxy(gt)
        ))
        want = 5.0 * 2.0 + 3.0 * (1.0 - g) + 1.0 * 1.0
        np.testing.assert_allclose(cost[0, 0], want, rtol=1e-12)

    def test_entries_finite_nonnegative(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            n_q, n_gt, f = 5, 3, 4
            boxes = np.stack([[random_box(rng) for _ in range(n_q)] for _ in range(f)])
            probs = rng.dirichlet(np.ones(6), size=(f, n_q))
            gt = np.stack([[random_box(rng) for _ in range(f)] for _ in range(n_gt)])
            cost = build_train_cost(boxes, probs, gt, rng.integers(0, 5, size=n_gt))
            assert np.isfinite(cost).all()
            assert (cost >= 0).all()

    def test_more_targets_than_queries_rejected(self):
        with pytest.raises(ValueError):
            build_train_cost(
                np.zeros((1, 2, 4)), np.full((1, 2, 3), 1 / 3),
                np.zeros((3, 1, 4)), np.array([0, 0, 0]),
            )


class TestLinkCost:
    def test_identical_candidates_zero(self):
        boxes = np.array([[0.5, 0.5, 0.2, 0.2], [0.3, 0.3, 0.1, 0.1]])
        dists = np.array([[1.0, 0.0], [0.0, 1.0]])
        cost = build_link_cost(boxes, dists, boxes, dists)
        np.testing.assert_allclose(np.diag(cost), 0.0, atol=1e-12)

    def test_disjoint_boxes_disjoint_onehots(self):
        a = np.array([[0.1, 0.1, 0.1, 0.1]])
        b = np.array([[0.9, 0.9, 0.1, 0.1]])
        da = np.array([[1.0, 0.0]])
        db = np.array([[0.0, 1.0]])
        np.testing.assert_allclose(build_link_cost(a, da, b, db), [[2.0]])

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(5)
        n_q = 4
        boxes_a = np.stack([random_box(rng) for _ in range(n_q)])
        boxes_b = np.stack([random_box(rng) for _ in range(n_q)])
        dists_a = rng.dirichlet(np.ones(5), size=n_q)
        dists_b = rng.dirichlet(np.ones(5), size=n_q)
        cost = build_link_cost(boxes_a, dists_a, boxes_b, dists_b)
        for i in range(n_q):
            for j in range(n_q):
                iou = float(geometry.box_iou(
                    geometry.box_cxcywh_to_xyxy(boxes_a[i]), geometry.box_cxcywh_to_xyxy(boxes_b[j])
                ))
                want = (1.0 - iou) + 0.5 * np.abs(dists_a[i] - dists_b[j]).sum()
                np.testing.assert_allclose(cost[i, j], want, atol=1e-12)
