import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtal.objectives import (FeedbackKind, average_precision, local_loss,
                             map_metric, overarching_loss, pseudo_residual,
                             rmse)
from mtal.sparse import SparseRows


def masked(values, shape=None):
    values = np.asarray(values, dtype=float)
    return SparseRows.dense_mask(values.reshape(1, -1) if values.ndim == 1 else values)


class TestOverarchingLoss:
    def test_explicit_perfect(self):
        t = masked([1.0, 2.0, 3.0])
        assert overarching_loss(t.vals.copy(), t, FeedbackKind.EXPLICIT) == 0.0

    def test_explicit_single_cell(self):
        t = masked([5.0])
        assert overarching_loss(np.array([3.0]), t, FeedbackKind.EXPLICIT) == 2.0

    def test_implicit_logit_zero(self):
        # closed form: BCE at logit 0 with target 1 is ln 2
        t = masked([1.0])
        got = overarching_loss(np.array([0.0]), t, FeedbackKind.IMPLICIT)
        assert got == pytest.approx(math.log(2.0), abs=1e-12)

    def test_empty_mask_raises(self):
        empty = SparseRows.from_coo((1, 3), [], [], [])
        with pytest.raises(ValueError):
            overarching_loss(np.array([]), empty, FeedbackKind.EXPLICIT)

    def test_implicit_large_logits_stable(self):
        t = masked([1.0, 0.0])
        got = overarching_loss(np.array([800.0, -800.0]), t, FeedbackKind.IMPLICIT)
        assert np.isfinite(got) and got == pytest.approx(0.0, abs=1e-12)


class TestPseudoResidual:
    def test_explicit(self):
        t = masked([5.0])
        assert pseudo_residual(np.array([3.0]), t, FeedbackKind.EXPLICIT) == 2.0

    def test_implicit(self):
        t = masked([1.0])
        got = pseudo_residual(np.array([0.0]), t, FeedbackKind.IMPLICIT)
        assert got[0] == pytest.approx(0.5, abs=1e-12)

    @pytest.mark.parametrize("kind", [FeedbackKind.EXPLICIT, FeedbackKind.IMPLICIT])
    def test_matches_negative_loss_gradient(self, kind):
        # central finite differences of the mean loss equal -residual / N
        rng = np.random.default_rng(0)
        for _ in range(20):
            n = rng.integers(2, 9)
            targets = masked(rng.random(n) if kind is FeedbackKind.IMPLICIT
                             else rng.uniform(1, 5, n))
            pred = rng.normal(0, 2, n)
            resid = pseudo_residual(pred, targets, kind)
            eps = 1e-6
            for i in range(n):
                up, dn = pred.copy(), pred.copy()
                up[i] += eps
                dn[i] -= eps
                fd = (overarching_loss(up, targets, kind)
                      - overarching_loss(dn, targets, kind)) / (2 * eps)
                assert fd == pytest.approx(-resid[i] / n, abs=1e-6)

    @settings(max_examples=50)
    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=10),
           st.lists(st.integers(0, 1), min_size=1, max_size=10))
    def test_implicit_residual_range(self, preds, targets):
        n = min(len(preds), len(targets))
        t = masked(np.array(targets[:n], dtype=float))
        r = pseudo_residual(np.array(preds[:n]), t, FeedbackKind.IMPLICIT)
        assert (r > -1.0).all() and (r < 1.0).all()


class TestLocalLoss:
    def test_perfect(self):
        t = masked([1.0, -2.0])
        loss, grad = local_loss(t.vals.copy(), t)
        assert loss == 0.0 and not grad.any()

    def test_single_cell(self):
        t = masked([2.0])
        loss, grad = local_loss(np.array([0.0]), t)
        assert loss == 2.0
        assert grad[0] == -2.0

    def test_mean_invariance_under_duplication(self):
        t1 = masked([2.0, 2.0])
        t2 = masked([2.0, 2.0, 2.0, 2.0])
        l1, _ = local_loss(np.zeros(2), t1)
        l2, _ = local_loss(np.zeros(4), t2)
        assert l1 == l2


class TestRmse:
    def test_perfect(self):
        t = masked([1.0, 4.0])
        assert rmse(t.vals.copy(), t) == 0.0

    def test_unit_errors(self):
        t = masked([1.0, 1.0])
        assert rmse(np.array([2.0, 0.0]), t) == 1.0

    @settings(max_examples=40)
    @given(st.lists(st.floats(-5, 5), min_size=2, max_size=12), st.randoms())
    def test_permutation_invariance(self, errors, rnd):
        truth = np.zeros(len(errors))
        t = masked(truth)
        perm = list(range(len(errors)))
        rnd.shuffle(perm)
        a = rmse(np.array(errors), t)
        b = rmse(np.array(errors)[perm], t)
        assert a == pytest.approx(b, rel=1e-12)


def brute_force_ap(ranked_items, relevant):
    """Oracle: AP by explicit precision-at-rank over every prefix."""
    hits = 0
    total = 0.0
    for rank, item in enumerate(ranked_items, start=1):
        if item in relevant:
            hits += 1
            total += hits / rank
    return total / hits if hits else 0.0


class TestMapMetric:
    def test_three_items_example(self):
        # ranked [A, B, C], relevant {A, C}: AP = (1/1 + 2/3) / 2 = 5/6
        # (value frozen from the brute-force oracle below)
        assert brute_force_ap(["A", "B", "C"], {"A", "C"}) == pytest.approx(5 / 6)
        scores = np.array([[3.0, 2.0, 1.0]])
        got = map_metric(scores, [set()], [{0, 2}])
        assert got == pytest.approx(5 / 6, abs=1e-12)

    def test_all_relevant_first(self):
        scores = np.array([[5.0, 4.0, 1.0, 0.5]])
        assert map_metric(scores, [set()], [{0, 1}]) == 1.0

    def test_single_relevant_at_rank(self):
        scores = np.array([[4.0, 3.0, 2.0, 1.0]])
        assert map_metric(scores, [set()], [{2}]) == pytest.approx(1 / 3)

    def test_train_positives_excluded(self):
        scores = np.array([[9.0, 1.0, 2.0]])
        # item 0 is a train positive: candidates are items 2, 1 in score order
        assert map_metric(scores, [{0}], [{2}]) == 1.0

    def test_matches_oracle_on_random_rankings(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            n = 10
            scores = rng.permutation(n).astype(float)[None, :]
            relevant = set(map(int, rng.choice(n, size=rng.integers(1, 5),
                                               replace=False)))
            order = np.argsort(-scores[0], kind="stable")
            expect = brute_force_ap(order.tolist(), relevant)
            got = map_metric(scores, [set()], [relevant])
            assert got == pytest.approx(expect, abs=1e-12)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(5)
        scores = rng.normal(size=(4, 8))
        train = [set(), {1}, set(), {0, 2}]
        test = [{3}, {2, 4}, {0}, {5}]
        a = map_metric(scores, train, test)
        b = map_metric(np.exp(2.0 * scores), train, test)
        assert a == pytest.approx(b, abs=1e-12)

    def test_tie_break_by_item_id(self):
        scores = np.array([[1.0, 1.0, 1.0]])
        # ties broken ascending by id: ranking is [0, 1, 2]
        assert map_metric(scores, [set()], [{2}]) == pytest.approx(1 / 3)

    def test_no_test_positives_raises(self):
        with pytest.raises(ValueError):
            map_metric(np.ones((2, 3)), [set(), set()], [set(), set()])

    def test_overlap_raises(self):
        with pytest.raises(ValueError):
            map_metric(np.ones((1, 3)), [{0}], [{0}])


def test_average_precision_basic():
    assert average_precision([True, False, True]) == pytest.approx(5 / 6)
    assert average_precision([False, False]) == 0.0
