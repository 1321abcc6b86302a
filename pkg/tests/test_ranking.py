import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tgraph import autodiff as ad
from tgraph.ranking import active_pairs, kendall_tau, pairwise_hinge_loss, tile_metric


def brute_tau(r, s):
    n = len(r)
    total = sum(np.sign(s[i] - s[j]) * np.sign(r[i] - r[j]) for i, j in itertools.combinations(range(n), 2))
    return 2.0 * total / (n * (n - 1))


def brute_hinge(r, s):
    total, count = 0.0, 0
    for i in range(len(r)):
        for j in range(len(r)):
            if r[i] > r[j]:
                total += max(0.0, 1.0 - (s[i] - s[j]))
                count += 1
    return total, count


def test_hinge_perfect_margin_is_zero():
    assert pairwise_hinge_loss([1, 2, 3], [0.0, 2.0, 4.0]) == 0.0


def test_hinge_hand_case():
    # one active pair (r0 > r1) with s0 - s1 = -0.5 -> 1.5
    assert pairwise_hinge_loss([2, 1], [0.0, 0.5], normalize=False) == 1.5


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.floats(-3, 3)), min_size=2, max_size=12))
def test_hinge_matches_brute_force(pairs):
    r = np.array([p[0] for p in pairs], dtype=float)
    s = np.array([p[1] for p in pairs])
    total, count = brute_hinge(r, s)
    assert pairwise_hinge_loss(r, s, normalize=False) == pytest.approx(total, rel=1e-12, abs=1e-12)
    assert active_pairs(r) == count
    expected = total / count if count else 0.0
    assert pairwise_hinge_loss(r, s) == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_hinge_tensor_gradient():
    r = np.array([3.0, 1.0, 2.0])
    s = ad.tensor(np.array([0.2, 0.1, 0.4]), requires_grad=True)
    loss = pairwise_hinge_loss(r, s)
    ad.backward(loss)
    # pairs (0,1): 1-0.1, (0,2): 1+0.2, (2,1): 1-0.3, all active; mean over 3 pairs
    assert loss.item() == pytest.approx((0.9 + 1.2 + 0.7) / 3)
    np.testing.assert_allclose(s.grad, np.array([-2, 2, 0]) / 3)


def test_tau_examples():
    assert kendall_tau([1, 2, 3, 4], [10, 20, 30, 40]) == 1.0
    assert kendall_tau([1, 2, 3, 4], [4, 3, 2, 1]) == -1.0
    assert kendall_tau([1, 1, 1], [1, 2, 3]) == 0.0


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=2, max_size=30))
def test_tau_matches_pair_counter_with_ties(pairs):
    r = [p[0] for p in pairs]
    s = [p[1] for p in pairs]
    assert kendall_tau(r, s) == brute_tau(r, s)


def test_tau_rejects_bad_input():
    with pytest.raises(ValueError):
        kendall_tau([1], [1])
    with pytest.raises(ValueError):
        kendall_tau([1, 2], [1, 2, 3])


def test_tile_metric_examples():
    assert tile_metric([10, 12, 15], [0.0, 1.0, 2.0], k=1) == 1.0
    # best predicted runtime 12 vs global best 10
    assert tile_metric([10, 12, 15], [5.0, 0.0, 1.0], k=1) == pytest.approx(0.8)
    assert tile_metric([10, 12, 15, 20, 30, 40], [4.0, 0.0, 1.0, 2.0, 3.0, 5.0], k=5) == 1.0
    assert tile_metric([10, 12, 15, 20, 30, 40], np.arange(6.0)[::-1], k=5) == pytest.approx(0.8)


def test_tile_metric_breaks_ties_by_index():
    assert tile_metric([20, 10], [0.0, 0.0], k=1) == 0.0
