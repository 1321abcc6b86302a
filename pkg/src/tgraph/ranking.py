"""Ranking loss and evaluation metrics.

Scores follow runtimes: a *higher* score predicts a *slower* configuration,
so the best candidates are the ones with the lowest scores.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def _pair_mask(r):
    r = np.asarray(r, dtype=np.float64)
    return (r[:, None] > r[None, :]).astype(np.float64)


def pairwise_hinge_loss(r, s, normalize=True):
    """Pairwise hinge loss over all ordered pairs with ``r_i > r_j``.

    Each such pair costs ``max(0, 1 - (s_i - s_j))``.  With ``normalize`` the
    sum is divided by the number of such (active) pairs; otherwise the raw
    double sum is returned.  ``s`` may be an array (returns a float) or a
    Tensor (returns a differentiable scalar Tensor).
    """
    r = np.asarray(r, dtype=np.float64).ravel()
    as_tensor = isinstance(s, Tensor)
    s_t = s if as_tensor else Tensor(np.asarray(s, dtype=np.float64).ravel())
    n = r.shape[0]
    if s_t.data.size != n:
        raise ValueError(f"pairwise_hinge_loss: {n} runtimes but {s_t.data.size} scores")
    if n < 2:
        raise ValueError("pairwise_hinge_loss: need at least 2 items")
    mask = _pair_mask(r)
    s_t = ad.reshape(s_t, (n,))
    diff = ad.sub(ad.reshape(s_t, (n, 1)), ad.reshape(s_t, (1, n)))
    total = ad.sum(ad.mul(ad.relu(ad.sub(1.0, diff)), mask))
    if normalize:
        total = ad.mul(total, 1.0 / max(mask.sum(), 1.0))
    return total if as_tensor else total.item()


def active_pairs(r):
    """Number of ordered pairs ``(i, j)`` with ``r_i > r_j``."""
    return int(_pair_mask(r).sum())


def _tie_pairs(x):
    _, counts = np.unique(x, return_counts=True)
    return int((counts * (counts - 1) // 2).sum())


def _count_inversions(x):
    """Pairs ``i < j`` with ``x[i] > x[j]`` (Fenwick tree over ranks)."""
    ranks = np.unique(x, return_inverse=True)[1].ravel() + 1
    size = int(ranks.max()) if ranks.size else 0
    tree = [0] * (size + 1)
    inversions = 0
    for seen, rank in enumerate(ranks.tolist()):
        # prefix count of previous values <= rank
        i, le = rank, 0
        while i > 0:
            le += tree[i]
            i -= i & -i
        inversions += seen - le
        i = rank
        while i <= size:
            tree[i] += 1
            i += i & -i
    return inversions


def kendall_tau(r, s):
    """Kendall's tau-a between runtimes ``r`` and scores ``s``.

    ``2 / (n (n - 1)) * sum_{i<j} sgn(s_i - s_j) sgn(r_i - r_j)``; tied pairs
    contribute zero.  Computed in O(n log n) from integer pair counts.
    """
    r = np.asarray(r, dtype=np.float64).ravel()
    s = np.asarray(s, dtype=np.float64).ravel()
    n = r.shape[0]
    if s.shape[0] != n:
        raise ValueError(f"kendall_tau: {n} runtimes but {s.shape[0]} scores")
    if n < 2:
        raise ValueError("kendall_tau: need at least 2 items")
    order = np.lexsort((s, r))
    s_sorted = s[order]
    total = n * (n - 1) // 2
    r_ties = _tie_pairs(r)
    s_ties = _tie_pairs(s)
    joint_ties = _tie_pairs(np.stack([r, s], axis=1).view(np.complex128).ravel())
    discordant = _count_inversions(s_sorted)
    concordant_minus_discordant = total - r_ties - s_ties + joint_ties - 2 * discordant
    return 2.0 * concordant_minus_discordant / (n * (n - 1))


def tile_metric(r, s, k=5):
    """``2 - min(r over the k lowest scores) / min(r over all)``.

    Equals 1 when the top-k predictions contain a globally fastest
    configuration.  Score ties are broken by original index.
    """
    r = np.asarray(r, dtype=np.float64).ravel()
    s = np.asarray(s, dtype=np.float64).ravel()
    if r.size == 0:
        raise ValueError("tile_metric: empty input")
    if r.shape != s.shape:
        raise ValueError(f"tile_metric: {r.size} runtimes but {s.size} scores")
    if k < 1:
        raise ValueError("tile_metric: k must be >= 1")
    top = np.lexsort((np.arange(s.size), s))[:k]
    return 2.0 - r[top].min() / r.min()
