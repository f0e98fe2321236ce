"""Distance metric, neighbor search, farthest point sampling, feature interpolation.

Public functions take a single cloud (N, c). The batched variants (leading
batch axis) are what the network uses internally; the single-cloud functions
are thin wrappers so there is exactly one code path. All metrics are squared
Euclidean distances: the matrix identity below produces squared values and
the ordering is the same as for true distances, with no N^2 square roots.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from drnet.numerics import argsort_rows_ascending

FP_EPS = 1e-8  # inverse-distance weight regularizer; lets exact hits dominate
FP_NEIGHBORS = 3


@dataclass
class CandidateSet:
    """Ascending candidate metrics (N, k*d_max) and matching point indices."""

    metrics: np.ndarray
    indices: np.ndarray


def pairwise_sq_distances_batched(p: np.ndarray) -> np.ndarray:
    """(B, N, c) -> (B, N, N) of squared distances, symmetric, zero diagonal."""
    gram = p @ np.swapaxes(p, -1, -2)
    sq = np.einsum("bii->bi", gram)
    e = sq[:, :, None] + sq[:, None, :] - 2.0 * gram
    e = 0.5 * (e + np.swapaxes(e, -1, -2))
    np.maximum(e, 0.0, out=e)  # rounding can leave -1e-12 residue
    np.einsum("bii->bi", e)[...] = 0.0
    return e


def pairwise_sq_distances_backward(p: np.ndarray, e: np.ndarray, de: np.ndarray) -> np.ndarray:
    """Gradient of pairwise_sq_distances_batched w.r.t. p.

    Entries clamped to zero in the forward pass (coincident points, diagonal)
    carry no gradient, which agrees with the true derivative there.
    """
    de = np.where(e > 0.0, de, 0.0)
    s = de + np.swapaxes(de, -1, -2)
    return 2.0 * (s.sum(axis=-1)[..., None] * p - s @ p)


def pairwise_sq_distances(p: np.ndarray) -> np.ndarray:
    """(N, c) -> (N, N) squared-distance matrix."""
    p = np.asarray(p)
    if p.ndim != 2 or p.shape[0] < 1 or p.shape[1] < 1:
        raise ValueError(f"expected a nonempty (N, c) cloud, got shape {p.shape}")
    return pairwise_sq_distances_batched(p[None])[0]


def candidate_search_batched(p: np.ndarray, k: int, d_max: int):
    """Per point, the k*d_max nearest candidates: (metrics, indices), self first."""
    n = p.shape[-2]
    width = k * d_max
    if width > n:
        raise ValueError(f"k*d_max = {width} candidates exceed cloud size {n}")
    e = pairwise_sq_distances_batched(p)
    key = e.copy()
    # coincident points tie at distance 0; pin self to column 0 before sorting
    np.einsum("bii->bi", key)[...] = -1.0
    order = argsort_rows_ascending(key)[..., :width]
    metrics = np.take_along_axis(e, order, axis=-1)
    return metrics, order, e


def candidate_search(p: np.ndarray, k: int, d_max: int) -> CandidateSet:
    metrics, order, _ = candidate_search_batched(np.asarray(p)[None], k, d_max)
    return CandidateSet(metrics=metrics[0], indices=order[0])


def knn(p: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest points (self included at column 0)."""
    p = np.asarray(p)
    if k > p.shape[-2]:
        raise ValueError(f"k = {k} exceeds cloud size {p.shape[-2]}")
    _, order, _ = candidate_search_batched(p[None], k, 1)
    return order[0]


def knn_batched(p: np.ndarray, k: int) -> np.ndarray:
    _, order, _ = candidate_search_batched(p, k, 1)
    return order


def farthest_point_sampling(coords: np.ndarray, m: int) -> np.ndarray:
    """Greedy max-min subset of m point indices.

    The seed is the point farthest from the centroid (ties broken by the
    lexicographically largest coordinate triple), which makes the selection a
    pure function of the point set rather than of its ordering. Later picks
    maximize the minimum squared distance to the chosen set, ties going to
    the smallest index.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"cannot sample {m} points from a cloud of {n}")
    centroid = coords.mean(axis=0)
    d2c = np.sum((coords - centroid) ** 2, axis=1)
    tied = np.flatnonzero(d2c == d2c.max())
    seed = tied[np.lexsort((tied, -coords[tied, 2], -coords[tied, 1], -coords[tied, 0]))[0]]
    picked = np.empty(m, dtype=np.int64)
    picked[0] = seed
    dist = np.sum((coords - coords[seed]) ** 2, axis=1)
    dist[seed] = -1.0  # already selected; keeps m == n a permutation
    for t in range(1, m):
        nxt = int(np.argmax(dist))
        picked[t] = nxt
        np.minimum(dist, np.sum((coords - coords[nxt]) ** 2, axis=1), out=dist)
        dist[nxt] = -1.0
    return picked


def _fp_forward(coarse_xyz: np.ndarray, fine_xyz: np.ndarray, coarse_feats: np.ndarray):
    """Batched inverse-squared-distance interpolation. Shapes (B, M, 3), (B, N, 3), (B, M, c)."""
    m = coarse_xyz.shape[-2]
    nn = min(FP_NEIGHBORS, m)
    diff_all = fine_xyz[:, :, None, :] - coarse_xyz[:, None, :, :]
    d2 = np.sum(diff_all**2, axis=-1)  # (B, N, M)
    order = argsort_rows_ascending(d2)[..., :nn]  # (B, N, nn)
    d2_sel = np.take_along_axis(d2, order, axis=-1)
    w = 1.0 / (d2_sel + FP_EPS)
    wsum = w.sum(axis=-1, keepdims=True)
    wn = w / wsum
    gathered = _gather_points(coarse_feats, order)  # (B, N, nn, c)
    out = np.einsum("bnj,bnjc->bnc", wn, gathered)
    cache = (coarse_xyz, fine_xyz, coarse_feats, order, w, wn, wsum, gathered)
    return out, cache


def _fp_backward(cache, dout: np.ndarray):
    """Returns (d_coarse_feats, d_fine_xyz, d_coarse_xyz)."""
    coarse_xyz, fine_xyz, coarse_feats, order, w, wn, wsum, gathered = cache
    dfeats = np.zeros_like(coarse_feats)
    _scatter_add_points(dfeats, order, wn[..., None] * dout[:, :, None, :])
    dwn = np.einsum("bnc,bnjc->bnj", dout, gathered)
    # normalized weights: d w_j = (d wn_j - sum_i d wn_i wn_i) / sum(w)
    dw = (dwn - np.sum(dwn * wn, axis=-1, keepdims=True)) / wsum
    dd2 = -(w**2) * dw
    diff_sel = fine_xyz[:, :, None, :] - _gather_points(coarse_xyz, order)
    contrib = 2.0 * dd2[..., None] * diff_sel
    dfine = contrib.sum(axis=2)
    dcoarse = np.zeros_like(coarse_xyz)
    _scatter_add_points(dcoarse, order, -contrib)
    return dfeats, dfine, dcoarse


def feature_propagation(
    coarse_coords: np.ndarray, fine_coords: np.ndarray, coarse_feats: np.ndarray
) -> np.ndarray:
    """Lift coarse per-point features onto fine points.

    Each fine point takes the inverse-squared-distance weighted average of
    its 3 nearest coarse points (fewer when M < 3); weights are normalized to
    sum to one and an exact coincidence dominates through the epsilon.
    """
    coarse_coords = np.asarray(coarse_coords)
    if coarse_coords.shape[0] < 1:
        raise ValueError("need at least one coarse point")
    out, _ = _fp_forward(
        coarse_coords[None], np.asarray(fine_coords)[None], np.asarray(coarse_feats)[None]
    )
    return out[0]


def _gather_points(feats: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """feats (B, M, c), idx (B, ...) -> (B, ..., c) gathered along the point axis."""
    b, m, c = feats.shape
    flat = idx.reshape(b, -1)
    out = np.take_along_axis(feats, flat[..., None], axis=1)
    return out.reshape(idx.shape + (c,))


def _scatter_add_points(acc: np.ndarray, idx: np.ndarray, values: np.ndarray) -> None:
    """Adjoint of _gather_points: acc (B, M, c) += scatter of values (B, ..., c)."""
    b, m, c = acc.shape
    flat_idx = idx.reshape(b, -1)
    offsets = (np.arange(b, dtype=np.int64) * m)[:, None]
    gidx = (flat_idx + offsets).reshape(-1)
    np.add.at(acc.reshape(b * m, c), gidx, values.reshape(-1, c))
