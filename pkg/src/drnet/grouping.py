"""Adaptive dilated point grouping: learn a per-point dilation, select k neighbors.

The pipeline is candidate search -> dilation learning -> strided selection.
A two-layer head reads each point's candidate distance profile and emits a
continuous gate in [0.5, 5.5]; rounding the gate gives an integer dilation
factor d, and the neighborhood keeps candidate positions 0, d, 2d, ...,
(k-1)d. Rounding and index selection are not differentiable, so downstream
modules multiply their pooled feature by a surrogate factor that is exactly
1 in the forward pass but carries the gate's gradient in the backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from drnet.geometry import CandidateSet, candidate_search_batched
from drnet.numerics import ParamStore, fold_seed, glorot_uniform, sigmoid

_METRIC_EPS = 1e-12


@dataclass
class DilationVector:
    """Integer dilation factors in [1, d_max] and the pre-round gate values."""

    factors: np.ndarray
    gate: np.ndarray


class DilationHead:
    """Two-layer projection from candidate metrics to one logit per point.

    Width k*d_max must be even so the hidden layer is half the input width.
    The hidden activation is off by default (plain linear-linear before the
    sigmoid); `hidden_relu=True` inserts a ReLU between the layers.
    """

    def __init__(
        self,
        store: ParamStore,
        prefix: str,
        k: int,
        d_max: int,
        dtype=np.float32,
        seed: int = 0,
        hidden_relu: bool = False,
        normalize_metrics: bool = False,
    ):
        width = k * d_max
        if width % 2 != 0:
            raise ValueError(f"k*d_max must be even, got {k}*{d_max} = {width}")
        hidden = width // 2
        self.k = k
        self.d_max = d_max
        self.hidden_relu = hidden_relu
        self.normalize_metrics = normalize_metrics
        self.w1 = store.add(
            f"{prefix}.w1", glorot_uniform(fold_seed(seed, 1), width, hidden, (hidden, width), dtype)
        )
        self.b1 = store.add(f"{prefix}.b1", np.zeros(hidden, dtype=dtype))
        self.w2 = store.add(
            f"{prefix}.w2", glorot_uniform(fold_seed(seed, 2), hidden, 1, (1, hidden), dtype)
        )
        self.b2 = store.add(f"{prefix}.b2", np.zeros(1, dtype=dtype))

    def set_zero(self):
        for p in (self.w1, self.b1, self.w2, self.b2):
            p.value[...] = 0.0

    def forward(self, metrics: np.ndarray):
        """metrics (B, N, k*d_max) -> logits (B, N) plus cache for backward."""
        if self.normalize_metrics:
            rowmax = metrics.max(axis=-1, keepdims=True)
            argmax = metrics.argmax(axis=-1)
            scale = np.maximum(rowmax, _METRIC_EPS)
            x = metrics / scale
        else:
            rowmax = argmax = scale = None
            x = metrics
        h1 = x @ self.w1.value.T + self.b1.value
        a1 = np.maximum(h1, 0.0) if self.hidden_relu else h1
        h = (a1 @ self.w2.value.T + self.b2.value)[..., 0]
        cache = (x, h1, a1, argmax, scale, metrics.shape)
        return h, cache

    def backward(self, cache, dh: np.ndarray) -> np.ndarray:
        """Accumulate parameter grads; return the gradient w.r.t. metrics."""
        x, h1, a1, argmax, scale, _ = cache
        da1 = dh[..., None] * self.w2.value[0]
        self.w2.grad += (dh.reshape(-1) @ a1.reshape(-1, a1.shape[-1]))[None, :]
        self.b2.grad += dh.sum()
        dh1 = np.where(h1 > 0.0, da1, 0.0) if self.hidden_relu else da1
        flat_x = x.reshape(-1, x.shape[-1])
        flat_dh1 = dh1.reshape(-1, dh1.shape[-1])
        self.w1.grad += flat_dh1.T @ flat_x
        self.b1.grad += flat_dh1.sum(axis=0)
        dx = dh1 @ self.w1.value
        if self.normalize_metrics:
            dmetrics = dx / scale
            dscale = np.sum(dx * (-x / scale), axis=-1)
            np.put_along_axis(
                dmetrics,
                argmax[..., None],
                np.take_along_axis(dmetrics, argmax[..., None], axis=-1)
                + np.where(scale[..., 0] > _METRIC_EPS, dscale, 0.0)[..., None],
                axis=-1,
            )
            return dmetrics
        return dx


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round halves away from zero (0.5 -> 1, 5.5 -> 6); gates are positive."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def gate_to_factors(gate: np.ndarray, d_max: int) -> np.ndarray:
    return np.clip(round_half_away(gate), 1, d_max).astype(np.int64)


def learn_dilation_batched(metrics: np.ndarray, head: DilationHead, d_max: int):
    h, cache = head.forward(metrics)
    s = sigmoid(h)
    gate = 5.0 * s + 0.5
    factors = gate_to_factors(gate, d_max)
    return DilationVector(factors=factors, gate=gate), (cache, s)


def learn_dilation_backward(head: DilationHead, cache, dgate: np.ndarray) -> np.ndarray:
    head_cache, s = cache
    dh = dgate * 5.0 * s * (1.0 - s)
    return head.backward(head_cache, dh)


def learn_dilation(metrics: np.ndarray, head: DilationHead, d_max: int) -> DilationVector:
    """Per-point dilation factors from a (N, k*d_max) candidate metric matrix."""
    metrics = np.asarray(metrics)
    dil, _ = learn_dilation_batched(metrics[None], head, d_max)
    return DilationVector(factors=dil.factors[0], gate=dil.gate[0])


def dilated_select_batched(cand_indices: np.ndarray, factors: np.ndarray, k: int) -> np.ndarray:
    width = cand_indices.shape[-1]
    top = int(factors.max()) if factors.size else 1
    if width < k * top:
        raise ValueError(f"candidate width {width} cannot stride k={k} at dilation {top}")
    positions = np.arange(k, dtype=np.int64) * factors[..., None]
    return np.take_along_axis(cand_indices, positions, axis=-1)


def dilated_select(candidates: CandidateSet, dilation: DilationVector, k: int) -> np.ndarray:
    """Row i keeps candidate positions 0, d_i, 2*d_i, ..., (k-1)*d_i."""
    return dilated_select_batched(candidates.indices[None], np.asarray(dilation.factors)[None], k)[0]


def adpg(p: np.ndarray, k: int, d_max: int, head: DilationHead):
    """Full grouping pass: (neighbor indices (N, k), DilationVector)."""
    p = np.asarray(p)
    metrics, order, _ = candidate_search_batched(p[None], k, d_max)
    dil, _ = learn_dilation_batched(metrics, head, d_max)
    idx = dilated_select_batched(order, dil.factors, k)
    return idx[0], DilationVector(factors=dil.factors[0], gate=dil.gate[0])
