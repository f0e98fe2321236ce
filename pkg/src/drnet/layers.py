"""Neural building blocks with explicit forward and backward passes.

Everything here operates on batched arrays whose last axis is the channel
axis; point and neighbor axes are treated as spatial, so batch statistics
run over batch x points (x neighbors). Every backward pass is validated
against the central-difference oracle in the test suite.
"""

from __future__ import annotations

import numpy as np

from drnet.geometry import (
    _gather_points,
    _scatter_add_points,
    candidate_search_batched,
    pairwise_sq_distances_backward,
)
from drnet.grouping import (
    DilationHead,
    DilationVector,
    dilated_select_batched,
    learn_dilation_backward,
    learn_dilation_batched,
)
from drnet.numerics import ParamStore, fold_seed, glorot_uniform, sigmoid

LEAKY_SLOPE = 0.2
_NORM_EPS = 1e-12  # error-loss norms below this carry no gradient


def activation_forward(kind: str, x: np.ndarray):
    if kind == "none":
        return x, None
    if kind == "relu":
        return np.maximum(x, 0.0), x
    if kind == "leaky_relu":
        return np.where(x > 0.0, x, LEAKY_SLOPE * x), x
    if kind == "sigmoid":
        y = sigmoid(x)
        return y, y
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(kind: str, cache, dy: np.ndarray) -> np.ndarray:
    if kind == "none":
        return dy
    if kind == "relu":
        return np.where(cache > 0.0, dy, 0.0)
    if kind == "leaky_relu":
        return np.where(cache > 0.0, dy, LEAKY_SLOPE * dy)
    if kind == "sigmoid":
        return dy * cache * (1.0 - cache)
    raise ValueError(f"unknown activation {kind!r}")


class Linear:
    """y = x @ W.T + b over the last axis."""

    def __init__(self, store: ParamStore, prefix: str, c_in: int, c_out: int, dtype, seed: int):
        self.weight = store.add(
            f"{prefix}.weight", glorot_uniform(seed, c_in, c_out, (c_out, c_in), dtype)
        )
        self.bias = store.add(f"{prefix}.bias", np.zeros(c_out, dtype=dtype))
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x = self._x
        flat_x = x.reshape(-1, x.shape[-1])
        flat_dy = dy.reshape(-1, dy.shape[-1])
        self.weight.grad += flat_dy.T @ flat_x
        self.bias.grad += flat_dy.sum(axis=0)
        return dy @ self.weight.value


class BatchNorm:
    """Per-channel normalization; train mode uses batch stats over all non-channel axes."""

    def __init__(
        self,
        store: ParamStore,
        buffers: dict,
        prefix: str,
        c: int,
        dtype,
        momentum: float = 0.1,
        eps: float = 1e-5,
    ):
        self.gamma = store.add(f"{prefix}.gamma", np.ones(c, dtype=dtype))
        self.beta = store.add(f"{prefix}.beta", np.zeros(c, dtype=dtype))
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)
        buffers[f"{prefix}.running_mean"] = self.running_mean
        buffers[f"{prefix}.running_var"] = self.running_var
        self.momentum = momentum
        self.eps = eps
        self._cache = None

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        flat = x.reshape(-1, x.shape[-1])
        m = flat.shape[0]
        if training:
            mean = flat.mean(axis=0)
            var = flat.var(axis=0)
            ivar = 1.0 / np.sqrt(var + self.eps)
            xhat = (flat - mean) * ivar
            unbiased = var * (m / (m - 1)) if m > 1 else var
            self.running_mean[...] = (1.0 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var[...] = (1.0 - self.momentum) * self.running_var + self.momentum * unbiased
        else:
            ivar = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (flat - self.running_mean) * ivar
        y = self.gamma.value * xhat + self.beta.value
        self._cache = (xhat, ivar, m, training, x.shape)
        return y.reshape(x.shape)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        xhat, ivar, m, training, shape = self._cache
        flat_dy = dy.reshape(-1, dy.shape[-1])
        self.beta.grad += flat_dy.sum(axis=0)
        self.gamma.grad += (flat_dy * xhat).sum(axis=0)
        dxhat = flat_dy * self.gamma.value
        if training:
            dx = (
                ivar
                / m
                * (m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            )
        else:
            dx = dxhat * ivar
        return dx.reshape(shape)


def dropout_forward(x: np.ndarray, p: float, rng) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverted dropout; rng draws one uniform per element for determinism."""
    if p <= 0.0:
        return x, None
    keep = (rng.uniform(0.0, 1.0, x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * keep, keep


def dropout_backward(dy: np.ndarray, keep: np.ndarray | None) -> np.ndarray:
    return dy if keep is None else dy * keep


class MlpLayer:
    """1-by-1 convolution equivalent: linear + optional batch norm + activation."""

    def __init__(
        self,
        store: ParamStore,
        buffers: dict,
        prefix: str,
        c_in: int,
        c_out: int,
        dtype,
        seed: int,
        bn: bool = True,
        activation: str = "leaky_relu",
    ):
        self.linear = Linear(store, prefix, c_in, c_out, dtype, seed)
        self.bn = BatchNorm(store, buffers, f"{prefix}.bn", c_out, dtype) if bn else None
        self.activation = activation
        self._act_cache = None

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        y = self.linear.forward(x)
        if self.bn is not None:
            y = self.bn.forward(y, training)
        y, self._act_cache = activation_forward(self.activation, y)
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dy = activation_backward(self.activation, self._act_cache, dy)
        if self.bn is not None:
            dy = self.bn.backward(dy)
        return self.linear.backward(dy)


def graph_encode_batched(p: np.ndarray, idx: np.ndarray) -> np.ndarray:
    neighbors = _gather_points(p, idx)
    center = np.broadcast_to(p[:, :, None, :], neighbors.shape)
    return np.concatenate([center, neighbors - center], axis=-1)


def graph_encode_backward(p_shape, idx: np.ndarray, dg: np.ndarray) -> np.ndarray:
    c = p_shape[-1]
    dcenter = dg[..., :c]
    drel = dg[..., c:]
    dp = (dcenter - drel).sum(axis=2)
    _scatter_add_points(dp, idx, drel)
    return dp


def graph_encode(p: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Edge features (p_i, p_j - p_i) for each neighbor j of point i: (N, k, 2c)."""
    p = np.asarray(p)
    idx = np.asarray(idx)
    if idx.min() < 0 or idx.max() >= p.shape[0]:
        raise ValueError("neighbor index out of range")
    return graph_encode_batched(p[None], idx[None])[0]


def max_pool_neighbors_batched(g: np.ndarray):
    pooled = g.max(axis=2)
    argmax = g.argmax(axis=2)
    return pooled, argmax


def max_pool_neighbors_backward(g_shape, argmax: np.ndarray, dpooled: np.ndarray) -> np.ndarray:
    dg = np.zeros(g_shape, dtype=dpooled.dtype)
    np.put_along_axis(dg, argmax[:, :, None, :], dpooled[:, :, None, :], axis=2)
    return dg


def max_pool_neighbors(g: np.ndarray) -> np.ndarray:
    """Channel-wise max over the neighbor axis of (N, k, c)."""
    return np.asarray(g).max(axis=1)


class BackProjection:
    """Shared 1-by-k convolution collapsing a local graph back to its centroid width."""

    def __init__(
        self,
        store: ParamStore,
        buffers: dict,
        prefix: str,
        c_in: int,
        c_graph: int,
        k: int,
        dtype,
        seed: int,
    ):
        self.k = k
        self.c_graph = c_graph
        self.linear = Linear(store, prefix, c_graph * k, c_in, dtype, seed)
        self.bn = BatchNorm(store, buffers, f"{prefix}.bn", c_in, dtype)
        self._act_cache = None

    def forward(self, g: np.ndarray, training: bool) -> np.ndarray:
        b, n, k, c = g.shape
        y = self.linear.forward(g.reshape(b, n, k * c))
        y = self.bn.forward(y, training)
        y, self._act_cache = activation_forward("relu", y)
        return y

    def backward(self, dy: np.ndarray, g_shape) -> np.ndarray:
        dy = activation_backward("relu", self._act_cache, dy)
        dy = self.bn.backward(dy)
        dflat = self.linear.backward(dy)
        return dflat.reshape(g_shape)


def error_loss_batched(f_b: np.ndarray, p: np.ndarray):
    diff = f_b - p
    norms = np.sqrt(np.sum(diff * diff, axis=-1))
    loss = float(norms.mean())
    return loss, (diff, norms)


def error_loss_backward(cache, dloss: float):
    diff, norms = cache
    count = norms.size
    safe = np.where(norms > _NORM_EPS, norms, 1.0)
    scale = np.where(norms > _NORM_EPS, dloss / (count * safe), 0.0)
    dfb = scale[..., None] * diff
    return dfb, -dfb


def error_loss(f_b: np.ndarray, p: np.ndarray) -> float:
    """Mean over points of the Euclidean norm of the back-projection residual."""
    f_b = np.asarray(f_b)
    p = np.asarray(p)
    if f_b.shape != p.shape:
        raise ValueError(f"shape mismatch {f_b.shape} vs {p.shape}")
    return error_loss_batched(f_b, p)[0]


class EmModule:
    """Error-minimizing module: adaptive grouping, edge MLP, pooling, back-projection.

    Forward returns the pooled per-point feature, the restoration loss, and
    the learned dilation factors. The pooled feature is multiplied by a
    surrogate per-point factor equal to 1, whose backward path feeds the
    total loss gradient into the dilation head (and on into the candidate
    metrics); `surrogate_gate=False` cuts that path.
    """

    def __init__(
        self,
        store: ParamStore,
        buffers: dict,
        prefix: str,
        c_in: int,
        c_out: int,
        k: int,
        d_max: int,
        dtype=np.float32,
        seed: int = 0,
        edge_depth: int = 1,
        hidden_relu: bool = False,
        normalize_metrics: bool = False,
        surrogate_gate: bool = True,
    ):
        if edge_depth < 1:
            raise ValueError("edge_depth must be >= 1")
        self.c_in = c_in
        self.c_out = c_out
        self.k = k
        self.d_max = d_max
        self.surrogate_gate = surrogate_gate
        self.head = DilationHead(
            store,
            f"{prefix}.head",
            k,
            d_max,
            dtype,
            fold_seed(seed, 101),
            hidden_relu=hidden_relu,
            normalize_metrics=normalize_metrics,
        )
        self.graph_mlps = [
            MlpLayer(
                store,
                buffers,
                f"{prefix}.edge{i}",
                2 * c_in if i == 0 else c_out,
                c_out,
                dtype,
                fold_seed(seed, 102 + i),
            )
            for i in range(edge_depth)
        ]
        self.back_proj = BackProjection(
            store, buffers, f"{prefix}.bp", c_in, c_out, k, dtype, fold_seed(seed, 200)
        )
        self._cache = None

    def forward(self, p: np.ndarray, training: bool):
        metrics, order, e_full = candidate_search_batched(p, self.k, self.d_max)
        dil, dil_cache = learn_dilation_batched(metrics, self.head, self.d_max)
        sel = dilated_select_batched(order, dil.factors, self.k)
        g = graph_encode_batched(p, sel)
        g0_shape = g.shape
        for mlp in self.graph_mlps:
            g = mlp.forward(g, training)
        f_g = g
        f_b = self.back_proj.forward(f_g, training)
        ler, ler_cache = error_loss_batched(f_b, p)
        pooled, argmax = max_pool_neighbors_batched(f_g)
        # surrogate factor g_i = 1 + (gate_i - stopgrad(gate_i)): output unchanged,
        # gate gradient = <dF_i, pooled_i> in backward
        self._cache = (p, e_full, order, metrics, dil_cache, sel, g0_shape, f_g.shape, ler_cache, argmax, pooled)
        return pooled, ler, dil

    def backward(self, df: np.ndarray, dler: float) -> np.ndarray:
        p, e_full, order, metrics, dil_cache, sel, g0_shape, fg_shape, ler_cache, argmax, pooled = self._cache
        dfb, dp = error_loss_backward(ler_cache, dler)
        dfg = self.back_proj.backward(dfb, fg_shape)
        dfg += max_pool_neighbors_backward(fg_shape, argmax, df)
        dg = dfg
        for mlp in reversed(self.graph_mlps):
            dg = mlp.backward(dg)
        dp += graph_encode_backward(p.shape, sel, dg)
        if self.surrogate_gate:
            dgate = np.sum(df * pooled, axis=-1)
            dmetrics = learn_dilation_backward(self.head, dil_cache, dgate)
            de = np.zeros_like(e_full)
            _scatter_add_into_rows(de, order, dmetrics)
            dp += pairwise_sq_distances_backward(p, e_full, de)
        return dp


def _scatter_add_into_rows(acc: np.ndarray, idx: np.ndarray, values: np.ndarray) -> None:
    """acc (B, N, M): add values (B, N, w) at per-row columns idx (B, N, w)."""
    b, n, m = acc.shape
    flat = acc.reshape(b * n, m)
    rows = np.repeat(np.arange(b * n, dtype=np.int64), idx.shape[-1])
    np.add.at(flat, (rows, idx.reshape(-1)), values.reshape(-1))


def em_forward(p: np.ndarray, module: EmModule, training: bool = False):
    """Single-cloud pass: (pooled features (N, c_out), error loss, DilationVector)."""
    pooled, ler, dil = module.forward(np.asarray(p)[None], training)
    return pooled[0], ler, DilationVector(factors=dil.factors[0], gate=dil.gate[0])
