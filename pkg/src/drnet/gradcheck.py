"""Finite-difference validation suite for every layer and the composed network.

Each check builds a float64 fragment at tiny shapes (N=8, channels <= 6,
k=3, d_max=2, batch 2), runs one analytic forward/backward, then compares
every parameter gradient (and the input gradient) against central
differences. A check passes when the max relative error stays below 1e-4.

The straight-through dilation surrogate multiplies pooled features by a
factor whose forward value is exactly 1, so the true network function is
locally constant in the dilation head: composed-network checks therefore
run with the surrogate off, and the surrogate's injected gradient is
validated separately against a forward pass where the gate genuinely
multiplies the pooled feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from drnet.geometry import (
    _fp_backward,
    _fp_forward,
    candidate_search_batched,
    pairwise_sq_distances_backward,
)
from drnet.layers import (
    BackProjection,
    BatchNorm,
    EmModule,
    Linear,
    MlpLayer,
    _scatter_add_into_rows,
    error_loss_backward,
    error_loss_batched,
    graph_encode_backward,
    graph_encode_batched,
    max_pool_neighbors_backward,
    max_pool_neighbors_batched,
)
from drnet.grouping import (
    DilationHead,
    dilated_select_batched,
    learn_dilation_backward,
    learn_dilation_batched,
)
from drnet.network import (
    MergeGate,
    MrBranch,
    PointClassifier,
    PointSegmenter,
    _FcHead,
    compose_total,
    softmax_cross_entropy,
)
from drnet.numerics import ParamStore, finite_difference_gradient, max_relative_error, rng_uniform

TOLERANCE = 1e-4
# 1e-6 keeps the probe inside the piecewise-linear region of ReLU-family
# activations (a handful of the ~1e4 pre-activations sit within 1e-5 of a
# kink); float64 rounding noise at this step is still ~1e-9.
EPS = 1e-6

N, B, K, D_MAX = 8, 2, 3, 2
TINY_MODEL = dict(
    fr_widths=(4, 4, 6, 6),
    embed=6,
    k=K,
    d_max=D_MAX,
    k_mr=2,
    mr_widths=(6, 6, 6),
    dropout=0.0,
    dtype=np.float64,
    surrogate_gate=False,
)


@dataclass
class CheckResult:
    name: str
    max_err: float

    @property
    def ok(self) -> bool:
        return self.max_err < TOLERANCE


def _uniform(seed, shape):
    return rng_uniform(seed, -1.0, 1.0, shape)


def _compare_tensors(loss_fn, tensors_with_grads) -> float:
    """FD each named tensor in place against its stored analytic gradient."""
    worst = 0.0
    for name, tensor, grad in tensors_with_grads:
        fd = finite_difference_gradient(lambda _: loss_fn(), tensor, EPS)
        worst = max(worst, max_relative_error(grad, fd))
    return worst


def _check_module(name, store, inputs, analytic, loss_fn) -> CheckResult:
    """analytic() must populate store grads and return [(name, input, dinput), ...]."""
    store.zero_grad()
    input_grads = analytic()
    entries = [(p.name, p.value, p.grad.copy()) for p in store]
    entries += [(n, t, g.copy()) for n, t, g in input_grads]
    return CheckResult(name, _compare_tensors(loss_fn, entries))


def check_linear() -> CheckResult:
    store = ParamStore()
    layer = Linear(store, "lin", 4, 5, np.float64, 7)
    x = _uniform(11, (B, N, 4))
    r = _uniform(12, (B, N, 5))

    def loss():
        return float(np.sum(layer.forward(x) * r))

    def analytic():
        loss()
        dx = layer.backward(r)
        return [("x", x, dx)]

    return _check_module("linear", store, [x], analytic, loss)


def check_batchnorm(training: bool) -> CheckResult:
    store = ParamStore()
    bn = BatchNorm(store, {}, "bn", 4, np.float64)
    warm = _uniform(21, (B * N, 4))
    bn.forward(warm, True)  # populate running stats for the eval path
    x = _uniform(22, (B, N, 4))
    r = _uniform(23, (B, N, 4))

    def loss():
        return float(np.sum(bn.forward(x, training) * r))

    def analytic():
        loss()
        dx = bn.backward(r)
        return [("x", x, dx)]

    mode = "train" if training else "eval"
    return _check_module(f"batchnorm_{mode}", store, [x], analytic, loss)


def check_mlp_layer(activation: str) -> CheckResult:
    store = ParamStore()
    layer = MlpLayer(store, {}, "mlp", 4, 6, np.float64, 31, activation=activation)
    x = _uniform(32, (B, N, 4))
    r = _uniform(33, (B, N, 6))

    def loss():
        return float(np.sum(layer.forward(x, True) * r))

    def analytic():
        loss()
        dx = layer.backward(r)
        return [("x", x, dx)]

    return _check_module(f"mlp_{activation}", store, [x], analytic, loss)


def check_graph_encode() -> CheckResult:
    store = ParamStore()
    x = _uniform(41, (B, N, 4))
    idx = np.stack(
        [np.stack([(np.arange(K) + i) % N for i in range(N)]) for _ in range(B)]
    ).astype(np.int64)
    r = _uniform(42, (B, N, K, 8))

    def loss():
        return float(np.sum(graph_encode_batched(x, idx) * r))

    def analytic():
        dx = graph_encode_backward(x.shape, idx, r)
        return [("x", x, dx)]

    return _check_module("graph_encode", store, [x], analytic, loss)


def check_max_pool() -> CheckResult:
    store = ParamStore()
    g = _uniform(51, (1, 4, 3, 2))
    r = _uniform(52, (1, 4, 2))

    def loss():
        pooled, _ = max_pool_neighbors_batched(g)
        return float(np.sum(pooled * r))

    def analytic():
        _, am = max_pool_neighbors_batched(g)
        dg = max_pool_neighbors_backward(g.shape, am, r)
        return [("g", g, dg)]

    return _check_module("max_pool_neighbors", store, [g], analytic, loss)


def check_back_projection() -> CheckResult:
    store = ParamStore()
    bp = BackProjection(store, {}, "bp", 4, 5, K, np.float64, 61)
    g = _uniform(62, (B, N, K, 5))
    r = _uniform(63, (B, N, 4))

    def loss():
        return float(np.sum(bp.forward(g, True) * r))

    def analytic():
        loss()
        dg = bp.backward(r, g.shape)
        return [("g", g, dg)]

    return _check_module("back_projection", store, [g], analytic, loss)


def check_error_loss() -> CheckResult:
    store = ParamStore()
    fb = _uniform(71, (B, N, 4))
    p = _uniform(72, (B, N, 4))

    def loss():
        return error_loss_batched(fb, p)[0]

    def analytic():
        _, cache = error_loss_batched(fb, p)
        dfb, dp = error_loss_backward(cache, 1.0)
        return [("fb", fb, dfb), ("p", p, dp)]

    return _check_module("error_loss", store, [fb, p], analytic, loss)


def check_dilation_head() -> CheckResult:
    store = ParamStore()
    head = DilationHead(store, "head", K, D_MAX, np.float64, 81)
    metrics = rng_uniform(82, 0.0, 2.0, (B, N, K * D_MAX))
    r = _uniform(83, (B, N))

    def loss():
        dil, _ = learn_dilation_batched(metrics, head, D_MAX)
        return float(np.sum(dil.gate * r))

    def analytic():
        _, cache = learn_dilation_batched(metrics, head, D_MAX)
        dmetrics = learn_dilation_backward(head, cache, r)
        return [("metrics", metrics, dmetrics)]

    return _check_module("learn_dilation", store, [metrics], analytic, loss)


def check_feature_propagation() -> CheckResult:
    store = ParamStore()
    coarse = _uniform(91, (B, 4, 3))
    fine = _uniform(92, (B, N, 3))
    feats = _uniform(93, (B, 4, 5))
    r = _uniform(94, (B, N, 5))

    def loss():
        out, _ = _fp_forward(coarse, fine, feats)
        return float(np.sum(out * r))

    def analytic():
        _, cache = _fp_forward(coarse, fine, feats)
        dfeats, dfine, dcoarse = _fp_backward(cache, r)
        return [("feats", feats, dfeats), ("fine", fine, dfine), ("coarse", coarse, dcoarse)]

    return _check_module("feature_propagation", store, [feats], analytic, loss)


def check_em_module() -> CheckResult:
    store = ParamStore()
    mod = EmModule(store, {}, "em", 4, 5, K, D_MAX, np.float64, 101, surrogate_gate=False)
    p = _uniform(102, (B, N, 4))
    r = _uniform(103, (B, N, 5))

    def loss():
        pooled, ler, _ = mod.forward(p, True)
        return float(np.sum(pooled * r)) + 0.7 * ler

    def analytic():
        loss()
        dp = mod.backward(r, 0.7)
        return [("p", p, dp)]

    return _check_module("em_module", store, [p], analytic, loss)


def check_metrics_path() -> CheckResult:
    """Candidate metrics feeding the gate: the fully differentiable dilation route."""
    store = ParamStore()
    head = DilationHead(store, "head", K, D_MAX, np.float64, 161)
    p = _uniform(162, (B, N, 4))
    r = _uniform(163, (B, N))

    def loss():
        metrics, _, _ = candidate_search_batched(p, K, D_MAX)
        dil, _ = learn_dilation_batched(metrics, head, D_MAX)
        return float(np.sum(dil.gate * r))

    def analytic():
        metrics, order, e = candidate_search_batched(p, K, D_MAX)
        _, cache = learn_dilation_batched(metrics, head, D_MAX)
        dmetrics = learn_dilation_backward(head, cache, r)
        de = np.zeros_like(e)
        _scatter_add_into_rows(de, order, dmetrics)
        dp = pairwise_sq_distances_backward(p, e, de)
        return [("p", p, dp)]

    return _check_module("metrics_to_gate_path", store, [p], analytic, loss)


def check_surrogate_route() -> CheckResult:
    """Straight-through head gradient vs FD of a forward where the gate multiplies."""
    store = ParamStore()
    mod = EmModule(store, {}, "em", 4, 5, K, D_MAX, np.float64, 171, surrogate_gate=True)
    p = _uniform(172, (B, N, 4))
    r = _uniform(173, (B, N, 5))

    def exposed_loss():
        metrics, order, _ = candidate_search_batched(p, mod.k, mod.d_max)
        dil, _ = learn_dilation_batched(metrics, mod.head, mod.d_max)
        sel = dilated_select_batched(order, dil.factors, mod.k)
        g = graph_encode_batched(p, sel)
        for mlp in mod.graph_mlps:
            g = mlp.forward(g, True)
        fb = mod.back_proj.forward(g, True)
        ler, _ = error_loss_batched(fb, p)
        pooled, _ = max_pool_neighbors_batched(g)
        return float(np.sum(pooled * dil.gate[..., None] * r)) + 0.7 * ler

    store.zero_grad()
    mod.forward(p, True)
    mod.backward(r, 0.7)
    head_params = [mod.head.w1, mod.head.b1, mod.head.w2, mod.head.b2]
    entries = [(hp.name, hp.value, hp.grad.copy()) for hp in head_params]
    return CheckResult("surrogate_gate_route", _compare_tensors(exposed_loss, entries))


def check_mr_branch() -> CheckResult:
    store = ParamStore()
    mr = MrBranch(store, {}, 4, 5, 2, np.float64, 111, widths=(6, 6, 6))
    f1 = _uniform(112, (B, N, 4))
    coords = _uniform(113, (B, N, 3))
    r = _uniform(114, (B, N, 5))

    def loss():
        return float(np.sum(mr.forward(f1, coords, True) * r))

    def analytic():
        loss()
        df1, dcoords = mr.backward(r)
        return [("f1", f1, df1), ("coords", coords, dcoords)]

    return _check_module("mr_branch", store, [f1], analytic, loss)


def check_merge_gate() -> CheckResult:
    store = ParamStore()
    gate = MergeGate(store, 5, 4, np.float64, 121)
    f_fr = _uniform(122, (B, N, 4))
    f_mr = _uniform(123, (B, N, 5))
    r = _uniform(124, (B, N, 4))

    def loss():
        return float(np.sum(gate.forward(f_fr, f_mr) * r))

    def analytic():
        loss()
        df_fr, df_mr = gate.backward(r)
        return [("f_fr", f_fr, df_fr), ("f_mr", f_mr, df_mr)]

    return _check_module("merge_gate", store, [f_fr], analytic, loss)


def check_fc_head() -> CheckResult:
    store = ParamStore()
    head = _FcHead(store, {}, "head", 6, (6, 5), 3, 0.0, np.float64, 131)
    x = _uniform(132, (B * 2, 6))
    labels = np.array([0, 2, 1, 2])

    def loss():
        logits = head.forward(x, True)
        return softmax_cross_entropy(logits, labels)[0]

    def analytic():
        logits = head.forward(x, True)
        _, dlogits, _ = softmax_cross_entropy(logits, labels)
        dx = head.backward(dlogits)
        return [("x", x, dx)]

    return _check_module("fc_head_cross_entropy", store, [x], analytic, loss)


def check_classifier_full() -> CheckResult:
    model = PointClassifier(n_classes=3, head_widths=(6, 5), seed=141, **TINY_MODEL)
    coords = _uniform(142, (B, N, 3))
    labels = np.array([0, 2])
    weights = (0.1, 0.01, 0.01, 0.01)

    def loss():
        logits, lers = model.logits(coords, training=True)
        ce, _, _ = softmax_cross_entropy(logits, labels)
        return compose_total(ce, lers, weights)

    def analytic():
        model.loss_and_grad(coords, labels, True, None, weights)
        return [("coords", coords, model.last_input_grad)]

    return _check_module("classifier_total_loss", model.store, [coords], analytic, loss)


def check_segmenter_full() -> CheckResult:
    model = PointSegmenter(
        n_parts=5, n_categories=2, head_widths=(6, 5), seed=151, **TINY_MODEL
    )
    coords = _uniform(152, (B, N, 3))
    onehot = np.array([[1.0, 0.0], [0.0, 1.0]])
    labels = np.stack([np.arange(N) % 2, 2 + (np.arange(N) % 3)])
    weights = (0.1, 0.01, 0.01, 0.01)

    def loss():
        logits, lers = model.logits(coords, onehot, training=True)
        ce, _, _ = softmax_cross_entropy(logits.reshape(B * N, -1), labels.reshape(-1))
        return compose_total(ce, lers, weights)

    def analytic():
        model.loss_and_grad(coords, onehot, labels, True, None, weights)
        return [("coords", coords, model.last_input_grad)]

    return _check_module("segmenter_total_loss", model.store, [coords], analytic, loss)


ALL_CHECKS = (
    check_linear,
    lambda: check_batchnorm(True),
    lambda: check_batchnorm(False),
    lambda: check_mlp_layer("relu"),
    lambda: check_mlp_layer("leaky_relu"),
    lambda: check_mlp_layer("sigmoid"),
    lambda: check_mlp_layer("none"),
    check_graph_encode,
    check_max_pool,
    check_back_projection,
    check_error_loss,
    check_dilation_head,
    check_feature_propagation,
    check_em_module,
    check_metrics_path,
    check_surrogate_route,
    check_mr_branch,
    check_merge_gate,
    check_fc_head,
    check_classifier_full,
    check_segmenter_full,
)


def run_suite(report=print) -> list[CheckResult]:
    """Run every gradient check; report one line per check; return the results."""
    results = []
    for check in ALL_CHECKS:
        res = check()
        results.append(res)
        if report is not None:
            status = "PASS" if res.ok else "FAIL"
            report(f"gradcheck {res.name}: max_rel_err={res.max_err:.3e} [{status}]")
    return results
