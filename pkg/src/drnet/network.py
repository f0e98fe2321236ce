"""Dual-branch network: full-resolution cascade, multi-resolution path, gated merge.

The full-resolution branch stacks four error-minimizing modules whose
outputs are concatenated and fused into the per-point embedding. The
multi-resolution branch starts from the first module's output, visits 1/4
and 1/16 resolutions through farthest point sampling and local graph
encoding, and climbs back up with densely concatenated propagated features.
A sigmoid gate computed from the pooled multi-resolution summary scales the
full-resolution embedding channel-wise; task heads sit on top.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from drnet.geometry import (
    _fp_backward,
    _fp_forward,
    _gather_points,
    _scatter_add_points,
    farthest_point_sampling,
    knn_batched,
)
from drnet.layers import (
    EmModule,
    Linear,
    MlpLayer,
    dropout_backward,
    dropout_forward,
    graph_encode_backward,
    graph_encode_batched,
    max_pool_neighbors_backward,
    max_pool_neighbors_batched,
)
from drnet.numerics import ParamStore, fold_seed, sigmoid

ERROR_LOSS_WEIGHTS = (0.1, 0.01, 0.01, 0.01)
FR_WIDTHS = (64, 64, 128, 256)
MR_RATIOS = (4, 16)


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy over rows; returns (loss, dlogits, probs)."""
    logits = np.asarray(logits)
    targets = np.asarray(targets, dtype=np.int64)
    n, c = logits.shape
    if targets.min() < 0 or targets.max() >= c:
        raise ValueError(f"target outside [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    sumexp = expd.sum(axis=1, keepdims=True)
    probs = expd / sumexp
    losses = np.log(sumexp[:, 0]) - shifted[np.arange(n), targets]
    dlogits = probs.copy()
    dlogits[np.arange(n), targets] -= 1.0
    dlogits /= n
    return float(losses.mean()), dlogits, probs


def total_loss(logits, targets, em_losses, weights=ERROR_LOSS_WEIGHTS) -> float:
    """Cross-entropy plus the weighted error-minimizing losses."""
    if len(em_losses) != len(weights):
        raise ValueError(f"expected {len(weights)} module losses, got {len(em_losses)}")
    logits = np.asarray(logits)
    flat = logits.reshape(-1, logits.shape[-1])
    ce, _, _ = softmax_cross_entropy(flat, np.asarray(targets).reshape(-1))
    return compose_total(ce, em_losses, weights)


def compose_total(ce: float, em_losses, weights=ERROR_LOSS_WEIGHTS) -> float:
    return float(ce) + float(sum(w * l for w, l in zip(weights, em_losses)))


class FrBranch:
    """Cascaded error-minimizing modules plus the channel-concat fuse MLP."""

    def __init__(self, store, buffers, c_in, widths, embed, k, d_max, dtype, seed, **em_kwargs):
        self.widths = tuple(widths)
        self.modules = []
        prev = c_in
        for i, w in enumerate(widths):
            self.modules.append(
                EmModule(
                    store,
                    buffers,
                    f"fr.em{i + 1}",
                    prev,
                    w,
                    k,
                    d_max,
                    dtype,
                    fold_seed(seed, 10 + i),
                    **em_kwargs,
                )
            )
            prev = w
        self.fuse = MlpLayer(
            store, buffers, "fr.fuse", sum(widths), embed, dtype, fold_seed(seed, 20)
        )

    def forward(self, p0: np.ndarray, training: bool):
        outs, lers, dils = [], [], []
        p = p0
        for mod in self.modules:
            p, ler, dil = mod.forward(p, training)
            outs.append(p)
            lers.append(ler)
            dils.append(dil)
        f_fr = self.fuse.forward(np.concatenate(outs, axis=-1), training)
        self._out_widths = [o.shape[-1] for o in outs]
        return f_fr, lers, dils, outs[0]

    def backward(self, df_fr: np.ndarray, df1_extra: np.ndarray, er_seeds):
        dconcat = self.fuse.backward(df_fr)
        splits = np.cumsum(self._out_widths)[:-1]
        dparts = np.split(dconcat, splits, axis=-1)
        dparts[0] = dparts[0] + df1_extra
        dcarry = 0.0
        for i in reversed(range(len(self.modules))):
            dcarry = self.modules[i].backward(dparts[i] + dcarry, er_seeds[i])
        return dcarry


class MrBranch:
    """Down/up-sampling path over 1, 1/4, 1/16 resolutions with dense skips."""

    def __init__(
        self,
        store,
        buffers,
        c_in,
        e_out,
        k_mr,
        dtype,
        seed,
        widths=(128, 256, 256),
        coordinate_knn: bool = False,
    ):
        w_b, w_c, w_bp = widths
        self.c_in = c_in
        self.k_mr = k_mr
        self.coordinate_knn = coordinate_knn
        self.widths = (w_b, w_c, w_bp)
        self.mlp_down1 = MlpLayer(
            store, buffers, "mr.down1", 2 * c_in, w_b, dtype, fold_seed(seed, 31)
        )
        self.mlp_down2 = MlpLayer(
            store, buffers, "mr.down2", 2 * w_b, w_c, dtype, fold_seed(seed, 32)
        )
        self.mlp_up1 = MlpLayer(
            store, buffers, "mr.up1", w_b + w_c, w_bp, dtype, fold_seed(seed, 33)
        )
        self.mlp_out = MlpLayer(
            store, buffers, "mr.out", c_in + w_bp + w_c, e_out, dtype, fold_seed(seed, 34)
        )
        self._cache = None

    @staticmethod
    def _pad_indices(n: int) -> np.ndarray:
        n_pad = -(-n // 16) * 16
        extra = n_pad - n
        if extra == 0:
            return np.arange(n, dtype=np.int64)
        dup = n - 1 - (np.arange(extra, dtype=np.int64) % n)
        return np.concatenate([np.arange(n, dtype=np.int64), dup])

    def forward(self, f1: np.ndarray, coords: np.ndarray, training: bool):
        b, n, _ = f1.shape
        pad_idx = self._pad_indices(n)
        n_pad = pad_idx.size
        f1_p = f1[:, pad_idx]
        coords_p = coords[:, pad_idx]
        m4, m16 = n_pad // MR_RATIOS[0], n_pad // MR_RATIOS[1]

        idx4 = np.stack([farthest_point_sampling(coords_p[i], m4) for i in range(b)])
        coords4 = _gather_points(coords_p, idx4)
        a4 = _gather_points(f1_p, idx4)
        nb4 = knn_batched(coords4 if self.coordinate_knn else a4, min(self.k_mr, m4))
        g4 = graph_encode_batched(a4, nb4)
        h4 = self.mlp_down1.forward(g4, training)
        b_feats, am4 = max_pool_neighbors_batched(h4)

        idx16 = np.stack([farthest_point_sampling(coords4[i], m16) for i in range(b)])
        coords16 = _gather_points(coords4, idx16)
        b16 = _gather_points(b_feats, idx16)
        nb16 = knn_batched(coords16 if self.coordinate_knn else b16, min(self.k_mr, m16))
        g16 = graph_encode_batched(b16, nb16)
        h16 = self.mlp_down2.forward(g16, training)
        c_feats, am16 = max_pool_neighbors_batched(h16)

        up_c4, fp_c4 = _fp_forward(coords16, coords4, c_feats)
        bprime = self.mlp_up1.forward(np.concatenate([b_feats, up_c4], axis=-1), training)
        up_b_n, fp_bn = _fp_forward(coords4, coords_p, bprime)
        up_c_n, fp_cn = _fp_forward(coords16, coords_p, c_feats)
        f_mr_p = self.mlp_out.forward(
            np.concatenate([f1_p, up_b_n, up_c_n], axis=-1), training
        )
        self._cache = (
            (b, n, n_pad, pad_idx),
            (idx4, idx16, nb4, nb16, am4, am16),
            (g4.shape, g16.shape, h4.shape, h16.shape, a4.shape, b16.shape),
            (fp_c4, fp_bn, fp_cn),
            (f1_p.shape, coords_p.shape, b_feats.shape, coords4.shape),
        )
        return f_mr_p[:, :n]

    def backward(self, df_mr: np.ndarray):
        (b, n, n_pad, pad_idx), idxs, shapes, fps, pshapes = self._cache
        idx4, idx16, nb4, nb16, am4, am16 = idxs
        g4_shape, g16_shape, h4_shape, h16_shape, a4_shape, b16_shape = shapes
        fp_c4, fp_bn, fp_cn = fps
        f1p_shape, coordsp_shape, bfeat_shape, coords4_shape = pshapes
        w_b, w_c, w_bp = self.widths

        df_mr_p = np.zeros((b, n_pad, df_mr.shape[-1]), dtype=df_mr.dtype)
        df_mr_p[:, :n] = df_mr
        dcat = self.mlp_out.backward(df_mr_p)
        df1_p = dcat[..., : self.c_in].copy()
        dup_b_n = dcat[..., self.c_in : self.c_in + w_bp]
        dup_c_n = dcat[..., self.c_in + w_bp :]

        dbprime, dcoords_p, dcoords4 = _fp_backward(fp_bn, dup_b_n)
        dc_feats, dfine_cn, dcoords16 = _fp_backward(fp_cn, dup_c_n)
        dcoords_p = dcoords_p + dfine_cn

        dcat_up = self.mlp_up1.backward(dbprime)
        db_feats = dcat_up[..., :w_b].copy()
        dc_from_up, dcoords4_b, dcoords16_b = _fp_backward(fp_c4, dcat_up[..., w_b:])
        dc_feats = dc_feats + dc_from_up
        dcoords4 = dcoords4 + dcoords4_b
        dcoords16 = dcoords16 + dcoords16_b

        dh16 = max_pool_neighbors_backward(h16_shape, am16, dc_feats)
        dg16 = self.mlp_down2.backward(dh16)
        db16 = graph_encode_backward(b16_shape, nb16, dg16)
        _scatter_add_points(db_feats, idx16, db16)
        dcoords4_fromsub = np.zeros(coords4_shape, dtype=dcoords4.dtype)
        _scatter_add_points(dcoords4_fromsub, idx16, dcoords16)
        dcoords4 = dcoords4 + dcoords4_fromsub

        dh4 = max_pool_neighbors_backward(h4_shape, am4, db_feats)
        dg4 = self.mlp_down1.backward(dh4)
        da4 = graph_encode_backward(a4_shape, nb4, dg4)
        _scatter_add_points(df1_p, idx4, da4)
        dcoords_p_fromsub = np.zeros(coordsp_shape, dtype=dcoords_p.dtype)
        _scatter_add_points(dcoords_p_fromsub, idx4, dcoords4)
        dcoords_p = dcoords_p + dcoords_p_fromsub

        df1 = np.zeros((b, n, self.c_in), dtype=df1_p.dtype)
        dcoords = np.zeros((b, n, 3), dtype=dcoords_p.dtype)
        np.add.at(df1, (slice(None), pad_idx), df1_p)
        np.add.at(dcoords, (slice(None), pad_idx), dcoords_p)
        return df1, dcoords


class MergeGate:
    """Channel-wise sigmoid enhancement of the full-resolution embedding."""

    def __init__(self, store, e_mr, e, dtype, seed):
        self.linear = Linear(store, "merge.gate", e_mr, e, dtype, seed)
        self._cache = None

    def forward(self, f_fr: np.ndarray, f_mr: np.ndarray) -> np.ndarray:
        pooled = f_mr.max(axis=1)
        am = f_mr.argmax(axis=1)
        z = self.linear.forward(pooled)
        s = sigmoid(z)
        f_dr = f_fr * s[:, None, :]
        self._cache = (f_fr, f_mr.shape, am, s)
        return f_dr

    def backward(self, df_dr: np.ndarray):
        f_fr, mr_shape, am, s = self._cache
        df_fr = df_dr * s[:, None, :]
        ds = np.sum(df_dr * f_fr, axis=1)
        dz = ds * s * (1.0 - s)
        dpooled = self.linear.backward(dz)
        df_mr = np.zeros(mr_shape, dtype=df_dr.dtype)
        np.put_along_axis(df_mr, am[:, None, :], dpooled[:, None, :], axis=1)
        return df_fr, df_mr


def merge(f_fr: np.ndarray, f_mr: np.ndarray, gate: MergeGate) -> np.ndarray:
    """Single-cloud merge: (N, e), (N, e') -> (N, e)."""
    return gate.forward(np.asarray(f_fr)[None], np.asarray(f_mr)[None])[0]


class _FcHead:
    """FC stack with batch norm, leaky activations, and dropout between layers."""

    def __init__(self, store, buffers, prefix, c_in, hidden, c_out, dropout, dtype, seed):
        self.layers = []
        prev = c_in
        for i, width in enumerate(hidden):
            self.layers.append(
                MlpLayer(store, buffers, f"{prefix}.fc{i + 1}", prev, width, dtype, fold_seed(seed, i))
            )
            prev = width
        self.final = Linear(store, f"{prefix}.out", prev, c_out, dtype, fold_seed(seed, 99))
        self.dropout = dropout
        self._masks = []

    def forward(self, x: np.ndarray, training: bool, rng=None):
        self._masks = []
        for layer in self.layers:
            x = layer.forward(x, training)
            if training and self.dropout > 0.0:
                if rng is None:
                    raise ValueError("training with dropout requires an rng stream")
                x, mask = dropout_forward(x, self.dropout, rng)
            else:
                mask = None
            self._masks.append(mask)
        return self.final.forward(x)

    def backward(self, dy: np.ndarray):
        dy = self.final.backward(dy)
        for layer, mask in zip(reversed(self.layers), reversed(self._masks)):
            dy = dropout_backward(dy, mask)
            dy = layer.backward(dy)
        return dy


@dataclass
class LossBreakdown:
    total: float
    ce: float
    er: tuple
    logits: np.ndarray


class _BaseModel:
    """Shared backbone wiring, parameter store, and checkpoint state handling."""

    def __init__(
        self,
        c_in=3,
        fr_widths=FR_WIDTHS,
        embed=256,
        embed_mr=None,
        k=4,
        d_max=5,
        k_mr=4,
        mr_widths=(128, 256, 256),
        dropout=0.5,
        dtype=np.float32,
        seed=0,
        edge_depth=1,
        hidden_relu=False,
        normalize_metrics=False,
        surrogate_gate=True,
        coordinate_knn=False,
    ):
        self.store = ParamStore()
        self.buffers: dict[str, np.ndarray] = {}
        self.dtype = dtype
        self.k = k
        self.d_max = d_max
        self.embed = embed
        self.embed_mr = embed if embed_mr is None else embed_mr
        self.dropout = dropout
        self.fr = FrBranch(
            self.store,
            self.buffers,
            c_in,
            fr_widths,
            embed,
            k,
            d_max,
            dtype,
            fold_seed(seed, 1),
            edge_depth=edge_depth,
            hidden_relu=hidden_relu,
            normalize_metrics=normalize_metrics,
            surrogate_gate=surrogate_gate,
        )
        self.mr = MrBranch(
            self.store,
            self.buffers,
            fr_widths[0],
            self.embed_mr,
            k_mr,
            dtype,
            fold_seed(seed, 2),
            widths=mr_widths,
            coordinate_knn=coordinate_knn,
        )
        self.gate = MergeGate(self.store, self.embed_mr, embed, dtype, fold_seed(seed, 3))
        self.last_dilations = []

    def features(self, coords: np.ndarray, training: bool):
        """(B, N, 3) -> merged per-point embedding (B, N, e) plus module losses."""
        coords = np.ascontiguousarray(coords, dtype=self.dtype)
        f_fr, lers, dils, f1 = self.fr.forward(coords, training)
        f_mr = self.mr.forward(f1, coords, training)
        f_dr = self.gate.forward(f_fr, f_mr)
        self.last_dilations = dils
        return f_dr, lers

    def features_backward(self, df_dr: np.ndarray, er_seeds):
        df_fr, df_mr = self.gate.backward(df_dr)
        df1_extra, dcoords_mr = self.mr.backward(df_mr)
        dcoords = self.fr.backward(df_fr, df1_extra, er_seeds)
        return dcoords + dcoords_mr

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"param.{p.name}": p.value.copy() for p in self.store}
        state.update({f"buffer.{k}": v.copy() for k, v in self.buffers.items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for p in self.store:
            key = f"param.{p.name}"
            if key not in state:
                raise KeyError(f"checkpoint missing {key}")
            p.value[...] = state[key].reshape(p.value.shape)
        for name, buf in self.buffers.items():
            key = f"buffer.{name}"
            if key not in state:
                raise KeyError(f"checkpoint missing {key}")
            buf[...] = state[key].reshape(buf.shape)


class PointClassifier(_BaseModel):
    """Whole-cloud classifier: global max pool over the merged embedding + FC stack."""

    def __init__(self, n_classes: int, head_widths=(512, 256), **kwargs):
        super().__init__(**kwargs)
        self.n_classes = n_classes
        self.head = _FcHead(
            self.store,
            self.buffers,
            "cls",
            self.embed,
            head_widths,
            n_classes,
            self.dropout,
            self.dtype,
            fold_seed(kwargs.get("seed", 0), 4),
        )
        self._pool_cache = None

    def logits(self, coords: np.ndarray, training: bool = False, rng=None):
        f_dr, lers = self.features(coords, training)
        pooled = f_dr.max(axis=1)
        am = f_dr.argmax(axis=1)
        self._pool_cache = (f_dr.shape, am)
        return self.head.forward(pooled, training, rng), lers

    def loss_and_grad(
        self, coords, labels, training=True, rng=None, er_weights=ERROR_LOSS_WEIGHTS
    ) -> LossBreakdown:
        logits, lers = self.logits(coords, training, rng)
        ce, dlogits, _ = softmax_cross_entropy(logits, labels)
        dpooled = self.head.backward(dlogits.astype(self.dtype))
        shape, am = self._pool_cache
        df_dr = np.zeros(shape, dtype=self.dtype)
        np.put_along_axis(df_dr, am[:, None, :], dpooled[:, None, :], axis=1)
        self.last_input_grad = self.features_backward(df_dr, er_weights)
        return LossBreakdown(compose_total(ce, lers, er_weights), ce, tuple(lers), logits)


class PointSegmenter(_BaseModel):
    """Per-point part classifier conditioned on the cloud's category one-hot."""

    def __init__(self, n_parts: int, n_categories: int, head_widths=(256, 128), **kwargs):
        super().__init__(**kwargs)
        self.n_parts = n_parts
        self.n_categories = n_categories
        self.head = _FcHead(
            self.store,
            self.buffers,
            "seg",
            2 * self.embed + n_categories,
            head_widths,
            n_parts,
            self.dropout,
            self.dtype,
            fold_seed(kwargs.get("seed", 0), 5),
        )
        self._pool_cache = None

    def logits(self, coords: np.ndarray, onehot: np.ndarray, training: bool = False, rng=None):
        f_dr, lers = self.features(coords, training)
        b, n, e = f_dr.shape
        pooled = f_dr.max(axis=1)
        am = f_dr.argmax(axis=1)
        global_b = np.broadcast_to(pooled[:, None, :], (b, n, e))
        onehot_b = np.broadcast_to(
            np.asarray(onehot, dtype=self.dtype)[:, None, :], (b, n, self.n_categories)
        )
        x = np.concatenate([f_dr, global_b, onehot_b], axis=-1)
        self._pool_cache = (f_dr.shape, am)
        return self.head.forward(x, training, rng), lers

    def loss_and_grad(
        self, coords, onehot, point_labels, training=True, rng=None, er_weights=ERROR_LOSS_WEIGHTS
    ) -> LossBreakdown:
        logits, lers = self.logits(coords, onehot, training, rng)
        b, n, s = logits.shape
        ce, dflat, _ = softmax_cross_entropy(
            logits.reshape(b * n, s), np.asarray(point_labels).reshape(-1)
        )
        dx = self.head.backward(dflat.reshape(b, n, s).astype(self.dtype))
        shape, am = self._pool_cache
        e = shape[-1]
        df_dr = dx[..., :e].copy()
        dpooled = dx[..., e : 2 * e].sum(axis=1)
        np.put_along_axis(
            df_dr,
            am[:, None, :],
            np.take_along_axis(df_dr, am[:, None, :], axis=1) + dpooled[:, None, :],
            axis=1,
        )
        self.last_input_grad = self.features_backward(df_dr, er_weights)
        return LossBreakdown(compose_total(ce, lers, er_weights), ce, tuple(lers), logits)


def classify(p0: np.ndarray, model: PointClassifier) -> np.ndarray:
    """Eval-mode class logits for a single (N, 3) cloud."""
    logits, _ = model.logits(np.asarray(p0)[None], training=False)
    return logits[0]


def segment(p0: np.ndarray, object_onehot: np.ndarray, model: PointSegmenter) -> np.ndarray:
    """Eval-mode per-point part logits for a single (N, 3) cloud."""
    logits, _ = model.logits(
        np.asarray(p0)[None], np.asarray(object_onehot)[None], training=False
    )
    return logits[0]
