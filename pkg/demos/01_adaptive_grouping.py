"""Adaptive dilated grouping on a cloud with a built-in density gradient.

Builds a flat sheet whose point density falls 4:1 from left to right, then
runs the grouping pipeline: pairwise squared distances -> candidate search
-> learned per-point dilation factor -> strided neighbor selection. With an
untrained head every gate sits at its neutral value; zeroing the head pins
the gate at exactly 3.0, and saturating it reproduces plain knn.
"""

import numpy as np

from drnet.geometry import candidate_search, knn
from drnet.grouping import DilationHead, adpg, dilated_select
from drnet.numerics import ParamStore, RandomStream

K, D_MAX, N = 4, 5, 256

stream = RandomStream(42)
u = stream.uniform(0.0, 1.0, (N,))
x = (4.0 - np.sqrt(16.0 - 15.0 * u)) / 3.0  # linear density 4:1 along x
y = stream.uniform(0.0, 1.0, (N,))
cloud = np.stack([x, y, np.zeros(N)], axis=1)

head = DilationHead(ParamStore(), "demo", K, D_MAX, np.float64, seed=7)
indices, dilation = adpg(cloud, K, D_MAX, head)
print(f"cloud: {N} points, k={K}, d_max={D_MAX}")
print(f"neighbor matrix: {indices.shape}, factors in [{dilation.factors.min()}, {dilation.factors.max()}]")

order = np.argsort(x)
quart = N // 4
print(f"gate mean, densest quartile : {dilation.gate[order[:quart]].mean():.3f}")
print(f"gate mean, sparsest quartile: {dilation.gate[order[-quart:]].mean():.3f}")

# a zeroed head is the arithmetic fixed point: sigmoid(0) -> gate 3.0 -> factor 3
head.set_zero()
_, neutral = adpg(cloud, K, D_MAX, head)
assert np.all(neutral.gate == 3.0) and np.all(neutral.factors == 3)
print("zeroed head: every gate exactly 3.0, factor 3")

# saturate the head low: dilation 1 everywhere reduces the grouping to knn
head.b2.value[...] = -60.0
saturated, _ = adpg(cloud, K, D_MAX, head)
assert np.array_equal(saturated, knn(cloud, K))
print("saturated-low head: selection identical to plain knn")

# stride-3 selection keeps every 3rd candidate
cand = candidate_search(cloud, K, D_MAX)
sel = dilated_select(cand, neutral, K)
assert np.array_equal(sel, cand.indices[:, [0, 3, 6, 9]])
print("uniform factor 3 keeps candidate positions 0, 3, 6, 9")
