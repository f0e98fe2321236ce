"""Validate a hand-written backward pass against central finite differences.

Every layer in this library carries its own backward implementation; the
finite-difference oracle is the independent second route that keeps them
honest. This script checks one error-minimizing module end to end, then
runs the library's full gradient suite (the same one `drnet gradcheck`
uses).
"""

import numpy as np

from drnet import gradcheck
from drnet.layers import EmModule
from drnet.numerics import ParamStore, finite_difference_gradient, max_relative_error, rng_uniform

store = ParamStore()
module = EmModule(store, {}, "em", 3, 6, 3, 2, np.float64, seed=5, surrogate_gate=False)
coords = rng_uniform(1, -1.0, 1.0, (2, 8, 3))
probe = rng_uniform(2, -1.0, 1.0, (2, 8, 6))


def loss():
    pooled, restoration, _ = module.forward(coords, True)
    return float(np.sum(pooled * probe)) + 0.5 * restoration


loss()
dcoords = module.backward(probe, 0.5)

fd = finite_difference_gradient(lambda _: loss(), coords, eps=1e-6)
print(f"input gradient  : analytic vs FD rel err {max_relative_error(dcoords, fd):.2e}")

worst = 0.0
for p in store:
    p.grad[...] = 0.0
loss()
module.backward(probe, 0.5)
for p in store:
    fd = finite_difference_gradient(lambda _: loss(), p.value, eps=1e-6)
    worst = max(worst, max_relative_error(p.grad, fd))
print(f"parameter grads : worst rel err {worst:.2e} over {len(store)} tensors")

print("\nfull library suite:")
results = gradcheck.run_suite()
print(f"-> {sum(r.ok for r in results)}/{len(results)} checks under {gradcheck.TOLERANCE:g}")
