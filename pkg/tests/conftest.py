"""Shared helpers: a finite-difference gradient check for single layers."""

import numpy as np

from equipose.layers import named_params


def layer_fd_check(layer, x, train=False, step=1e-6, seed=99):
    """Max relative error between analytic and central-difference gradients of
    sum(forward(x) * fixed_random) over the layer's inputs and parameters."""
    rng = np.random.default_rng(seed)
    out0 = layer.forward(x, train=train, ctx={})
    upstream = rng.normal(size=out0.shape)

    def loss() -> float:
        return float(np.sum(layer.forward(x, train=train, ctx={}) * upstream))

    layer.zero_grad()
    ctx = {}
    layer.forward(x, train=train, ctx=ctx)
    dx = layer.backward(upstream, ctx=ctx)

    def fd(arr):
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            up = loss()
            flat[i] = keep - step
            down = loss()
            flat[i] = keep
            gflat[i] = (up - down) / (2.0 * step)
        return g

    def rel(a, n):
        denom = np.abs(a) + np.abs(n)
        mask = denom > 1e-8
        return float((np.abs(a - n)[mask] / denom[mask]).max()) if mask.any() else 0.0

    worst = rel(dx, fd(x))
    for _, p in named_params(layer):
        if p.kind == "stat":
            continue
        worst = max(worst, rel(p.grad, fd(p.value)))
    return worst
