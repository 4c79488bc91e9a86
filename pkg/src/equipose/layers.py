"""Rotation-equivariant layer kit over vector-list features.

A vector-list feature is an array of shape (..., N, C, 3): N points, C
channels, each channel a 3-vector. Rotations act channel-wise on the right,
``v @ R`` (see rotate_feature), and every layer L here satisfies
``L(v @ R) == L(v) @ R`` to machine precision. The invariance head instead
satisfies ``L(v @ R) == L(v)``.

Layers implement analytic forward and backward passes. forward() records
what backward() needs either on the layer itself or in a caller-provided
ctx dict, so two forward passes (e.g. the two evaluation paths of the
rotation-consistency loss) can stay alive at once.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import EmptyInput, NoForwardRecorded, ShapeMismatch

# Below this squared norm the learned truncation direction is considered
# undefined and the input passes through unchanged.
K_DEGENERATE_SQ = 1e-12 ** 2

# Norm floor for the batch-norm rescale, avoiding 0/0 on zero channels.
NORM_FLOOR = 1e-8


def rotate_feature(v, r) -> np.ndarray:
    """Rotate every channel 3-vector: v @ r. Single owner of the convention."""
    return np.asarray(v, dtype=np.float64) @ np.asarray(r, dtype=np.float64)


class Param:
    """A named tensor with a gradient accumulator of identical shape."""

    __slots__ = ("name", "value", "grad", "kind")

    def __init__(self, name: str, value, kind: str = "weight"):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.kind = kind  # weight | bias | gain | shift | stat

    def zero_grad(self):
        self.grad[...] = 0.0


class Layer:
    """Base layer: own_params/children expose the tree, forward/backward do the math."""

    def own_params(self) -> list:
        return []

    def children(self) -> list:
        return []

    def params(self) -> list:
        out = list(self.own_params())
        for _, child in self.children():
            out.extend(child.params())
        return out

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def forward(self, v, train: bool = False, ctx: dict = None):
        raise NotImplementedError

    def backward(self, grad, ctx: dict = None):
        raise NotImplementedError

    # cache plumbing -------------------------------------------------------

    def _new_cache(self, ctx: dict) -> dict:
        if ctx is None:
            self._cache = {}
            return self._cache
        ctx.clear()
        return ctx

    def _get_cache(self, ctx: dict) -> dict:
        cache = ctx if ctx is not None else getattr(self, "_cache", None)
        if not cache:
            raise NoForwardRecorded(f"{type(self).__name__}.backward without a recorded forward")
        return cache


def named_params(layer: Layer, prefix: str = "") -> list:
    """Depth-first (name, Param) pairs with dotted path names."""
    out = [(prefix + p.name, p) for p in layer.own_params()]
    for child_name, child in layer.children():
        out.extend(named_params(child, f"{prefix}{child_name}."))
    return out


def _check_channels(v: np.ndarray, expected: int, who: str):
    if v.ndim < 2 or v.shape[-1] != 3:
        raise ShapeMismatch(f"{who}: expected (..., C, 3) vector feature, got {v.shape}")
    if v.shape[-2] != expected:
        raise ShapeMismatch(f"{who}: expected {expected} channels, got {v.shape[-2]}")


class VNLinear(Layer):
    """Channel-mixing linear map W @ v applied per point; exactly equivariant."""

    def __init__(self, in_channels: int, out_channels: int):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.w = Param("W", np.zeros((out_channels, in_channels)))

    def own_params(self):
        return [self.w]

    def forward(self, v, train=False, ctx=None):
        v = np.asarray(v, dtype=np.float64)
        _check_channels(v, self.in_channels, "VNLinear")
        cache = self._new_cache(ctx)
        cache["v"] = v
        return np.matmul(self.w.value, v)

    def backward(self, grad, ctx=None):
        cache = self._get_cache(ctx)
        v = cache["v"]
        self.w.grad += np.tensordot(
            grad.reshape(-1, self.out_channels, 3),
            v.reshape(-1, self.in_channels, 3),
            axes=[(0, 2), (0, 2)],
        )
        return np.matmul(self.w.value.T, grad)


class VNReLU(Layer):
    """Direction-gated truncation: q where <q,k> >= 0, else the part of q
    orthogonal to k. q = W v and k = U v are learned channel mixes, so the
    output half-space rotates with the input and equivariance is exact.
    """

    def __init__(self, in_channels: int, out_channels: int):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.w = Param("W", np.zeros((out_channels, in_channels)))
        self.u = Param("U", np.zeros((out_channels, in_channels)))

    def own_params(self):
        return [self.w, self.u]

    def forward(self, v, train=False, ctx=None):
        v = np.asarray(v, dtype=np.float64)
        _check_channels(v, self.in_channels, "VNReLU")
        cache = self._new_cache(ctx)
        q = np.matmul(self.w.value, v)
        k = np.matmul(self.u.value, v)
        s = np.sum(q * k, axis=-1)
        t = np.sum(k * k, axis=-1)
        # boundary <q,k> = 0 passes q through, matching ReLU's convention at 0
        project = (s < 0.0) & (t > K_DEGENERATE_SQ)
        ratio = np.where(project, s / np.where(project, t, 1.0), 0.0)
        out = q - ratio[..., None] * k
        cache.update(v=v, q=q, k=k, s=s, t=t, project=project)
        return out

    def backward(self, grad, ctx=None):
        cache = self._get_cache(ctx)
        v, q, k = cache["v"], cache["q"], cache["k"]
        s, t, project = cache["s"], cache["t"], cache["project"]
        t_safe = np.where(project, t, 1.0)
        gk = np.sum(grad * k, axis=-1)
        m = project.astype(np.float64)
        dq = grad - (m * gk / t_safe)[..., None] * k
        dk = (
            -(m * gk / t_safe)[..., None] * q
            - (m * s / t_safe)[..., None] * grad
            + (m * 2.0 * s * gk / t_safe**2)[..., None] * k
        )
        v3 = v.reshape(-1, self.in_channels, 3)
        axes = [(0, 2), (0, 2)]
        self.w.grad += np.tensordot(dq.reshape(-1, self.out_channels, 3), v3, axes=axes)
        self.u.grad += np.tensordot(dk.reshape(-1, self.out_channels, 3), v3, axes=axes)
        return np.matmul(self.w.value.T, dq) + np.matmul(self.u.value.T, dk)


class VNMeanPool(Layer):
    """Channel-wise arithmetic mean over the point axis: (..., N, C, 3) -> (..., 1, C, 3)."""

    def forward(self, v, train=False, ctx=None):
        v = np.asarray(v, dtype=np.float64)
        if v.ndim < 3 or v.shape[-3] == 0:
            raise EmptyInput("mean pool requires at least one point")
        cache = self._new_cache(ctx)
        cache["n"] = v.shape[-3]
        cache["shape"] = v.shape
        return v.mean(axis=-3, keepdims=True)

    def backward(self, grad, ctx=None):
        cache = self._get_cache(ctx)
        return np.broadcast_to(grad / cache["n"], cache["shape"]).copy()


class VNPoolConcat(Layer):
    """Append the pooled channel mean back to every point, doubling channels."""

    def forward(self, v, train=False, ctx=None):
        v = np.asarray(v, dtype=np.float64)
        if v.ndim < 3 or v.shape[-3] == 0:
            raise EmptyInput("pool-concat requires at least one point")
        cache = self._new_cache(ctx)
        cache["n"] = v.shape[-3]
        cache["c"] = v.shape[-2]
        mean = v.mean(axis=-3, keepdims=True)
        return np.concatenate([v, np.broadcast_to(mean, v.shape)], axis=-2)

    def backward(self, grad, ctx=None):
        cache = self._get_cache(ctx)
        c, n = cache["c"], cache["n"]
        g_local = grad[..., :c, :]
        g_pool = grad[..., c:, :]
        return g_local + g_pool.sum(axis=-3, keepdims=True) / n


class VNBatchNorm(Layer):
    """Scalar batch-norm applied to channel norms; each vector is rescaled by
    normalized-norm / norm so only magnitudes change. Statistics are taken per
    channel over every other axis, which makes the layer equivariant even when
    each batch element carries its own rotation (norms are rotation-invariant).
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1, affine: bool = True):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.affine = affine
        self.gamma = Param("gamma", np.ones(channels), kind="gain") if affine else None
        self.beta = Param("beta", np.zeros(channels), kind="shift") if affine else None
        self.running_mean = Param("running_mean", np.zeros(channels), kind="stat")
        self.running_var = Param("running_var", np.ones(channels), kind="stat")

    def own_params(self):
        out = [self.running_mean, self.running_var]
        if self.affine:
            out = [self.gamma, self.beta] + out
        return out

    def forward(self, v, train=False, ctx=None):
        v = np.asarray(v, dtype=np.float64)
        _check_channels(v, self.channels, "VNBatchNorm")
        cache = self._new_cache(ctx)
        n = np.linalg.norm(v, axis=-1)
        n_safe = np.maximum(n, NORM_FLOOR)
        axes = tuple(range(n.ndim - 1))
        if train:
            mu = n.mean(axis=axes)
            var = n.var(axis=axes)
            count = int(np.prod([n.shape[a] for a in axes])) if axes else 1
            unbiased = var * count / max(count - 1, 1)
            self.running_mean.value *= 1.0 - self.momentum
            self.running_mean.value += self.momentum * mu
            self.running_var.value *= 1.0 - self.momentum
            self.running_var.value += self.momentum * unbiased
        else:
            mu = self.running_mean.value
            var = self.running_var.value
            count = 0
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (n - mu) * inv
        out_n = self.gamma.value * xhat + self.beta.value if self.affine else xhat
        scale = out_n / n_safe
        cache.update(
            v=v, n=n, n_safe=n_safe, inv=inv, xhat=xhat, out_n=out_n, scale=scale,
            axes=axes, count=count, train=train,
        )
        return v * scale[..., None]

    def backward(self, grad, ctx=None):
        cache = self._get_cache(ctx)
        v, n, n_safe = cache["v"], cache["n"], cache["n_safe"]
        inv, xhat, out_n, scale = cache["inv"], cache["xhat"], cache["out_n"], cache["scale"]
        axes, count, train = cache["axes"], cache["count"], cache["train"]

        d_scale = np.sum(grad * v, axis=-1)
        dv = grad * scale[..., None]
        d_out_n = d_scale / n_safe
        # denominator of the rescale; frozen below the norm floor
        dn = d_scale * (-out_n / n_safe**2) * (n > NORM_FLOOR)
        if self.affine:
            self.gamma.grad += np.sum(d_out_n * xhat, axis=axes)
            self.beta.grad += np.sum(d_out_n, axis=axes)
            d_xhat = d_out_n * self.gamma.value
        else:
            d_xhat = d_out_n
        if train:
            centered = xhat / inv
            d_var = np.sum(d_xhat * centered, axis=axes) * (-0.5) * inv**3
            d_mu = np.sum(-d_xhat * inv, axis=axes)
            dn += d_xhat * inv + d_var * 2.0 * centered / count + d_mu / count
        else:
            dn += d_xhat * inv
        direction = np.where((n > NORM_FLOOR)[..., None], v / n_safe[..., None], 0.0)
        return dv + dn[..., None] * direction


class VNInvariant(Layer):
    """Equivariant-to-invariant conversion: two linear vector branches form a
    per-point Gram matrix (rotation cancels in v_a @ v_b.T), whose flattened
    entries feed a small scalar MLP of two linear layers with max(0, .) between.
    """

    def __init__(
        self,
        in_channels: int,
        branch_a: int = None,
        branch_b: int = None,
        hidden: int = 64,
        out: int = 64,
    ):
        self.in_channels = in_channels
        self.branch_a = in_channels if branch_a is None else branch_a
        self.branch_b = in_channels if branch_b is None else branch_b
        self.wa = Param("Wa", np.zeros((self.branch_a, in_channels)))
        self.wb = Param("Wb", np.zeros((self.branch_b, in_channels)))
        self.w1 = Param("W1", np.zeros((hidden, self.branch_a * self.branch_b)))
        self.b1 = Param("b1", np.zeros(hidden), kind="bias")
        self.w2 = Param("W2", np.zeros((out, hidden)))
        self.b2 = Param("b2", np.zeros(out), kind="bias")

    def own_params(self):
        return [self.wa, self.wb, self.w1, self.b1, self.w2, self.b2]

    def forward(self, v, train=False, ctx=None):
        v = np.asarray(v, dtype=np.float64)
        _check_channels(v, self.in_channels, "VNInvariant")
        cache = self._new_cache(ctx)
        va = np.matmul(self.wa.value, v)
        vb = np.matmul(self.wb.value, v)
        gram = np.matmul(va, np.swapaxes(vb, -1, -2))
        flat = gram.reshape(gram.shape[:-2] + (self.branch_a * self.branch_b,))
        h = flat @ self.w1.value.T + self.b1.value
        relu = np.maximum(h, 0.0)
        out = relu @ self.w2.value.T + self.b2.value
        cache.update(v=v, va=va, vb=vb, flat=flat, h=h, relu=relu)
        return out

    def backward(self, grad, ctx=None):
        cache = self._get_cache(ctx)
        v, va, vb = cache["v"], cache["va"], cache["vb"]
        flat, h, relu = cache["flat"], cache["h"], cache["relu"]
        g2 = grad.reshape(-1, grad.shape[-1])
        self.w2.grad += g2.T @ relu.reshape(g2.shape[0], -1)
        self.b2.grad += g2.sum(axis=0)
        d_relu = grad @ self.w2.value
        d_h = d_relu * (h > 0.0)
        dh2 = d_h.reshape(-1, d_h.shape[-1])
        self.w1.grad += dh2.T @ flat.reshape(dh2.shape[0], -1)
        self.b1.grad += dh2.sum(axis=0)
        d_flat = d_h @ self.w1.value
        d_gram = d_flat.reshape(d_flat.shape[:-1] + (self.branch_a, self.branch_b))
        d_va = np.matmul(d_gram, vb)
        d_vb = np.matmul(np.swapaxes(d_gram, -1, -2), va)
        v3 = v.reshape(-1, self.in_channels, 3)
        axes = [(0, 2), (0, 2)]
        self.wa.grad += np.tensordot(d_va.reshape(-1, self.branch_a, 3), v3, axes=axes)
        self.wb.grad += np.tensordot(d_vb.reshape(-1, self.branch_b, 3), v3, axes=axes)
        return np.matmul(self.wa.value.T, d_va) + np.matmul(self.wb.value.T, d_vb)


class Sequential(Layer):
    """Composition of layers; ctx holds one sub-cache per child."""

    def __init__(self, layers):
        self.layers = list(layers)

    def children(self):
        return [(str(i), layer) for i, layer in enumerate(self.layers)]

    def forward(self, v, train=False, ctx=None):
        cache = self._new_cache(ctx)
        for i, layer in enumerate(self.layers):
            sub = {}
            v = layer.forward(v, train=train, ctx=sub)
            cache[i] = sub
        return v

    def backward(self, grad, ctx=None):
        cache = self._get_cache(ctx)
        for i in reversed(range(len(self.layers))):
            grad = self.layers[i].backward(grad, ctx=cache[i])
        return grad


def init_layer_params(layer: Layer, rng: np.random.Generator) -> None:
    """Fan-in-scaled Gaussian weights, zero biases, unit batch-norm stats."""
    for _, p in named_params(layer):
        if p.kind == "weight":
            fan_in = p.value.shape[-1]
            p.value[...] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=p.value.shape)
        elif p.kind in ("bias", "shift"):
            p.value[...] = 0.0
        elif p.kind == "gain":
            p.value[...] = 1.0
        elif p.kind == "stat":
            p.value[...] = 1.0 if p.name.endswith("var") else 0.0
        p.zero_grad()


# parameter container serialization ---------------------------------------


def save_params(named, path) -> None:
    """Flat little-endian f64 blob at `path` plus a JSON manifest at `path`.json."""
    manifest = []
    offset = 0
    payload = []
    for name, value in named:
        arr = np.ascontiguousarray(value.value if isinstance(value, Param) else value, dtype="<f8")
        manifest.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "dtype": "<f8"}
        )
        payload.append(arr.tobytes())
        offset += arr.nbytes
    with open(path, "wb") as f:
        f.write(b"".join(payload))
    with open(str(path) + ".json", "w") as f:
        json.dump({"tensors": manifest}, f, indent=2)
        f.write("\n")


def load_params(path) -> dict:
    """Read a container written by save_params: name -> float64 array."""
    with open(str(path) + ".json") as f:
        manifest = json.load(f)
    with open(path, "rb") as f:
        blob = f.read()
    out = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype=entry["dtype"], count=count, offset=entry["offset"])
        out[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return out


def assign_params(layer: Layer, values: dict, prefix: str = "") -> None:
    for name, p in named_params(layer, prefix):
        if name not in values:
            raise KeyError(f"missing parameter {name} in container")
        if values[name].shape != p.value.shape:
            raise ShapeMismatch(
                f"parameter {name}: container shape {values[name].shape} != {p.value.shape}"
            )
        p.value[...] = values[name]
