"""Minimal numpy layer primitives with explicit backward passes.

Feature maps are channels-last: ``(B, H, W, C)``. Every ``*_forward`` returns
``(out, cache)`` and the matching ``*_backward`` consumes ``(dout, cache)``.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NORM_EPS = 1e-5


class ParamStore(dict):
    """Ordered mapping of parameter name -> ndarray.

    Insertion order is the traversal order used for serialization and
    optimizer state, so two stores built by the same code are congruent.
    """

    def copy(self):
        return ParamStore((k, v.copy()) for k, v in self.items())

    def zeros_like(self):
        return ParamStore((k, np.zeros_like(v)) for k, v in self.items())

    def shapes(self):
        return [(k, v.shape) for k, v in self.items()]

    def congruent(self, other):
        return self.shapes() == other.shapes()

    def all_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.values())

    def subset(self, prefix):
        return ParamStore((k, v) for k, v in self.items() if k.startswith(prefix))

    def astype(self, dtype):
        return ParamStore((k, v.astype(dtype)) for k, v in self.items())


def is_norm_or_bias(name):
    """Parameters exempt from weight decay and LARS trust scaling."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf in ("b", "scale", "shift")


# ---------------------------------------------------------------- conv 3x3


def conv_forward(x, w, b, stride=1):
    """3x3 convolution, zero padding 1. ``w`` has shape (C_out, C_in, 3, 3)."""
    B, H, W, C = x.shape
    c_out = w.shape[0]
    if w.shape[1] != C:
        raise ValueError(f"conv expects {w.shape[1]} input channels, got {C}")
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::stride, ::stride]
    Ho, Wo = win.shape[1], win.shape[2]
    # column layout (kh, kw, C) keeps channel slices contiguous in the backward scatter
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B * Ho * Wo, 9 * C)
    wmat = w.transpose(0, 2, 3, 1).reshape(c_out, 9 * C)
    out = cols @ wmat.T + b
    return out.reshape(B, Ho, Wo, c_out), (cols, x.shape, w, stride)


def conv_backward(dout, cache, need_dx=True):
    cols, xshape, w, stride = cache
    B, H, W, C = xshape
    c_out = w.shape[0]
    Ho, Wo = dout.shape[1], dout.shape[2]
    d2 = dout.reshape(-1, c_out)
    dw = (d2.T @ cols).reshape(c_out, 3, 3, C).transpose(0, 3, 1, 2)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    wmat = w.transpose(0, 2, 3, 1).reshape(c_out, 9 * C)
    dcols = (d2 @ wmat).reshape(B, Ho, Wo, 3, 3, C)
    dxp = np.zeros((B, H + 2, W + 2, C), dtype=dout.dtype)
    for kh in range(3):
        for kw in range(3):
            dxp[:, kh:kh + stride * Ho:stride, kw:kw + stride * Wo:stride, :] += dcols[:, :, :, kh, kw, :]
    return dxp[:, 1:-1, 1:-1, :], dw, db


# ------------------------------------------------------ per-sample norm


def layernorm_forward(x, scale, shift):
    """Per-sample normalization over (H, W, C) with per-channel affine."""
    mu = x.mean(axis=(1, 2, 3), keepdims=True)
    var = x.var(axis=(1, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + NORM_EPS)
    xhat = (x - mu) * inv
    return xhat * scale + shift, (xhat, inv, scale)


def layernorm_backward(dout, cache):
    xhat, inv, scale = cache
    n = xhat[0].size
    dscale = (dout * xhat).sum(axis=(0, 1, 2))
    dshift = dout.sum(axis=(0, 1, 2))
    dxhat = dout * scale
    s1 = dxhat.sum(axis=(1, 2, 3), keepdims=True)
    s2 = (dxhat * xhat).sum(axis=(1, 2, 3), keepdims=True)
    dx = inv * (dxhat - s1 / n - xhat * s2 / n)
    return dx, dscale, dshift


# ---------------------------------------------------------------- dense


def linear_forward(x, w, b=None):
    out = x @ w
    if b is not None:
        out = out + b
    return out, (x, w)


def linear_backward(dout, cache, has_bias=True):
    x, w = cache
    dx = dout @ w.T
    dw = x.T @ dout
    db = dout.sum(axis=0) if has_bias else None
    return dx, dw, db


def batchnorm_forward(x, scale, shift):
    """Batch normalization over axis 0; identity normalization when B == 1."""
    if x.shape[0] == 1:
        return x * scale + shift, (x, None, scale)
    mu = x.mean(axis=0)
    var = x.var(axis=0)
    inv = 1.0 / np.sqrt(var + NORM_EPS)
    xhat = (x - mu) * inv
    return xhat * scale + shift, (xhat, inv, scale)


def batchnorm_backward(dout, cache):
    xhat, inv, scale = cache
    dscale = (dout * xhat).sum(axis=0)
    dshift = dout.sum(axis=0)
    dxhat = dout * scale
    if inv is None:
        return dxhat, dscale, dshift
    n = xhat.shape[0]
    dx = inv * (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0))
    return dx, dscale, dshift


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dout, mask):
    return dout * mask


# ------------------------------------------------------------ MLP head


def init_mlp(store, prefix, d_in, d_hidden, d_out, rng, dtype=np.float64):
    """Two-layer head: Linear -> BN -> ReLU -> Linear (+bias)."""
    lim1 = 1.0 / np.sqrt(d_in)
    lim2 = 1.0 / np.sqrt(d_hidden)
    store[f"{prefix}.fc1.w"] = rng.uniform(-lim1, lim1, (d_in, d_hidden)).astype(dtype)
    store[f"{prefix}.bn1.scale"] = np.ones(d_hidden, dtype=dtype)
    store[f"{prefix}.bn1.shift"] = np.zeros(d_hidden, dtype=dtype)
    store[f"{prefix}.fc2.w"] = rng.uniform(-lim2, lim2, (d_hidden, d_out)).astype(dtype)
    store[f"{prefix}.fc2.b"] = np.zeros(d_out, dtype=dtype)
    return store


def mlp_forward(p, prefix, x):
    a, c1 = linear_forward(x, p[f"{prefix}.fc1.w"])
    n, c2 = batchnorm_forward(a, p[f"{prefix}.bn1.scale"], p[f"{prefix}.bn1.shift"])
    r, mask = relu_forward(n)
    out, c3 = linear_forward(r, p[f"{prefix}.fc2.w"], p[f"{prefix}.fc2.b"])
    return out, (c1, c2, mask, c3)


def mlp_backward(dout, cache, prefix, grads):
    """Accumulates parameter gradients into ``grads``; returns d(input)."""
    c1, c2, mask, c3 = cache
    dr, dw2, db2 = linear_backward(dout, c3)
    dn = relu_backward(dr, mask)
    da, dscale, dshift = batchnorm_backward(dn, c2)
    dx, dw1, _ = linear_backward(da, c1, has_bias=False)
    grads[f"{prefix}.fc1.w"] += dw1
    grads[f"{prefix}.bn1.scale"] += dscale
    grads[f"{prefix}.bn1.shift"] += dshift
    grads[f"{prefix}.fc2.w"] += dw2
    grads[f"{prefix}.fc2.b"] += db2
    return dx
