"""Structured embedding refinement fusion of the quantized maps.

Quantized coarse/medium/fine maps are pooled onto the coarse grid and mixed
with scalar weights. The global momentum embedding scores the fused tokens and
the attention-weighted token average goes through a small MLP head to produce
the refined target.
"""

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .nn import ParamStore

MODES = ("token_value", "single_key")
DEGENERATE_NORM = 1e-12


class DegenerateTargetError(FloatingPointError):
    pass


@dataclass
class SerfParams:
    alpha: np.ndarray = field(default_factory=lambda: np.full(3, 1.0 / 3.0))  # (coarse, medium, fine)
    mode: str = "token_value"
    mlp: ParamStore = field(default_factory=ParamStore)
    trainable_alpha: bool = False

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.alpha.shape != (3,) or np.any(self.alpha < 0):
            raise ValueError("alpha must be three non-negative weights (coarse, medium, fine)")
        if self.mode not in MODES:
            raise ValueError(f"unknown SERF mode {self.mode!r}")


def init_serf(d, hidden, rng, dtype=np.float64, in_dim=None, **kwargs):
    mlp = nn.init_mlp(ParamStore(), "serf", in_dim or d, hidden, d, rng, dtype)
    return SerfParams(mlp=mlp, **kwargs)


@dataclass
class FusedTokens:
    tokens: np.ndarray  # (B, T, d) or (T, d)
    pooled: np.ndarray  # (B, d) or (d,)


def avg_pool_to(z, size):
    """Average-pool a (..., H, W, d) map down to (..., size, size, d)."""
    H, W = z.shape[-3], z.shape[-2]
    if H % size or W % size:
        raise ValueError(f"cannot pool a {H}x{W} grid onto {size}x{size}")
    kh, kw = H // size, W // size
    lead = z.shape[:-3]
    r = z.reshape(*lead, size, kh, size, kw, z.shape[-1])
    return r.mean(axis=(-4, -2))


def avg_pool_backward(dpooled, in_hw):
    H, W = in_hw
    size = dpooled.shape[-2]
    kh, kw = H // size, W // size
    up = np.repeat(np.repeat(dpooled, kh, axis=-3), kw, axis=-2)
    return up / (kh * kw)


def fuse(z_c, z_m, z_f, alpha):
    """Weighted sum of the quantized maps on the coarse grid.

    Maps are (H_j, W_j, d) or (B, H_j, W_j, d); any map may be None to drop
    that scale. Returns FusedTokens with tokens in row-major grid order.
    """
    maps = [z_c, z_m, z_f]
    ref = next(z for z in maps if z is not None)
    if z_c is not None:
        size = z_c.shape[-3]
    else:
        size = min(z.shape[-3] for z in maps if z is not None)
    dims = {z.shape[-1] for z in maps if z is not None}
    if len(dims) != 1:
        raise ValueError("all quantized maps must share the codeword dim")
    out = np.zeros(ref.shape[:-3] + (size, size, ref.shape[-1]), dtype=ref.dtype)
    for a, z in zip(alpha, maps):
        if z is None:
            continue
        zp = z if z.shape[-3] == size else avg_pool_to(z, size)
        out = out + a * zp
    tokens = out.reshape(*ref.shape[:-3], size * size, ref.shape[-1])
    return FusedTokens(tokens=tokens, pooled=tokens.mean(axis=-2))


def fuse_alpha_grad(z_c, z_m, z_f, dtokens):
    """d(loss)/d(alpha) given d(loss)/d(fused tokens)."""
    size = int(round(np.sqrt(dtokens.shape[-2])))
    grads = np.zeros(3)
    for i, z in enumerate((z_c, z_m, z_f)):
        if z is None:
            continue
        zp = z if z.shape[-3] == size else avg_pool_to(z, size)
        grads[i] = float((zp.reshape(dtokens.shape) * dtokens).sum())
    return grads


def _softmax(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def attention_weights(tokens, h):
    d = tokens.shape[-1]
    scores = np.einsum("...td,...d->...t", tokens, h) / np.sqrt(d)
    return _softmax(scores)


def refine(fused, h, mode="token_value", return_weights=False):
    """Attention-pool the fused tokens using ``h`` as the scoring vector.

    ``single_key`` keeps the single-query/single-key form, where the softmax
    runs over one element and the output is ``h`` itself.
    """
    tokens = fused.tokens if isinstance(fused, FusedTokens) else fused
    if tokens.shape[-1] != h.shape[-1]:
        raise ValueError("token dim and h dim differ")
    if mode == "single_key":
        k = np.array(h, copy=True)
        w = np.ones(h.shape[:-1] + (1,), dtype=h.dtype)
    elif mode == "token_value":
        w = attention_weights(tokens, h)
        k = np.einsum("...t,...td->...d", w, tokens)
    else:
        raise ValueError(f"unknown SERF mode {mode!r}")
    return (k, w) if return_weights else k


def refine_backward(dk, tokens, h, w, mode="token_value"):
    """Returns (dtokens, dh)."""
    if mode == "single_key":
        return np.zeros_like(tokens), dk
    d = tokens.shape[-1]
    g = np.einsum("...td,...d->...t", tokens, dk)
    ds = w * (g - (w * g).sum(axis=-1, keepdims=True)) / np.sqrt(d)
    dtokens = w[..., None] * dk[..., None, :] + ds[..., None] * h[..., None, :]
    dh = np.einsum("...t,...td->...d", ds, tokens)
    return dtokens, dh


def target(k, mlp, check=True):
    """q_t = MLP(k). Raises DegenerateTargetError on a (near) zero target."""
    single = k.ndim == 1
    kb = k[None] if single else k
    q, cache = nn.mlp_forward(mlp, "serf", kb)
    if check:
        norms = np.linalg.norm(q, axis=-1)
        if np.any(norms < DEGENERATE_NORM):
            raise DegenerateTargetError(
                f"SERF target norm {norms.min():.3e} below {DEGENERATE_NORM}")
    return (q[0] if single else q), cache


def target_backward(dq, cache, mlp):
    """Returns (dk, mlp_grads)."""
    single = dq.ndim == 1
    grads = mlp.zeros_like()
    dk = nn.mlp_backward(dq[None] if single else dq, cache, "serf", grads)
    return (dk[0] if single else dk), grads
