"""Convolutional backbone with multi-scale taps, projection and prediction heads.

The backbone has three stages. Each stage is a stride-2 conv followed by a
stride-1 conv, both conv -> per-sample norm -> ReLU. Stage outputs are the fine,
medium and coarse maps; the coarse map is average-pooled into the global
embedding fed to the projection head. The prediction head lives in its own
store because only the gradient-trained branch carries one.
"""

from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import nn
from .nn import ParamStore

SCALES = ("f", "m", "c")


@dataclass
class EncoderConfig:
    input_size: int = 32
    stage_channels: tuple = (16, 32, 64)
    embed_dim: int = 64
    proj_hidden: int = 128
    proj_out: int = 64
    in_channels: int = 1
    tap: str = "post"  # where z_f / z_m / z_c are read: after ("post") or before the final ReLU

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if len(self.stage_channels) != 3:
            raise ValueError("stage_channels needs exactly three entries")
        if self.input_size % 8 or self.input_size // 8 < 2:
            raise ValueError("input_size must be divisible by 8 with a coarse grid of at least 2x2")
        if self.tap not in ("post", "pre"):
            raise ValueError(f"unknown tap {self.tap!r}")

    @property
    def grid_sizes(self):
        s = self.input_size
        return {"f": s // 2, "m": s // 4, "c": s // 8}

    @property
    def scale_channels(self):
        return dict(zip(SCALES, self.stage_channels))

    def to_dict(self):
        return asdict(self)


# Documented full-scale analogue (ResNet-18 layer2/3/4 widths, 224 px input).
FULL_SCALE_ENCODER = dict(input_size=224, stage_channels=(128, 256, 512),
                          embed_dim=128, proj_hidden=2048, proj_out=128)


@dataclass
class MultiScaleFeatures:
    z_f: np.ndarray
    z_m: np.ndarray
    z_c: np.ndarray
    pooled: np.ndarray

    def scale(self, name):
        return {"f": self.z_f, "m": self.z_m, "c": self.z_c}[name]


@dataclass
class Embeddings:
    g: np.ndarray
    h: np.ndarray


def init_params(cfg, seed, dtype=np.float64):
    """Encoder + projection head parameters. Deterministic in (cfg, seed)."""
    rng = np.random.default_rng(seed)
    p = ParamStore()
    c_in = cfg.in_channels
    for i, c in enumerate(cfg.stage_channels):
        for j, cin in ((1, c_in), (2, c)):
            fan_in = cin * 9
            lim = np.sqrt(3.0 / fan_in)
            p[f"enc.s{i}.conv{j}.w"] = rng.uniform(-lim, lim, (c, cin, 3, 3)).astype(dtype)
            p[f"enc.s{i}.conv{j}.b"] = np.zeros(c, dtype=dtype)
            p[f"enc.s{i}.norm{j}.scale"] = np.ones(c, dtype=dtype)
            p[f"enc.s{i}.norm{j}.shift"] = np.zeros(c, dtype=dtype)
        c_in = c
    nn.init_mlp(p, "proj", cfg.stage_channels[-1], cfg.proj_hidden, cfg.proj_out, rng, dtype)
    return p


def init_predictor(cfg, seed, dtype=np.float64):
    rng = np.random.default_rng(seed)
    return nn.init_mlp(ParamStore(), "pred", cfg.proj_out, cfg.proj_hidden, cfg.proj_out, rng, dtype)


def _as_batch(x, cfg):
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[..., None]
    if x.ndim != 4 or x.shape[1:] != (cfg.input_size, cfg.input_size, cfg.in_channels):
        raise ValueError(
            f"expected input of shape (B, {cfg.input_size}, {cfg.input_size}[, {cfg.in_channels}]),"
            f" got {np.shape(x)}")
    return x


def encode(params, x, cfg):
    """Backbone only. Returns (MultiScaleFeatures, cache)."""
    x = _as_batch(x, cfg)
    taps, caches = {}, []
    a = x
    for i, name in enumerate(SCALES):
        stage_cache = []
        for j, stride in ((1, 2), (2, 1)):
            pre = f"enc.s{i}"
            y, cc = nn.conv_forward(a, params[f"{pre}.conv{j}.w"], params[f"{pre}.conv{j}.b"], stride)
            y, nc = nn.layernorm_forward(y, params[f"{pre}.norm{j}.scale"], params[f"{pre}.norm{j}.shift"])
            if j == 2 and cfg.tap == "pre":
                taps[name] = y
            a, mask = nn.relu_forward(y)
            stage_cache.append((cc, nc, mask))
        if cfg.tap == "post":
            taps[name] = a
        caches.append(stage_cache)
    pooled = a.mean(axis=(1, 2))
    feats = MultiScaleFeatures(z_f=taps["f"], z_m=taps["m"], z_c=taps["c"], pooled=pooled)
    return feats, (caches, a.shape)


def forward(params, x, cfg, pred=None, return_cache=False):
    """Full forward pass.

    ``h`` is the prediction-head output when ``pred`` is given and equals ``g``
    otherwise, so the momentum branch yields its target directly as ``h``.
    """
    feats, enc_cache = encode(params, x, cfg)
    g, proj_cache = nn.mlp_forward(params, "proj", feats.pooled)
    pred_cache = None
    if pred is not None:
        h, pred_cache = nn.mlp_forward(pred, "pred", g)
    else:
        h = g
    out = (feats, Embeddings(g=g, h=h))
    if return_cache:
        return out + ((enc_cache, proj_cache, pred_cache),)
    return out


def backward_from_cache(params, cache, upstream, cfg, pred=None, need_dx=False):
    """Gradients of sum(<output, upstream>) w.r.t. every parameter.

    ``upstream`` maps any of z_f, z_m, z_c, pooled, g, h to an array shaped like
    that output. Returns ``(grads, pred_grads, dx)``; dx is None unless ``need_dx``.
    """
    enc_cache, proj_cache, pred_cache = cache
    grads = params.zeros_like()
    pred_grads = pred.zeros_like() if pred is not None else None

    dg = upstream.get("g")
    dh = upstream.get("h")
    if dh is not None:
        if pred is not None:
            d = nn.mlp_backward(dh, pred_cache, "pred", pred_grads)
        else:
            d = dh
        dg = d if dg is None else dg + d

    caches, last_shape = enc_cache
    B, Hc, Wc, Cc = last_shape
    dpooled = upstream.get("pooled")
    if dg is not None:
        d = nn.mlp_backward(dg, proj_cache, "proj", grads)
        dpooled = d if dpooled is None else dpooled + d

    da = np.zeros(last_shape, dtype=params["enc.s0.conv1.w"].dtype)
    if dpooled is not None:
        da = da + dpooled[:, None, None, :] / (Hc * Wc)

    for i in reversed(range(3)):
        name = SCALES[i]
        dtap = upstream.get(f"z_{name}")
        if dtap is not None and cfg.tap == "post":
            da = da + dtap
        for j in (2, 1):
            cc, nc, mask = caches[i][j - 1]
            dy = nn.relu_backward(da, mask)
            if j == 2 and dtap is not None and cfg.tap == "pre":
                dy = dy + dtap
            pre = f"enc.s{i}"
            dy, dscale, dshift = nn.layernorm_backward(dy, nc)
            grads[f"{pre}.norm{j}.scale"] += dscale
            grads[f"{pre}.norm{j}.shift"] += dshift
            da, dw, db = nn.conv_backward(dy, cc, need_dx=need_dx or i > 0 or j > 1)
            grads[f"{pre}.conv{j}.w"] += dw
            grads[f"{pre}.conv{j}.b"] += db
    return grads, pred_grads, da


def backward(params, x, upstream, cfg, pred=None):
    """Recomputes the forward pass and returns ``(grads, pred_grads)``."""
    *_, cache = forward(params, x, cfg, pred=pred, return_cache=True)
    grads, pred_grads, _ = backward_from_cache(params, cache, upstream, cfg, pred)
    return grads, pred_grads
