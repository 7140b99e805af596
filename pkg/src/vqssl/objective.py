"""Cosine regression alignment and the total training objective."""

from dataclasses import dataclass, asdict

import numpy as np

ZERO_NORM = 1e-12


class ZeroNormError(FloatingPointError):
    pass


@dataclass
class LossBreakdown:
    l_reg_hphi: float
    l_reg_qt: float
    l_sim: float
    l_vq_per_scale: tuple
    l_vq: float
    l_total: float
    lam: float = 1.0

    def to_dict(self):
        d = asdict(self)
        d["l_vq_per_scale"] = list(self.l_vq_per_scale)
        return d


def _norms(x):
    n = np.linalg.norm(x, axis=-1)
    if np.any(n < ZERO_NORM):
        raise ZeroNormError(f"vector norm {n.min():.3e} below {ZERO_NORM}")
    return n


def cosine_regression(x, y):
    """2 - 2 cos(x, y). Works on vectors or row-batches (returns per-row)."""
    x = np.asarray(x)
    y = np.asarray(y)
    nx, ny = _norms(x), _norms(y)
    return 2.0 - 2.0 * (x * y).sum(axis=-1) / (nx * ny)


def cosine_regression_grad(x, y):
    """d/dx of 2 - 2 cos(x, y): (-2/|x|) (y_hat - <x_hat, y_hat> x_hat)."""
    nx, ny = _norms(x), _norms(y)
    xh = x / nx[..., None] if x.ndim > 1 else x / nx
    yh = y / ny[..., None] if y.ndim > 1 else y / ny
    c = (xh * yh).sum(axis=-1, keepdims=True)
    scale = (-2.0 / nx)[..., None] if x.ndim > 1 else -2.0 / nx
    return scale * (yh - c * xh)


def sim_loss(h_theta, h_phi, q_t, targets="both"):
    """Batch-mean regression terms and their combination.

    Returns (l_reg_hphi, l_reg_qt, l_sim). ``targets`` selects which terms make
    up l_sim: "both" averages them, "h_phi"/"q_t" keep one.
    """
    a = float(np.mean(cosine_regression(h_theta, h_phi)))
    b = float(np.mean(cosine_regression(h_theta, q_t)))
    if targets == "both":
        s = (a + b) / 2.0
    elif targets == "h_phi":
        s = a
    elif targets == "q_t":
        s = b
    else:
        raise ValueError(f"unknown targets {targets!r}")
    return a, b, s


def sim_loss_grads(h_theta, h_phi, q_t, targets="both"):
    """Gradients of l_sim w.r.t. h_theta and q_t (h_phi is always a constant)."""
    w_h, w_q = {"both": (0.5, 0.5), "h_phi": (1.0, 0.0), "q_t": (0.0, 1.0)}[targets]
    n = h_theta.shape[0] if h_theta.ndim > 1 else 1
    dh = np.zeros_like(h_theta)
    dq = np.zeros_like(q_t)
    if w_h:
        dh = dh + w_h / n * cosine_regression_grad(h_theta, h_phi)
    if w_q:
        dh = dh + w_q / n * cosine_regression_grad(h_theta, q_t)
        dq = dq + w_q / n * cosine_regression_grad(q_t, h_theta)
    return dh, dq


def total_loss(l_sim, l_vq_per_scale, lam=1.0):
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    l_vq = float(sum(l_vq_per_scale))
    return l_vq, l_sim + lam * l_vq


def breakdown(l_reg_hphi, l_reg_qt, l_sim, l_vq_per_scale, lam=1.0):
    l_vq, l_total = total_loss(l_sim, l_vq_per_scale, lam)
    return LossBreakdown(l_reg_hphi, l_reg_qt, l_sim, tuple(l_vq_per_scale), l_vq, l_total, lam)


def average_views(a, b):
    """Symmetrize two per-view breakdowns: every field is the mean of the views."""
    per = tuple((x + y) / 2.0 for x, y in zip(a.l_vq_per_scale, b.l_vq_per_scale))
    l_sim = (a.l_sim + b.l_sim) / 2.0
    return breakdown((a.l_reg_hphi + b.l_reg_hphi) / 2.0, (a.l_reg_qt + b.l_reg_qt) / 2.0,
                     l_sim, per, a.lam)
