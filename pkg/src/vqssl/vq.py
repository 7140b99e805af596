"""Per-scale vector quantization with EMA codebooks."""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse

DEFAULT_BETA = 0.25
DEFAULT_DECAY = 0.99


@dataclass
class Codebook:
    entries: np.ndarray
    decay: float = DEFAULT_DECAY
    epsilon: float = 1e-5
    mode: str = "literal"  # or "count" (count-weighted EMA, Laplace smoothed)
    ema_count: Optional[np.ndarray] = None
    ema_sum: Optional[np.ndarray] = None
    # dead-code bookkeeping: per-entry assignment count since the last reset
    usage: Optional[np.ndarray] = None

    def __post_init__(self):
        self.entries = np.asarray(self.entries)
        if self.entries.ndim != 2 or self.entries.shape[0] < 2:
            raise ValueError("codebook needs an N x d matrix with N >= 2")
        if not 0.0 <= self.decay < 1.0:
            raise ValueError(f"decay must lie in [0, 1), got {self.decay}")
        if self.mode not in ("literal", "count"):
            raise ValueError(f"unknown EMA mode {self.mode!r}")
        n = self.entries.shape[0]
        if self.ema_count is None:
            self.ema_count = np.ones(n, dtype=self.entries.dtype)
        if self.ema_sum is None:
            self.ema_sum = self.entries.copy()
        if self.usage is None:
            self.usage = np.zeros(n, dtype=self.entries.dtype)

    @property
    def n_entries(self):
        return self.entries.shape[0]

    @property
    def dim(self):
        return self.entries.shape[1]

    def copy(self):
        return Codebook(self.entries.copy(), self.decay, self.epsilon, self.mode,
                        self.ema_count.copy(), self.ema_sum.copy(), self.usage.copy())


def init_codebook(n_entries, dim, rng, dtype=np.float64, **kwargs):
    entries = (rng.standard_normal((n_entries, dim)) / np.sqrt(dim)).astype(dtype)
    return Codebook(entries, **kwargs)


@dataclass
class QuantizeResult:
    tokens: np.ndarray
    indices: np.ndarray
    quantized: np.ndarray
    commit_loss: float
    perplexity: float


def project_tokens(z, weight, bias=None):
    """1x1 convolution to codeword space, flattened row-major over positions.

    ``z`` is (H, W, C) or (B, H, W, C); ``weight`` is (C, d). Returns
    (H*W, d) or (B, H*W, d).
    """
    z = np.asarray(z)
    if z.shape[-1] != weight.shape[0]:
        raise ValueError(f"projection expects {weight.shape[0]} channels, got {z.shape[-1]}")
    out = z @ weight
    if bias is not None:
        out = out + bias
    lead = z.shape[:-3]
    return out.reshape(*lead, z.shape[-3] * z.shape[-2], weight.shape[1])


def project_tokens_backward(z, dtokens):
    """Gradients of the 1x1 projection given d(tokens). Returns (dweight, dbias)."""
    c = z.shape[-1]
    z2 = z.reshape(-1, c)
    d2 = dtokens.reshape(-1, dtokens.shape[-1])
    return z2.T @ d2, d2.sum(axis=0)


def normalize_tokens(tokens, eps=1e-5):
    """Per-dimension standardization over all tokens in the batch, scaled so the
    expected squared token norm is 1 (the scale of freshly initialized codewords).

    Returns (normalized tokens, cache).
    """
    d = tokens.shape[-1]
    flat = tokens.reshape(-1, d)
    mu = flat.mean(axis=0)
    inv = 1.0 / np.sqrt(flat.var(axis=0) + eps)
    xhat = (flat - mu) * inv
    out = xhat / np.sqrt(d)
    return out.reshape(tokens.shape).astype(tokens.dtype), (xhat, inv, tokens.shape)


def normalize_tokens_backward(dout, cache):
    xhat, inv, shape = cache
    d = xhat.shape[1]
    dxhat = dout.reshape(-1, d) / np.sqrt(d)
    dx = inv * (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0))
    return dx.reshape(shape).astype(dout.dtype)


def _exact_sqdist(t, e):
    diff = t[:, None, :] - e[None, :, :]
    return (diff * diff).sum(axis=-1)


def assign(tokens, entries):
    """Index of the nearest codeword for each token; ties go to the lowest index.

    Candidates come from the expanded-square distance; rows whose minimum is not
    clearly separated are re-scored with exact differences so the result matches
    an exhaustive scan, ties included.
    """
    if isinstance(entries, Codebook):
        entries = entries.entries
    tokens = np.asarray(tokens)
    flat = tokens.reshape(-1, tokens.shape[-1])
    if flat.shape[1] != entries.shape[1]:
        raise ValueError("token dim does not match codeword dim")
    t2 = (flat * flat).sum(axis=1)
    e2 = (entries * entries).sum(axis=1)
    dist = t2[:, None] - 2.0 * (flat @ entries.T) + e2[None, :]
    best = dist.min(axis=1)
    tol = 64 * np.finfo(dist.dtype).eps * (t2 + e2.max() + 1.0)
    close = dist <= (best + tol)[:, None]
    idx = np.argmax(close, axis=1)
    ambiguous = np.flatnonzero(close.sum(axis=1) > 1)
    for start in range(0, ambiguous.size, 1024):
        rows = ambiguous[start:start + 1024]
        idx[rows] = np.argmin(_exact_sqdist(flat[rows], entries), axis=1)
    return idx.reshape(tokens.shape[:-1])


def perplexity(indices, n_entries):
    """exp(entropy) of the empirical assignment distribution."""
    indices = np.asarray(indices).ravel()
    if indices.size == 0:
        raise ValueError("perplexity needs at least one index")
    counts = np.bincount(indices, minlength=n_entries).astype(np.float64)
    p = counts[counts > 0] / indices.size
    return float(np.exp(-(p * np.log(p)).sum()))


def commit_loss(tokens, quantized, beta=DEFAULT_BETA):
    """beta * mean over tokens of ||token - sg[quantized]||^2, and d/d(tokens)."""
    d = tokens.shape[-1]
    diff = (tokens - quantized).reshape(-1, d)
    n_tok = diff.shape[0]
    loss = beta * float((diff * diff).sum()) / n_tok
    grad = (2.0 * beta / n_tok) * (tokens - quantized)
    return loss, grad


def quantize(tokens, codebook, beta=DEFAULT_BETA):
    entries = codebook.entries if isinstance(codebook, Codebook) else codebook
    idx = assign(tokens, entries)
    q = entries[idx]
    loss, _ = commit_loss(tokens, q, beta)
    return QuantizeResult(tokens=tokens, indices=idx, quantized=q, commit_loss=loss,
                          perplexity=perplexity(idx, entries.shape[0]))


def cluster_stats(tokens, indices, n_entries):
    """Per-codeword assignment counts and token sums (reducible across shards)."""
    flat = tokens.reshape(-1, tokens.shape[-1])
    idx = np.asarray(indices).ravel()
    counts = np.bincount(idx, minlength=n_entries).astype(flat.dtype)
    onehot = sparse.csr_matrix((np.ones(idx.size, dtype=flat.dtype), (idx, np.arange(idx.size))),
                               shape=(n_entries, idx.size))
    sums = np.asarray(onehot @ flat)
    return counts, sums


def ema_update(codebook, tokens, indices):
    """One EMA step. Mutates and returns ``codebook``."""
    counts, sums = cluster_stats(tokens, indices, codebook.n_entries)
    return ema_update_from_stats(codebook, counts, sums)


def ema_update_from_stats(codebook, counts, sums):
    m = codebook.decay
    dt = codebook.entries.dtype
    codebook.usage += counts
    codebook.ema_count[:] = m * codebook.ema_count + (1 - m) * counts
    codebook.ema_sum[:] = m * codebook.ema_sum + (1 - m) * sums
    if codebook.mode == "literal":
        hit = counts > 0
        means = sums[hit] / counts[hit, None]
        codebook.entries[hit] = (m * codebook.entries[hit] + (1 - m) * means).astype(dt)
    else:
        n = codebook.ema_count.sum()
        eps = codebook.epsilon
        smoothed = (codebook.ema_count + eps) / (n + codebook.n_entries * eps) * n
        codebook.entries[:] = codebook.ema_sum / smoothed[:, None]
    return codebook


def reinit_dead_codes(codebook, tokens, rng, min_usage=1.0):
    """Re-seed codewords used fewer than ``min_usage`` times since the last call
    from randomly chosen tokens, then reset usage counters. Returns #re-seeded."""
    flat = tokens.reshape(-1, tokens.shape[-1])
    dead = np.flatnonzero(codebook.usage < min_usage)
    if dead.size:
        pick = rng.integers(0, flat.shape[0], dead.size)
        codebook.entries[dead] = flat[pick]
        codebook.ema_sum[dead] = flat[pick]
        codebook.ema_count[dead] = 1.0
    codebook.usage[:] = 0
    return int(dead.size)
