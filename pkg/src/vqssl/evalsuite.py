"""Downstream evaluation: linear probe, fine-tuning, position probe, codebook report.

All probes use the pooled embedding of the gradient-trained encoder. The
held-out split is a fixed 80/20 partition by index hash; labeled training
subsets are nested prefixes of a seeded permutation, so smaller fractions are
always contained in larger ones.
"""

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.stats import rankdata

from . import encoder as enc
from . import nn, optim, vq
from .nn import ParamStore

LABEL_FRACTIONS = (0.01, 0.05, 0.10, 0.20, 0.30, 0.40)
STREAM_PROBE = 11
STREAM_POSITION = 12


class SingleClassError(ValueError):
    pass


@dataclass
class ProbeConfig:
    label_fractions: tuple = LABEL_FRACTIONS
    seeds: tuple = (0, 1, 2)
    epochs: int = 3000          # full-batch GD iteration cap for the linear head
    l2: float = 1e-2
    tol: float = 1e-5           # gradient-norm convergence threshold
    ft_epochs: int = 20
    ft_lr: float = 0.003        # 0.01 x the pretraining base lr
    ft_head_mult: float = 100.0  # head lr = ft_lr * ft_head_mult
    ft_batch: int = 64
    max_resample: int = 10


# ------------------------------------------------------------------ metrics


def auc(scores, labels):
    """ROC AUC as the normalized Mann-Whitney U: P(s+ > s-) + 0.5 P(tie)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("AUC needs both classes")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def mean_auc(scores, labels):
    """Mean AUC over label columns (multi-label)."""
    scores = np.atleast_2d(np.asarray(scores).T).T
    labels = np.atleast_2d(np.asarray(labels).T).T
    return float(np.mean([auc(scores[:, j], labels[:, j]) for j in range(labels.shape[1])]))


# -------------------------------------------------------------- data splits


def is_heldout(index):
    h = hashlib.blake2b(int(index).to_bytes(8, "little"), digest_size=4).digest()
    return int.from_bytes(h, "little") % 5 == 0


def split_indices(n):
    held = np.array([is_heldout(i) for i in range(n)])
    return np.flatnonzero(~held), np.flatnonzero(held)


def label_subset(train_idx, fraction, seed, attempt=0):
    """Deterministic, nested labeled subset of ``train_idx``."""
    perm = np.random.default_rng([seed, STREAM_PROBE, attempt]).permutation(len(train_idx))
    k = max(2, int(math.ceil(fraction * len(train_idx))))
    return np.sort(np.asarray(train_idx)[perm[:k]])


def _check_both_classes(labels):
    labels = np.atleast_2d(np.asarray(labels).T).T
    for j in range(labels.shape[1]):
        if labels[:, j].min() == labels[:, j].max():
            raise SingleClassError(f"label column {j} has a single class in the subset")


# -------------------------------------------------------------- embeddings


def _theta_of(model):
    """Accepts a TrainState, a checkpoint path, or a ParamStore."""
    if isinstance(model, ParamStore):
        return model
    if isinstance(model, (str, bytes)) or hasattr(model, "__fspath__"):
        from .checkpoint import load_checkpoint
        model = load_checkpoint(model)
    return model.theta


def extract_embeddings(theta, images, ecfg, mean=0.4, std=0.25, batch=256):
    out = []
    for s in range(0, len(images), batch):
        x = ((images[s:s + batch] - mean) / std).astype(theta["enc.s0.conv1.w"].dtype)
        feats, _ = enc.encode(theta, x, ecfg)
        out.append(feats.pooled)
    return np.concatenate(out)


def params_digest(store):
    h = hashlib.sha256()
    for k, v in store.items():
        h.update(k.encode())
        h.update(np.ascontiguousarray(v).tobytes())
    return h.hexdigest()


# ------------------------------------------------------------ linear heads


def _standardizer(x):
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd < 1e-8] = 1.0
    return mu, sd


def train_logistic(x, y, l2=1e-2, max_iter=3000, tol=1e-5):
    """Multi-output logistic regression by full-batch gradient descent.

    Step size 1/L from the exact smoothness constant of the mean BCE + L2
    objective. Returns (W, b, iterations run).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    n, d = x.shape
    xa = np.hstack([x, np.ones((n, 1))])
    L = 0.25 * np.linalg.eigvalsh(xa.T @ xa / n)[-1] + l2
    lr = 1.0 / L
    w = np.zeros((d + 1, y.shape[1]))
    reg = np.ones((d + 1, 1))
    reg[-1] = 0.0
    it = 0
    for it in range(1, max_iter + 1):
        p = 1.0 / (1.0 + np.exp(-(xa @ w)))
        g = xa.T @ (p - y) / n + l2 * reg * w
        if np.linalg.norm(g) < tol:
            break
        w -= lr * g
    return w[:-1], w[-1], it


def train_softmax(x, y, n_classes, l2=1e-2, max_iter=3000, tol=1e-5):
    """Multinomial logistic regression by full-batch GD, step 1/L."""
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    xa = np.hstack([x, np.ones((n, 1))])
    L = 0.5 * np.linalg.eigvalsh(xa.T @ xa / n)[-1] + l2
    lr = 1.0 / L
    onehot = np.eye(n_classes)[y]
    w = np.zeros((d + 1, n_classes))
    reg = np.ones((d + 1, 1))
    reg[-1] = 0.0
    for _ in range(max_iter):
        z = xa @ w
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        g = xa.T @ (p - onehot) / n + l2 * reg * w
        if np.linalg.norm(g) < tol:
            break
        w -= lr * g
    return w[:-1], w[-1]


def probe_features(features, labels, train_idx, test_idx, fraction, seed, cfg=None):
    """Linear-probe AUC from precomputed features. Returns (auc, subset used)."""
    cfg = cfg or ProbeConfig()
    for attempt in range(cfg.max_resample):
        sub = label_subset(train_idx, fraction, seed, attempt)
        try:
            _check_both_classes(labels[sub])
            break
        except SingleClassError:
            continue
    else:
        raise SingleClassError(f"no two-class subset at fraction {fraction}, seed {seed}")
    mu, sd = _standardizer(features[sub])
    w, b, _ = train_logistic((features[sub] - mu) / sd, labels[sub], cfg.l2, cfg.epochs, cfg.tol)
    scores = ((features[test_idx] - mu) / sd) @ w + b
    return mean_auc(scores, labels[test_idx]), sub


def linear_probe(model, images, labels, ecfg, cfg=None, fractions=None, mean=0.4, std=0.25):
    """{fraction: [AUC per seed]} for a frozen encoder."""
    cfg = cfg or ProbeConfig()
    theta = _theta_of(model)
    feats = extract_embeddings(theta, images, ecfg, mean, std)
    train_idx, test_idx = split_indices(len(images))
    out = {}
    for f in fractions or cfg.label_fractions:
        out[f] = [probe_features(feats, labels, train_idx, test_idx, f, s, cfg)[0]
                  for s in cfg.seeds]
    return out


# ------------------------------------------------------------- fine-tuning


def _bce_grad(logits, y):
    p = 1.0 / (1.0 + np.exp(-logits))
    return (p - y) / logits.shape[0]


def finetune_one(theta, images, labels, sub, test_idx, ecfg, cfg, seed, mean=0.4, std=0.25):
    """Jointly trains a copy of the encoder and a zero-initialized linear head."""
    theta = theta.copy()
    dt = theta["enc.s0.conv1.w"].dtype
    feats0 = extract_embeddings(theta, images[sub], ecfg, mean, std)
    mu, sd = _standardizer(feats0)
    head = ParamStore(w=np.zeros((feats0.shape[1], labels.shape[1]), dtype=dt),
                      b=np.zeros(labels.shape[1], dtype=dt))
    vel_t = theta.zeros_like()
    vel_h = head.zeros_like()
    rng = np.random.default_rng([seed, STREAM_PROBE, 99])
    y_all = labels.astype(dt)
    for _ in range(cfg.ft_epochs):
        order = rng.permutation(len(sub))
        for s in range(0, len(sub), cfg.ft_batch):
            bi = sub[order[s:s + cfg.ft_batch]]
            x = ((images[bi] - mean) / std).astype(dt)
            feats, cache = enc.encode(theta, x, ecfg)
            z = (feats.pooled - mu) / sd
            logits = z @ head["w"] + head["b"]
            dlog = _bce_grad(logits, y_all[bi]).astype(dt)
            gh = ParamStore(w=z.T @ dlog, b=dlog.sum(axis=0))
            dpooled = (dlog @ head["w"].T) / sd
            gt, _, _ = enc.backward_from_cache(theta, (cache, None, None),
                                               {"pooled": dpooled.astype(dt)}, ecfg)
            # projection-head params get no gradient here; drop them from the update
            gt = ParamStore((k, v) for k, v in gt.items() if k.startswith("enc."))
            optim.apply_update(theta, gt, vel_t, cfg.ft_lr, optimizer="sgd",
                               weight_decay=0.0, momentum=0.9)
            optim.apply_update(head, gh, vel_h, cfg.ft_lr * cfg.ft_head_mult, optimizer="sgd",
                               weight_decay=0.0, momentum=0.9)
    feats = extract_embeddings(theta, images[test_idx], ecfg, mean, std)
    scores = ((feats - mu) / sd) @ head["w"] + head["b"]
    return mean_auc(scores, labels[test_idx])


def finetune(model, images, labels, ecfg, cfg=None, fractions=None, mean=0.4, std=0.25):
    """{fraction: [AUC per seed]} with encoder + head trained jointly."""
    cfg = cfg or ProbeConfig()
    theta = _theta_of(model)
    train_idx, test_idx = split_indices(len(images))
    out = {}
    for f in fractions or cfg.label_fractions:
        aucs = []
        for s in cfg.seeds:
            for attempt in range(cfg.max_resample):
                sub = label_subset(train_idx, f, s, attempt)
                try:
                    _check_both_classes(labels[sub])
                    break
                except SingleClassError:
                    continue
            aucs.append(finetune_one(theta, images, labels, sub, test_idx, ecfg, cfg, s, mean, std))
        out[f] = aucs
    return out


# ---------------------------------------------------------- position probe


def grid_patches(images, input_size):
    """Splits each image into a 3x3 grid and resizes every patch (nearest) to
    ``input_size``. Images are edge-padded on the bottom/right until the side is
    divisible by 3. Returns (patches (n*9, S, S), positions (n*9,), image ids)."""
    n, H, W = images.shape
    side = int(math.ceil(max(H, W) / 3) * 3)
    padded = np.pad(images, ((0, 0), (0, side - H), (0, side - W)), mode="edge")
    p = side // 3
    src = np.floor((np.arange(input_size) + 0.5) * p / input_size).astype(int)
    patches, pos, ids = [], [], []
    for r in range(3):
        for c in range(3):
            block = padded[:, r * p:(r + 1) * p, c * p:(c + 1) * p]
            patches.append(block[:, src][:, :, src])
            pos.append(np.full(n, 3 * r + c))
            ids.append(np.arange(n))
    patches = np.stack(patches, axis=1).reshape(n * 9, input_size, input_size)
    pos = np.stack(pos, axis=1).reshape(-1)
    ids = np.stack(ids, axis=1).reshape(-1)
    return patches, pos, ids


def position_probe_features(features, positions, image_ids, cfg=None):
    """Held-out 9-way accuracy of a linear classifier on patch position."""
    cfg = cfg or ProbeConfig()
    held = np.array([is_heldout(i) for i in image_ids])
    tr, te = np.flatnonzero(~held), np.flatnonzero(held)
    mu, sd = _standardizer(features[tr])
    w, b = train_softmax((features[tr] - mu) / sd, positions[tr], 9, cfg.l2, cfg.epochs, cfg.tol)
    pred = np.argmax(((features[te] - mu) / sd) @ w + b, axis=1)
    return float(np.mean(pred == positions[te]))


def position_probe(model, images, ecfg, cfg=None, mean=0.4, std=0.25):
    theta = _theta_of(model)
    patches, pos, ids = grid_patches(images, ecfg.input_size)
    feats = extract_embeddings(theta, patches, ecfg, mean, std)
    return position_probe_features(feats, pos, ids, cfg)


# ---------------------------------------------------------- codebook report


def codebook_report(state, images, batch=128):
    """Per-scale perplexity, utilization fraction and assignment histogram."""
    from .trainer import scale_tokens

    cfg = state.cfg
    ecfg = cfg.encoder_config()
    x = ((images[:batch] - cfg.aug_mean) / cfg.aug_std).astype(state.phi["enc.s0.conv1.w"].dtype)
    feats, _ = enc.encode(state.phi, x, ecfg)
    report = {}
    for s in enc.SCALES:
        cb = state.codebooks[s]
        toks = scale_tokens(state, feats, s)
        idx = vq.assign(toks, cb.entries)
        hist = np.bincount(idx.ravel(), minlength=cb.n_entries)
        report[s] = {"perplexity": vq.perplexity(idx, cb.n_entries),
                     "utilization": float(np.mean(hist > 0)),
                     "histogram": hist.tolist()}
    return report


# -------------------------------------------------------------- reporting


@dataclass
class EvalReport:
    fractions: list
    ft_auc: dict            # fraction -> mean AUC
    lp_auc: dict
    perplexity: dict = field(default_factory=dict)  # scale -> perplexity
    position_accuracy: float = float("nan")
    ft_seeds: dict = field(default_factory=dict)
    lp_seeds: dict = field(default_factory=dict)

    def delta(self, f):
        return self.lp_auc[f] - self.ft_auc[f]

    def rows(self):
        """One row per (fraction, protocol): FT, LP and LP - FT."""
        out = []
        for f in self.fractions:
            out.append({"fraction": f, "protocol": "FT", "auc": self.ft_auc[f]})
            out.append({"fraction": f, "protocol": "LP", "auc": self.lp_auc[f]})
            out.append({"fraction": f, "protocol": "delta", "auc": self.delta(f)})
        return out

    def to_metrics_lines(self):
        lines = [json.dumps(r) for r in self.rows()]
        lines.append(json.dumps({"perplexity": self.perplexity,
                                 "position_accuracy": self.position_accuracy}))
        return lines

    def to_table(self):
        lines = [f"{'labels':>8} {'FT':>8} {'LP':>8} {'delta':>8}"]
        for f in self.fractions:
            lines.append(f"{f * 100:7.0f}% {self.ft_auc[f] * 100:8.1f} {self.lp_auc[f] * 100:8.1f}"
                         f" {self.delta(f) * 100:+8.1f}")
        if self.perplexity:
            lines.append("perplexity " + "  ".join(f"{s}={v:.1f}" for s, v in self.perplexity.items()))
        if not math.isnan(self.position_accuracy):
            lines.append(f"position probe accuracy {self.position_accuracy:.3f}")
        return "\n".join(lines)

    @classmethod
    def from_metrics_lines(cls, lines):
        ft, lp, fracs, extra = {}, {}, [], {}
        for line in lines:
            rec = json.loads(line)
            if "protocol" in rec:
                f = rec["fraction"]
                if f not in fracs:
                    fracs.append(f)
                if rec["protocol"] == "FT":
                    ft[f] = rec["auc"]
                elif rec["protocol"] == "LP":
                    lp[f] = rec["auc"]
            else:
                extra = rec
        return cls(fracs, ft, lp, extra.get("perplexity", {}), extra.get("position_accuracy", float("nan")))

    def plot(self, path):
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        fig, ax = plt.subplots(figsize=(4, 3))
        xs = [f * 100 for f in self.fractions]
        ax.plot(xs, [self.ft_auc[f] for f in self.fractions], "o-", label="FT")
        ax.plot(xs, [self.lp_auc[f] for f in self.fractions], "s--", label="LP")
        ax.set_xlabel("labels (%)")
        ax.set_ylabel("AUC")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def eval_all(state, images, labels, cfg=None, fractions=None, with_finetune=True):
    cfg = cfg or ProbeConfig()
    tcfg = state.cfg
    ecfg = tcfg.encoder_config()
    fr = list(fractions or cfg.label_fractions)
    lp = linear_probe(state.theta, images, labels, ecfg, cfg, fr, tcfg.aug_mean, tcfg.aug_std)
    if with_finetune:
        ft = finetune(state.theta, images, labels, ecfg, cfg, fr, tcfg.aug_mean, tcfg.aug_std)
    else:
        ft = {f: [float("nan")] for f in fr}
    cb = codebook_report(state, images)
    pos = position_probe(state.theta, images[:400], ecfg, cfg, tcfg.aug_mean, tcfg.aug_std)
    return EvalReport(fr, {f: float(np.mean(v)) for f, v in ft.items()},
                      {f: float(np.mean(v)) for f, v in lp.items()},
                      {s: r["perplexity"] for s, r in cb.items()}, pos, ft, lp)
