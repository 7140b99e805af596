"""Pretraining loop: two-branch forward/backward, LARS, EMA codebooks, momentum.

One step runs, in order: online forward on both views, momentum-branch forward
(no gradients), per-scale projection/assignment/commit loss, SERF target,
symmetrized losses, optimizer update, codebook EMA, momentum update.
"""

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import encoder as enc
from . import nn, objective, optim, serf, vq
from .config import TrainConfig
from .datagen import make_batch, load_corpus
from .momentum import MomentumSchedule, LrSchedule, mu_at, lr_at, momentum_update
from .nn import ParamStore

log = logging.getLogger(__name__)

DTYPE = np.float32

# named random sub-streams, all derived from the single training seed
STREAM_INIT, STREAM_SHUFFLE, STREAM_AUGMENT, STREAM_DEADCODE = 1, 2, 3, 4

METRIC_FIELDS = (
    "step", "epoch", "lr", "mu",
    "l_reg_hphi", "l_reg_qt", "l_sim", "l_vq_c", "l_vq_m", "l_vq_f", "l_vq", "l_total", "lambda",
    "ppl_c", "ppl_m", "ppl_f", "grad_norm", "wall_time",
)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainState:
    cfg: TrainConfig
    theta: ParamStore
    pred: ParamStore
    phi: ParamStore
    vqproj: ParamStore
    serf: serf.SerfParams
    codebooks: dict
    velocity: dict
    step: int = 0
    epoch: int = 0

    def trainable(self):
        """Stores updated by the optimizer, keyed as in ``velocity``."""
        stores = {"theta": self.theta, "pred": self.pred, "vqproj": self.vqproj,
                  "serf": self.serf.mlp}
        if self.serf.trainable_alpha:
            stores["alpha"] = ParamStore(alpha=self.serf.alpha)
        return stores


def init_state(cfg, seed=None):
    seed = cfg.train_seed if seed is None else seed
    ecfg = cfg.encoder_config()
    rng = np.random.default_rng([seed, STREAM_INIT])
    theta = enc.init_params(ecfg, rng.integers(2 ** 32), DTYPE)
    pred = enc.init_predictor(ecfg, rng.integers(2 ** 32), DTYPE)
    d = ecfg.embed_dim
    vqproj = ParamStore()
    for s in enc.SCALES:
        c = ecfg.scale_channels[s]
        vqproj[f"vqproj.{s}.w"] = (rng.standard_normal((c, d)) / np.sqrt(c * d)).astype(DTYPE)
        vqproj[f"vqproj.{s}.b"] = np.zeros(d, dtype=DTYPE)
    codebooks = {
        s: vq.init_codebook(cfg.entries(s), d, rng, DTYPE, decay=cfg.vq_decay,
                            epsilon=cfg.vq_epsilon, mode=cfg.vq_ema_mode)
        for s in enc.SCALES
    }
    serf_in = 2 * d if cfg.variant_serf == "concat" else d
    sp = serf.init_serf(d, ecfg.proj_hidden, rng, DTYPE, in_dim=serf_in,
                        alpha=np.asarray(cfg.alpha), mode=cfg.serf_mode,
                        trainable_alpha=cfg.serf_trainable_alpha)
    sp.alpha = sp.alpha.astype(DTYPE)
    state = TrainState(cfg=cfg, theta=theta, pred=pred, phi=theta.copy(), vqproj=vqproj,
                       serf=sp, codebooks=codebooks, velocity={})
    state.velocity = {k: s.zeros_like() for k, s in state.trainable().items()}
    return state


def steps_per_epoch(cfg, n):
    return math.ceil(n / cfg.train_batch_size)


def _direction(state, ecfg, x_online, x_target, serf_trains):
    """Loss and gradients for one (online view, target view) direction."""
    cfg = state.cfg
    feats_o, emb_o, cache_o = enc.forward(state.theta, x_online, ecfg, pred=state.pred,
                                          return_cache=True)
    feats_t, emb_t = enc.forward(state.phi, x_target, ecfg)
    h_theta, h_phi = emb_o.h, emb_t.h
    B = h_theta.shape[0]

    vq_losses, ppl, qmaps, token_sets, vq_grads = {}, {}, {}, {}, {}
    for s in enc.SCALES:
        if s not in cfg.scales:
            continue
        z = feats_t.scale(s)
        raw = vq.project_tokens(z, state.vqproj[f"vqproj.{s}.w"], state.vqproj[f"vqproj.{s}.b"])
        if cfg.vq_token_norm:
            toks, norm_cache = vq.normalize_tokens(raw)
        else:
            toks = raw
        res = vq.quantize(toks, state.codebooks[s], cfg.vq_beta)
        _, dtok = vq.commit_loss(toks, res.quantized, cfg.vq_beta)
        if cfg.vq_token_norm:
            dtok = vq.normalize_tokens_backward(dtok, norm_cache)
        vq_losses[s] = res.commit_loss
        ppl[s] = res.perplexity
        vq_grads[s] = vq.project_tokens_backward(z, dtok)
        token_sets[s] = (toks, res.indices)
        H = z.shape[1]
        qmaps[s] = res.quantized.reshape(B, H, H, -1)

    alpha = state.serf.alpha
    fused = serf.fuse(qmaps.get("c"), qmaps.get("m"), qmaps.get("f"), alpha)
    mode = cfg.variant_serf
    weights = None
    if mode == "full":
        k, weights = serf.refine(fused, h_phi, state.serf.mode, return_weights=True)
    elif mode == "concat":
        k = np.concatenate([fused.pooled, h_phi], axis=-1)
    else:
        k = fused.pooled
    head_cache = None
    if cfg.variant_post_serf_head == "on":
        q_t, head_cache = serf.target(k, state.serf.mlp)
    else:
        q_t = k

    l_h, l_q, l_sim = objective.sim_loss(h_theta, h_phi, q_t, cfg.variant_targets)
    per_scale = tuple(vq_losses.get(s, 0.0) for s in ("c", "m", "f"))
    bd = objective.breakdown(l_h, l_q, l_sim, per_scale, cfg.loss_lambda)

    dh, dq = objective.sim_loss_grads(h_theta, h_phi, q_t, cfg.variant_targets)
    g_theta, g_pred, _ = enc.backward_from_cache(state.theta, cache_o, {"h": dh}, ecfg, state.pred)
    grads = {"theta": g_theta, "pred": g_pred}

    g_proj = state.vqproj.zeros_like()
    for s, (dw, db) in vq_grads.items():
        g_proj[f"vqproj.{s}.w"] += cfg.loss_lambda * dw
        g_proj[f"vqproj.{s}.b"] += cfg.loss_lambda * db
    grads["vqproj"] = g_proj

    g_serf = state.serf.mlp.zeros_like()
    g_alpha = np.zeros_like(alpha)
    if serf_trains and head_cache is not None:
        dk, g_serf = serf.target_backward(dq, head_cache, state.serf.mlp)
        if state.serf.trainable_alpha:
            if mode == "full":
                dtok, _ = serf.refine_backward(dk, fused.tokens, h_phi, weights, state.serf.mode)
            else:
                d = fused.tokens.shape[-1]
                dpool = dk[..., :d]
                dtok = np.repeat(dpool[:, None, :], fused.tokens.shape[1], axis=1) / fused.tokens.shape[1]
            g_alpha = serf.fuse_alpha_grad(qmaps.get("c"), qmaps.get("m"), qmaps.get("f"), dtok)
            g_alpha = g_alpha.astype(alpha.dtype)
    grads["serf"] = g_serf
    if state.serf.trainable_alpha:
        grads["alpha"] = ParamStore(alpha=g_alpha)
    return bd, ppl, grads, token_sets


def train_step(state, x1, x2, n_per_epoch=None):
    """One optimization step on a batch of view pairs. Mutates ``state``.

    Returns the MetricsRecord as a dict with METRIC_FIELDS keys.
    """
    t0 = time.perf_counter()
    cfg = state.cfg
    ecfg = cfg.encoder_config()
    if len(x1) == 0:
        raise ValueError("empty batch")
    spe = steps_per_epoch(cfg, n_per_epoch) if n_per_epoch else 1
    total_steps = cfg.train_epochs * spe
    step_in_epoch = state.step - state.epoch * spe
    lr = lr_at(LrSchedule(cfg.train_epochs, cfg.optim_base_lr, cfg.optim_warmup_epochs,
                          cfg.optim_floor_lr),
               min(state.epoch + step_in_epoch / spe, cfg.train_epochs)) if cfg.train_epochs else 0.0
    if cfg.variant_momentum == "off":
        mu = 0.0
    else:
        mu = mu_at(MomentumSchedule(total_steps, cfg.momentum_base, cfg.momentum_final),
                   min(state.step, total_steps))
    serf_trains = cfg.serf_grad_mode == "align"

    bd1, ppl1, g1, toks1 = _direction(state, ecfg, x1, x2, serf_trains)
    bd2, ppl2, g2, toks2 = _direction(state, ecfg, x2, x1, serf_trains)
    bd = objective.average_views(bd1, bd2)
    if not math.isfinite(bd.l_total):
        raise NonFiniteLossError(f"non-finite loss at step {state.step}: {bd}")

    grads = {}
    for key in g1:
        grads[key] = ParamStore((n, 0.5 * (g1[key][n] + g2[key][n])) for n in g1[key])
    sq = sum(float((g.astype(np.float64) ** 2).sum()) for st in grads.values() for g in st.values())
    grad_norm = math.sqrt(sq)
    if not math.isfinite(grad_norm):
        raise optim.NonFiniteGradientError(f"non-finite gradient at step {state.step}")

    frozen_serf = not serf_trains
    for key, store in state.trainable().items():
        if key == "serf" and frozen_serf:
            continue
        optim.apply_update(store, grads[key], state.velocity[key], lr,
                           optimizer=cfg.optim_name, weight_decay=cfg.optim_weight_decay,
                           momentum=cfg.optim_momentum, trust_coef=cfg.optim_trust_coef)
    if state.serf.trainable_alpha:
        np.maximum(state.serf.alpha, 0, out=state.serf.alpha)

    ppl = {}
    for s in cfg.scales:
        toks = np.concatenate([toks1[s][0].reshape(-1, toks1[s][0].shape[-1]),
                               toks2[s][0].reshape(-1, toks2[s][0].shape[-1])])
        idx = np.concatenate([toks1[s][1].ravel(), toks2[s][1].ravel()])
        vq.ema_update(state.codebooks[s], toks, idx)
        ppl[s] = vq.perplexity(idx, state.codebooks[s].n_entries)

    momentum_update(state.theta, state.phi, mu)
    state.step += 1

    rec = {"step": state.step, "epoch": state.epoch, "lr": lr, "mu": mu,
           "l_reg_hphi": bd.l_reg_hphi, "l_reg_qt": bd.l_reg_qt, "l_sim": bd.l_sim,
           "l_vq_c": bd.l_vq_per_scale[0], "l_vq_m": bd.l_vq_per_scale[1],
           "l_vq_f": bd.l_vq_per_scale[2], "l_vq": bd.l_vq, "l_total": bd.l_total,
           "lambda": bd.lam, "ppl_c": ppl.get("c", 0.0), "ppl_m": ppl.get("m", 0.0),
           "ppl_f": ppl.get("f", 0.0), "grad_norm": grad_norm,
           "wall_time": time.perf_counter() - t0}
    return rec


def scale_tokens(state, feats, s):
    """Projected (and, if configured, normalized) tokens of scale ``s``."""
    toks = vq.project_tokens(feats.scale(s), state.vqproj[f"vqproj.{s}.w"],
                             state.vqproj[f"vqproj.{s}.b"])
    if state.cfg.vq_token_norm:
        toks, _ = vq.normalize_tokens(toks)
    return toks


def dead_code_pass(state, tokens_by_scale, rng):
    for s, toks in tokens_by_scale.items():
        vq.reinit_dead_codes(state.codebooks[s], toks, rng)


def run_epoch(state, images, metrics_fh=None, on_record=None):
    """Trains one epoch over ``images`` (n, H, W) and advances ``state.epoch``."""
    cfg = state.cfg
    seed = cfg.train_seed
    n = len(images)
    perm = np.random.default_rng([seed, STREAM_SHUFFLE, state.epoch]).permutation(n)
    aug_rng = np.random.default_rng([seed, STREAM_AUGMENT, state.epoch])
    acfg = cfg.augment_config()
    records = []
    for start in range(0, n, cfg.train_batch_size):
        idx = perm[start:start + cfg.train_batch_size]
        x1, x2 = make_batch(images[idx], acfg, aug_rng)
        rec = train_step(state, x1, x2, n_per_epoch=n)
        records.append(rec)
        if metrics_fh is not None and (state.step % cfg.train_log_every == 0):
            metrics_fh.write(format_record(rec) + "\n")
        if on_record is not None:
            on_record(rec)
    if cfg.vq_dead_code_reinit:
        rng = np.random.default_rng([seed, STREAM_DEADCODE, state.epoch])
        sample = images[perm[:cfg.train_batch_size]]
        feats, _ = enc.forward(state.phi, _normalized(sample, acfg), cfg.encoder_config())
        toks = {s: scale_tokens(state, feats, s) for s in cfg.scales}
        dead_code_pass(state, toks, rng)
    state.epoch += 1
    return records


def _normalized(images, acfg):
    return ((images - acfg.normalize_mean) / acfg.normalize_std).astype(DTYPE)


def format_record(rec):
    """One JSON object per line, keys in METRIC_FIELDS order."""
    return json.dumps({k: rec[k] for k in METRIC_FIELDS})


def read_metrics(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _limit_threads(n):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return None
    return threadpool_limits(limits=n)


def fit(cfg, corpus, out_dir, resume=None, on_record=None):
    """Pretrains for ``cfg.train_epochs`` epochs; returns the final checkpoint path.

    ``corpus`` is a corpus directory or an (n, H, W) image array. Checkpoints go
    to ``out_dir/epoch_XXXX`` every ``train.checkpoint_every`` epochs and to
    ``out_dir/final``; metrics are appended to ``out_dir/metrics.jsonl``.
    """
    from .checkpoint import save_checkpoint, load_checkpoint

    images = load_corpus(corpus)[1] if isinstance(corpus, (str, os.PathLike)) else np.asarray(corpus)
    images = images.astype(DTYPE)
    os.makedirs(out_dir, exist_ok=True)
    if resume is not None:
        state = load_checkpoint(resume)
        state.cfg = cfg
    else:
        state = init_state(cfg)
    limiter = _limit_threads(cfg.train_threads)
    mode = "a" if resume is not None else "w"
    try:
        with open(os.path.join(out_dir, "metrics.jsonl"), mode) as fh:
            while state.epoch < cfg.train_epochs:
                recs = run_epoch(state, images, fh, on_record)
                mean = float(np.mean([r["l_total"] for r in recs]))
                log.info("epoch %d  l_total %.4f  ppl %.1f/%.1f/%.1f", state.epoch, mean,
                         recs[-1]["ppl_c"], recs[-1]["ppl_m"], recs[-1]["ppl_f"])
                if cfg.train_checkpoint_every and state.epoch % cfg.train_checkpoint_every == 0:
                    save_checkpoint(state, os.path.join(out_dir, f"epoch_{state.epoch:04d}"))
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    final = os.path.join(out_dir, "final")
    save_checkpoint(state, final)
    return final
