import numpy as np
import pytest

from vqssl import trainer, vq
from vqssl.config import TrainConfig
from vqssl.momentum import MomentumSchedule, mu_at
from gradcheck import check_store

TOY = dict(encoder_input_size=16, encoder_stage_channels="4,6,8", encoder_embed_dim=8,
           encoder_proj_hidden=8, encoder_proj_out=8,
           vq_entries_c=8, vq_entries_m=8, vq_entries_f=8, train_batch_size=4,
           train_epochs=2, optim_warmup_epochs=1.0)


def toy_cfg(**kw):
    return TrainConfig(**{**TOY, **kw})


def as_float64(state):
    state.theta = state.theta.astype(np.float64)
    state.pred = state.pred.astype(np.float64)
    state.phi = state.phi.astype(np.float64)
    state.vqproj = state.vqproj.astype(np.float64)
    state.serf.mlp = state.serf.mlp.astype(np.float64)
    state.serf.alpha = state.serf.alpha.astype(np.float64)
    for cb in state.codebooks.values():
        cb.entries = cb.entries.astype(np.float64)
    return state


def perturb(store, rng, scale=0.2):
    for k in store:
        store[k] += scale * rng.standard_normal(store[k].shape)


@pytest.mark.parametrize("instance", range(20))
def test_composed_total_loss_gradient(instance):
    """Analytic grads of L_total for one view direction vs central differences.

    The momentum branch and the codebooks are constants, as in training.
    """
    cfg = toy_cfg(train_seed=instance, serf_trainable_alpha=True, loss_lambda=0.7)
    st = as_float64(trainer.init_state(cfg))
    rng = np.random.default_rng(300 + instance)
    perturb(st.phi, rng)  # phi != theta, as after some training
    for store in (st.theta, st.pred, st.phi, st.serf.mlp):
        for k in store:
            if k.endswith("fc2.b"):  # keep tiny heads away from an all-dead zero output
                store[k] += rng.standard_normal(store[k].shape)
    for cb in st.codebooks.values():
        cb.entries *= 3.0  # spread codewords so tokens sit far from Voronoi boundaries
    ecfg = cfg.encoder_config()
    x1 = rng.normal(size=(3, 16, 16, 1))
    x2 = rng.normal(size=(3, 16, 16, 1))

    def f():
        return trainer._direction(st, ecfg, x1, x2, True)[0].l_total

    _, _, grads, _ = trainer._direction(st, ecfg, x1, x2, True)
    worst = max(check_store(f, store, grads[key], rng) for key, store in st.trainable().items())
    assert worst < 1e-4


def test_stop_gradient_no_leak_into_encoder():
    """The commit loss lives on the momentum branch: it must not reach theta."""
    cfg = toy_cfg()
    st = as_float64(trainer.init_state(cfg))
    rng = np.random.default_rng(0)
    x1, x2 = rng.normal(size=(2, 3, 16, 16, 1))
    ecfg = cfg.encoder_config()
    _, _, g_a, _ = trainer._direction(st, ecfg, x1, x2, True)
    st.cfg = cfg.replace(loss_lambda=0.0)
    _, _, g_b, _ = trainer._direction(st, ecfg, x1, x2, True)
    for k in g_a["theta"]:
        np.testing.assert_array_equal(g_a["theta"][k], g_b["theta"][k])
    assert not any(v.any() for v in g_b["vqproj"].values())


def test_step_only_moves_phi_by_momentum_and_codebooks_by_ema():
    cfg = toy_cfg()
    st = trainer.init_state(cfg)
    rng = np.random.default_rng(1)
    x1, x2 = rng.normal(size=(2, 4, 16, 16)).astype(np.float32)
    phi0 = st.phi.copy()
    proj0 = st.vqproj.copy()
    entries0 = {s: cb.copy() for s, cb in st.codebooks.items()}
    rec = trainer.train_step(st, x1, x2, n_per_epoch=8)
    mu = mu_at(MomentumSchedule(4, cfg.momentum_base, cfg.momentum_final), 0)
    assert rec["mu"] == pytest.approx(mu)
    for k in st.phi:
        expect = (mu * phi0[k] + (1 - mu) * st.theta[k]).astype(np.float32)
        np.testing.assert_allclose(st.phi[k], expect, rtol=1e-6, atol=1e-7)
    # replay the EMA from pre-step codebooks and projections
    ecfg = cfg.encoder_config()
    toks, idx = {}, {}
    for xt in (x2, x1):
        feats = trainer.enc.forward(phi0, xt, ecfg)[0]
        for s in cfg.scales:
            t = vq.normalize_tokens(vq.project_tokens(
                feats.scale(s), proj0[f"vqproj.{s}.w"], proj0[f"vqproj.{s}.b"]))[0]
            t = t.reshape(-1, t.shape[-1])
            toks.setdefault(s, []).append(t)
            idx.setdefault(s, []).append(vq.assign(t, entries0[s].entries))
    for s, cb in entries0.items():
        vq.ema_update(cb, np.concatenate(toks[s]), np.concatenate(idx[s]))
        np.testing.assert_allclose(cb.entries, st.codebooks[s].entries, rtol=1e-5, atol=1e-6)


def test_lambda_zero_hphi_only_frozen_serf():
    cfg = toy_cfg(loss_lambda=0.0, variant_targets="h_phi", serf_grad_mode="frozen")
    st = trainer.init_state(cfg)
    serf0 = st.serf.mlp.copy()
    proj0 = st.vqproj.copy()
    rng = np.random.default_rng(2)
    x1, x2 = rng.normal(size=(2, 4, 16, 16)).astype(np.float32)
    rec = trainer.train_step(st, x1, x2, n_per_epoch=8)
    assert rec["l_total"] == pytest.approx(rec["l_reg_hphi"])
    assert rec["l_vq"] > 0
    assert all(np.array_equal(serf0[k], st.serf.mlp[k]) for k in serf0)
    assert all(np.array_equal(proj0[k], st.vqproj[k]) for k in proj0)


def test_no_momentum_variant_copies_theta():
    cfg = toy_cfg().with_variant("no-momentum")
    st = trainer.init_state(cfg)
    rng = np.random.default_rng(3)
    x1, x2 = rng.normal(size=(2, 4, 16, 16)).astype(np.float32)
    trainer.train_step(st, x1, x2, n_per_epoch=8)
    assert all(np.array_equal(st.phi[k], st.theta[k]) for k in st.phi)


@pytest.mark.parametrize("variant", ["no-serf-concat", "no-post-serf-head", "coarse-only",
                                     "medium-only", "fine-only", "qt-only"])
def test_variants_run(variant):
    cfg = toy_cfg().with_variant(variant)
    st = trainer.init_state(cfg)
    rng = np.random.default_rng(4)
    x1, x2 = rng.normal(size=(2, 4, 16, 16)).astype(np.float32)
    rec = trainer.train_step(st, x1, x2, n_per_epoch=8)
    assert np.isfinite(rec["l_total"])
    assert list(rec) == list(trainer.METRIC_FIELDS)


def test_determinism_of_metric_stream():
    cfg = toy_cfg(train_epochs=1)
    imgs = np.random.default_rng(5).uniform(size=(12, 16, 16)).astype(np.float32)
    runs = []
    for _ in range(2):
        st = trainer.init_state(cfg)
        recs = trainer.run_epoch(st, imgs)
        runs.append([{k: v for k, v in r.items() if k != "wall_time"} for r in recs])
    assert runs[0] == runs[1]


def test_metric_records_monotone(tmp_path):
    cfg = toy_cfg(train_epochs=2, train_checkpoint_every=1)
    imgs = np.random.default_rng(6).uniform(size=(10, 16, 16)).astype(np.float32)
    trainer.fit(cfg, imgs, str(tmp_path))
    recs = trainer.read_metrics(str(tmp_path / "metrics.jsonl"))
    assert [r["step"] for r in recs] == list(range(1, 7))
    assert all(list(r) == list(trainer.METRIC_FIELDS) for r in recs)


def test_empty_batch_rejected():
    st = trainer.init_state(toy_cfg())
    with pytest.raises(ValueError):
        trainer.train_step(st, np.zeros((0, 16, 16)), np.zeros((0, 16, 16)))


def test_token_set_sizes():
    cfg = toy_cfg()
    st = trainer.init_state(cfg)
    feats, _ = trainer.enc.forward(st.phi, np.zeros((2, 16, 16), np.float32), cfg.encoder_config())
    assert trainer.scale_tokens(st, feats, "f").shape == (2, 64, 8)
    assert vq.perplexity([0], 8) == 1.0


def test_mu_one_freezes_target():
    cfg = toy_cfg(momentum_base=1.0, momentum_final=1.0)
    st = trainer.init_state(cfg)
    phi0 = st.phi.copy()
    imgs = np.random.default_rng(7).uniform(size=(8, 16, 16)).astype(np.float32)
    trainer.run_epoch(st, imgs)
    assert all(np.array_equal(phi0[k], st.phi[k]) for k in phi0)
    assert any(not np.array_equal(phi0[k], st.theta[k]) for k in phi0)
