import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vqssl import evalsuite as ev
from vqssl import encoder as enc

TOY = enc.EncoderConfig(input_size=16, stage_channels=(4, 6, 8), embed_dim=8,
                        proj_hidden=8, proj_out=8)


def brute_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return total / (len(pos) * len(neg))


def test_auc_examples():
    assert ev.auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
    assert ev.auc([0.1, 0.2, 0.9, 0.8], [1, 1, 0, 0]) == 0.0
    assert ev.auc([0.5] * 4, [1, 0, 1, 0]) == 0.5
    with pytest.raises(ev.SingleClassError):
        ev.auc([0.1, 0.2], [1, 1])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=2, max_size=200))
def test_auc_matches_brute_force(pairs):
    scores = [p[0] for p in pairs]
    labels = [p[1] for p in pairs]
    if all(labels) or not any(labels):
        return
    assert ev.auc(scores, labels) == brute_auc(scores, labels)


def test_split_is_stable_and_about_20_percent():
    tr, te = ev.split_indices(2000)
    assert len(set(tr) & set(te)) == 0 and len(tr) + len(te) == 2000
    assert 0.17 < len(te) / 2000 < 0.23
    np.testing.assert_array_equal(te, ev.split_indices(2000)[1])


def test_nested_subsets():
    tr, _ = ev.split_indices(2000)
    for seed in range(3):
        prev = set()
        for f in ev.LABEL_FRACTIONS:
            cur = set(ev.label_subset(tr, f, seed))
            assert prev <= cur
            prev = cur


def test_probe_sanity_injection_and_coin_flips():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 2, (1000, 4))
    tr, te = ev.split_indices(1000)
    perfect = ev.probe_features(labels.astype(float), labels, tr, te, 0.2, 0)[0]
    assert perfect == 1.0
    aucs = [ev.probe_features(rng.normal(size=(1000, 16)), labels, tr, te, 0.2, s)[0]
            for s in range(3)]
    assert 0.45 <= np.mean(aucs) <= 0.55


def test_linear_probe_does_not_mutate_encoder():
    theta = enc.init_params(TOY, 0)
    imgs = np.random.default_rng(1).uniform(size=(60, 16, 16))
    labels = np.random.default_rng(2).integers(0, 2, (60, 4))
    before = ev.params_digest(theta)
    ev.linear_probe(theta, imgs, labels, TOY, fractions=[0.5])
    assert ev.params_digest(theta) == before


def test_finetune_zero_epochs_and_zero_lr_match():
    theta = enc.init_params(TOY, 0)
    imgs = np.random.default_rng(3).uniform(size=(80, 16, 16))
    labels = np.random.default_rng(4).integers(0, 2, (80, 4))
    zero = ev.finetune(theta, imgs, labels, TOY, ev.ProbeConfig(ft_epochs=0), [0.5])
    nolr = ev.finetune(theta, imgs, labels, TOY, ev.ProbeConfig(ft_epochs=3, ft_lr=0.0), [0.5])
    assert zero == nolr
    assert all(a == 0.5 for a in zero[0.5])  # zero head: every score ties


def test_position_probe_oracles():
    n = 300
    pos = np.tile(np.arange(9), n)
    ids = np.repeat(np.arange(n), 9)
    onehot = np.eye(9)[pos]
    assert ev.position_probe_features(onehot, pos, ids) == 1.0
    noise = np.random.default_rng(0).normal(size=(9 * n, 16))
    assert abs(ev.position_probe_features(noise, pos, ids) - 1 / 9) < 0.05


def test_grid_patches():
    imgs = np.arange(2 * 32 * 32, dtype=float).reshape(2, 32, 32)
    patches, pos, ids = ev.grid_patches(imgs, 16)
    assert patches.shape == (18, 16, 16)
    assert list(pos[:9]) == list(range(9)) and list(ids[:9]) == [0] * 9
    assert patches[0, 0, 0] == imgs[0, 0, 0]


def test_report_roundtrip_and_delta():
    r = ev.EvalReport([0.05, 0.4], {0.05: 0.6, 0.4: 0.7}, {0.05: 0.65, 0.4: 0.66},
                      {"c": 5.0}, 0.4)
    assert r.delta(0.05) == pytest.approx(0.05)
    back = ev.EvalReport.from_metrics_lines(r.to_metrics_lines())
    assert back.lp_auc == r.lp_auc and back.ft_auc == r.ft_auc
    assert back.perplexity == r.perplexity and back.position_accuracy == 0.4
    assert "LP" in r.to_table().splitlines()[0]


def test_codebook_report_identical_entries():
    from test_trainer import toy_cfg
    from vqssl import trainer
    st = trainer.init_state(toy_cfg())
    for cb in st.codebooks.values():
        cb.entries[...] = cb.entries[0]
    rep = ev.codebook_report(st, np.random.default_rng(0).uniform(size=(8, 16, 16)))
    assert all(v["perplexity"] == 1.0 and v["histogram"][0] == sum(v["histogram"])
               for v in rep.values())
    fresh = ev.codebook_report(trainer.init_state(toy_cfg()),
                               np.random.default_rng(0).uniform(size=(8, 16, 16)))
    assert all(0 < v["utilization"] <= 1 for v in fresh.values())
