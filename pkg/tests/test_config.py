import os

import pytest

from vqssl.config import (ConfigError, TrainConfig, VARIANTS, desk_config, load_config,
                          parse_text, save_config)


def test_defaults_roundtrip(tmp_path):
    cfg = TrainConfig()
    p = tmp_path / "c.cfg"
    save_config(cfg, p)
    assert load_config(p) == cfg
    assert load_config(p).to_text() == cfg.to_text()


def test_cited_defaults():
    cfg = TrainConfig()
    assert cfg.vq_decay == 0.99 and cfg.vq_beta == 0.25
    assert cfg.optim_base_lr == 0.3 and cfg.optim_weight_decay == 1.5e-6
    assert cfg.momentum_base == 0.996 and cfg.momentum_final == 1.0
    assert cfg.loss_lambda == 1.0


def test_override_and_comments():
    cfg = parse_text("# desk run\nvq.entries_c = 64\nloss.lambda=0.25  # sweep\n")
    assert cfg.vq_entries_c == 64 and cfg.loss_lambda == 0.25


@pytest.mark.parametrize("text", ["nope.key=1", "vq.beta=abc", "vq.decay=1.0",
                                  "variant.targets=none", "just text"])
def test_bad_config(text):
    with pytest.raises(ConfigError):
        parse_text(text)


def test_variants():
    assert len(VARIANTS) == 9
    for name in VARIANTS:
        TrainConfig().with_variant(name)
    assert TrainConfig().with_variant("no-momentum").variant_momentum == "off"
    with pytest.raises(ConfigError):
        TrainConfig().with_variant("bogus")


def test_desk_file_matches_profile():
    path = os.path.join(os.path.dirname(__file__), "..", "configs", "desk.cfg")
    assert load_config(path) == desk_config()
    assert desk_config(train_epochs=3).train_epochs == 3
