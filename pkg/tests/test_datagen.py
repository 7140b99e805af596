import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vqssl import datagen as dg


def test_no_lesions_all_negative():
    s = dg.generate_sample(dg.PhantomSpec(lesion_count_range=(0, 0)), 5)
    assert s.labels == (0, 0, 0, 0) and s.lesion_centers == []


def test_forced_top_left_lesion():
    spec = dg.PhantomSpec(lesion_count_range=(1, 1), seed=11)
    s = dg.generate_sample(spec, 0, centers=[(8.0, 8.0)])
    assert s.labels == (1, 0, 0, 0)


def test_deterministic_and_clipped():
    spec = dg.PhantomSpec(seed=3)
    a, b = dg.generate_sample(spec, 7), dg.generate_sample(spec, 7)
    np.testing.assert_array_equal(a.image, b.image)
    assert a.image.dtype == np.float32
    assert a.image.min() >= 0 and a.image.max() <= 1
    assert not np.array_equal(a.image, dg.generate_sample(spec, 8).image)


def test_label_soundness_1000():
    spec = dg.PhantomSpec(seed=1)
    for i in range(1000):
        s = dg.generate_sample(spec, i)
        expect = [0, 0, 0, 0]
        for r, c in s.lesion_centers:
            expect[2 * int(r >= 16) + int(c >= 16)] = 1
        assert list(s.labels) == expect


def test_spec_validation():
    with pytest.raises(ValueError):
        dg.PhantomSpec(anatomy_jitter=0.3)
    with pytest.raises(ValueError):
        dg.PhantomSpec(lesion_count_range=(0, 4))
    with pytest.raises(ValueError):
        dg.AugmentConfig(crop_scale_range=(0.0, 1.0))
    with pytest.raises(ValueError):
        dg.AugmentConfig(flip_prob=1.5)


def test_identity_augmentation():
    img = dg.generate_sample(dg.PhantomSpec(), 0).image
    cfg = dg.AugmentConfig(crop_scale_range=(1, 1), flip_prob=0, blur_prob=0)
    pair = dg.make_pair(img, cfg, np.random.default_rng(0))
    np.testing.assert_array_equal(pair.x1, img)
    np.testing.assert_array_equal(pair.x2, img)


def test_forced_flip():
    img = dg.generate_sample(dg.PhantomSpec(), 1).image
    cfg = dg.AugmentConfig(crop_scale_range=(1, 1), flip_prob=1, blur_prob=0)
    pair = dg.make_pair(img, cfg, np.random.default_rng(0))
    np.testing.assert_array_equal(pair.x1, img[:, ::-1])
    np.testing.assert_array_equal(pair.x2, img[:, ::-1])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_augmentation_range(seed):
    rng = np.random.default_rng(seed)
    img = dg.generate_sample(dg.PhantomSpec(seed=seed), 0).image
    out = dg.augment(img, dg.AugmentConfig(), rng, normalize=False)
    assert out.shape == img.shape
    assert out.min() >= -1e-6 and out.max() <= 1 + 1e-6


def test_corpus_roundtrip(tmp_path):
    spec = dg.PhantomSpec(seed=2)
    dg.generate_corpus(spec, 6, str(tmp_path))
    m, imgs, labels = dg.load_corpus(str(tmp_path))
    ref_imgs, ref_labels = dg.generate_arrays(spec, 6)
    assert m.count == 6 and m.spec_hash == spec.hash()
    np.testing.assert_array_equal(imgs, ref_imgs)
    np.testing.assert_array_equal(labels, ref_labels)
    raw = np.fromfile(tmp_path / "img_000003.f32", dtype="<f4").reshape(32, 32)
    np.testing.assert_array_equal(raw, ref_imgs[3])
