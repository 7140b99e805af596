import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from vqssl import objective as obj
from gradcheck import directional_fd, rel_err

vec = arrays(np.float64, 5, elements=st.floats(-100, 100))


def nonzero(v):
    return np.linalg.norm(v) > 1e-3


def test_cosine_examples():
    x = np.array([1.0, 2.0, -3.0])
    assert obj.cosine_regression(x, x) == pytest.approx(0.0, abs=1e-12)
    assert obj.cosine_regression(x, -x) == pytest.approx(4.0)
    assert obj.cosine_regression(np.array([1.0, 0]), np.array([0, 2.0])) == pytest.approx(2.0)


def test_zero_norm_guard():
    with pytest.raises(obj.ZeroNormError):
        obj.cosine_regression(np.zeros(3), np.ones(3))


@settings(max_examples=200, deadline=None)
@given(vec, vec, st.floats(0.01, 100))
def test_cosine_properties(x, y, c):
    if not (nonzero(x) and nonzero(y)):
        return
    v = obj.cosine_regression(x, y)
    assert -1e-12 <= v <= 4 + 1e-12
    assert obj.cosine_regression(y, x) == pytest.approx(v, abs=1e-12)
    assert obj.cosine_regression(c * x, y) == pytest.approx(v, abs=1e-9)


@pytest.mark.parametrize("instance", range(20))
def test_cosine_gradient_fd(instance):
    rng = np.random.default_rng(instance)
    x, y = rng.normal(size=8), rng.normal(size=8)
    d = rng.normal(size=8)
    fd = directional_fd(lambda: float(obj.cosine_regression(x, y)), [x], [d])
    assert rel_err(fd, float(obj.cosine_regression_grad(x, y) @ d)) < 1e-4


def test_sim_loss_examples():
    h = np.array([[1.0, 2.0, 0.5]])
    assert obj.sim_loss(h, h, h)[2] == pytest.approx(0.0, abs=1e-12)
    assert obj.sim_loss(h, h, -h)[2] == pytest.approx(2.0)
    a = obj.sim_loss(h, h * 0.3 + 1, -h + 0.2)
    b = obj.sim_loss(10 * h, h * 0.3 + 1, -h + 0.2)
    assert a[2] == pytest.approx(b[2])
    assert a[2] == pytest.approx((a[0] + a[1]) / 2)


def test_sim_loss_grads_fd():
    rng = np.random.default_rng(1)
    ht, hp, q = (rng.normal(size=(4, 8)) for _ in range(3))
    dh, dq = obj.sim_loss_grads(ht, hp, q)
    for arr, g in ((ht, dh), (q, dq)):
        d = rng.normal(size=arr.shape)
        fd = directional_fd(lambda: obj.sim_loss(ht, hp, q)[2], [arr], [d])
        assert rel_err(fd, float((g * d).sum())) < 1e-4


def test_sim_loss_target_selection():
    rng = np.random.default_rng(2)
    ht, hp, q = (rng.normal(size=(3, 4)) for _ in range(3))
    a, b, _ = obj.sim_loss(ht, hp, q)
    assert obj.sim_loss(ht, hp, q, "h_phi")[2] == a
    assert obj.sim_loss(ht, hp, q, "q_t")[2] == b
    _, dq = obj.sim_loss_grads(ht, hp, q, "h_phi")
    assert not dq.any()


def test_total_loss_examples():
    assert obj.total_loss(0.5, (0.1, 0.2, 0.3), 0.0)[1] == 0.5
    l_vq, tot = obj.total_loss(0.5, (0.1, 0.2, 0.3), 1.0)
    assert l_vq == pytest.approx(0.6) and tot == pytest.approx(1.1)
    assert obj.total_loss(0.5, (0.1, 0.2, 0.3), 2.0)[1] == pytest.approx(1.7)
    with pytest.raises(ValueError):
        obj.total_loss(0.5, (0.1,), -1)


def test_breakdown_identities_and_view_average():
    a = obj.breakdown(0.2, 0.4, 0.3, (0.1, 0.2, 0.3), 0.5)
    b = obj.breakdown(0.6, 0.0, 0.3, (0.3, 0.0, 0.1), 0.5)
    avg = obj.average_views(a, b)
    assert avg.l_sim == pytest.approx((avg.l_reg_hphi + avg.l_reg_qt) / 2)
    assert avg.l_vq == pytest.approx(sum(avg.l_vq_per_scale))
    assert avg.l_total == pytest.approx(avg.l_sim + 0.5 * avg.l_vq)
    assert avg.to_dict()["l_vq_per_scale"] == pytest.approx([0.2, 0.1, 0.2])
