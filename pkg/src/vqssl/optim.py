"""LARS and plain momentum SGD over ParamStores."""

import numpy as np

from .nn import is_norm_or_bias

LARS_EPS = 1e-9


class NonFiniteGradientError(FloatingPointError):
    pass


def lars_update(param, grad, velocity, lr, weight_decay=1.5e-6, momentum=0.99,
                exempt=False, trust_coef=1.0):
    """One LARS step, in place on ``param`` and ``velocity``.

    Exempt arrays (biases, norm scales/shifts) skip weight decay and use a
    trust ratio of 1.
    """
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError("non-finite gradient")
    if exempt:
        eta, wd = 1.0, 0.0
    else:
        wd = weight_decay
        p_norm = float(np.linalg.norm(param))
        g_norm = float(np.linalg.norm(grad))
        if p_norm == 0.0:
            eta = 1.0
        else:
            eta = trust_coef * p_norm / (g_norm + wd * p_norm + LARS_EPS)
    step = grad + wd * param if wd else grad
    velocity *= momentum
    velocity += eta * lr * step
    param -= velocity
    return param, velocity


def sgd_update(param, grad, velocity, lr, weight_decay=0.0, momentum=0.9, exempt=False):
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError("non-finite gradient")
    wd = 0.0 if exempt else weight_decay
    velocity *= momentum
    velocity += lr * (grad + wd * param)
    param -= velocity
    return param, velocity


def apply_update(store, grads, velocities, lr, *, optimizer="lars", weight_decay=1.5e-6,
                 momentum=0.99, trust_coef=1.0, frozen=()):
    """Updates every array of ``store`` that has a gradient and is not frozen."""
    for name, p in store.items():
        if name in frozen or name not in grads:
            continue
        exempt = is_norm_or_bias(name)
        if optimizer == "lars":
            lars_update(p, grads[name], velocities[name], lr, weight_decay, momentum,
                        exempt=exempt, trust_coef=trust_coef)
        elif optimizer == "sgd":
            sgd_update(p, grads[name], velocities[name], lr, weight_decay, momentum, exempt=exempt)
        else:
            raise ValueError(f"unknown optimizer {optimizer!r}")
