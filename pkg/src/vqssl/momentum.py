"""Momentum-branch updates and the annealing schedules."""

import math
from dataclasses import dataclass

import numpy as np


class CongruenceError(ValueError):
    pass


@dataclass
class MomentumSchedule:
    total_steps: int
    mu_base: float = 0.996
    mu_final: float = 1.0


@dataclass
class LrSchedule:
    total_epochs: float
    base_lr: float = 0.3
    warmup_epochs: float = 10
    floor_lr: float = 0.0


def mu_at(schedule, step):
    """Cosine ramp of the momentum coefficient from mu_base to mu_final."""
    if schedule.total_steps <= 0:
        return schedule.mu_final
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    gap = schedule.mu_final - schedule.mu_base
    return schedule.mu_final - gap * (math.cos(math.pi * step / schedule.total_steps) + 1) / 2


def lr_at(schedule, epoch):
    """Linear warmup to base_lr, then cosine annealing to floor_lr."""
    s = schedule
    if not 0 <= epoch <= s.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {s.total_epochs}]")
    warm = min(s.warmup_epochs, s.total_epochs)
    if epoch < warm:
        return s.base_lr * epoch / warm
    span = s.total_epochs - warm
    progress = (epoch - warm) / span if span > 0 else 1.0
    return s.floor_lr + (s.base_lr - s.floor_lr) * (math.cos(math.pi * progress) + 1) / 2


def momentum_update(theta, phi, mu):
    """phi <- mu * phi + (1 - mu) * theta, array by array, in place."""
    if list(theta.keys()) != list(phi.keys()) or any(
            theta[k].shape != phi[k].shape for k in phi):
        raise CongruenceError("theta and phi stores differ in names or shapes")
    for k in phi:
        if mu == 1.0:
            continue
        if mu == 0.0:
            phi[k][...] = theta[k]
        else:
            phi[k][...] = mu * phi[k] + (1.0 - mu) * theta[k]
    return phi
