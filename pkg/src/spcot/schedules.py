"""Per-epoch hyperparameter schedules and the EMA teacher update."""

import math
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor


def pace_ceiling(k, epsilon_floor):
    """ln(K / eps): past this pace no pixel can sit at the weight floor."""
    return math.log(k / epsilon_floor)


@dataclass(frozen=True)
class PaceSchedule:
    gamma0: float = 0.2
    epochs_to_ceiling: int = 50
    ceiling: float = pace_ceiling(2, 0.01)

    @classmethod
    def for_views(cls, gamma0, k, epsilon_floor, epochs_to_ceiling=50):
        return cls(gamma0, epochs_to_ceiling, pace_ceiling(k, epsilon_floor))

    @property
    def increase_factor(self):
        return (self.ceiling / self.gamma0) ** (1.0 / self.epochs_to_ceiling)


@dataclass(frozen=True)
class AlphaSchedule:
    alpha_max: float = 1e-4
    ramp_epochs: int = 50


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 1e-2
    warmup_epochs: int = 10
    total_epochs: int = 100
    warmup_factor: float = 300.0


@dataclass(frozen=True)
class EmaConfig:
    beta: float = 0.99


def pace_at(sched, epoch):
    """gamma0 * factor**epoch, capped at the ceiling."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch >= sched.epochs_to_ceiling:
        return sched.ceiling
    return min(sched.gamma0 * sched.increase_factor ** epoch, sched.ceiling)


def alpha_at(sched, epoch):
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if sched.ramp_epochs <= 0 or epoch >= sched.ramp_epochs:
        return sched.alpha_max
    return sched.alpha_max * epoch / sched.ramp_epochs


def lr_at(sched, epoch):
    """Linear warm-up from base/warmup_factor to base, then cosine decay toward 0."""
    if not 0 <= epoch < sched.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {sched.total_epochs})")
    base, warm = sched.base_lr, sched.warmup_epochs
    if epoch < warm:
        start = base / sched.warmup_factor
        return start + (base - start) * epoch / warm
    span = sched.total_epochs - warm
    return 0.5 * base * (1.0 + math.cos(math.pi * (epoch - warm) / span))


def ema_update(teacher, student, beta):
    """In place: teacher <- beta * teacher + (1 - beta) * student.

    Both arguments are dicts of name -> Tensor (or ndarray). Returns teacher.
    """
    if teacher.keys() != student.keys():
        raise KeyError(f"parameter names differ: {sorted(teacher)} vs {sorted(student)}")
    for name, t in teacher.items():
        s = student[name]
        td = t.data if isinstance(t, Tensor) else t
        sd = s.data if isinstance(s, Tensor) else s
        if td.shape != sd.shape:
            raise ShapeError(f"{name}: {td.shape} vs {sd.shape}")
        new = beta * td + (1.0 - beta) * sd
        if isinstance(t, Tensor):
            t.data = new
        else:
            td[...] = new
    return teacher
