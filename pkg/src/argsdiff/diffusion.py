"""Noise schedule and the deterministic forward/reverse diffusion algebra.

All functions accept either numpy arrays or :class:`Tensor` values; tensors
stay on the tape so the guidance gradients can flow through them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor, as_tensor, mean, no_grad, square, sub

ABAR_FIRST = 0.9999
ABAR_LAST = 1e-4
ABAR_TERMINAL = 1.0 - 1e-12  # stands in for abar_0 at the last reverse step


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    alphabar: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alphabar, dtype=np.float64)
        if a.ndim != 1 or a.size < 2:
            raise ScheduleError("schedule needs at least two steps")
        if not (np.all(a > 0) and np.all(a < 1)):
            raise ScheduleError("alphabar values must lie in (0, 1)")
        if not np.all(np.diff(a) < 0):
            raise ScheduleError("alphabar must be strictly decreasing")
        object.__setattr__(self, "alphabar", a)

    @property
    def num_steps(self) -> int:
        return self.alphabar.size

    def __len__(self) -> int:
        return self.num_steps

    def at(self, t: int) -> float:
        """alphabar_t for t in 1..num_steps; t = 0 gives the terminal value just below 1."""
        if t == 0:
            return ABAR_TERMINAL
        if not 1 <= t <= self.num_steps:
            raise ScheduleError(f"step {t} outside 1..{self.num_steps}")
        return float(self.alphabar[t - 1])


def make_exponential_schedule(num_steps: int) -> NoiseSchedule:
    """log(alphabar_t) linear in t, from 0.9999 at t=1 down to 1e-4 at the last step."""
    if int(num_steps) != num_steps or num_steps < 2:
        raise ScheduleError(f"num_steps must be an integer >= 2, got {num_steps}")
    logs = np.linspace(math.log(ABAR_FIRST), math.log(ABAR_LAST), int(num_steps))
    a = np.exp(logs)
    a[0], a[-1] = ABAR_FIRST, ABAR_LAST
    return NoiseSchedule(a)


def _check_abar(abar: float, *, allow_one: bool = False) -> float:
    abar = float(abar)
    upper_ok = abar <= 1.0 if allow_one else abar < 1.0
    if not (abar > 0.0 and upper_ok):
        raise ScheduleError(f"alphabar {abar} outside (0, 1)")
    return abar


def _combine(x, cx: float, y, cy: float):
    if isinstance(x, Tensor) or isinstance(y, Tensor):
        return as_tensor(x) * cx + as_tensor(y) * cy
    return np.asarray(x) * cx + np.asarray(y) * cy


def q_sample(x0, eps, abar_t: float):
    """Noise a clean signal: sqrt(abar) x0 + sqrt(1 - abar) eps."""
    abar_t = _check_abar(abar_t)
    if np.shape(getattr(x0, "data", x0)) != np.shape(getattr(eps, "data", eps)):
        raise ValueError("x0 and eps must have the same shape")
    return _combine(x0, math.sqrt(abar_t), eps, math.sqrt(1.0 - abar_t))


def predict_x0(x_t, eps_hat, abar_t: float):
    """Invert q_sample given a noise estimate."""
    abar_t = float(abar_t)
    if abar_t <= 0.0:
        raise ScheduleError(f"alphabar must be positive, got {abar_t}")
    r = math.sqrt(abar_t)
    return _combine(x_t, 1.0 / r, eps_hat, -math.sqrt(max(1.0 - abar_t, 0.0)) / r)


def reverse_step(x0_hat, eps_hat, abar_prev: float):
    """Deterministic update to the previous step; no fresh noise."""
    abar_prev = _check_abar(abar_prev, allow_one=True)
    return _combine(x0_hat, math.sqrt(abar_prev), eps_hat, math.sqrt(1.0 - abar_prev))


def denoise_loss(net_output, true_eps):
    """Mean squared error between predicted and injected noise."""
    if isinstance(net_output, Tensor) or isinstance(true_eps, Tensor):
        return mean(square(sub(as_tensor(net_output), as_tensor(true_eps))))
    diff = np.asarray(net_output, dtype=np.float64) - np.asarray(true_eps, dtype=np.float64)
    return float(np.mean(diff * diff))


def reverse_process(
    eps_fn: Callable[[np.ndarray, int], np.ndarray],
    x_T: np.ndarray,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """Unconditional deterministic reverse diffusion from x_T down to x_0.

    ``eps_fn(x_t, t)`` returns the predicted noise as an array.
    """
    x = np.array(x_T, dtype=np.float64)
    with no_grad():
        for t in range(schedule.num_steps, 0, -1):
            eps = np.asarray(eps_fn(x, t))
            x0 = predict_x0(x, eps, schedule.at(t))
            x = reverse_step(x0, eps, schedule.at(t - 1))
    return x
