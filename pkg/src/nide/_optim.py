from __future__ import annotations

import math
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from nide._models import AdamConfig, ScheduleConfig
    from nide._types import FloatArray


class CosineAnnealing:
    """
    Learning rate oscillating between `lr_max` (epoch 0, P, 2P, ...) and `lr_min`
    (epoch P/2, 3P/2, ...), where `P` is the period in epochs.
    """

    def __init__(self, config: ScheduleConfig) -> None:
        self.lr_max = config.lr_max
        self.lr_min = config.lr_min
        self.period = config.period

    def __call__(self, epoch: int) -> float:
        phase = 2.0 * math.pi * (epoch % self.period) / self.period
        return self.lr_min + (self.lr_max - self.lr_min) * (1.0 + math.cos(phase)) / 2.0


class Adam:
    """
    Adam with bias-corrected moment estimates over a flat parameter vector.

    Parameters
    ----------
    config : AdamConfig
        `beta1`, `beta2` and `eps`.
    size : int
        Number of parameters.
    """

    def __init__(self, config: AdamConfig, size: int) -> None:
        self.beta1 = config.beta1
        self.beta2 = config.beta2
        self.eps = config.eps
        self.first = np.zeros(size)
        self.second = np.zeros(size)
        self.steps = 0

    def step(self, values: FloatArray, grad: FloatArray, lr: float) -> FloatArray:
        """Return the updated parameters; the moments are updated in place."""
        self.steps += 1
        self.first = self.beta1 * self.first + (1.0 - self.beta1) * grad
        self.second = self.beta2 * self.second + (1.0 - self.beta2) * grad * grad
        first = self.first / (1.0 - self.beta1**self.steps)
        second = self.second / (1.0 - self.beta2**self.steps)
        return values - lr * first / (np.sqrt(second) + self.eps)

    def snapshot(self) -> tuple[FloatArray, FloatArray, int]:
        """Copy of the moment state, to roll back a failed step."""
        return self.first.copy(), self.second.copy(), self.steps

    def restore(self, state: tuple[FloatArray, FloatArray, int]) -> None:
        first, second, steps = state
        self.first = first.copy()
        self.second = second.copy()
        self.steps = steps
