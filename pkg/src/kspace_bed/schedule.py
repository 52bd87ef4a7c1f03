"""Linear variance-preserving noise schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# floor of the sampling grid; keeps 1 / sqrt(alpha_bar) finite near t = 0
T_FLOOR = 1e-3


@dataclass(frozen=True)
class NoiseSchedule:
    beta_min: float = 0.02
    beta_max: float = 5.0
    t0: float = 0.0
    tf: float = 2.0

    def __post_init__(self):
        if not (0 < self.beta_min <= self.beta_max):
            raise ValueError("need 0 < beta_min <= beta_max")
        if not (0 <= self.t0 < self.tf):
            raise ValueError("need 0 <= t0 < tf")

    def _check(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < self.t0 - 1e-12) or np.any(t > self.tf + 1e-12):
            raise ValueError(f"t outside [{self.t0}, {self.tf}]")
        return t

    def beta(self, t):
        t = self._check(t)
        return self.beta_min + (self.beta_max - self.beta_min) * t / self.tf

    def integrated_beta(self, t):
        t = self._check(t)
        return self.beta_min * t + (self.beta_max - self.beta_min) * t**2 / (2 * self.tf)

    def alpha_bar(self, t):
        return np.exp(-self.integrated_beta(t))

    def time_grid(self, steps: int) -> np.ndarray:
        """Uniform grid of ``steps + 1`` times over ``[t0 + T_FLOOR, tf]``."""
        if steps < 1:
            raise ValueError("steps must be >= 1")
        lo = self.t0 + T_FLOOR
        if lo >= self.tf:
            raise ValueError("empty schedule range")
        return np.linspace(lo, self.tf, steps + 1)


def alpha_bar(schedule: NoiseSchedule, t):
    return schedule.alpha_bar(t)
