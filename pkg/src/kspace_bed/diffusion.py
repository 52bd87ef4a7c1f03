"""VP-SDE noising, reverse Euler-Maruyama sampling and measurement guidance.

Guidance modes for ``grad log p_t(y | theta_t)``:

``"dps"``
    Plug the Tweedie estimate into the Gaussian likelihood and drop the
    Jacobian of the Tweedie map (it is replaced by ``I / sqrt(a)``).
``"dps_hessian"``
    Same likelihood, with the full Jacobian ``(I + (1 - a) H) / sqrt(a)``
    applied through a Hessian-vector product of the prior.
``"moment"``
    As ``"dps_hessian"`` but the likelihood covariance is inflated by the
    Tweedie second moment ``Cov[theta_0 | theta_t]`` (diagonal in k-space).
    Exact for Gaussian priors that are diagonal in k-space; needs
    ``kspace_hessian_diag`` on the score model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import ExperimentDataset, image_block, states_from_image
from .forward import (
    ForwardOperator,
    KspaceEvidence,
    NoiseModel,
    evidence_from_dataset,
    fft2c,
    ifft2c,
    pooled_evidence,
)
from .schedule import NoiseSchedule, alpha_bar

GUIDANCE_MODES = ("dps", "dps_hessian", "moment")

__all__ = [
    "NoiseSchedule",
    "alpha_bar",
    "ParticleEnsemble",
    "PooledWeights",
    "perturb",
    "tweedie",
    "dps_guidance",
    "evidence_guidance",
    "reverse_step",
    "sample_posterior",
    "sample_pooled_posterior",
]


@dataclass
class ParticleEnsemble:
    states: np.ndarray
    time_index: int = 0

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        if self.states.shape[0] < 1:
            raise ValueError("ensemble needs at least one particle")

    def __len__(self):
        return self.states.shape[0]

    def mean(self) -> np.ndarray:
        return self.states.mean(axis=0)


@dataclass(frozen=True)
class PooledWeights:
    nu: np.ndarray

    def __post_init__(self):
        nu = np.asarray(self.nu, dtype=float).reshape(-1)
        if nu.size == 0 or np.any(nu < 0) or not np.isclose(nu.sum(), 1.0):
            raise ValueError("pooling weights must lie on the simplex")
        object.__setattr__(self, "nu", nu)

    @classmethod
    def uniform(cls, n: int) -> "PooledWeights":
        return cls(np.full(n, 1.0 / n))


def perturb(theta0, t: float, schedule: NoiseSchedule, rng) -> np.ndarray:
    """Exact draw of ``sqrt(a) theta0 + sqrt(1 - a) eps``."""
    rng = np.random.default_rng(rng)
    theta0 = np.asarray(theta0, dtype=float)
    a = schedule.alpha_bar(t)
    return np.sqrt(a) * theta0 + np.sqrt(1 - a) * rng.standard_normal(theta0.shape)


def tweedie(theta_t, t: float, score_model=None, schedule=None, score=None) -> np.ndarray:
    """Denoised prediction ``(theta_t + (1 - a) score) / sqrt(a)``.

    ``score`` may be passed directly (e.g. a conditional score); otherwise it
    is taken from ``score_model``.
    """
    schedule = schedule or score_model.schedule
    a = schedule.alpha_bar(t)
    if score is None:
        score = score_model.score(theta_t, t)
    return (theta_t + (1 - a) * score) / np.sqrt(a)


def _shape_of(evidence: KspaceEvidence):
    return evidence.precision.shape


def evidence_guidance(
    theta_t: np.ndarray,
    t: float,
    evidence: KspaceEvidence,
    score_model,
    mode: str = "dps",
    prior_score: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Guidance term for a batch of states given accumulated k-space evidence."""
    if mode not in GUIDANCE_MODES:
        raise ValueError(f"unknown guidance mode {mode!r}")
    theta_t = np.atleast_2d(theta_t)
    schedule = score_model.schedule
    a = float(schedule.alpha_bar(t))
    rows, cols = _shape_of(evidence)
    if prior_score is None:
        prior_score = score_model.score(theta_t, t)
    x0 = (theta_t + (1 - a) * prior_score) / np.sqrt(a)
    k = fft2c(image_block(x0, rows, cols))
    r = evidence.batch_residual(k)
    if mode == "moment":
        n = rows * cols
        h = score_model.kspace_hessian_diag(theta_t, t)
        cov = np.maximum((1 - a) / a * (1 + (1 - a) * h), 0.0)
        p = evidence.precision
        r = r.real / (1 + p * cov[:, :n].reshape(-1, rows, cols)) + 1j * r.imag / (
            1 + p * cov[:, n:].reshape(-1, rows, cols)
        )
    v = states_from_image(ifft2c(r))
    if mode == "dps":
        return v / np.sqrt(a)
    return (v + (1 - a) * score_model.hvp(theta_t, t, v)) / np.sqrt(a)


def dps_guidance(
    theta_t,
    t: float,
    y,
    forward_op: ForwardOperator,
    noise: NoiseModel,
    score_model,
    schedule: Optional[NoiseSchedule] = None,
    use_hessian: bool = False,
    moment: bool = False,
) -> np.ndarray:
    """Approximate ``grad log p_t(y | theta_t, xi)`` for one measurement.

    ``use_hessian`` applies the Tweedie Jacobian; ``moment`` additionally
    inflates the likelihood covariance (implies ``use_hessian``).
    """
    if not noise.sigma > 0:
        raise ValueError("sigma must be positive")
    if schedule is not None and schedule != score_model.schedule:
        raise ValueError("schedule differs from the score model's schedule")
    ev = KspaceEvidence.from_measurement(y, forward_op.mask.weights, noise.sigma)
    mode = "moment" if moment else ("dps_hessian" if use_hessian else "dps")
    theta_t = np.asarray(theta_t, dtype=float)
    out = evidence_guidance(np.atleast_2d(theta_t), t, ev, score_model, mode)
    return out[0] if theta_t.ndim == 1 else out


def reverse_step(theta_t, t: float, dt: float, score, schedule: NoiseSchedule, rng=None):
    """One Euler-Maruyama step of the reverse VP-SDE from ``t`` to ``t - dt``.

    ``theta + beta (theta / 2 + score) dt + sqrt(beta dt) eps`` with ``beta``
    taken at the new time. ``rng=None`` gives the noise-free drift.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    theta_t = np.asarray(theta_t, dtype=float)
    b = schedule.beta(max(t - dt, schedule.t0))
    out = theta_t + b * (0.5 * theta_t + score) * dt
    if rng is not None:
        out = out + np.sqrt(b * dt) * rng.standard_normal(theta_t.shape)
    return out


def conditional_score(score_model, states, t, evidence: Optional[KspaceEvidence], mode):
    s = score_model.score(states, t)
    if evidence is None or evidence.is_empty:
        return s
    return s + evidence_guidance(states, t, evidence, score_model, mode, prior_score=s)


def initial_states(score_model, n: int, schedule, rng, exact_init: bool, dim: int):
    if exact_init and hasattr(score_model, "sample_marginal"):
        return score_model.sample_marginal(n, schedule.tf, rng)
    return rng.standard_normal((n, dim))


def run_reverse(
    score_model,
    evidence: Optional[KspaceEvidence],
    steps: int,
    n: int,
    rng,
    dim: int,
    mode: str = "dps",
    exact_init: bool = False,
    callback: Optional[Callable] = None,
) -> ParticleEnsemble:
    """Reverse-SDE sampler with a fixed evidence term."""
    schedule = score_model.schedule
    rng = np.random.default_rng(rng)
    ts = schedule.time_grid(steps)
    states = initial_states(score_model, n, schedule, rng, exact_init, dim)
    for i in range(steps, 0, -1):
        t, dt = ts[i], ts[i] - ts[i - 1]
        s = conditional_score(score_model, states, t, evidence, mode)
        if callback is not None:
            callback(i, t, states, s)
        states = reverse_step(states, t, dt, s, schedule, rng)
        if not np.all(np.isfinite(states)):
            raise FloatingPointError(f"non-finite particles at t={t:.4f}")
    return ParticleEnsemble(states, 0)


def sample_posterior(
    score_model,
    dataset: Optional[ExperimentDataset],
    schedule: NoiseSchedule,
    steps: int,
    N: int,
    rng,
    shape,
    guidance: str = "dps",
    exact_init: bool = False,
) -> ParticleEnsemble:
    """``N`` approximate draws from ``p(theta | D_k)``; prior draws for an empty dataset."""
    if schedule != score_model.schedule:
        raise ValueError("schedule differs from the score model's schedule")
    ev = evidence_from_dataset(dataset, shape)
    dim = 3 * shape[0] * shape[1]
    return run_reverse(score_model, ev, steps, N, rng, dim, guidance, exact_init)


def sample_pooled_posterior(
    score_model,
    ys,
    mask_weights,
    sigma: float,
    nu,
    schedule: NoiseSchedule,
    steps: int,
    M: int,
    rng,
    base: Optional[ExperimentDataset] = None,
    guidance: str = "dps",
    exact_init: bool = False,
) -> ParticleEnsemble:
    """``M`` draws from ``p(theta | D) prod_i p(y_i | theta, xi)^nu_i``.

    Every ``y_i`` is observed through the same mask. The guidance is
    ``sum_i nu_i g(y_i)``, which is linear in ``y`` and therefore equal to the
    guidance of the pooled observation ``sum_i nu_i y_i``.
    """
    ys = np.asarray(ys)
    if ys.ndim == 2:
        ys = ys[None]
    if ys.shape[0] == 0:
        raise ValueError("need at least one measurement")
    nu = PooledWeights(nu).nu if not isinstance(nu, PooledWeights) else nu.nu
    if nu.size != ys.shape[0]:
        raise ValueError("nu and ys differ in length")
    if schedule != score_model.schedule:
        raise ValueError("schedule differs from the score model's schedule")
    shape = ys.shape[1:]
    ev = evidence_from_dataset(base, shape) + pooled_evidence(ys, mask_weights, sigma, nu)
    dim = 3 * shape[0] * shape[1]
    return run_reverse(score_model, ev, steps, M, rng, dim, guidance, exact_init)
