"""Measurement model ``y = M_xi * F(x) + e`` on the joint state ``theta = (x, z)``.

The DFT is orthonormal. Noise is complex Gaussian with standard deviation
``sigma`` on each real component and is only drawn where the mask is
non-zero. The segmentation block of ``theta`` never enters the measurement.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .core import (
    ComplexField,
    ExperimentDataset,
    TargetState,
    image_block,
    states_from_image,
)
from .masks import DesignParameter, MaskField, MaskSettings, make_mask


@dataclass(frozen=True)
class NoiseModel:
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")


@dataclass(frozen=True)
class ForwardOperator:
    mask: MaskField

    @property
    def rows(self) -> int:
        return self.mask.rows

    @property
    def cols(self) -> int:
        return self.mask.cols


def fft2c(images: np.ndarray) -> np.ndarray:
    """Orthonormal 2D DFT over the last two axes."""
    return np.fft.fft2(images, norm="ortho")


def ifft2c(kspace: np.ndarray) -> np.ndarray:
    return np.fft.ifft2(kspace, norm="ortho")


def dft2(image: ComplexField) -> ComplexField:
    return ComplexField.from_complex(fft2c(image.to_complex()))


def idft2(kspace: ComplexField) -> ComplexField:
    return ComplexField.from_complex(ifft2c(kspace.to_complex()))


def _theta_vector(theta) -> np.ndarray:
    if isinstance(theta, TargetState):
        return theta.to_vector()
    return np.asarray(theta, dtype=float)


def forward_states(states: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Batch forward: ``(N, 3n)`` states to ``(N, rows, cols)`` masked k-space."""
    rows, cols = weights.shape
    return weights * fft2c(image_block(states, rows, cols))


def adjoint_kspace(kspace: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`forward_states`: k-space ``(N, r, c)`` to states ``(N, 3n)``."""
    return states_from_image(ifft2c(weights * kspace))


def apply_forward(op: ForwardOperator, theta) -> ComplexField:
    vec = _theta_vector(theta)
    if vec.size != 3 * op.rows * op.cols:
        raise ValueError("state size does not match operator shape")
    return ComplexField.from_complex(forward_states(vec[None], op.mask.weights)[0])


def apply_adjoint(op: ForwardOperator, y: ComplexField) -> np.ndarray:
    """``A^H y`` as a state vector; the segmentation block is zero."""
    if y.shape != op.mask.shape:
        raise ValueError("measurement shape does not match operator")
    return adjoint_kspace(y.to_complex()[None], op.mask.weights)[0]


def support(weights: np.ndarray) -> np.ndarray:
    return np.asarray(weights) > 0


def sample_measurement(
    op: ForwardOperator, theta, noise: NoiseModel, rng_seed=None
) -> ComplexField:
    """Noisy measurement; noise is added only on the mask support."""
    rng = np.random.default_rng(rng_seed)
    clean = apply_forward(op, theta).to_complex()
    on = support(op.mask.weights)
    e = noise.sigma * (
        rng.standard_normal(clean.shape) + 1j * rng.standard_normal(clean.shape)
    )
    return ComplexField.from_complex(clean + np.where(on, e, 0.0))


def log_likelihood(op: ForwardOperator, theta, y: ComplexField, noise: NoiseModel) -> float:
    """Gaussian log-likelihood of ``y`` restricted to the mask support.

    Does not depend on the segmentation block of ``theta``.
    """
    on = support(op.mask.weights)
    yc = y.to_complex()
    if np.any(yc[~on] != 0):
        raise ValueError("measurement is non-zero outside the mask support")
    pred = apply_forward(op, theta).to_complex()
    r = (yc - pred)[on]
    quad = np.sum(r.real**2 + r.imag**2) / (2 * noise.sigma**2)
    # two real components per sampled pixel, each contributing -log(2 pi s^2)/2
    const = -on.sum() * np.log(2 * np.pi * noise.sigma**2)
    return float(const - quad)


def _soft_mask_and_grad(xi: DesignParameter, shape, settings: MaskSettings):
    mask, grad = make_mask(xi, shape, settings, mode="soft", with_grad=True)
    return mask.weights, grad


def grad_design_log_likelihood(
    xi: DesignParameter,
    theta,
    epsilon_draw,
    theta_prime,
    noise: NoiseModel,
    shape,
    settings: MaskSettings = MaskSettings(),
    mode: str = "soft",
) -> np.ndarray:
    """Design gradient of the reparameterised log-likelihood.

    The observation is ``y(xi) = m(xi) * F(x) + sigma * eps`` and the result is
    ``d/dxi log p(y(xi) | x', xi)`` taken through the soft mask ``m``.

    Args:
        xi: design parameter.
        theta: state (``TargetState`` or vector) generating the observation.
        epsilon_draw: standard complex normal draw, shape ``(rows, cols)``.
        theta_prime: state at which the likelihood is evaluated.
        noise: noise model.
        shape: ``(rows, cols)``.
        settings: mask geometry.
        mode: must be ``"soft"``.

    Returns:
        Array of length ``xi.dim``.
    """
    if mode != "soft":
        raise ValueError("design gradients need a soft mask")
    rows, cols = shape
    m, dm = _soft_mask_and_grad(xi, shape, settings)
    a = fft2c(image_block(_theta_vector(theta), rows, cols))
    b = fft2c(image_block(_theta_vector(theta_prime), rows, cols))
    eps = np.asarray(epsilon_draw).reshape(1, rows, cols)
    return pairwise_design_scores(a, b, eps, m, dm, noise.sigma)[0, 0]


def pairwise_design_scores(
    a: np.ndarray,
    b: np.ndarray,
    eps: np.ndarray,
    m: np.ndarray,
    dm: np.ndarray,
    sigma: float,
) -> np.ndarray:
    """``g[i, j] = d/dxi log p(m * a_i + sigma * eps_i | b_j)`` for all pairs.

    ``a`` ``(N, r, c)`` and ``b`` ``(M, r, c)`` are full k-space images,
    ``eps`` ``(N, r, c)`` complex standard normal draws, ``m`` the soft mask
    and ``dm`` ``(d, r, c)`` its design Jacobian. Returns ``(N, M, d)``.

    Uses ``|a - b|^2 = |a|^2 + |b|^2 - 2 Re(conj(a) b)`` so the pairwise
    tensor over pixels is never formed.
    """
    N, M = a.shape[0], b.shape[0]
    d = dm.shape[0]
    K = m.size
    G = dm.reshape(d, K)
    H = m.reshape(1, K) * G
    af, bf, ef = a.reshape(N, K), b.reshape(M, K), eps.reshape(N, K)
    t1 = (np.abs(af) ** 2) @ H.T  # (N, d)
    t2 = (np.abs(bf) ** 2) @ H.T  # (M, d)
    t3 = np.einsum("ik,jk,lk->ijl", af.real, bf.real, H) + np.einsum(
        "ik,jk,lk->ijl", af.imag, bf.imag, H
    )
    t4 = (ef.real * af.real + ef.imag * af.imag) @ G.T  # (N, d)
    t5 = np.einsum("ik,jk,lk->ijl", ef.real, bf.real, G) + np.einsum(
        "ik,jk,lk->ijl", ef.imag, bf.imag, G
    )
    inner = t1[:, None, :] + t2[None, :, :] - 2 * t3 + sigma * (t4[:, None, :] - t5)
    return -inner / sigma**2


def pairwise_log_likelihood(y: np.ndarray, b: np.ndarray, m: np.ndarray, sigma: float):
    """``L[i, j] = log p(y_i | b_j)`` up to a constant, for noise on every pixel.

    ``y`` ``(N, r, c)`` observations, ``b`` ``(M, r, c)`` full k-space images.
    """
    N, M = y.shape[0], b.shape[0]
    yf = y.reshape(N, -1)
    mb = (m.reshape(1, -1) * b.reshape(M, -1))
    cross = yf.real @ mb.real.T + yf.imag @ mb.imag.T
    sq = (
        np.sum(np.abs(yf) ** 2, axis=1)[:, None]
        + np.sum(np.abs(mb) ** 2, axis=1)[None, :]
        - 2 * cross
    )
    return -sq / (2 * sigma**2)


@dataclass(frozen=True)
class KspaceEvidence:
    """Accumulated Gaussian evidence from k-space data, per pixel.

    For records ``y_r = m_r * F x + sigma_r e`` the log-likelihood in ``F x``
    is ``Re<b, Fx> - precision |Fx|^2 / 2`` plus a constant, with
    ``precision = sum m_r^2 / sigma_r^2`` and ``b = sum m_r y_r / sigma_r^2``.
    Several records collapse to one ``(precision, b)`` pair.
    """

    precision: np.ndarray
    info: np.ndarray

    @classmethod
    def empty(cls, rows: int, cols: int) -> "KspaceEvidence":
        return cls(np.zeros((rows, cols)), np.zeros((rows, cols), dtype=complex))

    @classmethod
    def from_measurement(cls, y, weights, sigma: float) -> "KspaceEvidence":
        y = y.to_complex() if isinstance(y, ComplexField) else np.asarray(y)
        w = np.asarray(weights, dtype=float)
        return cls(w**2 / sigma**2, w * y / sigma**2)

    @classmethod
    def from_records(cls, dataset: ExperimentDataset, shape) -> "KspaceEvidence":
        ev = cls.empty(*shape)
        for rec in dataset:
            ev = ev + cls.from_measurement(rec.measurement, rec.mask, rec.noise_sigma)
        return ev

    def __add__(self, other: "KspaceEvidence") -> "KspaceEvidence":
        return KspaceEvidence(self.precision + other.precision, self.info + other.info)

    @property
    def is_empty(self) -> bool:
        return not np.any(self.precision)

    def batch_residual(self, kspace: np.ndarray) -> np.ndarray:
        """``b - precision * F x`` for a batch of k-space images.

        Equal to ``sum_r m_r (y_r - m_r F x) / sigma_r^2``.
        """
        return self.info - self.precision * kspace


def evidence_from_dataset(dataset: Optional[ExperimentDataset], shape) -> KspaceEvidence:
    if dataset is None:
        return KspaceEvidence.empty(*shape)
    return KspaceEvidence.from_records(dataset, shape)


def pooled_evidence(ys: Iterable, weights, sigma: float, nu) -> KspaceEvidence:
    """Evidence of the log-pool ``prod_i p(y_i | x)^nu_i`` with ``sum nu = 1``.

    Each observation uses the same mask, so the pool equals a single
    observation of ``sum_i nu_i y_i``.
    """
    ys = np.asarray(ys)
    nu = np.asarray(nu, dtype=float)
    ybar = np.tensordot(nu, ys, axes=1)
    w = np.asarray(weights, dtype=float)
    return KspaceEvidence(nu.sum() * w**2 / sigma**2, w * ybar / sigma**2)
