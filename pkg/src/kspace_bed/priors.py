"""Analytic Gaussian-mixture priors, phantom generation and prior fitting.

A score model is anything with a ``schedule`` attribute and a
``score(states, t)`` method mapping a batch ``(N, D)`` of diffused states to
``grad log p_t``. Analytic priors also expose Hessian-vector products,
the diagonal of the Hessian in k-space coordinates and exact marginal
sampling; samplers use those when present.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence, Tuple, runtime_checkable

import numpy as np
from scipy.special import logsumexp

from .core import TargetState, ComplexField
from .forward import fft2c, ifft2c
from .schedule import NoiseSchedule


@runtime_checkable
class ScoreModel(Protocol):
    schedule: NoiseSchedule

    def score(self, states: np.ndarray, t: float) -> np.ndarray: ...


def to_kspace_coords(states: np.ndarray, shape) -> np.ndarray:
    """Orthogonal change of basis ``[Re x, Im x, z] -> [Re Fx, Im Fx, z]``."""
    rows, cols = shape
    n = rows * cols
    states = np.atleast_2d(states)
    x = (states[:, :n] + 1j * states[:, n : 2 * n]).reshape(-1, rows, cols)
    k = fft2c(x).reshape(-1, n)
    return np.concatenate([k.real, k.imag, states[:, 2 * n :]], axis=1)


def from_kspace_coords(coords: np.ndarray, shape) -> np.ndarray:
    rows, cols = shape
    n = rows * cols
    coords = np.atleast_2d(coords)
    k = (coords[:, :n] + 1j * coords[:, n : 2 * n]).reshape(-1, rows, cols)
    x = ifft2c(k).reshape(-1, n)
    return np.concatenate([x.real, x.imag, coords[:, 2 * n :]], axis=1)


def _rotated_diag(h: np.ndarray, shape) -> np.ndarray:
    """Diagonal of ``R diag(h) R^T`` for the Fourier rotation ``R`` of the image block.

    ``h`` is ``(N, 2n)`` (real block then imaginary block). The same
    expression holds for the forward and inverse rotation.
    """
    rows, cols = shape
    n = rows * cols
    h_re = h[:, :n].reshape(-1, rows, cols)
    h_im = h[:, n:].reshape(-1, rows, cols)
    mean = 0.5 * (h_re + h_im).mean(axis=(1, 2), keepdims=True)
    delta = np.fft.fft2(0.5 * (h_re - h_im)).real / n
    jr = (2 * np.arange(rows)) % rows
    jc = (2 * np.arange(cols)) % cols
    osc = delta[:, jr][:, :, jc]
    out_re = (mean + osc).reshape(-1, n)
    out_im = (mean - osc).reshape(-1, n)
    return np.concatenate([out_re, out_im], axis=1)


class GaussianMixturePrior:
    """Mixture of diagonal Gaussians, diagonal in image or k-space coordinates.

    With ``domain="kspace"`` the means and variances of the image block are
    given in the coordinates ``[Re Fx, Im Fx]``; the segmentation block always
    stays in image coordinates. ``domain="image"`` also covers plain vectors
    of any length (``shape`` may then be ``None``).
    """

    def __init__(
        self,
        weights,
        means,
        covariances,
        domain: str = "image",
        shape: Optional[Tuple[int, int]] = None,
        schedule: NoiseSchedule = NoiseSchedule(),
    ):
        weights = np.asarray(weights, dtype=float).reshape(-1)
        means = np.atleast_2d(np.asarray(means, dtype=float))
        covs = np.atleast_2d(np.asarray(covariances, dtype=float))
        if means.shape != covs.shape or means.shape[0] != weights.size:
            raise ValueError("weights, means and covariances disagree in size")
        if np.any(weights < 0) or not np.isclose(weights.sum(), 1.0):
            raise ValueError("weights must lie on the simplex")
        if np.any(covs <= 0):
            raise ValueError("covariances must be positive")
        if domain not in ("image", "kspace"):
            raise ValueError(f"unknown domain {domain!r}")
        if domain == "kspace":
            if shape is None or means.shape[1] != 3 * shape[0] * shape[1]:
                raise ValueError("k-space priors need shape with D = 3 * rows * cols")
        self.weights = weights
        self.means = means
        self.covariances = covs
        self.domain = domain
        self.shape = tuple(shape) if shape is not None else None
        self.schedule = schedule

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.size

    # coordinate changes

    def to_coords(self, states):
        states = np.atleast_2d(np.asarray(states, dtype=float))
        if self.domain == "kspace":
            return to_kspace_coords(states, self.shape)
        return states

    def from_coords(self, coords):
        if self.domain == "kspace":
            return from_kspace_coords(coords, self.shape)
        return coords

    # diffused marginal

    def marginal(self, t):
        a = float(self.schedule.alpha_bar(t))
        return np.sqrt(a) * self.means, a * self.covariances + (1.0 - a)

    def _components(self, u, t):
        mu, var = self.marginal(t)
        diff = u[:, None, :] - mu[None]  # (N, C, D)
        logn = -0.5 * np.sum(diff**2 / var + np.log(2 * np.pi * var), axis=2)
        logw = np.log(np.where(self.weights > 0, self.weights, 1e-300))
        joint = logn + logw
        lp = logsumexp(joint, axis=1)
        resp = np.exp(joint - lp[:, None])
        comp_scores = -diff / var
        return lp, resp, comp_scores, var

    def log_prob(self, states, t: float = 0.0) -> np.ndarray:
        lp, _, _, _ = self._components(self.to_coords(states), t)
        return lp

    def score(self, states, t: float) -> np.ndarray:
        return gm_score(self, states, t)

    def _coord_score(self, u, t):
        _, resp, cs, _ = self._components(u, t)
        return np.einsum("nc,ncd->nd", resp, cs)

    def hvp(self, states, t: float, v) -> np.ndarray:
        """Hessian of ``log p_t`` at ``states`` applied to ``v`` (both ``(N, D)``)."""
        u = self.to_coords(states)
        w = self.to_coords(v)
        _, resp, cs, var = self._components(u, t)
        s = np.einsum("nc,ncd->nd", resp, cs)
        proj = np.einsum("ncd,nd->nc", cs, w)
        hv = (
            np.einsum("nc,ncd->nd", resp, -w[:, None, :] / var[None])
            + np.einsum("nc,nc,ncd->nd", resp, proj, cs)
            - s * np.sum(s * w, axis=1, keepdims=True)
        )
        return self.from_coords(hv)

    def _coord_hessian_diag(self, u, t):
        _, resp, cs, var = self._components(u, t)
        s = np.einsum("nc,ncd->nd", resp, cs)
        base = np.einsum("nc,cd->nd", resp, -1.0 / var)
        return base, resp, cs, s

    def hessian_diag(self, states, t: float) -> np.ndarray:
        """Diagonal of the Hessian of ``log p_t`` in state (image) coordinates."""
        u = self.to_coords(states)
        base, resp, cs, s = self._coord_hessian_diag(u, t)
        if self.domain == "image":
            return base + np.einsum("nc,ncd->nd", resp, cs**2) - s**2
        n2 = 2 * self.shape[0] * self.shape[1]
        out = np.empty_like(base)
        out[:, :n2] = _rotated_diag(base[:, :n2], self.shape)
        out[:, n2:] = base[:, n2:]
        cs_img = np.stack([self.from_coords(cs[:, c]) for c in range(cs.shape[1])], axis=1)
        s_img = self.from_coords(s)
        return out + np.einsum("nc,ncd->nd", resp, cs_img**2) - s_img**2

    def kspace_hessian_diag(self, states, t: float) -> np.ndarray:
        """Diagonal of the Hessian restricted to the image block, in k-space coordinates.

        Returns ``(N, 2n)``; exact for k-space priors, exact for image priors
        without the rank-one mixture terms' off-diagonal coupling.
        """
        if self.shape is None:
            raise ValueError("prior has no image shape")
        n2 = 2 * self.shape[0] * self.shape[1]
        u = self.to_coords(states)
        base, resp, cs, s = self._coord_hessian_diag(u, t)
        if self.domain == "kspace":
            full = base + np.einsum("nc,ncd->nd", resp, cs**2) - s**2
            return full[:, :n2]
        rot = _rotated_diag(base[:, :n2], self.shape)
        ks = to_kspace_coords(s, self.shape)[:, :n2]
        kcs = np.stack(
            [to_kspace_coords(cs[:, c], self.shape)[:, :n2] for c in range(cs.shape[1])],
            axis=1,
        )
        return rot + np.einsum("nc,ncd->nd", resp, kcs**2) - ks**2

    def sample(self, n: int, rng: np.random.Generator, t: float = 0.0) -> np.ndarray:
        """Exact draws from ``p_t`` (``t = 0`` gives the prior itself)."""
        if t == 0.0:
            mu, var = self.means, self.covariances
        else:
            mu, var = self.marginal(t)
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        u = mu[comp] + np.sqrt(var[comp]) * rng.standard_normal((n, self.dim))
        return self.from_coords(u)

    def sample_marginal(self, n: int, t: float, rng: np.random.Generator) -> np.ndarray:
        return self.sample(n, rng, t)

    # Gaussian summaries used by oracles

    def moment_matched(self):
        """Mean and diagonal variance (in prior coordinates) of the mixture."""
        mean = self.weights @ self.means
        second = self.weights @ (self.covariances + self.means**2)
        return mean, second - mean**2

    def kspace_variance(self) -> np.ndarray:
        """Per-component k-space variance ``(rows, cols, 2)`` of the image block.

        Uses the moment-matched Gaussian, which is exact when the image-block
        marginal is a single Gaussian.
        """
        if self.domain != "kspace":
            raise ValueError("kspace_variance needs a k-space prior")
        rows, cols = self.shape
        n = rows * cols
        _, var = self.moment_matched()
        return np.stack([var[:n].reshape(rows, cols), var[n : 2 * n].reshape(rows, cols)], -1)

    @property
    def image_block_is_gaussian(self) -> bool:
        if self.shape is None:
            return self.n_components == 1
        n2 = 2 * self.shape[0] * self.shape[1]
        return bool(
            np.allclose(self.means[:, :n2], self.means[:1, :n2])
            and np.allclose(self.covariances[:, :n2], self.covariances[:1, :n2])
        )

    # serialization

    def to_dict(self) -> dict:
        return {
            "kind": "gaussian_mixture",
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
            "domain": self.domain,
            "shape": list(self.shape) if self.shape else None,
            "schedule": [
                self.schedule.beta_min,
                self.schedule.beta_max,
                self.schedule.t0,
                self.schedule.tf,
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianMixturePrior":
        return cls(
            d["weights"],
            d["means"],
            d["covariances"],
            domain=d["domain"],
            shape=tuple(d["shape"]) if d["shape"] else None,
            schedule=NoiseSchedule(*d["schedule"]),
        )


def gm_score(prior: GaussianMixturePrior, theta_t, t: float, schedule=None) -> np.ndarray:
    """Exact score of the diffused mixture ``sum_c w_c N(sqrt(a) mu_c, a S_c + (1 - a) I)``."""
    if schedule is not None and schedule != prior.schedule:
        prior = GaussianMixturePrior(
            prior.weights, prior.means, prior.covariances, prior.domain, prior.shape, schedule
        )
    theta_t = np.asarray(theta_t, dtype=float)
    single = theta_t.ndim == 1
    u = prior.to_coords(theta_t)
    s = prior.from_coords(prior._coord_score(u, t))
    return s[0] if single else s


def isotropic_kspace_prior(
    shape,
    image_variance,
    mean=None,
    seg_mean: float = 0.0,
    seg_variance: float = 1.0,
    schedule: NoiseSchedule = NoiseSchedule(),
) -> GaussianMixturePrior:
    """Single Gaussian with a per-frequency variance map.

    ``image_variance`` is a ``(rows, cols)`` array (or scalar) giving the
    variance of each real component of ``F x``.
    """
    rows, cols = shape
    n = rows * cols
    var = np.broadcast_to(np.asarray(image_variance, dtype=float), (rows, cols)).reshape(-1)
    if mean is None:
        mu = np.zeros(3 * n)
        mu[2 * n :] = seg_mean
    else:
        mu = np.asarray(mean, dtype=float).reshape(3 * n)
    cov = np.concatenate([var, var, np.full(n, seg_variance)])
    return GaussianMixturePrior([1.0], mu[None], cov[None], "kspace", shape, schedule)


def power_law_spectrum(shape, amplitude=1.0, scale=(4.0, 4.0), power=1.5, floor=1e-4):
    """Anisotropic spectrum ``A / (1 + (ky/sy)^2 + (kx/sx)^2)^p + floor``."""
    from .masks import kspace_grid

    ky, kx = kspace_grid(*shape)
    return amplitude / (1 + (ky / scale[0]) ** 2 + (kx / scale[1]) ** 2) ** power + floor


def fit_gaussian_mixture(
    states: np.ndarray,
    n_components: int = 1,
    domain: str = "kspace",
    shape=None,
    labels=None,
    var_floor: float = 1e-4,
    tie_complex: bool = True,
    iters: int = 50,
    rng: Optional[np.random.Generator] = None,
    schedule: NoiseSchedule = NoiseSchedule(),
) -> GaussianMixturePrior:
    """Fit a diagonal mixture by EM (or directly from ``labels`` when given).

    ``tie_complex`` averages the real and imaginary variances of each
    k-space coefficient so the image block is circular.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if states.shape[0] == 0:
        raise ValueError("need at least one sample")
    probe = GaussianMixturePrior(
        [1.0], states[:1], np.ones_like(states[:1]), domain, shape, schedule
    )
    u = probe.to_coords(states)
    N, D = u.shape
    if labels is not None:
        labels = np.asarray(labels)
        ids = np.unique(labels)
        resp = (labels[:, None] == ids[None]).astype(float)
    else:
        rng = rng or np.random.default_rng(0)
        C = n_components
        centers = u[rng.choice(N, size=C, replace=False)]
        d2 = ((u[:, None] - centers[None]) ** 2).sum(-1)
        resp = np.eye(C)[np.argmin(d2, axis=1)]
    for it in range(1 if labels is not None else iters):
        nk = resp.sum(0) + 1e-12
        w = nk / nk.sum()
        mu = (resp.T @ u) / nk[:, None]
        var = (resp.T @ u**2) / nk[:, None] - mu**2
        var = _tidy_var(var, var_floor, tie_complex, domain, shape)
        if labels is not None:
            break
        gm = GaussianMixturePrior(w, mu, var, "image", None, schedule)
        _, resp, _, _ = gm._components(u, 0.0)
    return GaussianMixturePrior(w, mu, var, domain, shape, schedule)


def _tidy_var(var, floor, tie, domain, shape):
    var = np.maximum(var, floor)
    if tie and domain == "kspace":
        n = shape[0] * shape[1]
        avg = 0.5 * (var[:, :n] + var[:, n : 2 * n])
        var = var.copy()
        var[:, :n] = avg
        var[:, n : 2 * n] = avg
    return var


# phantoms


@dataclass(frozen=True)
class Ellipse:
    """Ellipse in normalized coordinates: centre and semi-axes in [-1, 1] units."""

    center: Tuple[float, float]
    axes: Tuple[float, float]
    angle: float
    intensity: float


@dataclass(frozen=True)
class Anomaly:
    """Disk in pixel coordinates ``(row, col)``."""

    center: Tuple[float, float]
    radius: float
    intensity: float = 0.3


@dataclass(frozen=True)
class PhantomSpec:
    rows: int
    cols: int
    ellipses: Tuple[Ellipse, ...] = ()
    anomalies: Tuple[Anomaly, ...] = ()
    texture: float = 0.0

    def __post_init__(self):
        for a in self.anomalies:
            r, c = a.center
            if not (0 <= r < self.rows and 0 <= c < self.cols):
                raise ValueError(f"anomaly centre {a.center} outside the image")


# (intensity, semi-axis x, semi-axis y, centre x, centre y, angle in degrees)
SHEPP_LOGAN = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
)


def shepp_logan_ellipses() -> Tuple[Ellipse, ...]:
    return tuple(Ellipse((cy, cx), (ay, ax), ang, I) for I, ax, ay, cx, cy, ang in SHEPP_LOGAN)


def _rasterize_ellipse(e: Ellipse, rows, cols):
    y = (np.arange(rows) + 0.5) / rows * 2 - 1
    x = (np.arange(cols) + 0.5) / cols * 2 - 1
    Y, X = np.meshgrid(y, x, indexing="ij")
    th = np.deg2rad(e.angle)
    dy, dx = Y - e.center[0], X - e.center[1]
    u = dx * np.cos(th) + dy * np.sin(th)
    v = -dx * np.sin(th) + dy * np.cos(th)
    return (u / e.axes[1]) ** 2 + (v / e.axes[0]) ** 2 <= 1.0


def _rasterize_disk(a: Anomaly, rows, cols):
    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    return (r - a.center[0]) ** 2 + (c - a.center[1]) ** 2 <= a.radius**2


def generate_phantom(spec: PhantomSpec, rng_seed=None) -> TargetState:
    """Piecewise-constant ellipse image plus anomaly disks; ``z`` marks the disks.

    ``spec.texture`` adds smooth random intensity variation inside the
    support of the ellipses (drawn from ``rng_seed``).
    """
    rows, cols = spec.rows, spec.cols
    img = np.zeros((rows, cols))
    support = np.zeros((rows, cols), dtype=bool)
    for e in spec.ellipses:
        inside = _rasterize_ellipse(e, rows, cols)
        img[inside] += e.intensity
        support |= inside
    z = np.zeros((rows, cols))
    for a in spec.anomalies:
        disk = _rasterize_disk(a, rows, cols)
        img[disk & ~(z > 0)] += a.intensity
        z[disk] = 1.0
    if spec.texture > 0:
        rng = np.random.default_rng(rng_seed)
        noise = rng.standard_normal((rows, cols))
        k = np.fft.fft2(noise) * np.exp(
            -0.5 * ((np.fft.fftfreq(rows)[:, None] * 8) ** 2 + (np.fft.fftfreq(cols)[None] * 8) ** 2)
        )
        smooth = np.fft.ifft2(k).real
        smooth /= np.abs(smooth).max() + 1e-12
        img = img + spec.texture * smooth * support
    return TargetState(ComplexField.from_complex(img.astype(complex)), z)


def random_phantom_spec(
    rows: int,
    cols: int,
    rng: np.random.Generator,
    n_anomalies: int = 1,
    anomaly_sites: Optional[Sequence[Tuple[float, float]]] = None,
    jitter: float = 0.05,
    anomaly_radius: Tuple[float, float] = (1.5, 3.0),
    texture: float = 0.0,
):
    """Perturbed Shepp-Logan head with anomalies; returns ``(spec, site_label)``.

    When ``anomaly_sites`` is given (fractions of the image size) each phantom
    carries one anomaly at a randomly chosen site and ``site_label`` is its
    index; otherwise anomalies are placed uniformly inside the head and the
    label is ``-1``.
    """
    ellipses = []
    for e in shepp_logan_ellipses():
        ellipses.append(
            Ellipse(
                (e.center[0] + jitter * rng.uniform(-1, 1), e.center[1] + jitter * rng.uniform(-1, 1)),
                (e.axes[0] * (1 + jitter * rng.uniform(-1, 1)), e.axes[1] * (1 + jitter * rng.uniform(-1, 1))),
                e.angle + 20 * jitter * rng.uniform(-1, 1),
                e.intensity,
            )
        )
    anomalies = []
    label = -1
    if anomaly_sites:
        label = int(rng.integers(len(anomaly_sites)))
        fy, fx = anomaly_sites[label]
        anomalies.append(
            Anomaly((fy * rows, fx * cols), rng.uniform(*anomaly_radius), 0.3)
        )
    else:
        for _ in range(n_anomalies):
            rr = rng.uniform(0.3, 0.7) * rows
            cc = rng.uniform(0.3, 0.7) * cols
            anomalies.append(Anomaly((rr, cc), rng.uniform(*anomaly_radius), 0.3))
    return PhantomSpec(rows, cols, tuple(ellipses), tuple(anomalies), texture), label
