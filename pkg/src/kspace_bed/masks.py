"""Soft and hard k-space sampling masks for Cartesian, radial and spiral designs.

Masks live on the unshifted FFT grid (DC at index ``[0, 0]``); each pixel is
placed at its signed integer frequency ``(ky, kx)``. A soft mask gives every
pixel the weight ``sigmoid((width - dist) / temperature)`` with respect to each
line (or spiral) and combines lines by the complement-product union
``1 - prod(1 - w_l)``. Hard masks use the indicator ``dist <= width``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit

PATTERNS = ("cartesian", "radial", "spiral")
MODES = ("soft", "hard")


@dataclass(frozen=True)
class DesignParameter:
    """Continuous design vector for one experiment.

    For ``radial`` and ``cartesian`` there is one value per line (an angle or a
    row frequency). For ``spiral`` there are three values ``(a, b, phi0)`` per
    spiral and ``lines_per_experiment`` counts spirals.
    """

    pattern: str
    values: np.ndarray
    lines_per_experiment: int

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown pattern {self.pattern!r}")
        values = np.array(self.values, dtype=float).reshape(-1)
        if self.lines_per_experiment < 1:
            raise ValueError("lines_per_experiment must be positive")
        per = 3 if self.pattern == "spiral" else 1
        if values.size != per * self.lines_per_experiment:
            raise ValueError(
                f"{self.pattern} design with {self.lines_per_experiment} lines needs "
                f"{per * self.lines_per_experiment} values, got {values.size}"
            )
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.values.size

    def with_values(self, values) -> "DesignParameter":
        return DesignParameter(self.pattern, values, self.lines_per_experiment)


@dataclass(frozen=True)
class MaskField:
    rows: int
    cols: int
    weights: np.ndarray
    mode: str = "soft"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mask mode {self.mode!r}")
        w = np.asarray(self.weights, dtype=float).reshape(self.rows, self.cols)
        if np.any(w < 0) or np.any(w > 1):
            raise ValueError("mask weights must lie in [0, 1]")
        if self.mode == "hard" and not np.all((w == 0) | (w == 1)):
            raise ValueError("hard mask weights must be 0 or 1")
        w = w.copy()
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.rows, self.cols)


@dataclass(frozen=True)
class MaskSettings:
    """Geometry shared by all masks of a run.

    ``line_radius`` limits radial lines to a segment of that half-length
    (in pixels) centred on DC; ``None`` means lines cross the whole grid.
    """

    width: float = 0.5
    temperature: float = 0.5
    line_radius: Optional[float] = None
    spiral_turns: float = 8.0
    axis: int = 0

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError("width must be positive")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.line_radius is not None and not self.line_radius > 0:
            raise ValueError("line_radius must be positive")


def kspace_grid(rows: int, cols: int) -> Tuple[np.ndarray, np.ndarray]:
    """Signed frequencies ``(ky, kx)`` of each pixel, shape ``(rows, cols)``."""
    ky = np.fft.fftfreq(rows) * rows
    kx = np.fft.fftfreq(cols) * cols
    return np.meshgrid(ky, kx, indexing="ij")


def _check(width, temperature):
    if not width > 0:
        raise ValueError("width must be positive")
    if not temperature > 0:
        raise ValueError("temperature must be positive")


def _union(per_line: np.ndarray, dper_line: Optional[np.ndarray]):
    """Complement-product union of per-line weights ``(L, r, c)``.

    Returns the union and, when ``dper_line`` is given, the derivative of the
    union with respect to each line's own weight times ``dper_line``.
    """
    comp = 1.0 - per_line
    union = 1.0 - np.prod(comp, axis=0)
    if dper_line is None:
        return union, None
    L = comp.shape[0]
    # exclusive products avoid dividing by (1 - w_l) when w_l -> 1
    ones = np.ones_like(comp[:1])
    prefix = np.cumprod(np.concatenate([ones, comp[:-1]]), axis=0)
    suffix = np.cumprod(np.concatenate([ones, comp[::-1][:-1]]), axis=0)[::-1]
    others = prefix * suffix
    assert others.shape[0] == L
    return union, others * dper_line


def _finish(dist, ddist, width, temperature, mode, rows, cols, with_grad):
    if mode == "hard":
        per_line = (dist <= width).astype(float)
        union, _ = _union(per_line, None)
        mask = MaskField(rows, cols, union, "hard")
        if with_grad:
            raise ValueError("hard masks are not differentiable")
        return mask
    if mode != "soft":
        raise ValueError(f"unknown mask mode {mode!r}")
    s = expit((width - dist) / temperature)
    ds = None
    if with_grad:
        ds = -s * (1.0 - s) * ddist / temperature
    union, grad = _union(s, ds)
    mask = MaskField(rows, cols, np.clip(union, 0.0, 1.0), "soft")
    if with_grad:
        return mask, grad
    return mask


def radial_mask(
    xi: DesignParameter,
    rows: int,
    cols: int,
    width: float = 0.5,
    temperature: float = 0.5,
    mode: str = "soft",
    line_radius: Optional[float] = None,
    with_grad: bool = False,
):
    """Mask of lines through the k-space centre at angles ``xi.values`` (mod pi).

    With ``with_grad`` returns ``(mask, grad)`` where ``grad[l]`` is the
    derivative of every pixel weight with respect to angle ``l``.
    """
    if xi.pattern != "radial":
        raise ValueError("radial_mask needs a radial design")
    _check(width, temperature)
    ky, kx = kspace_grid(rows, cols)
    phi = xi.values[:, None, None]
    c, s = np.cos(phi), np.sin(phi)
    perp = kx * s - ky * c
    along = kx * c + ky * s
    dist = np.abs(perp)
    ddist = np.sign(perp) * along
    if line_radius is not None:
        beyond = np.abs(along) > line_radius
        over = np.abs(along) - line_radius
        seg = np.hypot(perp, over)
        safe = np.where(seg > 0, seg, 1.0)
        dseg = perp * line_radius * np.sign(along) / safe
        dist = np.where(beyond, seg, dist)
        ddist = np.where(beyond, dseg, ddist)
    return _finish(dist, ddist, width, temperature, mode, rows, cols, with_grad)


def cartesian_mask(
    xi: DesignParameter,
    rows: int,
    cols: int,
    width: float = 0.5,
    temperature: float = 0.5,
    mode: str = "soft",
    axis: int = 0,
    with_grad: bool = False,
):
    """Full phase-encode lines at continuous signed frequencies ``xi.values``.

    ``axis=0`` places lines at row frequencies (horizontal lines), ``axis=1``
    at column frequencies.
    """
    if xi.pattern != "cartesian":
        raise ValueError("cartesian_mask needs a cartesian design")
    _check(width, temperature)
    ky, kx = kspace_grid(rows, cols)
    coord = ky if axis == 0 else kx
    offset = coord[None] - xi.values[:, None, None]
    dist = np.abs(offset)
    ddist = -np.sign(offset)
    return _finish(dist, ddist, width, temperature, mode, rows, cols, with_grad)


def spiral_samples(a, b, phi0, turns, n):
    s = np.linspace(0.0, turns, n)
    r = a + b * s
    ang = 2 * np.pi * s + phi0
    return s, r, ang


def spiral_mask(
    xi: DesignParameter,
    rows: int,
    cols: int,
    width: float = 0.5,
    temperature: float = 0.5,
    mode: str = "soft",
    turns: float = 8.0,
    with_grad: bool = False,
):
    """Archimedean spirals ``k(s) = (a + b s)(cos(2 pi s + phi0), sin(2 pi s + phi0))``.

    Each design triple ``(a, b, phi0)`` gives one spiral traced for
    ``s in [0, turns]``. The curve is sampled at sub-pixel arc-length spacing
    (the sample count is fixed by the grid, not by the design) and the distance
    of a pixel to the curve is its distance to the nearest sample.
    """
    if xi.pattern != "spiral":
        raise ValueError("spiral_mask needs a spiral design")
    _check(width, temperature)
    params = xi.values.reshape(-1, 3)
    if np.any(params[:, 1] < 0):
        raise ValueError("spiral radial growth b must be non-negative")
    ky, kx = kspace_grid(rows, cols)
    pts = np.stack([kx.ravel(), ky.ravel()], axis=1)
    r_edge = 0.5 * np.hypot(rows, cols)
    n = int(np.ceil(max(turns, 1.0) * 2 * np.pi * r_edge / 0.25)) + 1
    L = params.shape[0]
    dist = np.empty((L, rows, cols))
    ddist = np.empty((3 * L, rows, cols)) if with_grad else None
    for l, (a, b, phi0) in enumerate(params):
        s, r, ang = spiral_samples(a, b, phi0, turns, n)
        curve = np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)
        d, idx = cKDTree(curve).query(pts)
        dist[l] = d.reshape(rows, cols)
        if with_grad:
            q = curve[idx] - pts
            safe = np.where(d > 0, d, 1.0)
            cos_a, sin_a = np.cos(ang[idx]), np.sin(ang[idx])
            dk_da = np.stack([cos_a, sin_a], axis=1)
            dk_db = s[idx, None] * dk_da
            dk_dphi = r[idx, None] * np.stack([-sin_a, cos_a], axis=1)
            for j, dk in enumerate((dk_da, dk_db, dk_dphi)):
                g = np.where(d > 0, np.sum(q * dk, axis=1) / safe, 0.0)
                ddist[3 * l + j] = g.reshape(rows, cols)
    if not with_grad:
        return _finish(dist, None, width, temperature, mode, rows, cols, False)
    # each spiral contributes three gradient rows sharing the same union factor
    s_w = expit((width - dist) / temperature)
    union, others = _union(s_w, np.ones_like(s_w))
    ds_w = -s_w * (1.0 - s_w) / temperature
    grad = np.repeat(others * ds_w, 3, axis=0) * ddist
    return MaskField(rows, cols, np.clip(union, 0.0, 1.0), "soft"), grad


def make_mask(
    xi: DesignParameter,
    shape: Sequence[int],
    settings: MaskSettings = MaskSettings(),
    mode: str = "soft",
    with_grad: bool = False,
):
    """Dispatch on ``xi.pattern`` using the geometry in ``settings``."""
    rows, cols = shape
    common = dict(
        width=settings.width,
        temperature=settings.temperature,
        mode=mode,
        with_grad=with_grad,
    )
    if xi.pattern == "radial":
        return radial_mask(xi, rows, cols, line_radius=settings.line_radius, **common)
    if xi.pattern == "cartesian":
        return cartesian_mask(xi, rows, cols, axis=settings.axis, **common)
    return spiral_mask(xi, rows, cols, turns=settings.spiral_turns, **common)


def accumulate_masks(masks: Sequence[MaskField]) -> MaskField:
    """Pointwise union ``1 - prod(1 - w_i)``; hard only if every input is hard."""
    masks = list(masks)
    if not masks:
        raise ValueError("need at least one mask")
    shape = masks[0].shape
    if any(m.shape != shape for m in masks):
        raise ValueError("mask shapes differ")
    comp = np.ones(shape)
    for m in masks:
        comp = comp * (1.0 - m.weights)
    mode = "hard" if all(m.mode == "hard" for m in masks) else "soft"
    union = 1.0 - comp
    if mode == "hard":
        union = np.round(union)
    return MaskField(shape[0], shape[1], np.clip(union, 0.0, 1.0), mode)


def sampled_fraction(mask: MaskField) -> float:
    """Fraction of k-space acquired: share of ones (hard) or mean weight (soft)."""
    return float(np.mean(mask.weights))


def empty_mask(rows: int, cols: int) -> MaskField:
    return MaskField(rows, cols, np.zeros((rows, cols)), "hard")


def wrap_design(xi: DesignParameter) -> DesignParameter:
    """Reduce radial angles to ``[0, pi)``; clip spiral growth at zero."""
    v = np.array(xi.values)
    if xi.pattern == "radial":
        v = np.mod(v, np.pi)
    elif xi.pattern == "spiral":
        v = v.reshape(-1, 3)
        v[:, 1] = np.maximum(v[:, 1], 0.0)
        v = v.ravel()
    return xi.with_values(v)


def random_design(
    pattern: str, lines: int, shape: Sequence[int], rng: np.random.Generator
) -> DesignParameter:
    """Random initial design: uniform angles in ``[0, pi)`` for radial lines."""
    rows, cols = shape
    if pattern == "radial":
        values = rng.uniform(0.0, np.pi, size=lines)
    elif pattern == "cartesian":
        values = rng.uniform(-rows / 2, rows / 2, size=lines)
    elif pattern == "spiral":
        r_edge = 0.5 * min(rows, cols)
        values = np.column_stack(
            [
                rng.uniform(0.0, 1.0, size=lines),
                rng.uniform(0.5, 0.25 * r_edge, size=lines),
                rng.uniform(0.0, 2 * np.pi, size=lines),
            ]
        ).ravel()
    else:
        raise ValueError(f"unknown pattern {pattern!r}")
    return DesignParameter(pattern, values, lines)
