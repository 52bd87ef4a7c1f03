"""Shared data model: complex fields, joint targets and measurement records.

Complex quantities are stored as stacked real arrays (real block, then
imaginary block) in row-major order. A joint target ``theta = (x, z)`` is the
vector ``[Re x, Im x, z]`` of length ``3 * rows * cols``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np


@dataclass(frozen=True)
class ComplexField:
    """A ``rows x cols`` complex image held as separate real/imag arrays."""

    rows: int
    cols: int
    real: np.ndarray
    imag: np.ndarray

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("rows and cols must be positive")
        n = self.rows * self.cols
        real = np.asarray(self.real, dtype=float).reshape(-1)
        imag = np.asarray(self.imag, dtype=float).reshape(-1)
        if real.size != n or imag.size != n:
            raise ValueError(
                f"expected {n} real and imag entries, got {real.size} and {imag.size}"
            )
        real.flags.writeable = False
        imag.flags.writeable = False
        object.__setattr__(self, "real", real)
        object.__setattr__(self, "imag", imag)

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.rows, self.cols)

    @classmethod
    def from_complex(cls, array) -> "ComplexField":
        array = np.asarray(array)
        if array.ndim != 2:
            raise ValueError("expected a 2D array")
        return cls(array.shape[0], array.shape[1], array.real, np.imag(array))

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "ComplexField":
        return cls(rows, cols, np.zeros(rows * cols), np.zeros(rows * cols))

    def to_complex(self) -> np.ndarray:
        return (self.real + 1j * self.imag).reshape(self.rows, self.cols)

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.real, self.imag).reshape(self.rows, self.cols)

    def __eq__(self, other):
        if not isinstance(other, ComplexField):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.real, other.real)
            and np.array_equal(self.imag, other.imag)
        )

    __hash__ = None


def vectorize(f: ComplexField) -> np.ndarray:
    """Flatten ``f`` row-major into ``[real..., imag...]`` (length ``2 * rows * cols``)."""
    return np.concatenate([f.real, f.imag])


def matricize(vec, rows: int, cols: int) -> ComplexField:
    """Inverse of :func:`vectorize`."""
    vec = np.asarray(vec, dtype=float).reshape(-1)
    n = rows * cols
    if vec.size != 2 * n:
        raise ValueError(f"expected vector of length {2 * n}, got {vec.size}")
    return ComplexField(rows, cols, vec[:n], vec[n:])


# Stacked real/imag arithmetic. Arrays have a leading axis of length 2.


def stack(z: np.ndarray) -> np.ndarray:
    return np.stack([np.real(z), np.imag(z)])


def unstack(s: np.ndarray) -> np.ndarray:
    return s[0] + 1j * s[1]


def stacked_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.stack([a[0] * b[0] - a[1] * b[1], a[0] * b[1] + a[1] * b[0]])


def stacked_conj(a: np.ndarray) -> np.ndarray:
    return np.stack([a[0], -a[1]])


def stacked_abs2(a: np.ndarray) -> np.ndarray:
    return a[0] ** 2 + a[1] ** 2


@dataclass(frozen=True)
class TargetState:
    """Joint unknown: complex image ``x`` and segmentation relaxation ``z`` in [0, 1]."""

    image: ComplexField
    segmentation: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.segmentation, dtype=float)
        if z.shape != self.image.shape:
            raise ValueError(
                f"segmentation shape {z.shape} does not match image shape {self.image.shape}"
            )
        if np.any(z < 0) or np.any(z > 1):
            raise ValueError("segmentation values must lie in [0, 1]")
        z = z.copy()
        z.flags.writeable = False
        object.__setattr__(self, "segmentation", z)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.image.shape

    def to_vector(self) -> np.ndarray:
        return np.concatenate([vectorize(self.image), self.segmentation.reshape(-1)])

    @classmethod
    def from_vector(cls, vec, rows: int, cols: int, clip: bool = False) -> "TargetState":
        vec = np.asarray(vec, dtype=float).reshape(-1)
        n = rows * cols
        if vec.size != 3 * n:
            raise ValueError(f"expected state vector of length {3 * n}, got {vec.size}")
        z = vec[2 * n :].reshape(rows, cols)
        if clip:
            z = np.clip(z, 0.0, 1.0)
        return cls(matricize(vec[: 2 * n], rows, cols), z)

    def __eq__(self, other):
        if not isinstance(other, TargetState):
            return NotImplemented
        return self.image == other.image and np.array_equal(
            self.segmentation, other.segmentation
        )

    __hash__ = None


def concat_target(x: ComplexField, z) -> TargetState:
    return TargetState(x, np.asarray(z, dtype=float))


def split_target(theta: TargetState) -> Tuple[ComplexField, np.ndarray]:
    return theta.image, theta.segmentation


def state_size(rows: int, cols: int) -> int:
    return 3 * rows * cols


def image_block(states: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Complex images ``(N, rows, cols)`` from a batch of state vectors ``(N, 3n)``."""
    n = rows * cols
    states = np.atleast_2d(states)
    return (states[:, :n] + 1j * states[:, n : 2 * n]).reshape(-1, rows, cols)


def segmentation_block(states: np.ndarray, rows: int, cols: int) -> np.ndarray:
    n = rows * cols
    states = np.atleast_2d(states)
    return states[:, 2 * n :].reshape(-1, rows, cols)


def states_from_image(images: np.ndarray, segmentations=None) -> np.ndarray:
    """Inverse of :func:`image_block`; segmentation block defaults to zeros."""
    images = np.asarray(images)
    if images.ndim == 2:
        images = images[None]
    b = images.shape[0]
    flat = images.reshape(b, -1)
    if segmentations is None:
        seg = np.zeros_like(flat, dtype=float)
    else:
        seg = np.asarray(segmentations, dtype=float).reshape(b, -1)
    return np.concatenate([flat.real, flat.imag, seg], axis=1)


@dataclass(frozen=True)
class MeasurementRecord:
    """One acquired experiment: design, k-space data and noise level.

    ``mask`` is the hard sampling mask used for the acquisition; entries of
    the measurement outside it must be exactly zero.
    """

    design: "object"
    measurement: ComplexField
    noise_sigma: float
    mask: np.ndarray

    def __post_init__(self):
        if not self.noise_sigma > 0:
            raise ValueError("noise_sigma must be positive")
        mask = np.asarray(self.mask, dtype=float)
        if mask.shape != self.measurement.shape:
            raise ValueError("mask and measurement shapes differ")
        off = mask == 0
        y = self.measurement.to_complex()
        if np.any(y[off] != 0):
            raise ValueError("measurement has non-zero entries outside the mask support")
        object.__setattr__(self, "mask", mask)


@dataclass
class ExperimentDataset:
    """Ordered sequence of measurement records ``D_k``."""

    records: list = field(default_factory=list)

    @property
    def step(self) -> int:
        return len(self.records)

    def append(self, record: MeasurementRecord) -> "ExperimentDataset":
        return ExperimentDataset(self.records + [record])

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)
