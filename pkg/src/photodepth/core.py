"""Shared types: images, disparity/depth conversion, parameter blocks, seeded streams."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

D_MIN = 0.1
D_MAX = 100.0

PARAM_TAGS = ("disparity", "pose", "intrinsics")


class PhotodepthError(Exception):
    """Base class for package errors."""


class InputError(PhotodepthError, ValueError):
    """Rejected input (shape, range or finiteness)."""


class NumericalError(PhotodepthError, ArithmeticError):
    """Numerical failure (NaN loss, singular system, degenerate batch)."""

    def __init__(self, message: str, snapshot: dict | None = None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class DegenerateBatchError(NumericalError):
    """Every pixel was removed by validity or automasking."""


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def as_image(data, name: str = "image") -> np.ndarray:
    """Validate and return an ``(H, W, C)`` float64 image with values in [0, 1]."""
    img = np.asarray(data, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise InputError(f"{name}: expected HxWx1 or HxWx3, got shape {img.shape}")
    if img.shape[0] < 2 or img.shape[1] < 2:
        raise InputError(f"{name}: needs H >= 2 and W >= 2, got {img.shape[:2]}")
    if not np.all(np.isfinite(img)):
        raise InputError(f"{name}: non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise InputError(f"{name}: values outside [0, 1]")
    return img


def _depth_coeffs(d_min: float, d_max: float) -> tuple[float, float]:
    if not (0.0 < d_min < d_max):
        raise InputError(f"need 0 < d_min < d_max, got {d_min}, {d_max}")
    inv_max = 1.0 / d_max
    return inv_max, 1.0 / d_min - inv_max


def disp_to_depth(disp, d_min: float = D_MIN, d_max: float = D_MAX) -> np.ndarray:
    """Map sigmoid disparity in (0, 1) to depth in (d_min, d_max).

    depth = 1 / (1/d_max + (1/d_min - 1/d_max) * disp)
    """
    disp = np.asarray(disp, dtype=np.float64)
    if not np.all(np.isfinite(disp)):
        raise InputError("disparity contains non-finite values")
    a, b = _depth_coeffs(d_min, d_max)
    return 1.0 / (a + b * disp)


def depth_to_disp(depth, d_min: float = D_MIN, d_max: float = D_MAX) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    a, b = _depth_coeffs(d_min, d_max)
    if not np.all(np.isfinite(depth)) or np.any(depth <= d_min) or np.any(depth >= d_max):
        raise InputError(f"depth outside the open range ({d_min}, {d_max})")
    return (1.0 / depth - a) / b


@dataclass
class DisparityField:
    """Per-pixel disparity stored as unconstrained logits."""

    raw: np.ndarray

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64)
        if self.raw.ndim != 2:
            raise InputError(f"disparity logits must be 2-D, got {self.raw.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.raw.shape

    @property
    def disparity(self) -> np.ndarray:
        return sigmoid(self.raw)

    def depth(self, d_min: float = D_MIN, d_max: float = D_MAX) -> np.ndarray:
        return disp_to_depth(self.disparity, d_min, d_max)

    @classmethod
    def from_depth(cls, depth, d_min: float = D_MIN, d_max: float = D_MAX) -> "DisparityField":
        return cls(logit(depth_to_disp(depth, d_min, d_max)))


@dataclass
class ParamBlock:
    """A flat optimizable vector with its gradient accumulator."""

    values: np.ndarray
    tag: str
    shape: tuple[int, ...] | None = None
    grads: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.tag not in PARAM_TAGS:
            raise InputError(f"unknown parameter tag {self.tag!r}")
        vals = np.asarray(self.values, dtype=np.float64)
        if self.shape is None:
            self.shape = vals.shape
        self.values = vals.reshape(-1).copy()
        if self.grads is None:
            self.grads = np.zeros_like(self.values)
        else:
            self.grads = np.asarray(self.grads, dtype=np.float64).reshape(-1).copy()
        if self.grads.shape != self.values.shape:
            raise InputError("values and grads must have equal length")

    def __len__(self) -> int:
        return self.values.size

    def view(self) -> np.ndarray:
        return self.values.reshape(self.shape)

    def zero_grad(self) -> None:
        self.grads[:] = 0.0

    def to_dict(self) -> dict:
        return {
            "tag": self.tag,
            "shape": list(self.shape),
            "values": [float(v).hex() for v in self.values],
            "grads": [float(v).hex() for v in self.grads],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParamBlock":
        return cls(
            values=np.array([float.fromhex(v) for v in d["values"]]),
            tag=d["tag"],
            shape=tuple(d["shape"]),
            grads=np.array([float.fromhex(v) for v in d["grads"]]),
        )


@dataclass(frozen=True)
class Rng:
    """Seeded random stream; ``key`` identifies the position in the split tree."""

    seed: int
    key: tuple[int, ...] = ()

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, i: int) -> "Rng":
        return Rng(self.seed, self.key + (int(i),))


def rng_split(rng: Rng) -> tuple[Rng, Rng]:
    """Two independent child streams; neither overlaps the parent's own stream."""
    return rng.child(0), rng.child(1)
