"""Aspect-ratio augmentation, support-frame offset sampling and flip / colour jitter."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .core import InputError, Rng
from .geometry import Camera, adjust_camera_for_crop_resize

# W:H as written; portrait entries are taller than wide
PORTRAIT_WH = ((6, 13), (9, 16), (3, 5), (2, 3), (4, 5), (1, 1))
LANDSCAPE_WH = ((5, 4), (4, 3), (3, 2), (14, 9), (5, 3), (16, 9), (2, 1), (24, 10), (33, 10), (18, 5))

STRIDE = 32
MIN_SIDE = 64
AREA_TOL = 0.05


def _gen(rng) -> np.random.Generator:
    if isinstance(rng, Rng):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


@dataclass(frozen=True)
class AspectRatioTable:
    """Ordered (h, w) ratio pairs."""

    ratios: tuple = tuple((h, w) for w, h in PORTRAIT_WH + LANDSCAPE_WH)

    def __post_init__(self):
        if not self.ratios:
            raise InputError("aspect ratio table is empty")
        for h, w in self.ratios:
            if not (h > 0 and w > 0):
                raise InputError(f"non-positive ratio {h}:{w}")

    def __len__(self) -> int:
        return len(self.ratios)

    def width_over_height(self, i: int) -> float:
        h, w = self.ratios[i]
        return w / h


@dataclass
class AugConfig:
    ar_prob: float = 0.70
    flip_prob: float = 0.50
    jitter_prob: float = 0.50
    fraction_range: tuple = (0.5, 1.0)
    profile: str = "handheld"
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    max_offset: int = 4
    table: AspectRatioTable = field(default_factory=AspectRatioTable)

    def __post_init__(self):
        for name in ("ar_prob", "flip_prob", "jitter_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise InputError(f"{name}={p} outside [0, 1]")
        lo, hi = self.fraction_range
        if not 0.0 < lo <= hi <= 1.0:
            raise InputError(f"fraction range {self.fraction_range} not within (0, 1]")
        if self.profile not in ("handheld", "automotive"):
            raise InputError(f"unknown offset profile {self.profile!r}")
        if self.max_offset < 1:
            raise InputError("max_offset must be >= 1")
        for name in ("brightness", "contrast", "saturation"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise InputError(f"{name} jitter must be in [0, 1)")


@dataclass(frozen=True)
class ArCrop:
    ratio_index: int
    fraction: float
    crop: tuple  # (x0, y0, w, h)
    out_size: tuple  # (H, W)


def _round_stride(x: float) -> int:
    return max(MIN_SIDE, STRIDE * int(math.floor(x / STRIDE + 0.5)))


def output_size(area: float, w_over_h: float) -> tuple[int, int]:
    """(H, W) multiples of 32 (>= 64) with area near ``area`` and ratio near ``w_over_h``.

    Each side is first rounded to the nearest multiple of 32. When that product
    misses the area by more than 5% the neighbouring multiples are searched and
    the candidate within tolerance with the smallest log-ratio distortion wins.
    """
    h = math.sqrt(area / w_over_h)
    w = math.sqrt(area * w_over_h)
    oh, ow = _round_stride(h), _round_stride(w)
    if abs(oh * ow / area - 1.0) <= AREA_TOL:
        return oh, ow
    best = None
    target = math.log(w_over_h)
    for i in range(max(2, int(h // STRIDE) - 2), int(h // STRIDE) + 4):
        for j in range(max(2, int(w // STRIDE) - 2), int(w // STRIDE) + 4):
            a = (i * STRIDE) * (j * STRIDE)
            if abs(a / area - 1.0) > AREA_TOL:
                continue
            key = (abs(math.log(j / i) - target), abs(a / area - 1.0), i)
            if best is None or key < best[0]:
                best = (key, (i * STRIDE, j * STRIDE))
    return best[1] if best is not None else (oh, ow)


def crop_for(height: int, width: int, w_over_h: float, fraction: float) -> tuple[int, int, int, int]:
    """Centred crop with the given ratio spanning ``fraction`` of the binding dimension."""
    if width / height >= w_over_h:
        ch = min(height, max(1, int(round(fraction * height))))
        cw = min(width, max(1, int(round(ch * w_over_h))))
    else:
        cw = min(width, max(1, int(round(fraction * width))))
        ch = min(height, max(1, int(round(cw / w_over_h))))
    x0 = (width - cw) // 2
    y0 = (height - ch) // 2
    return x0, y0, cw, ch


def sample_ar_crop(rng, size, table: AspectRatioTable | None = None, fraction_range=(0.5, 1.0)) -> ArCrop:
    """Draw a ratio and crop fraction; returns the centred crop and the pixel-count-preserving output size."""
    height, width = size
    if height < MIN_SIDE or width < MIN_SIDE:
        raise InputError(f"image {height}x{width} smaller than {MIN_SIDE}x{MIN_SIDE}")
    table = table or AspectRatioTable()
    gen = _gen(rng)
    idx = int(gen.integers(len(table)))
    lo, hi = fraction_range
    f = float(gen.uniform(lo, hi)) if hi > lo else float(lo)
    r = table.width_over_height(idx)
    crop = crop_for(height, width, r, f)
    return ArCrop(idx, f, crop, output_size(height * width, r))


def _resize_coords(crop, out_size):
    x0, y0, cw, ch = crop
    oh, ow = out_size
    sx, sy = ow / cw, oh / ch
    xs = x0 + np.arange(ow, dtype=np.float64) / sx
    ys = y0 + np.arange(oh, dtype=np.float64) / sy
    return np.broadcast_to(xs[None, :], (oh, ow)), np.broadcast_to(ys[:, None], (oh, ow))


def resize_crop(image, crop, out_size) -> np.ndarray:
    """Bilinear resample of the crop; output pixel u maps to source x0 + u / s."""
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    x, y = _resize_coords(crop, out_size)
    vals = kernels.bilinear_sample(np.ascontiguousarray(img), np.ascontiguousarray(x), np.ascontiguousarray(y))[0]
    return vals[..., 0] if squeeze else vals


def resize_crop_nearest(field, crop, out_size) -> np.ndarray:
    f = np.asarray(field)
    x, y = _resize_coords(crop, out_size)
    xi = np.clip(np.floor(x + 0.5).astype(np.int64), 0, f.shape[1] - 1)
    yi = np.clip(np.floor(y + 0.5).astype(np.int64), 0, f.shape[0] - 1)
    return f[yi, xi]


def ar_aug(image, camera: Camera, depth=None, rng=None, cfg: AugConfig | None = None):
    """Returns ``(image, camera, depth, crop_or_None)``; identity when the coin says no."""
    cfg = cfg or AugConfig()
    gen = _gen(rng)
    img = np.asarray(image, dtype=np.float64)
    if img.shape[:2] != (camera.height, camera.width):
        raise InputError("camera size does not match image")
    if gen.uniform() >= cfg.ar_prob:
        return img, camera, depth, None
    ar = sample_ar_crop(gen, img.shape[:2], cfg.table, cfg.fraction_range)
    out = resize_crop(img, ar.crop, ar.out_size)
    cam = adjust_camera_for_crop_resize(camera, ar.crop, ar.out_size)
    d = None if depth is None else resize_crop_nearest(depth, ar.crop, ar.out_size)
    return out, cam, d, ar


def sample_support_offsets(rng, profile: str = "handheld", max_offset: int = 4) -> tuple[int, int]:
    """(negative, positive) frame offsets; fixed at (-1, +1) for the automotive profile."""
    if profile == "automotive":
        return (-1, 1)
    if profile != "handheld":
        raise InputError(f"unknown offset profile {profile!r}")
    gen = _gen(rng)
    a, b = gen.integers(1, max_offset + 1, size=2)
    return (-int(a), int(b))


def flip_horizontal(image) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(image)[:, ::-1])


def flip_camera(camera: Camera) -> Camera:
    return Camera(camera.fx, camera.fy, camera.width - 1 - camera.cx, camera.cy, camera.width, camera.height)


def _gray(img):
    if img.shape[-1] == 3:
        return (0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2])[..., None]
    return img.mean(axis=-1, keepdims=True)


def color_jitter(img, brightness: float, contrast: float, saturation: float) -> np.ndarray:
    """Apply multiplicative factors (1 + value) in brightness, contrast, saturation order, then clamp."""
    x = np.asarray(img, dtype=np.float64)
    if brightness == 0 and contrast == 0 and saturation == 0:
        return x.copy()
    x = x * (1.0 + brightness)
    mean = _gray(x).mean()
    x = (x - mean) * (1.0 + contrast) + mean
    g = _gray(x)
    x = (x - g) * (1.0 + saturation) + g
    return np.clip(x, 0.0, 1.0)


@dataclass
class FlipJitterInfo:
    flipped: bool
    jitter: tuple | None  # (brightness, contrast, saturation) offsets when applied


def flip_and_jitter(frames, rng, cfg: AugConfig | None = None, depth=None, camera: Camera | None = None):
    """Jointly flip / jitter a list of frames; returns ``(frames, depth, camera, info)``."""
    cfg = cfg or AugConfig()
    gen = _gen(rng)
    frames = [np.asarray(f, dtype=np.float64) for f in frames]
    flipped = bool(gen.uniform() < cfg.flip_prob)
    jit = None
    if gen.uniform() < cfg.jitter_prob:
        jit = (float(gen.uniform(-cfg.brightness, cfg.brightness)),
               float(gen.uniform(-cfg.contrast, cfg.contrast)),
               float(gen.uniform(-cfg.saturation, cfg.saturation)))
    if flipped:
        frames = [flip_horizontal(f) for f in frames]
        depth = None if depth is None else flip_horizontal(depth)
        camera = None if camera is None else flip_camera(camera)
    if jit is not None:
        frames = [color_jitter(f, *jit) for f in frames]
    return frames, depth, camera, FlipJitterInfo(flipped, jit)
