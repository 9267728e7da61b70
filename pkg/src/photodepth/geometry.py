"""Pinhole camera, rigid transforms, view reprojection and differentiable warping.

Pixel ``(u, v)`` sits at continuous coordinate ``(u, v)``; column index is ``u``.
Poses map points from the target camera frame into the support camera frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import InputError, sigmoid, softplus, softplus_inv, logit

Z_EPS = 1e-6
_SMALL_ANGLE = 1e-8


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(np.isfinite(vals)):
            raise InputError(f"non-finite camera parameters {vals}")
        if self.fx <= 0 or self.fy <= 0:
            raise InputError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise InputError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}"
            )

    @property
    def size(self) -> tuple[int, int]:
        return self.height, self.width

    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_text(self) -> str:
        return f"{self.fx!r} {self.fy!r} {self.cx!r} {self.cy!r} {self.width} {self.height}"

    @classmethod
    def from_text(cls, text: str) -> "Camera":
        parts = text.split()
        if len(parts) != 6:
            raise InputError(f"camera record needs 'fx fy cx cy W H', got {text!r}")
        fx, fy, cx, cy = (float(p) for p in parts[:4])
        return cls(fx, fy, cx, cy, int(parts[4]), int(parts[5]))


@dataclass(frozen=True)
class IntrinsicsRaw:
    """Unconstrained intrinsics: softplus focal lengths, sigmoid principal point."""

    raw_f: tuple[float, float]
    raw_c: tuple[float, float]

    def as_vector(self) -> np.ndarray:
        return np.array([*self.raw_f, *self.raw_c], dtype=np.float64)

    @classmethod
    def from_vector(cls, v) -> "IntrinsicsRaw":
        v = np.asarray(v, dtype=np.float64)
        return cls((float(v[0]), float(v[1])), (float(v[2]), float(v[3])))

    @classmethod
    def from_camera(cls, cam: Camera) -> "IntrinsicsRaw":
        f = softplus_inv([cam.fx / cam.width, cam.fy / cam.height])
        c = logit([cam.cx / cam.width, cam.cy / cam.height])
        return cls((float(f[0]), float(f[1])), (float(c[0]), float(c[1])))


def intrinsics_decode(raw: IntrinsicsRaw, width: int, height: int) -> Camera:
    """fx, fy = softplus(raw_f) * (W, H); cx, cy = sigmoid(raw_c) * (W, H)."""
    f = softplus(raw.raw_f)
    c = sigmoid(raw.raw_c)
    fx, fy = float(f[0] * width), float(f[1] * height)
    cx, cy = float(c[0] * width), float(c[1] * height)
    # saturated sigmoids land exactly on the border; pull back by one ulp
    cx = min(max(cx, np.nextafter(0.0, 1.0)), np.nextafter(float(width), 0.0))
    cy = min(max(cy, np.nextafter(0.0, 1.0)), np.nextafter(float(height), 0.0))
    fx = max(fx, np.nextafter(0.0, 1.0))
    fy = max(fy, np.nextafter(0.0, 1.0))
    return Camera(fx, fy, cx, cy, width, height)


def intrinsics_decode_jacobian(raw: IntrinsicsRaw, width: int, height: int) -> np.ndarray:
    """Diagonal of d(fx, fy, cx, cy) / d(raw_f0, raw_f1, raw_c0, raw_c1)."""
    sf = sigmoid(raw.raw_f)
    sc = sigmoid(raw.raw_c)
    return np.array([sf[0] * width, sf[1] * height,
                     sc[0] * (1 - sc[0]) * width, sc[1] * (1 - sc[1]) * height])


def hat(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(r) -> np.ndarray:
    """Rodrigues formula; exact identity for a zero vector."""
    r = np.asarray(r, dtype=np.float64)
    theta = float(np.sqrt(r @ r))
    if theta < _SMALL_ANGLE:
        return np.eye(3) + hat(r)
    k = hat(r / theta)
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def so3_log(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = float(np.arccos(cos))
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < _SMALL_ANGLE:
        return 0.5 * w
    if np.pi - theta < 1e-6:
        # near pi: axis from the symmetric part
        B = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(B), 0.0, None))
        i = int(np.argmax(axis))
        axis = B[i] / axis[i]
        axis /= np.linalg.norm(axis)
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * w


def so3_exp_derivatives(r) -> np.ndarray:
    """dR/dr_i for i = 0..2, stacked as (3, 3, 3).

    Uses dR/dr_i = (r_i [r]x + [r x (I - R) e_i]x) R / |r|^2, and [e_i]x at r = 0.
    """
    r = np.asarray(r, dtype=np.float64)
    theta2 = float(r @ r)
    eye = np.eye(3)
    if theta2 < _SMALL_ANGLE**2:
        return np.stack([hat(eye[i]) for i in range(3)])
    R = so3_exp(r)
    rx = hat(r)
    out = np.empty((3, 3, 3))
    for i in range(3):
        v = np.cross(r, (eye - R) @ eye[i])
        out[i] = (r[i] * rx + hat(v)) @ R / theta2
    return out


@dataclass(frozen=True)
class Pose:
    """Axis-angle rotation and translation, target frame -> support frame."""

    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "rotation", tuple(float(v) for v in self.rotation))
        object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))
        if len(self.rotation) != 3 or len(self.translation) != 3:
            raise InputError("pose needs 3 rotation and 3 translation components")

    def as_vector(self) -> np.ndarray:
        return np.array([*self.rotation, *self.translation])

    @classmethod
    def from_vector(cls, v) -> "Pose":
        v = np.asarray(v, dtype=np.float64).reshape(6)
        return cls(tuple(v[:3]), tuple(v[3:]))

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(tuple(so3_log(T[:3, :3])), tuple(T[:3, 3]))

    def matrix(self) -> np.ndarray:
        return se3_exp(self)

    def inverse(self) -> "Pose":
        R = so3_exp(self.rotation)
        t = -R.T @ np.asarray(self.translation)
        return Pose(tuple(-np.asarray(self.rotation)), tuple(t))

    def compose(self, other: "Pose") -> "Pose":
        """``self`` applied after ``other``."""
        return Pose.from_matrix(self.matrix() @ other.matrix())

    def to_text(self) -> str:
        return " ".join(repr(float(v)) for v in self.as_vector())

    @classmethod
    def from_text(cls, text: str) -> "Pose":
        parts = text.split()
        if len(parts) != 6:
            raise InputError(f"pose record needs 6 numbers, got {text!r}")
        return cls.from_vector([float(p) for p in parts])


def se3_exp(pose: Pose) -> np.ndarray:
    """4x4 rigid transform; rotation part via Rodrigues, translation taken as is."""
    T = np.eye(4)
    T[:3, :3] = so3_exp(pose.rotation)
    T[:3, 3] = pose.translation
    return T


def pixel_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return u, v


def backproject(depth, cam: Camera) -> np.ndarray:
    """3-D camera-frame points (H, W, 3) for every pixel."""
    depth = np.asarray(depth, dtype=np.float64)
    u, v = pixel_grid(*depth.shape)
    return np.stack([depth * (u - cam.cx) / cam.fx, depth * (v - cam.cy) / cam.fy, depth], axis=-1)


def project(points, cam: Camera) -> np.ndarray:
    """Pixel coordinates (..., 2) of camera-frame points; no validity handling."""
    p = np.asarray(points, dtype=np.float64)
    return np.stack([cam.fx * p[..., 0] / p[..., 2] + cam.cx,
                     cam.fy * p[..., 1] / p[..., 2] + cam.cy], axis=-1)


def _rotate(R, x, y, z):
    # explicit sums keep the result independent of BLAS threading
    return (R[0, 0] * x + R[0, 1] * y + R[0, 2] * z,
            R[1, 0] * x + R[1, 1] * y + R[1, 2] * z,
            R[2, 0] * x + R[2, 1] * y + R[2, 2] * z)


@dataclass
class _ReprojCache:
    u: np.ndarray
    v: np.ndarray
    xn: np.ndarray
    yn: np.ndarray
    inv_depth: np.ndarray
    nx: np.ndarray
    ny: np.ndarray
    w: np.ndarray
    qx: np.ndarray
    qy: np.ndarray
    z_ok: np.ndarray
    r: np.ndarray
    R: np.ndarray
    t: np.ndarray
    cam: Camera


def _reproject(inv_depth, cam: Camera, pose: Pose):
    h, w_ = inv_depth.shape
    u, v = pixel_grid(h, w_)
    xn = (u - cam.cx) / cam.fx
    yn = (v - cam.cy) / cam.fy
    R = so3_exp(pose.rotation)
    t = np.asarray(pose.translation)
    rx, ry, rz = _rotate(R, xn, yn, 1.0)
    # points divided by their target depth: n = R xn + t / depth
    nx = rx + t[0] * inv_depth
    ny = ry + t[1] * inv_depth
    wz = rz + t[2] * inv_depth
    z_ok = wz > Z_EPS * inv_depth
    w_safe = np.where(z_ok, wz, Z_EPS * inv_depth)
    qx = nx / w_safe
    qy = ny / w_safe
    # u + fx (qx - xn) equals fx qx + cx, and is exact for the identity pose
    cu = u + cam.fx * (qx - xn)
    cv = v + cam.fy * (qy - yn)
    cache = _ReprojCache(u, v, xn, yn, inv_depth, nx, ny, w_safe, qx, qy, z_ok,
                         np.asarray(pose.rotation), R, t, cam)
    return np.stack([cu, cv], axis=-1), z_ok, cache


def reproject(depth, cam: Camera, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Reprojected pixel coordinates (H, W, 2) and a mask of points in front of the support camera."""
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0) or not np.all(np.isfinite(depth)):
        raise InputError("depth must be finite and positive")
    coords, z_ok, _ = _reproject(1.0 / depth, cam, pose)
    return coords, z_ok


def bilinear_sample(src, coords) -> tuple[np.ndarray, np.ndarray]:
    """Border-clamped bilinear lookup; returns (image, inside mask)."""
    coords = np.asarray(coords, dtype=np.float64)
    if not np.all(np.isfinite(coords)):
        raise InputError("sampling coordinates must be finite")
    src = np.asarray(src, dtype=np.float64)
    squeeze = src.ndim == 2
    if squeeze:
        src = src[:, :, None]
    vals, _, _, inside = kernels.bilinear_sample(src, coords[..., 0], coords[..., 1])
    return (vals[..., 0] if squeeze else vals), inside


@dataclass
class WarpResult:
    coords: np.ndarray
    synthesized: np.ndarray
    valid: np.ndarray
    # populated when gradients are requested
    d_dx: np.ndarray | None = None
    d_dy: np.ndarray | None = None
    cache: _ReprojCache | None = None


def warp_inverse_depth(support, inv_depth, cam: Camera, pose: Pose, with_grad: bool = False) -> WarpResult:
    """Synthesize the target view from ``support`` using target inverse depth."""
    inv_depth = np.asarray(inv_depth, dtype=np.float64)
    if support.shape[:2] != inv_depth.shape:
        raise InputError(f"support {support.shape[:2]} and depth {inv_depth.shape} differ")
    coords, z_ok, cache = _reproject(inv_depth, cam, pose)
    vals, d_dx, d_dy, inside = kernels.bilinear_sample(support, coords[..., 0], coords[..., 1])
    res = WarpResult(coords, vals, inside & z_ok)
    if with_grad:
        res.d_dx, res.d_dy, res.cache = d_dx, d_dy, cache
    return res


def warp_support(target_shape, support, depth, cam: Camera, pose: Pose) -> WarpResult:
    """Support image resampled into the target view (Î = I_support<reprojected coords>)."""
    support = np.asarray(support, dtype=np.float64)
    if support.ndim == 2:
        support = support[:, :, None]
    if tuple(target_shape[:2]) != support.shape[:2]:
        raise InputError("target and support must share image size")
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0) or not np.all(np.isfinite(depth)):
        raise InputError("depth must be finite and positive")
    return warp_inverse_depth(support, 1.0 / depth, cam, pose)


def warp_backward(res: WarpResult, g_synth) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pull a gradient on the synthesized image back to (inverse depth, pose, camera).

    Returns ``(g_inv_depth (H, W), g_pose (6,), g_cam (4,) over fx, fy, cx, cy)``.
    Pixels behind the support camera pass no gradient.
    """
    c = res.cache
    if c is None:
        raise ValueError("warp was computed without gradient information")
    cam = c.cam
    g_u = np.sum(g_synth * res.d_dx, axis=-1)
    g_v = np.sum(g_synth * res.d_dy, axis=-1)
    g_u = np.where(c.z_ok, g_u, 0.0)
    g_v = np.where(c.z_ok, g_v, 0.0)

    g_fx = np.sum(g_u * c.qx)
    g_fy = np.sum(g_v * c.qy)
    g_cx = np.sum(g_u)
    g_cy = np.sum(g_v)

    g_qx = g_u * cam.fx
    g_qy = g_v * cam.fy
    g_nx = g_qx / c.w
    g_ny = g_qy / c.w
    g_nz = -(g_qx * c.qx + g_qy * c.qy) / c.w

    g_t = np.array([np.sum(g_nx * c.inv_depth), np.sum(g_ny * c.inv_depth), np.sum(g_nz * c.inv_depth)])
    g_inv = g_nx * c.t[0] + g_ny * c.t[1] + g_nz * c.t[2]

    xs = (c.xn, c.yn, np.ones_like(c.xn))
    gs = (g_nx, g_ny, g_nz)
    g_R = np.array([[np.sum(gs[j] * xs[k]) for k in range(3)] for j in range(3)])
    dR = so3_exp_derivatives(c.r)
    g_r = np.array([np.sum(g_R * dR[i]) for i in range(3)])

    # xn = (u - cx) / fx, yn = (v - cy) / fy
    R = c.R
    g_xn = R[0, 0] * g_nx + R[1, 0] * g_ny + R[2, 0] * g_nz
    g_yn = R[0, 1] * g_nx + R[1, 1] * g_ny + R[2, 1] * g_nz
    g_fx += np.sum(-g_xn * c.xn) / cam.fx
    g_fy += np.sum(-g_yn * c.yn) / cam.fy
    g_cx += np.sum(-g_xn) / cam.fx
    g_cy += np.sum(-g_yn) / cam.fy

    return g_inv, np.concatenate([g_r, g_t]), np.array([g_fx, g_fy, g_cx, g_cy])


def adjust_camera_for_crop_resize(cam: Camera, crop, new_size) -> Camera:
    """Camera after cropping ``crop = (x0, y0, w, h)`` and resizing to ``new_size = (H, W)``."""
    x0, y0, cw, ch = crop
    nh, nw = new_size
    if cw <= 0 or ch <= 0 or nw <= 0 or nh <= 0:
        raise InputError(f"degenerate crop {crop} or size {new_size}")
    if x0 < 0 or y0 < 0 or x0 + cw > cam.width or y0 + ch > cam.height:
        raise InputError(f"crop {crop} exceeds image {cam.width}x{cam.height}")
    sx = nw / cw
    sy = nh / ch
    return Camera(cam.fx * sx, cam.fy * sy, (cam.cx - x0) * sx, (cam.cy - y0) * sy, int(nw), int(nh))
