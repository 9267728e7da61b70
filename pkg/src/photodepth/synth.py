"""Ground-truth scenes: textured planes rendered by exact ray casting.

Textures are analytic sums of sinusoids over in-plane coordinates, so every
view is rendered without raster resampling and depth is exact.  Occluders are
small textured rectangles with their own per-frame placement and visibility.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core import D_MAX, D_MIN, InputError, Rng
from .geometry import Camera, Pose, pixel_grid, so3_exp


@dataclass(frozen=True)
class Texture:
    """base + sum_k amp_k * sin(freq_k . (a, b) + phase_k), per RGB channel."""

    base: np.ndarray  # (3,)
    freqs: np.ndarray  # (K, 2) radians per world unit
    phases: np.ndarray  # (K,)
    amps: np.ndarray  # (K, 3)

    def __call__(self, a, b) -> np.ndarray:
        out = np.broadcast_to(self.base, a.shape + (3,)).copy()
        for f, ph, amp in zip(self.freqs, self.phases, self.amps):
            out += np.sin(f[0] * a + f[1] * b + ph)[..., None] * amp
        return out

    @classmethod
    def random(cls, gen: np.random.Generator, wavelength_range, n_waves: int = 12,
               contrast: float = 0.4) -> "Texture":
        lo, hi = wavelength_range
        lam = np.exp(gen.uniform(np.log(lo), np.log(hi), n_waves))
        ang = gen.uniform(0, np.pi, n_waves)
        freqs = (2 * np.pi / lam)[:, None] * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        phases = gen.uniform(0, 2 * np.pi, n_waves)
        amps = gen.uniform(-1, 1, (n_waves, 3)) + gen.uniform(-1, 1, (n_waves, 1))
        amps *= contrast / np.abs(amps).sum(axis=0, keepdims=True)
        base = gen.uniform(0.45, 0.55, 3)
        return cls(base, freqs, phases, amps)

    @classmethod
    def constant(cls, value=0.5) -> "Texture":
        return cls(np.full(3, float(value)), np.zeros((0, 2)), np.zeros(0), np.zeros((0, 3)))


@dataclass(frozen=True)
class Plane:
    """Plane ``normal . X = offset`` in target-camera coordinates."""

    normal: tuple
    offset: float
    texture: Texture
    extent: tuple | None = None  # (a_min, a_max, b_min, b_max) in-plane coordinates

    def basis(self):
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        helper = np.array([0.0, 1.0, 0.0]) if abs(n[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        e1 = np.cross(helper, n)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(n, e1)
        return n, e1, e2


@dataclass(frozen=True)
class Occluder:
    """Textured rectangle, fronto-parallel to its reference camera.

    ``centers`` maps frame offset -> rectangle centre.  With ``camera_relative``
    the centre is in that frame's camera coordinates, otherwise in target-camera
    (world) coordinates.  The occluder is drawn only in ``visible`` frames.
    """

    half_size: tuple
    texture: Texture
    centers: dict
    visible: frozenset
    camera_relative: bool = False


@dataclass
class PlaneScene:
    planes: list
    camera: Camera
    frames: dict  # offset -> Pose (target camera -> frame camera)
    occluders: list = field(default_factory=list)

    @property
    def offsets(self) -> list[int]:
        return sorted(k for k in self.frames if k != 0)


@dataclass
class RenderedFrame:
    image: np.ndarray
    gt_depth: np.ndarray
    gt_pose: Pose
    occluder_mask: np.ndarray


def _rays(cam: Camera, pose: Pose):
    """World-frame ray origin and per-pixel directions with unit camera-z."""
    u, v = pixel_grid(cam.height, cam.width)
    d_cam = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=-1)
    R = so3_exp(pose.rotation)
    t = np.asarray(pose.translation)
    origin = -R.T @ t
    return origin, d_cam @ R  # row-vector form of R^T d


def _hit_plane(plane: Plane, origin, dirs):
    n, e1, e2 = plane.basis()
    denom = dirs @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = (plane.offset - origin @ n) / denom
    pts = origin + lam[..., None] * dirs
    rel = pts - plane.offset * n
    a = rel @ e1
    b = rel @ e2
    ok = np.isfinite(lam) & (lam > 0)
    if plane.extent is not None:
        amin, amax, bmin, bmax = plane.extent
        ok &= (a >= amin) & (a <= amax) & (b >= bmin) & (b <= bmax)
    return np.where(ok, lam, np.inf), a, b


def _occluder_frame(occ: Occluder, scene: PlaneScene, offset: int):
    """Centre and rotation (rectangle frame -> world) for ``offset``."""
    c = np.asarray(occ.centers[offset], dtype=np.float64)
    if not occ.camera_relative:
        return c, np.eye(3)
    pose = scene.frames[offset]
    R = so3_exp(pose.rotation)
    t = np.asarray(pose.translation)
    return R.T @ (c - t), R.T


def _hit_occluder(occ: Occluder, scene: PlaneScene, offset: int, origin, dirs):
    center, Rw = _occluder_frame(occ, scene, offset)
    # rectangle frame: x, y in-plane, z normal
    o = Rw.T @ (origin - center)
    d = dirs @ Rw
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = -o[2] / d[..., 2]
    a = o[0] + lam * d[..., 0]
    b = o[1] + lam * d[..., 1]
    hx, hy = occ.half_size
    ok = np.isfinite(lam) & (lam > 0) & (np.abs(a) <= hx) & (np.abs(b) <= hy)
    return np.where(ok, lam, np.inf), a, b


def _cast(scene: PlaneScene, offset: int, cam: Camera | None = None, include_occluders: bool = True):
    cam = cam or scene.camera
    pose = scene.frames[offset]
    origin, dirs = _rays(cam, pose)
    best = np.full(dirs.shape[:2], np.inf)
    image = np.zeros(dirs.shape[:2] + (3,))
    occ_mask = np.zeros(dirs.shape[:2], dtype=bool)
    surfaces = [(p, "plane") for p in scene.planes]
    if include_occluders:
        surfaces += [(o, "occ") for o in scene.occluders if offset in o.visible]
    for surf, kind in surfaces:
        if kind == "plane":
            lam, a, b = _hit_plane(surf, origin, dirs)
        else:
            lam, a, b = _hit_occluder(surf, scene, offset, origin, dirs)
        closer = lam < best
        if closer.any():
            best = np.where(closer, lam, best)
            image[closer] = surf.texture(a[closer], b[closer])
            occ_mask = np.where(closer, kind == "occ", occ_mask)
    # ray directions have unit camera-z, so the ray parameter is the depth
    return image, best, occ_mask, origin, dirs


def render_view(scene: PlaneScene, offset: int = 0, camera: Camera | None = None) -> RenderedFrame:
    """Render frame ``offset`` (0 is the target) with exact per-pixel depth."""
    if offset not in scene.frames:
        raise InputError(f"scene has no frame with offset {offset}")
    image, depth, occ, _, _ = _cast(scene, offset, camera)
    if not np.all(np.isfinite(depth)):
        raise InputError(f"{int((~np.isfinite(depth)).sum())} rays miss every plane in frame {offset}")
    return RenderedFrame(np.clip(image, 0.0, 1.0), depth, scene.frames[offset], occ)


def occlusion_masks(scene: PlaneScene) -> dict:
    """Per frame: target pixels whose static surface point is hidden by an occluder there.

    For offset 0 this is the occluders' footprint in the target view.
    """
    _, depth, occ0, origin0, dirs0 = _cast(scene, 0, include_occluders=False)
    points = origin0 + depth[..., None] * dirs0
    out = {0: render_view(scene, 0).occluder_mask}
    for k in scene.offsets:
        pose = scene.frames[k]
        R = so3_exp(pose.rotation)
        center_k = -R.T @ np.asarray(pose.translation)
        seg = points - center_k
        hidden = np.zeros(depth.shape, dtype=bool)
        for occ in scene.occluders:
            if k not in occ.visible:
                continue
            lam, _, _ = _hit_occluder(occ, scene, k, center_k, seg)
            hidden |= lam < 1.0 - 1e-9
        out[k] = hidden
    return out


# -- scene construction ---------------------------------------------------------------


@dataclass
class PlaneSpec:
    depth: float
    # in-plane x extent (target camera X) for a partial plane; None = unbounded
    x_range: tuple | None = None
    tilt: tuple = (0.0, 0.0)  # normal tilt about camera x and y axes, radians


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 96
    camera: Camera | None = None
    planes: list = field(default_factory=lambda: [PlaneSpec(0.5)])
    frames: dict = field(default_factory=dict)  # offset -> Pose
    wavelength_px: tuple = (12.0, 32.0)
    n_waves: int = 12
    contrast: float = 0.4
    d_min: float = D_MIN
    d_max: float = D_MAX

    def resolved_camera(self) -> Camera:
        if self.camera is not None:
            return self.camera
        f = 0.75 * self.width
        return Camera(f, f, (self.width - 1) / 2, (self.height - 1) / 2, self.width, self.height)


def make_scene(rng: Rng, spec: SceneSpec) -> PlaneScene:
    """Build textured planes from ``spec``; deterministic per seed."""
    if not spec.planes:
        raise InputError("scene needs at least one plane")
    cam = spec.resolved_camera()
    if (cam.height, cam.width) != (spec.height, spec.width):
        raise InputError("camera size does not match the scene size")
    gen = rng.generator()
    planes = []
    for ps in spec.planes:
        if not spec.d_min < ps.depth < spec.d_max:
            raise InputError(f"plane depth {ps.depth} outside ({spec.d_min}, {spec.d_max})")
        # texture wavelength expressed in pixels at the plane's depth
        px = ps.depth / cam.fx
        tex = Texture.random(gen, (spec.wavelength_px[0] * px, spec.wavelength_px[1] * px),
                             spec.n_waves, spec.contrast)
        ax, ay = ps.tilt
        n = so3_exp([ax, ay, 0.0]) @ np.array([0.0, 0.0, 1.0])
        extent = None
        if ps.x_range is not None:
            extent = (ps.x_range[0], ps.x_range[1], -np.inf, np.inf)
        planes.append(Plane(tuple(n), float(ps.depth * n[2]), tex, extent))
    frames = {0: Pose()}
    frames.update({int(k): p for k, p in spec.frames.items()})
    scene = PlaneScene(planes, cam, frames)
    for k in frames:
        d = _cast(scene, k)[1]
        if not np.all(np.isfinite(d)):
            raise InputError(f"infeasible spec: rays miss every plane in frame {k}")
        if d.min() <= spec.d_min or d.max() >= spec.d_max:
            raise InputError(f"infeasible spec: depths in frame {k} leave ({spec.d_min}, {spec.d_max})")
    return scene


@dataclass
class OccluderSpec:
    center: tuple  # target-frame (or camera-frame when camera_relative) centre
    half_size: tuple = (0.05, 0.05)
    velocity: tuple = (0.0, 0.0, 0.0)  # world units per frame offset
    visible: tuple | None = None  # offsets where it is drawn; None = all frames
    camera_relative: bool = False
    wavelength_px: tuple = (6.0, 14.0)


def add_dynamic_occluder(rng: Rng, scene: PlaneScene, spec: OccluderSpec) -> PlaneScene:
    """Return a copy of ``scene`` with one extra moving occluder."""
    offsets = sorted(scene.frames)
    visible = frozenset(offsets if spec.visible is None else spec.visible)
    c0 = np.asarray(spec.center, dtype=np.float64)
    vel = np.asarray(spec.velocity, dtype=np.float64)
    centers = {k: tuple(c0 + k * vel) for k in offsets}
    gen = rng.generator()
    px = c0[2] / scene.camera.fx
    tex = Texture.random(gen, (spec.wavelength_px[0] * px, spec.wavelength_px[1] * px))
    occ = Occluder(tuple(spec.half_size), tex, centers, visible, spec.camera_relative)
    out = replace(scene, occluders=[*scene.occluders, occ])
    for k in offsets:
        if k not in visible:
            continue
        _, _, mask, _, _ = _cast(out, k)
        frac = mask.mean()
        if frac > 0.5:
            raise InputError(f"occluder covers {frac:.0%} of frame {k}; at most 50% allowed")
        if frac == 0.0:
            raise InputError(f"occluder is outside the view in frame {k}")
    return out


# -- standard scenes ------------------------------------------------------------------


def default_motion() -> dict:
    """Two supports with mixed rotation and translation, on opposite sides."""
    return {
        -1: Pose((0.030, -0.040, 0.020), (-0.012, 0.0012, -0.006)),
        1: Pose((-0.030, 0.035, -0.015), (0.0012, -0.012, 0.0072)),
    }


def step_spec(height: int = 64, width: int = 96, camera: Camera | None = None) -> SceneSpec:
    """Near plane over the left part of the view in front of an unbounded far plane (depth step)."""
    if camera is None:
        f = 0.75 * width
        camera = Camera(f, f, 0.51 * width, 0.48 * height, width, height)
    # boundary column at ~45% of the width
    near, far = 0.25, 0.4
    x_b = (0.45 * width - camera.cx) / camera.fx * near
    return SceneSpec(height, width, camera,
                     planes=[PlaneSpec(near, x_range=(-np.inf, x_b)), PlaneSpec(far)],
                     frames=default_motion())


def two_plane_spec(height: int = 64, width: int = 96, camera: Camera | None = None,
                   seam_depth: float = 0.4, slope: float = 0.6) -> SceneSpec:
    """Concave corner: two planes meeting at a vertical seam that is the farthest point.

    Every ray's nearest hit is the visible wall, so the depth is continuous and
    no pixel is occluded in any frame.
    """
    if camera is None:
        f = 0.75 * width
        camera = Camera(f, f, 0.51 * width, 0.48 * height, width, height)
    xs = (0.45 * width - camera.cx) / camera.fx * seam_depth
    # depth of each wall on the optical axis; walls pass through (xs, 0, seam_depth)
    left = PlaneSpec(seam_depth - slope * xs, tilt=(0.0, -float(np.arctan(slope))))
    right = PlaneSpec(seam_depth + slope * xs, tilt=(0.0, float(np.arctan(slope))))
    return SceneSpec(height, width, camera, planes=[left, right], frames=default_motion())


def static_spec(height: int = 64, width: int = 96) -> SceneSpec:
    """Camera never moves: every frame equals the target."""
    spec = two_plane_spec(height, width)
    spec.frames = {-1: Pose(), 1: Pose()}
    return spec


def scene_frames(scene: PlaneScene) -> tuple[RenderedFrame, dict]:
    """Target render and ``{offset: RenderedFrame}`` for every support."""
    return render_view(scene, 0), {k: render_view(scene, k) for k in scene.offsets}
