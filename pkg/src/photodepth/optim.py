"""Joint recovery of disparity, support poses and intrinsics by gradient descent.

The per-pixel disparity logits, one 6-dof pose per support frame and
(optionally) four raw intrinsics are optimized directly with AdamW; gradients
come from an explicit reverse pass through losses -> sampling -> projection.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    D_MAX,
    D_MIN,
    DegenerateBatchError,
    InputError,
    NumericalError,
    ParamBlock,
    Rng,
    as_image,
    depth_to_disp,
    disp_to_depth,
    logit,
    sigmoid,
    softplus_inv,
)
from .geometry import (
    Camera,
    IntrinsicsRaw,
    Pose,
    intrinsics_decode,
    intrinsics_decode_jacobian,
    warp_backward,
    warp_inverse_depth,
)
from .losses import (
    LossBundle,
    LossConfig,
    photometric_backward,
    smoothness_backward,
    _image_edges,
    smoothness_loss,
    total_loss,
)

log = logging.getLogger(__name__)

INIT_FOCAL_FRACTION = 0.58
# identity poses reproduce each support exactly, so the strict automask would
# drop every pixel; a tiny seeded jitter breaks the tie (see ``SceneState.initial``)
INIT_POSE_NOISE = 1e-3


@dataclass
class SceneState:
    """Target frame, support frames and the parameter blocks being optimized."""

    target: np.ndarray
    supports: list  # [(offset, image)]
    disparity: ParamBlock
    poses: list  # [ParamBlock]
    intrinsics: ParamBlock | None = None
    camera: Camera | None = None
    d_min: float = D_MIN
    d_max: float = D_MAX
    frozen: frozenset = frozenset()

    def __post_init__(self):
        self.target = as_image(self.target, "target")
        if not self.supports:
            raise InputError("need at least one support frame")
        if len(self.poses) != len(self.supports):
            raise InputError("one pose per support frame is required")
        pairs = sorted(zip(self.supports, self.poses), key=lambda p: p[0][0])
        self.supports = [(int(k), as_image(img, f"support {k}")) for (k, img), _ in pairs]
        self.poses = [p for _, p in pairs]
        for k, img in self.supports:
            if k == 0:
                raise InputError("support offset 0 is the target itself")
            if img.shape != self.target.shape:
                raise InputError(f"support {k} shape {img.shape} != target {self.target.shape}")
        if self.disparity.shape != self.target.shape[:2]:
            raise InputError("disparity block must match the target image size")
        if (self.intrinsics is None) == (self.camera is None):
            raise InputError("give exactly one of intrinsics (learned) or camera (fixed)")
        self.frozen = frozenset(self.frozen)

    @classmethod
    def initial(cls, target, supports, camera: Camera | None = None, learn_intrinsics: bool = False,
                poses=None, frozen=(), d_min: float = D_MIN, d_max: float = D_MAX,
                pose_noise: float = 0.0, rng: Rng | None = None) -> "SceneState":
        """Default start: disparity 0.5 everywhere, identity poses, centred focal prior.

        ``pose_noise`` adds seeded Gaussian jitter to every pose coordinate.  With
        exactly identity poses the warped supports equal the raw ones, the strict
        automask keeps no pixel and the first step fails as a degenerate batch.
        """
        target = as_image(target, "target")
        h, w = target.shape[:2]
        disp = ParamBlock(np.zeros((h, w)), "disparity")
        if poses is None:
            poses = [Pose() for _ in supports]
        pose_blocks = [ParamBlock(p.as_vector(), "pose") for p in poses]
        if pose_noise > 0:
            gen = (rng or Rng(0)).generator()
            for pb in pose_blocks:
                pb.values += gen.normal(0.0, pose_noise, 6)
        intr = None
        if learn_intrinsics:
            f = INIT_FOCAL_FRACTION * w
            raw_f = softplus_inv([f / w, f / h])
            intr = ParamBlock(np.array([raw_f[0], raw_f[1], 0.0, 0.0]), "intrinsics")
            camera = None
        elif camera is None:
            raise InputError("a fixed camera is required unless intrinsics are learned")
        return cls(target, list(supports), disp, pose_blocks, intr, camera, d_min, d_max, frozenset(frozen))

    @property
    def offsets(self) -> list[int]:
        return [k for k, _ in self.supports]

    def blocks(self) -> list[ParamBlock]:
        out = [self.disparity, *self.poses]
        if self.intrinsics is not None:
            out.append(self.intrinsics)
        return out

    def current_camera(self) -> Camera:
        if self.intrinsics is None:
            return self.camera
        h, w = self.target.shape[:2]
        return intrinsics_decode(IntrinsicsRaw.from_vector(self.intrinsics.values), w, h)

    def current_poses(self) -> list[Pose]:
        return [Pose.from_vector(p.values) for p in self.poses]

    def disparity_values(self) -> np.ndarray:
        return sigmoid(self.disparity.view())

    def depth(self) -> np.ndarray:
        return disp_to_depth(self.disparity_values(), self.d_min, self.d_max)

    def zero_grad(self) -> None:
        for b in self.blocks():
            b.zero_grad()

    def copy(self) -> "SceneState":
        def cp(b):
            return None if b is None else ParamBlock(b.values.copy(), b.tag, b.shape)

        return SceneState(self.target, list(self.supports), cp(self.disparity),
                          [cp(p) for p in self.poses], cp(self.intrinsics), self.camera,
                          self.d_min, self.d_max, self.frozen)


def _forward(state: SceneState, cfg: LossConfig, with_grad: bool):
    s = state.disparity_values()
    a = 1.0 / state.d_max
    b = 1.0 / state.d_min - a
    inv_depth = a + b * s
    cam = state.current_camera()
    poses = state.current_poses()
    warps = [warp_inverse_depth(img, inv_depth, cam, p, with_grad=with_grad)
             for (_, img), p in zip(state.supports, poses)]
    bundle = total_loss(state.target, [img for _, img in state.supports], warps, s, cfg)
    return s, b, cam, warps, bundle


def evaluate(state: SceneState, cfg: LossConfig | None = None) -> LossBundle:
    """Loss only, no gradients."""
    return _forward(state, cfg or LossConfig(), with_grad=False)[4]


def forward_backward(state: SceneState, cfg: LossConfig | None = None, terms: str = "all"):
    """Evaluate the objective and fill every block's ``grads``.

    ``terms`` selects ``"all"``, ``"photometric"`` (no smoothness) or
    ``"smoothness"`` (smoothness only).  The automask is recomputed here and
    treated as constant; gradients follow the per-pixel argmin frame only.
    Returns ``(loss, bundle)``; ``bundle`` is None for smoothness-only.
    """
    cfg = cfg or LossConfig()
    if terms not in ("all", "photometric", "smoothness"):
        raise ValueError(f"unknown terms selection {terms!r}")
    state.zero_grad()
    s = state.disparity_values()
    g_s = np.zeros_like(s)

    if terms == "smoothness":
        loss = _smooth_only(state, s, g_s)
        bundle = None
    else:
        if terms == "photometric":
            cfg = LossConfig(cfg.alpha_ssim, 0.0, cfg.ssim_c1, cfg.ssim_c2)
        s, b, cam, warps, bundle = _forward(state, cfg, with_grad=True)
        n = int(bundle.mask.sum())
        g_cam = np.zeros(4)
        g_inv = np.zeros_like(s)
        for k, (warp, term) in enumerate(zip(warps, bundle.warped)):
            sel = bundle.argmin == k
            if not sel.any():
                continue
            g_loss = sel / n
            g_img = photometric_backward(term, g_loss, cfg)
            gi, gp, gc = warp_backward(warp, g_img)
            g_inv += gi
            state.poses[k].grads += gp
            g_cam += gc
        g_s += b * g_inv
        if cfg.smoothness_weight > 0:
            g_s += cfg.smoothness_weight * smoothness_backward(s, state.target)
        if state.intrinsics is not None:
            h, w = state.target.shape[:2]
            jac = intrinsics_decode_jacobian(IntrinsicsRaw.from_vector(state.intrinsics.values), w, h)
            state.intrinsics.grads += g_cam * jac
        loss = bundle.total

    state.disparity.grads += (g_s * s * (1.0 - s)).reshape(-1)
    return loss, bundle


def _smooth_only(state, s, g_s):
    g_s += smoothness_backward(s, state.target)
    return smoothness_loss(s, state.target)


@dataclass
class OptimConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    iterations: int = 1000
    warmup_fraction: float = 0.05
    decay_fraction: float = 1.0 / 3.0
    decay_factor: float = 0.1
    lr_pose: float | None = None
    lr_intrinsics: float | None = None
    # blocks that receive decoupled weight decay; pose and intrinsics are physical
    # quantities, shrinking them toward zero would bias the camera and motion
    decay_tags: tuple = ("disparity",)

    def __post_init__(self):
        self.decay_tags = tuple(self.decay_tags)
        if self.lr <= 0:
            raise InputError("learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InputError("betas must lie in [0, 1)")
        if self.iterations < 0:
            raise InputError("iterations must be non-negative")
        if not 0 <= self.warmup_fraction <= 1 or not 0 <= self.decay_fraction <= 1:
            raise InputError("schedule fractions must lie in [0, 1]")

    def block_lr(self, tag: str) -> float:
        if tag == "pose" and self.lr_pose is not None:
            return self.lr_pose
        if tag == "intrinsics" and self.lr_intrinsics is not None:
            return self.lr_intrinsics
        return self.lr


def lr_factor(it: int, cfg: OptimConfig) -> float:
    """Linear warmup, constant, then the final fraction at ``decay_factor``."""
    n = cfg.iterations
    warm = math.ceil(cfg.warmup_fraction * n)
    if it < warm:
        return (it + 1) / warm
    if it >= n - int(cfg.decay_fraction * n):
        return cfg.decay_factor
    return 1.0


@dataclass
class AdamMoments:
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, block: ParamBlock) -> "AdamMoments":
        return cls(np.zeros_like(block.values), np.zeros_like(block.values))


def adam_step(block: ParamBlock, moments: AdamMoments, cfg: OptimConfig, t: int, lr: float | None = None) -> ParamBlock:
    """One AdamW update in place (``t`` counts from 1); returns the block."""
    lr = cfg.block_lr(block.tag) if lr is None else lr
    g = block.grads
    moments.m *= cfg.beta1
    moments.m += (1.0 - cfg.beta1) * g
    moments.v *= cfg.beta2
    moments.v += (1.0 - cfg.beta2) * g * g
    m_hat = moments.m / (1.0 - cfg.beta1**t)
    v_hat = moments.v / (1.0 - cfg.beta2**t)
    if cfg.weight_decay and block.tag in cfg.decay_tags:
        block.values *= 1.0 - lr * cfg.weight_decay
    block.values -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return block


@dataclass
class OptimResult:
    disparity_logits: np.ndarray
    depth: np.ndarray
    poses: list
    offsets: list
    camera: Camera
    loss_trace: np.ndarray
    mask_coverage_trace: np.ndarray
    state: SceneState = field(repr=False)

    @property
    def iterations(self) -> int:
        return len(self.loss_trace)


def solve(state: SceneState, cfg: OptimConfig | None = None, loss_cfg: LossConfig | None = None,
          callback=None) -> OptimResult:
    """Run AdamW on ``state`` in place for ``cfg.iterations`` steps."""
    cfg = cfg or OptimConfig()
    loss_cfg = loss_cfg or LossConfig()
    blocks = [b for b in state.blocks() if b.tag not in state.frozen]
    moments = [AdamMoments.zeros(b) for b in blocks]
    losses = np.empty(cfg.iterations)
    coverage = np.empty(cfg.iterations)
    for it in range(cfg.iterations):
        bad = [b.tag for b in state.blocks() if not np.all(np.isfinite(b.values))]
        if bad:
            raise NumericalError(f"non-finite parameters in {bad} at iteration {it}",
                                 snapshot={"iteration": it, "blocks": bad, "loss_trace": losses[:it].copy()})
        loss, bundle = forward_backward(state, loss_cfg)
        if not np.isfinite(loss) or any(not np.all(np.isfinite(b.grads)) for b in blocks):
            raise NumericalError(
                f"non-finite loss or gradient at iteration {it}",
                snapshot={
                    "iteration": it,
                    "loss": loss,
                    "camera": state.current_camera(),
                    "poses": state.current_poses(),
                    "loss_trace": losses[:it].copy(),
                },
            )
        losses[it] = loss
        coverage[it] = bundle.diagnostics["mask_coverage"]
        f = lr_factor(it, cfg)
        for b, m in zip(blocks, moments):
            adam_step(b, m, cfg, it + 1, lr=cfg.block_lr(b.tag) * f)
        if callback is not None:
            callback(it, loss, state)
        if it % 500 == 0:
            log.debug("iter %d loss %.6g coverage %.3f", it, loss, coverage[it])
    return OptimResult(
        disparity_logits=state.disparity.view().copy(),
        depth=state.depth(),
        poses=state.current_poses(),
        offsets=state.offsets,
        camera=state.current_camera(),
        loss_trace=losses,
        mask_coverage_trace=coverage,
        state=state,
    )


# -- finite-difference verification -------------------------------------------------


def _smoothness_parts(s, img, weight):
    ex, ey = _image_edges(img)
    d = s / s.mean()
    parts = []
    if ex.size:
        parts.append(weight * np.abs(d[:, 1:] - d[:, :-1]) * ex / ex.size)
    if ey.size:
        parts.append(weight * np.abs(d[1:] - d[:-1]) * ey / ey.size)
    return parts


def _probe(state: SceneState, cfg: LossConfig, terms: str):
    """Per-term loss contributions plus the discrete structure of the objective.

    The contributions sum to the objective; differencing them term by term keeps
    untouched pixels exactly cancelling.  The structure lists everything whose
    change makes the objective non-smooth: bilinear cells, clamping, validity,
    automask, argmin, signs inside |.|.
    """
    s = state.disparity_values()
    d = s / s.mean()
    sig = [np.sign(d[:, 1:] - d[:, :-1]), np.sign(d[1:] - d[:-1])]
    if terms == "smoothness":
        return _smoothness_parts(s, state.target, 1.0), sig
    if terms == "photometric":
        cfg = LossConfig(cfg.alpha_ssim, 0.0, cfg.ssim_c1, cfg.ssim_c2)
    _, _, _, warps, bundle = _forward(state, cfg, with_grad=False)
    n = int(bundle.mask.sum())
    best = np.min(np.stack([np.where(w.valid, t.loss, np.inf) for w, t in zip(warps, bundle.warped)]), axis=0)
    parts = [np.where(bundle.mask, best, 0.0) / n]
    if cfg.smoothness_weight > 0:
        parts += _smoothness_parts(s, state.target, cfg.smoothness_weight)
    sig += [bundle.mask, bundle.argmin]
    h, w = state.target.shape[:2]
    for warp, term in zip(warps, bundle.warped):
        x, y = warp.coords[..., 0], warp.coords[..., 1]
        sig += [
            warp.valid,
            (x >= 0) & (x <= w - 1),
            (y >= 0) & (y <= h - 1),
            np.minimum(np.floor(np.clip(x, 0, w - 1)), w - 2),
            np.minimum(np.floor(np.clip(y, 0, h - 1)), h - 2),
            np.sign(term.y - term.x),
        ]
    return parts, sig


def _same(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


@dataclass
class GradcheckReport:
    max_rel_error: float
    worst: tuple | None
    checked: int
    excluded: int
    per_block: dict
    entries: list = field(repr=False, default_factory=list)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.checked > 0 and self.max_rel_error < tol


def gradcheck(state: SceneState, cfg: LossConfig | None = None, blocks=("disparity", "pose", "intrinsics"),
              n_coords: int = 200, step: float = 1e-5, rng: Rng | None = None, terms: str = "all",
              abs_floor: float = 1e-9) -> GradcheckReport:
    """Central differences against the analytic gradient on a random coordinate subset.

    Disparity logits are sampled at random (``n_coords`` of them); every pose and
    intrinsics coordinate is checked.  Coordinates whose +-step perturbation
    changes any discrete structure (bilinear cell, clamping, validity, automask,
    argmin, sign of an absolute value) are excluded and counted.
    Relative error is ``|a - n| / max(|a|, |n|, abs_floor)``.
    """
    cfg = cfg or LossConfig()
    rng = rng or Rng(0)
    gen = rng.generator()
    forward_backward(state, cfg, terms)
    analytic = {id(b): b.grads.copy() for b in state.blocks()}
    _, base_sig = _probe(state, cfg, terms)

    coords = []
    for b in state.blocks():
        if b.tag not in blocks:
            continue
        if b.tag == "disparity":
            k = min(n_coords, len(b))
            idx = gen.choice(len(b), size=k, replace=False)
        else:
            idx = np.arange(len(b))
        coords += [(b, int(i)) for i in sorted(idx)]

    entries = []
    excluded = 0
    for b, i in coords:
        orig = b.values[i]
        b.values[i] = orig + step
        f_plus, sig_plus = _probe(state, cfg, terms)
        b.values[i] = orig - step
        f_minus, sig_minus = _probe(state, cfg, terms)
        b.values[i] = orig
        if not (_same(base_sig, sig_plus) and _same(base_sig, sig_minus)):
            excluded += 1
            continue
        num = sum(float(np.sum(p - m)) for p, m in zip(f_plus, f_minus)) / (2.0 * step)
        ana = analytic[id(b)][i]
        rel = abs(ana - num) / max(abs(ana), abs(num), abs_floor)
        entries.append((b.tag, i, ana, num, rel))

    per_block = {}
    for tag, _, _, _, rel in entries:
        per_block[tag] = max(per_block.get(tag, 0.0), rel)
    worst = max(entries, key=lambda e: e[4]) if entries else None
    return GradcheckReport(
        max_rel_error=worst[4] if worst else float("nan"),
        worst=worst,
        checked=len(entries),
        excluded=excluded,
        per_block=per_block,
        entries=entries,
    )


def perturbed_truth_state(target, supports, gt_depth, camera: Camera, poses: dict, gen: np.random.Generator,
                          logit_noise: float = 0.3, pose_noise: float = 0.003, intr_noise: float = 0.05,
                          learn_intrinsics: bool = True) -> SceneState:
    """State near the ground truth with Gaussian noise on every block (gradcheck fixture)."""
    st = SceneState.initial(target, supports, camera=None if learn_intrinsics else camera,
                            learn_intrinsics=learn_intrinsics, poses=[poses[k] for k, _ in supports])
    st.disparity.values[:] = logit(depth_to_disp(gt_depth, st.d_min, st.d_max)).ravel() \
        + gen.normal(0.0, logit_noise, len(st.disparity))
    for pb in st.poses:
        pb.values[:] = pb.values + gen.normal(0.0, pose_noise, 6)
    if learn_intrinsics:
        st.intrinsics.values[:] = IntrinsicsRaw.from_camera(camera).as_vector() + gen.normal(0.0, intr_noise, 4)
    return st


__all__ = [
    "SceneState",
    "OptimConfig",
    "OptimResult",
    "AdamMoments",
    "DegenerateBatchError",
    "forward_backward",
    "evaluate",
    "adam_step",
    "solve",
    "gradcheck",
    "GradcheckReport",
    "lr_factor",
    "INIT_POSE_NOISE",
    "perturbed_truth_state",
]
