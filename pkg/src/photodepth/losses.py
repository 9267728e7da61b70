"""Self-supervision objective: SSIM + L1 photometric error, per-pixel minimum over
support frames, automasking of static pixels and edge-aware disparity smoothness.

Every loss term has a matching ``*_backward`` so the optimizer can run a full
reverse pass without an autodiff framework.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import DegenerateBatchError, InputError


@dataclass
class LossConfig:
    alpha_ssim: float = 0.85
    smoothness_weight: float = 1e-3
    ssim_c1: float = 0.01**2
    ssim_c2: float = 0.03**2

    def __post_init__(self):
        if not 0.0 <= self.alpha_ssim <= 1.0:
            raise InputError(f"alpha_ssim must be in [0, 1], got {self.alpha_ssim}")
        if self.smoothness_weight < 0:
            raise InputError("smoothness_weight must be non-negative")
        if self.ssim_c1 <= 0 or self.ssim_c2 <= 0:
            raise InputError("SSIM stabilizers must be positive")


def _check_pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    if y.ndim == 2:
        y = y[:, :, None]
    if x.shape != y.shape:
        raise InputError(f"shape mismatch {x.shape} vs {y.shape}")
    return x, y


def _box1d(a, axis):
    if a.shape[axis] == 1:
        return a.copy()
    pad = [(0, 0)] * a.ndim
    pad[axis] = (1, 1)
    p = np.pad(a, pad, mode="reflect")
    n = a.shape[axis]
    s0 = np.take(p, np.arange(0, n), axis=axis)
    s1 = np.take(p, np.arange(1, n + 1), axis=axis)
    s2 = np.take(p, np.arange(2, n + 2), axis=axis)
    return (s0 + s1 + s2) / 3.0


def _box1d_adjoint(g, axis):
    if g.shape[axis] == 1:
        return g.copy()
    g = np.moveaxis(g, axis, 0)
    n = g.shape[0]
    out = g / 3.0
    out[1:] += g[:-1] / 3.0
    out[:-1] += g[1:] / 3.0
    # reflected taps at both borders
    out[1] += g[0] / 3.0
    out[n - 2] += g[n - 1] / 3.0
    return np.moveaxis(out, 0, axis)


def box3(a):
    """3x3 mean filter over the first two axes with reflect padding."""
    return _box1d(_box1d(a, 0), 1)


def box3_adjoint(g):
    return _box1d_adjoint(_box1d_adjoint(g, 1), 0)


@dataclass
class _SSIMCache:
    mu_x: np.ndarray
    mu_y: np.ndarray
    n1: np.ndarray
    n2: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    s: np.ndarray


# second moments are taken about mid-grey: same values, less cancellation
_SHIFT = 0.5


def _ssim(x, y, c1, c2):
    mu_x = box3(x)
    mu_y = box3(y)
    mu_xy = mu_x * mu_y
    xs = x - _SHIFT
    ys = y - _SHIFT
    mxs = mu_x - _SHIFT
    mys = mu_y - _SHIFT
    sxx = box3(xs * xs) - mxs * mxs
    syy = box3(ys * ys) - mys * mys
    sxy = box3(xs * ys) - mxs * mys
    n1 = 2.0 * mu_xy + c1
    n2 = 2.0 * sxy + c2
    d1 = mu_x * mu_x + mu_y * mu_y + c1
    d2 = sxx + syy + c2
    s = (n1 * n2) / (d1 * d2)
    return s, _SSIMCache(mu_x, mu_y, n1, n2, d1, d2, s)


def ssim_field(x, y, c1: float = 0.01**2, c2: float = 0.03**2) -> np.ndarray:
    """Per-pixel, per-channel SSIM from 3x3 box statistics; shape (H, W, C)."""
    x, y = _check_pair(x, y)
    return _ssim(x, y, c1, c2)[0]


def _ssim_backward_y(x, y, cache: _SSIMCache, g_s):
    """Gradient of sum(g_s * SSIM) w.r.t. ``y`` (``x`` held fixed)."""
    c = cache
    den = c.d1 * c.d2
    # S depends on y through mu_y, E[ys^2] and E[xs ys] (moments about _SHIFT)
    dn1 = 2.0 * c.mu_x
    dn2 = -2.0 * (c.mu_x - _SHIFT)
    dd1 = 2.0 * c.mu_y
    dd2 = -2.0 * (c.mu_y - _SHIFT)
    ds_dmu = (dn1 * c.n2 + c.n1 * dn2) / den - c.s * (dd1 * c.d2 + c.d1 * dd2) / den
    ds_dexy = 2.0 * c.n1 / den
    ds_deyy = -c.s / c.d2
    g_mu = box3_adjoint(g_s * ds_dmu)
    g_exy = box3_adjoint(g_s * ds_dexy)
    g_eyy = box3_adjoint(g_s * ds_deyy)
    return g_mu + (x - _SHIFT) * g_exy + 2.0 * (y - _SHIFT) * g_eyy


@dataclass
class PhotometricTerm:
    """Per-pixel photometric loss plus what the backward pass needs."""

    loss: np.ndarray
    x: np.ndarray
    y: np.ndarray
    ssim: _SSIMCache = field(repr=False)


def photometric_term(x, y, cfg: LossConfig) -> PhotometricTerm:
    x, y = _check_pair(x, y)
    s, cache = _ssim(x, y, cfg.ssim_c1, cfg.ssim_c2)
    nc = x.shape[2]
    dssim = (1.0 - s).sum(axis=2) / (2.0 * nc)
    l1 = np.abs(x - y).sum(axis=2) / nc
    loss = cfg.alpha_ssim * dssim + (1.0 - cfg.alpha_ssim) * l1
    # rounding can leave 1 - SSIM a few ulps below zero
    return PhotometricTerm(np.maximum(loss, 0.0), x, y, cache)


def photometric_loss(x, y, cfg: LossConfig | None = None) -> np.ndarray:
    """alpha * (1 - SSIM) / 2 + (1 - alpha) * |x - y|, channel-averaged; shape (H, W)."""
    return photometric_term(x, y, cfg or LossConfig()).loss


def photometric_backward(term: PhotometricTerm, g_loss, cfg: LossConfig) -> np.ndarray:
    """Gradient of sum(g_loss * loss) w.r.t. the second image."""
    nc = term.x.shape[2]
    g = np.asarray(g_loss, dtype=np.float64)[:, :, None]
    g_s = np.broadcast_to(-cfg.alpha_ssim / (2.0 * nc) * g, term.x.shape)
    g_y = _ssim_backward_y(term.x, term.y, term.ssim, g_s)
    g_y += (1.0 - cfg.alpha_ssim) / nc * g * np.sign(term.y - term.x)
    return g_y


def min_reconstruction(per_support_losses, valid_masks=None):
    """Mean over pixels of the per-pixel minimum across support frames.

    Invalid samples count as +inf; a pixel invalid in every support is dropped.
    Ties go to the earliest frame in the list.  Returns
    ``(value, argmin, retained)`` with ``argmin == -1`` on dropped pixels.
    """
    if len(per_support_losses) == 0:
        raise InputError("min_reconstruction needs at least one support frame")
    stack = np.stack([np.asarray(l, dtype=np.float64) for l in per_support_losses])
    if valid_masks is not None:
        vm = np.stack([np.asarray(m, dtype=bool) for m in valid_masks])
        if vm.shape != stack.shape:
            raise InputError("validity masks must match loss fields")
        stack = np.where(vm, stack, np.inf)
    best = stack.min(axis=0)
    argmin = stack.argmin(axis=0)
    retained = np.isfinite(best)
    argmin = np.where(retained, argmin, -1)
    if not retained.any():
        raise DegenerateBatchError("no pixel is valid in any support frame")
    return float(best[retained].mean()), argmin, retained


def _masked_min(losses, valid_masks):
    stack = np.stack(losses)
    if valid_masks is not None:
        stack = np.where(np.stack(valid_masks), stack, np.inf)
    return stack.min(axis=0), stack.argmin(axis=0)


def automask_from_losses(warped_losses, identity_losses, valid_masks=None) -> np.ndarray:
    """[min_k loss(target, warped_k) < min_k loss(target, support_k)], strict."""
    warped_min, _ = _masked_min(warped_losses, valid_masks)
    ident_min, _ = _masked_min(identity_losses, None)
    return warped_min < ident_min


def automask(target, supports, synthesized, cfg: LossConfig | None = None, valid_masks=None) -> np.ndarray:
    cfg = cfg or LossConfig()
    if len(supports) != len(synthesized) or not supports:
        raise InputError("need matching, non-empty support and synthesized lists")
    warped = [photometric_loss(target, s, cfg) for s in synthesized]
    ident = [photometric_loss(target, s, cfg) for s in supports]
    return automask_from_losses(warped, ident, valid_masks)


def _image_edges(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    ex = np.exp(-np.abs(img[:, 1:] - img[:, :-1]).mean(axis=2))
    ey = np.exp(-np.abs(img[1:] - img[:-1]).mean(axis=2))
    return ex, ey


def smoothness_loss(disp, img) -> float:
    """Edge-aware first-order smoothness of mean-normalized disparity."""
    disp = np.asarray(disp, dtype=np.float64)
    if disp.shape != np.asarray(img).shape[:2]:
        raise InputError(f"disparity {disp.shape} and image {np.asarray(img).shape} differ")
    if not np.all(np.isfinite(disp)):
        raise InputError("disparity contains non-finite values")
    ex, ey = _image_edges(img)
    d = disp / disp.mean()
    total = 0.0
    if ex.size:
        total += float(np.mean(np.abs(d[:, 1:] - d[:, :-1]) * ex))
    if ey.size:
        total += float(np.mean(np.abs(d[1:] - d[:-1]) * ey))
    return total


def smoothness_backward(disp, img) -> np.ndarray:
    """Gradient of ``smoothness_loss`` w.r.t. raw disparity."""
    disp = np.asarray(disp, dtype=np.float64)
    ex, ey = _image_edges(img)
    m = disp.mean()
    d = disp / m
    g_d = np.zeros_like(d)
    if ex.size:
        gx = np.sign(d[:, 1:] - d[:, :-1]) * ex / ex.size
        g_d[:, 1:] += gx
        g_d[:, :-1] -= gx
    if ey.size:
        gy = np.sign(d[1:] - d[:-1]) * ey / ey.size
        g_d[1:] += gy
        g_d[:-1] -= gy
    return g_d / m - np.sum(g_d * disp) / (m * m * disp.size)


@dataclass
class LossBundle:
    """Outputs of ``total_loss``: scalar value and per-pixel diagnostics."""

    total: float
    reconstruction: float
    smoothness: float
    mask: np.ndarray
    argmin: np.ndarray
    warped: list = field(repr=False, default_factory=list)
    diagnostics: dict = field(default_factory=dict)


def total_loss(target, supports, warps, disparity, cfg: LossConfig | None = None) -> LossBundle:
    """Masked minimum reconstruction plus weighted smoothness.

    ``supports`` are the raw support images (for automasking), ``warps`` the
    matching ``WarpResult`` objects, ``disparity`` the (0, 1) disparity field.
    Raises ``DegenerateBatchError`` when no pixel survives masking.
    """
    cfg = cfg or LossConfig()
    if not warps or len(warps) != len(supports):
        raise InputError("need one warp per support frame")
    warped = [photometric_term(target, w.synthesized, cfg) for w in warps]
    ident = [photometric_loss(target, s, cfg) for s in supports]
    valid = [w.valid for w in warps]
    best, argmin = _masked_min([t.loss for t in warped], valid)
    ident_min, _ = _masked_min(ident, None)
    mask = best < ident_min
    n = int(mask.sum())
    coverage = n / mask.size
    if n == 0:
        raise DegenerateBatchError(
            "automasking removed every pixel", snapshot={"mask_coverage": coverage}
        )
    recon = float(best[mask].mean())
    smooth = smoothness_loss(disparity, target) if cfg.smoothness_weight > 0 else 0.0
    argmin = np.where(mask, argmin, -1)
    share = [float(np.sum(argmin == k)) / n for k in range(len(warps))]
    return LossBundle(
        total=recon + cfg.smoothness_weight * smooth,
        reconstruction=recon,
        smoothness=smooth,
        mask=mask,
        argmin=argmin,
        warped=warped,
        diagnostics={"mask_coverage": coverage, "argmin_share": share},
    )
