"""Depth evaluation: scale/shift alignment, AbsRel, delta < 1.25, pointcloud F-score,
and cross-dataset rank / improvement aggregation.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import kernels
from .core import InputError, NumericalError
from .geometry import Camera, backproject

log = logging.getLogger(__name__)

DISP_CLAMP = 1e-6
EXACT_SEARCH_LIMIT = 10_000
MAX_CLOUD_POINTS = 100_000


class DegenerateAlignmentError(NumericalError):
    """Prediction has no variance on the valid set; scale and shift are not identifiable."""


# lower-is-better flag per metric
METRIC_ORIENTATION = {"absrel": True, "delta25": False, "fscore": False}


def valid_mask(gt, pred=None, cap: float | None = None) -> np.ndarray:
    gt = np.asarray(gt, dtype=np.float64)
    m = np.isfinite(gt) & (gt > 0)
    if cap is not None:
        m &= gt <= cap
    if pred is not None:
        pred = np.asarray(pred, dtype=np.float64)
        m &= np.isfinite(pred) & (pred > 0)
    return m


def _prep(pred, gt, valid):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise InputError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if valid is None:
        valid = valid_mask(gt, pred)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != gt.shape:
        raise InputError("validity mask shape mismatch")
    return pred, gt, valid


def align_lsq(pred, gt, valid=None) -> tuple[float, float, np.ndarray]:
    """Least-squares scale and shift in disparity space.

    Minimizes sum over valid pixels of (s / pred + b - 1 / gt)^2 and returns
    ``(s, b, aligned_depth)``; aligned disparity is clamped at 1e-6 before inversion.
    """
    pred, gt, valid = _prep(pred, gt, valid)
    if valid.sum() < 2:
        raise DegenerateAlignmentError("need at least two valid pixels for scale/shift alignment")
    x = 1.0 / pred[valid]
    y = 1.0 / gt[valid]
    # normal equations in centred form
    mx = x.mean()
    my = y.mean()
    dx = x - mx
    var = float(np.dot(dx, dx))
    if var <= 1e-12 * max(float(np.dot(x, x)), 1e-300):
        raise DegenerateAlignmentError("predicted disparity is constant on the valid set")
    s = float(np.dot(dx, y - my)) / var
    b = float(my - s * mx)
    with np.errstate(divide="ignore"):
        disp = s / pred + b
    aligned = 1.0 / np.maximum(disp, DISP_CLAMP)
    return s, b, aligned


def align_median(pred, gt, valid=None) -> tuple[float, np.ndarray]:
    """Scale prediction so its median depth matches the ground truth median."""
    pred, gt, valid = _prep(pred, gt, valid)
    if not valid.any():
        raise DegenerateAlignmentError("no valid pixels for median alignment")
    mp = float(np.median(pred[valid]))
    mg = float(np.median(gt[valid]))
    if mp == 0 or mg == 0:
        raise DegenerateAlignmentError("zero median depth")
    scale = mg / mp
    return scale, pred * scale


def absrel(pred, gt, valid=None) -> float:
    """Mean |gt - pred| / gt over valid pixels, in percent."""
    pred, gt, valid = _prep(pred, gt, valid)
    g = gt[valid]
    if np.any(g <= 0):
        raise InputError("ground truth must be positive inside the mask")
    return float(np.mean(np.abs(g - pred[valid]) / g) * 100.0)


def delta_acc(pred, gt, valid=None, threshold: float = 1.25) -> float:
    """Percentage of valid pixels with max(pred/gt, gt/pred) < threshold."""
    pred, gt, valid = _prep(pred, gt, valid)
    p, g = pred[valid], gt[valid]
    ratio = np.maximum(p / g, g / p)
    return float(np.mean(ratio < threshold) * 100.0)


def hits_bruteforce(query, ref, threshold: float, chunk: int = 2048) -> np.ndarray:
    """O(N*M) reference: same ``dx*dx + dy*dy + dz*dz <= t^2`` decision as the grid search."""
    query = np.asarray(query, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    out = np.zeros(len(query), dtype=bool)
    if len(ref) == 0:
        return out
    thr2 = threshold * threshold
    for i in range(0, len(query), chunk):
        q = query[i:i + chunk]
        dx = q[:, None, 0] - ref[None, :, 0]
        dy = q[:, None, 1] - ref[None, :, 1]
        dz = q[:, None, 2] - ref[None, :, 2]
        out[i:i + chunk] = np.any(dx * dx + dy * dy + dz * dz <= thr2, axis=1)
    return out


def radius_hits(query, ref, threshold: float, method: str = "auto") -> np.ndarray:
    """Whether each query point has a reference point within ``threshold``."""
    if method == "auto":
        method = "exact" if max(len(query), len(ref)) <= EXACT_SEARCH_LIMIT else "grid"
    if method == "exact":
        return hits_bruteforce(query, ref, threshold)
    if method == "grid":
        return kernels.radius_hits(np.asarray(query, dtype=np.float64), np.asarray(ref, dtype=np.float64),
                                   float(threshold))
    raise ValueError(f"unknown search method {method!r}")


def fscore_points(pred_pts, gt_pts, threshold: float = 0.10, method: str = "auto") -> tuple[float, float, float]:
    """(precision, recall, F) in percent for two pointclouds."""
    pred_pts = np.asarray(pred_pts, dtype=np.float64).reshape(-1, 3)
    gt_pts = np.asarray(gt_pts, dtype=np.float64).reshape(-1, 3)
    if len(pred_pts) == 0 or len(gt_pts) == 0:
        raise InputError("F-score needs non-empty pointclouds")
    p = float(radius_hits(pred_pts, gt_pts, threshold, method).mean())
    r = float(radius_hits(gt_pts, pred_pts, threshold, method).mean())
    f = 0.0 if p + r == 0 else 2.0 * p * r / (p + r)
    return p * 100.0, r * 100.0, f * 100.0


def _subsample(pts, limit, seed):
    if len(pts) <= limit:
        return pts
    idx = np.sort(np.random.default_rng(seed).choice(len(pts), size=limit, replace=False))
    return pts[idx]


def fscore(pred, gt, camera: Camera, valid=None, threshold: float = 0.10, method: str = "auto",
           max_points: int = MAX_CLOUD_POINTS, seed: int = 0) -> float:
    """F-score (percent) between backprojected prediction and ground-truth clouds."""
    pred, gt, valid = _prep(pred, gt, valid)
    pp = backproject(pred, camera)[valid]
    gp = backproject(gt, camera)[valid]
    pp = _subsample(pp, max_points, seed)
    gp = _subsample(gp, max_points, seed + 1)
    return fscore_points(pp, gp, threshold, method)[2]


@dataclass
class MetricsRecord:
    absrel: float
    delta25: float
    fscore: float
    dataset: str = ""
    n_images: int = 1

    def to_line(self, **extra) -> str:
        d = {**extra, **asdict(self)}
        return " ".join(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in d.items())

    @classmethod
    def from_line(cls, line: str) -> tuple["MetricsRecord", dict]:
        kv = parse_kv(line)
        try:
            rec = cls(float(kv.pop("absrel")), float(kv.pop("delta25")), float(kv.pop("fscore")),
                      kv.pop("dataset", ""), int(kv.pop("n_images", 1)))
        except KeyError as exc:
            raise InputError(f"metrics record lacks {exc.args[0]!r}: {line.strip()!r}") from None
        except ValueError as exc:
            raise InputError(f"bad metrics record {line.strip()!r}: {exc}") from None
        return rec, kv


def parse_kv(line: str) -> dict:
    out = {}
    for tok in line.split():
        if "=" not in tok:
            raise InputError(f"malformed key=value token {tok!r}")
        k, v = tok.split("=", 1)
        out[k] = v
    return out


def align(pred, gt, valid, mode: str) -> np.ndarray:
    if mode == "lsq":
        return align_lsq(pred, gt, valid)[2]
    if mode == "median":
        return align_median(pred, gt, valid)[1]
    if mode == "none":
        return np.asarray(pred, dtype=np.float64)
    raise InputError(f"unknown alignment mode {mode!r}")


def evaluate_pair(pred, gt, camera: Camera, mode: str = "lsq", cap: float | None = None,
                  threshold: float = 0.10, dataset: str = "") -> MetricsRecord:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    valid = valid_mask(gt, pred, cap)
    aligned = align(pred, gt, valid, mode)
    return MetricsRecord(
        absrel=absrel(aligned, gt, valid),
        delta25=delta_acc(aligned, gt, valid),
        fscore=fscore(aligned, gt, camera, valid, threshold),
        dataset=dataset,
    )


def mean_record(records, dataset: str = "") -> MetricsRecord:
    if not records:
        raise InputError("no records to average")
    return MetricsRecord(
        absrel=float(np.mean([r.absrel for r in records])),
        delta25=float(np.mean([r.delta25 for r in records])),
        fscore=float(np.mean([r.fscore for r in records])),
        dataset=dataset,
        n_images=len(records),
    )


def evaluate_dataset(pred_dir, gt_dir, mode: str, camera: Camera, cap: float | None = None,
                     threshold: float = 0.10, dataset: str = "", reader=None):
    """Align and score every ``*.pfm`` in ``gt_dir`` against the same name in ``pred_dir``.

    Returns ``(dataset_record, {name: per_image_record})``; the dataset record is
    the plain mean over images, so file order does not matter.
    """
    from .io import read_pfm

    reader = reader or read_pfm
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    gt_names = sorted(p.name for p in gt_dir.glob("*.pfm"))
    pred_names = sorted(p.name for p in pred_dir.glob("*.pfm"))
    if not gt_names:
        raise InputError(f"no .pfm files in {gt_dir}")
    if gt_names != pred_names:
        missing = sorted(set(gt_names) ^ set(pred_names))
        raise InputError(f"prediction and ground-truth manifests differ: {missing[:5]}")
    per_image = {}
    for name in gt_names:
        gt = reader(gt_dir / name)
        pred = reader(pred_dir / name)
        if gt.ndim == 3:
            gt = gt[..., 0]
        if pred.ndim == 3:
            pred = pred[..., 0]
        per_image[name] = evaluate_pair(pred, gt, camera, mode, cap, threshold, dataset)
    return mean_record(list(per_image.values()), dataset), per_image


def rank_aggregate(table: dict, lower_is_better: dict) -> dict:
    """Mean ordinal rank per method over metrics; ties share the mean rank.

    ``table`` maps method -> {metric: value}; every method must report every metric.
    """
    methods = list(table)
    if len(methods) < 2:
        raise InputError("ranking needs at least two methods")
    metrics = list(lower_is_better)
    ranks = np.zeros((len(methods), len(metrics)))
    for j, m in enumerate(metrics):
        vals = np.array([float(table[meth][m]) for meth in methods])
        key = vals if lower_is_better[m] else -vals
        ranks[:, j] = rankdata(key, method="average")
    return {meth: float(ranks[i].mean()) for i, meth in enumerate(methods)}


def improvement_aggregate(method: dict, baseline: dict, lower_is_better: dict) -> float:
    """Mean over metrics of (-1)^l (M - M0) / M0, in percent (positive = better)."""
    terms = []
    for m, lower in lower_is_better.items():
        m0 = float(baseline[m])
        if m0 == 0:
            raise InputError(f"baseline value for {m!r} is zero")
        sign = -1.0 if lower else 1.0
        terms.append(sign * (float(method[m]) - m0) / m0)
    return float(np.mean(terms) * 100.0)


MIN_ALIGN_PIXELS = 100


@dataclass
class DepthPair:
    """Prediction and ground truth with the validity mask used for scoring."""

    prediction: np.ndarray
    ground_truth: np.ndarray
    valid: np.ndarray | None = None
    cap: float | None = None

    def __post_init__(self):
        self.prediction = np.asarray(self.prediction, dtype=np.float64)
        self.ground_truth = np.asarray(self.ground_truth, dtype=np.float64)
        if self.prediction.shape != self.ground_truth.shape:
            raise InputError(f"prediction {self.prediction.shape} and ground truth "
                             f"{self.ground_truth.shape} differ")
        if self.valid is None:
            self.valid = valid_mask(self.ground_truth, self.prediction, self.cap)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.ground_truth.shape:
            raise InputError("validity mask shape mismatch")

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    def check_alignable(self, min_pixels: int = MIN_ALIGN_PIXELS) -> None:
        if self.n_valid < min_pixels:
            raise InputError(f"only {self.n_valid} valid pixels; alignment needs {min_pixels}")


@dataclass
class AggregateReport:
    """Cross-dataset summary for one method."""

    method: str
    rank: float
    improvement: float | None = None


def aggregate_datasets(tables: dict, lower_is_better: dict = METRIC_ORIENTATION,
                       baseline: str | None = None) -> list:
    """Mean rank (and improvement over ``baseline``) across datasets.

    ``tables`` maps dataset -> method -> {metric: value}.  Returns
    ``AggregateReport`` rows sorted best rank first.
    """
    if not tables:
        raise InputError("no datasets to aggregate")
    methods = sorted({m for t in tables.values() for m in t})
    for d, t in tables.items():
        if set(t) != set(methods):
            raise InputError(f"dataset {d!r} lacks results for {sorted(set(methods) - set(t))}")
    if baseline is not None and baseline not in methods:
        raise InputError(f"baseline {baseline!r} not among methods {methods}")
    ranks = {m: [] for m in methods}
    imps = {m: [] for m in methods}
    for t in tables.values():
        r = rank_aggregate(t, lower_is_better)
        for m in methods:
            ranks[m].append(r[m])
            if baseline is not None:
                imps[m].append(improvement_aggregate(t[m], t[baseline], lower_is_better))
    rows = [AggregateReport(m, float(np.mean(ranks[m])),
                            float(np.mean(imps[m])) if baseline is not None else None)
            for m in methods]
    return sorted(rows, key=lambda r: (r.rank, r.method))
