"""File formats: PFM, sequence manifests, run configs, frame subsampling and depth colorization."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .augment import AugConfig
from .core import InputError
from .geometry import Camera, Pose
from .losses import LossConfig
from .optim import OptimConfig

BLOCK = 250
KEEP = 100


# ---------------------------------------------------------------- PFM

def write_pfm(path, data, little_endian: bool = True) -> None:
    """Write a float32 PFM (1 or 3 channels); rows are stored bottom-up as the format requires."""
    arr = np.asarray(data)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    if arr.ndim == 2:
        tag = b"Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        tag = b"PF"
    else:
        raise InputError(f"PFM stores 1 or 3 channels, got shape {arr.shape}")
    h, w = arr.shape[:2]
    dtype = "<f4" if little_endian else ">f4"
    payload = np.ascontiguousarray(arr[::-1].astype(dtype))
    scale = -1.0 if little_endian else 1.0
    with open(path, "wb") as fh:
        fh.write(tag + b"\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(f"{scale}\n".encode())
        fh.write(payload.tobytes())


def _read_token(fh) -> bytes:
    tok = b""
    while True:
        c = fh.read(1)
        if not c:
            break
        if c.isspace():
            if tok:
                break
            continue
        tok += c
    return tok


def read_pfm(path) -> np.ndarray:
    """Read a PFM as a top-down float32 array (H, W) or (H, W, 3)."""
    with open(path, "rb") as fh:
        tag = _read_token(fh)
        if tag not in (b"PF", b"Pf"):
            raise InputError(f"{path}: not a PFM file (magic {tag!r})")
        try:
            w = int(_read_token(fh))
            h = int(_read_token(fh))
            scale = float(_read_token(fh))
        except ValueError as exc:
            raise InputError(f"{path}: malformed PFM header") from exc
        if w <= 0 or h <= 0 or scale == 0 or not np.isfinite(scale):
            raise InputError(f"{path}: malformed PFM header")
        ch = 3 if tag == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        raw = fh.read()
    n = w * h * ch
    if len(raw) < 4 * n:
        raise InputError(f"{path}: truncated PFM payload ({len(raw)} of {4 * n} bytes)")
    arr = np.frombuffer(raw[: 4 * n], dtype=dtype).reshape((h, w, ch) if ch == 3 else (h, w))
    return arr[::-1].astype(np.float32)


# ---------------------------------------------------------------- images

def read_image(path) -> np.ndarray:
    """HxWx3 float64 in [0, 1] from PNG/JPEG (8-bit) or PFM (float)."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"missing image {path}")
    if path.suffix.lower() == ".pfm":
        img = read_pfm(path).astype(np.float64)
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=2)
        return img
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise InputError(f"unreadable image {path}: {exc}") from exc
    return arr


def write_png(path, image) -> None:
    arr = np.asarray(image, dtype=np.float64)
    u8 = np.clip(np.floor(arr * 255.0 + 0.5), 0, 255).astype(np.uint8)
    PILImage.fromarray(u8).save(path)


# ---------------------------------------------------------------- subsampling

def subsample_frames(frames, block: int = BLOCK, keep: int = KEEP) -> list:
    """Keep the first ``keep`` frames of every consecutive ``block``; accepts a count or a sequence."""
    items = list(range(frames)) if isinstance(frames, (int, np.integer)) else list(frames)
    return [f for i, f in enumerate(items) if i % block < keep]


# ---------------------------------------------------------------- colorize

# sampled perceptual (viridis-like) map, luminance increasing along the table
_CMAP = np.array([
    [0.267, 0.005, 0.329], [0.283, 0.141, 0.458], [0.254, 0.265, 0.530],
    [0.207, 0.372, 0.553], [0.164, 0.471, 0.558], [0.128, 0.567, 0.551],
    [0.135, 0.659, 0.518], [0.267, 0.749, 0.441], [0.478, 0.821, 0.318],
    [0.741, 0.873, 0.150], [0.993, 0.906, 0.144],
])


def colormap(t) -> np.ndarray:
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
    pos = t * (len(_CMAP) - 1)
    i = np.minimum(np.floor(pos).astype(int), len(_CMAP) - 2)
    f = (pos - i)[..., None]
    return _CMAP[i] * (1 - f) + _CMAP[i + 1] * f


def colorize_depth(depth, lo_pct: float = 5.0, hi_pct: float = 95.0) -> np.ndarray:
    """Map depth to RGB via disparity clipped at its 5th/95th percentiles; near is bright."""
    d = np.asarray(depth, dtype=np.float64)
    if d.size == 0:
        raise InputError("empty depth map")
    ok = np.isfinite(d) & (d > 0)
    disp = np.zeros_like(d)
    disp[ok] = 1.0 / d[ok]
    if not ok.any():
        return colormap(np.zeros_like(d))
    lo, hi = np.percentile(disp[ok], [lo_pct, hi_pct])
    t = np.zeros_like(d) if hi <= lo else (np.clip(disp, lo, hi) - lo) / (hi - lo)
    t[~ok] = 0.0
    return colormap(t)


# ---------------------------------------------------------------- manifest

@dataclass
class SequenceManifest:
    """Line-oriented sequence description.

    Records (one per line, ``#`` starts a comment)::

        fps 10
        camera fx fy cx cy W H      | learn
        frame <path>                 (relative to the manifest directory)
        target <index into retained frames>
        offsets -1 1
        pose <offset> rx ry rz tx ty tz
        gt_depth <path>
    """

    frames: list
    camera: Camera | None = None
    learn: bool = False
    fps: float = 10.0
    target: int | None = None
    offsets: tuple = (-1, 1)
    poses: dict = field(default_factory=dict)
    gt_depth: str | None = None
    root: Path = Path(".")

    def __post_init__(self):
        if self.camera is None and not self.learn:
            raise InputError("manifest needs a camera record or 'learn'")
        if 0 in self.offsets:
            raise InputError("support offset 0 is the target itself")

    @property
    def retained(self) -> list:
        return subsample_frames(len(self.frames))

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.root / p

    def target_index(self) -> int:
        kept = self.retained
        if self.target is not None:
            t = self.target
        else:
            t = len(kept) // 2
        if not 0 <= t < len(kept):
            raise InputError(f"target {t} outside retained frames")
        return t

    def load_frames(self):
        """(target image, [(offset, support image)]) using retained-frame indexing."""
        kept = self.retained
        t = self.target_index()
        target = read_image(self.path(self.frames[kept[t]]))
        supports = []
        for k in self.offsets:
            j = t + k
            if not 0 <= j < len(kept):
                raise InputError(f"support offset {k} leaves the sequence")
            supports.append((k, read_image(self.path(self.frames[kept[j]]))))
        return target, supports

    def to_text(self) -> str:
        lines = [f"fps {self.fps!r}"]
        lines.append("camera learn" if self.learn and self.camera is None else "camera " + self.camera.to_text())
        if self.learn and self.camera is not None:
            lines.append("learn")
        for f in self.frames:
            lines.append(f"frame {f}")
        if self.target is not None:
            lines.append(f"target {self.target}")
        lines.append("offsets " + " ".join(str(k) for k in self.offsets))
        for k in sorted(self.poses):
            lines.append(f"pose {k} " + self.poses[k].to_text())
        if self.gt_depth is not None:
            lines.append(f"gt_depth {self.gt_depth}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def parse(cls, text: str, root=".") -> "SequenceManifest":
        frames, poses = [], {}
        camera, learn, fps, target, offsets, gt = None, False, 10.0, None, (-1, 1), None
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, rest = line.partition(" ")
            rest = rest.strip()
            try:
                if key == "fps":
                    fps = float(rest)
                elif key == "camera":
                    if rest == "learn":
                        learn = True
                    else:
                        camera = Camera.from_text(rest)
                elif key == "learn":
                    learn = True
                elif key == "frame":
                    if not rest:
                        raise ValueError("empty path")
                    frames.append(rest)
                elif key == "target":
                    target = int(rest)
                elif key == "offsets":
                    offsets = tuple(int(t) for t in rest.split())
                elif key == "pose":
                    k, _, p = rest.partition(" ")
                    poses[int(k)] = Pose.from_text(p)
                elif key == "gt_depth":
                    gt = rest
                else:
                    raise ValueError(f"unknown record {key!r}")
            except (ValueError, InputError) as exc:
                raise InputError(f"manifest line {n}: {exc}") from exc
        if not frames:
            raise InputError("manifest lists no frames")
        if fps <= 0:
            raise InputError("fps must be positive")
        return cls(frames, camera, learn, fps, target, offsets, poses, gt, Path(root))

    @classmethod
    def load(cls, path) -> "SequenceManifest":
        path = Path(path)
        if not path.exists():
            raise InputError(f"missing manifest {path}")
        return cls.parse(path.read_text(), root=path.parent)


# ---------------------------------------------------------------- run config

@dataclass
class EvalConfig:
    align: str = "lsq"
    depth_cap: float | None = None
    fscore_threshold: float = 0.10

    def __post_init__(self):
        if self.align not in ("lsq", "median", "none"):
            raise InputError(f"unknown alignment {self.align!r}")
        if self.depth_cap is not None and self.depth_cap <= 0:
            raise InputError("depth cap must be positive")
        if self.fscore_threshold <= 0:
            raise InputError("F-score threshold must be positive")


@dataclass
class RunConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    augment: AugConfig = field(default_factory=AugConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"].pop("table", None)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise InputError("config root must be an object")
        sections = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(sections)
        if unknown:
            raise InputError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, f in sections.items():
            sub = d.get(name, {})
            sub_cls = f.default_factory().__class__
            allowed = {g.name for g in fields(sub_cls)} - {"table"}
            bad = set(sub) - allowed
            if bad:
                raise InputError(f"unknown keys in [{name}]: {sorted(bad)}")
            vals = {k: tuple(v) if isinstance(v, list) else v for k, v in sub.items()}
            try:
                kwargs[name] = sub_cls(**vals)
            except TypeError as exc:
                raise InputError(f"bad [{name}] section: {exc}") from exc
        return cls(**kwargs)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InputError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise InputError(f"missing config {path}")
        return cls.from_json(path.read_text())
