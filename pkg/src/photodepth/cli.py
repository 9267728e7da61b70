"""Command-line entry point: ``photodepth <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import augment, evaluation, io, kernels, synth
from .core import InputError, NumericalError, Rng
from .geometry import Camera, Pose
from .losses import LossConfig
from .optim import INIT_POSE_NOISE, OptimConfig, SceneState, gradcheck, perturbed_truth_state, solve

log = logging.getLogger("photodepth")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# per-scene direct optimization settings (see README, "optimize")
SCENE_LR = 0.05
SCENE_LR_POSE = 1e-3
SCENE_SMOOTHNESS = 0.05
SCENE_ITERATIONS = 3000


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _camera_arg(text: str) -> Camera:
    p = Path(text)
    if p.exists():
        text = p.read_text()
    return Camera.from_text(text)


# ---------------------------------------------------------------- synth

def _scene(kind: str, seed: int, height: int, width: int):
    rng = Rng(seed)
    if kind == "static":
        return synth.make_scene(rng, synth.static_spec(height, width))
    if kind == "step":
        return synth.make_scene(rng, synth.step_spec(height, width))
    scene = synth.make_scene(rng, synth.two_plane_spec(height, width))
    if kind == "occluder":
        scene = synth.add_dynamic_occluder(rng.child(1), scene, occluder_spec(scene))
    return scene


def occluder_spec(scene) -> synth.OccluderSpec:
    """Camera-comoving patch in front of the planes, roughly a fifth of the view wide."""
    cam = scene.camera
    z = 0.25
    return synth.OccluderSpec(center=((0.7 * cam.width - cam.cx) / cam.fx * z, (0.5 * cam.height - cam.cy) / cam.fy * z, z),
                              half_size=(0.1 * cam.width / cam.fx * z, 0.15 * cam.height / cam.fy * z),
                              camera_relative=True)


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = _scene(args.kind, args.seed, args.height, args.width)
    target, supports = synth.scene_frames(scene)
    offsets = sorted(supports)
    order = sorted([0, *offsets])
    names = []
    for k in order:
        fr = target if k == 0 else supports[k]
        name = f"frame_{k:+d}.pfm"
        io.write_pfm(out / name, fr.image)
        io.write_png(out / f"frame_{k:+d}.png", fr.image)
        names.append(name)
    io.write_pfm(out / "gt_depth.pfm", target.gt_depth)
    (out / "camera.txt").write_text(scene.camera.to_text() + "\n")
    if scene.occluders:
        masks = synth.occlusion_masks(scene)
        io.write_png(out / "occluder_mask.png", np.repeat(masks[0][..., None].astype(float), 3, axis=2))
    man = io.SequenceManifest(names, camera=scene.camera, fps=10.0, target=order.index(0),
                              offsets=tuple(offsets), poses={k: scene.frames[k] for k in offsets},
                              gt_depth="gt_depth.pfm")
    man.save(out / "manifest.txt")
    print(f"wrote {len(order)} frames to {out} kind={args.kind} seed={args.seed}")
    return EXIT_OK


# ---------------------------------------------------------------- optimize

def cmd_optimize(args) -> int:
    from threadpoolctl import threadpool_limits

    man = io.SequenceManifest.load(args.manifest)
    cfg = io.RunConfig.load(args.config) if args.config else io.RunConfig(
        loss=LossConfig(smoothness_weight=SCENE_SMOOTHNESS),
        optim=OptimConfig(lr=SCENE_LR, lr_pose=SCENE_LR_POSE, iterations=SCENE_ITERATIONS))
    optim_cfg = cfg.optim
    overrides = {}
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if args.lr is not None:
        overrides["lr"] = args.lr
    if args.lr_pose is not None:
        overrides["lr_pose"] = args.lr_pose
    if overrides:
        optim_cfg = OptimConfig(**{**optim_cfg.__dict__, **overrides})
    loss_cfg = cfg.loss
    if args.smoothness is not None:
        loss_cfg = LossConfig(**{**loss_cfg.__dict__, "smoothness_weight": args.smoothness})

    target, supports = man.load_frames()
    learn = args.learn_intrinsics or man.camera is None
    poses = None
    if man.poses:
        missing = [k for k, _ in supports if k not in man.poses]
        if missing and args.fix_pose:
            raise InputError(f"--fix-pose needs pose records for offsets {missing}")
        poses = [man.poses.get(k, Pose()) for k, _ in supports]
    elif args.fix_pose:
        raise InputError("--fix-pose needs pose records in the manifest")
    frozen = {"pose"} if args.fix_pose else set()
    # without pose records the start is identity, which the strict automask cannot score
    jitter = INIT_POSE_NOISE if poses is None else 0.0
    state = SceneState.initial(target, supports, camera=None if learn else man.camera,
                               learn_intrinsics=learn, poses=poses, frozen=frozen,
                               pose_noise=jitter, rng=Rng(args.seed))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    with threadpool_limits(limits=args.threads):
        res = solve(state, optim_cfg, loss_cfg)
    elapsed = time.perf_counter() - t0

    io.write_pfm(out / "depth.pfm", res.depth)
    io.write_pfm(out / "disparity.pfm", res.state.disparity_values())
    io.write_png(out / "depth.png", io.colorize_depth(res.depth))
    (out / "camera.txt").write_text(res.camera.to_text() + "\n")
    (out / "poses.txt").write_text("".join(f"{k} {p.to_text()}\n" for k, p in zip(res.offsets, res.poses)))
    with open(out / "trace.txt", "w") as fh:
        for i, (l, c) in enumerate(zip(res.loss_trace, res.mask_coverage_trace)):
            fh.write(f"iter={i} loss={float(l)!r} mask_coverage={float(c)!r}\n")
    final = float(res.loss_trace[-1]) if len(res.loss_trace) else float("nan")
    print(f"iterations={optim_cfg.iterations} final_loss={final!r} "
          f"seconds={elapsed:.1f} camera=\"{res.camera.to_text()}\"")
    return EXIT_OK


# ---------------------------------------------------------------- eval

def cmd_eval(args) -> int:
    cam = _camera_arg(args.camera) if args.camera else None
    if cam is None:
        cpath = Path(args.gt) / "camera.txt"
        if not cpath.exists():
            raise InputError("eval needs --camera (or camera.txt in the ground-truth directory)")
        cam = Camera.from_text(cpath.read_text())
    record, per_image = evaluation.evaluate_dataset(args.pred, args.gt, args.align, cam, args.cap,
                                                    args.threshold, args.dataset)
    lines = [r.to_line(image=name, method=args.method) for name, r in per_image.items()]
    summary = record.to_line(method=args.method, align=args.align)
    for line in lines:
        print(line)
    # percentages to 4 decimals; the key=value records keep full precision
    print(f"AbsRel={record.absrel:.4f} delta25={record.delta25:.4f} F={record.fscore:.4f}")
    if args.out:
        Path(args.out).write_text(summary + "\n")
    return EXIT_OK


# ---------------------------------------------------------------- gradcheck

def cmd_gradcheck(args) -> int:
    scene = synth.make_scene(Rng(args.seed), synth.two_plane_spec(args.height, args.width))
    target, supports = synth.scene_frames(scene)
    st = perturbed_truth_state(target.image, [(k, f.image) for k, f in supports.items()], target.gt_depth,
                               scene.camera, scene.frames, np.random.default_rng(args.seed))
    rep = gradcheck(st, n_coords=args.coords, step=args.step, rng=Rng(args.seed), terms=args.terms)
    per = " ".join(f"{k}={v:.3e}" for k, v in sorted(rep.per_block.items()))
    print(f"max_rel_error={rep.max_rel_error:.3e} checked={rep.checked} excluded={rep.excluded} {per}")
    if rep.worst is not None:
        tag, i, a, n, r = rep.worst
        print(f"worst block={tag} index={i} analytic={a:.6e} numeric={n:.6e}")
    return EXIT_OK if rep.passed(args.tol) else EXIT_NUMERIC


# ---------------------------------------------------------------- augment-preview

def cmd_augment_preview(args) -> int:
    if args.image:
        img = io.read_image(args.image)
        if not args.camera:
            raise InputError("--camera is required with --image")
        cam = _camera_arg(args.camera)
    else:
        h, w = args.size
        scene = synth.make_scene(Rng(args.seed), synth.two_plane_spec(h, w))
        img = synth.render_view(scene, 0).image
        cam = scene.camera
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = augment.AugConfig(ar_prob=args.ar_prob)
    lines = []
    for i in range(args.n):
        rng = Rng(args.seed, (i,))
        a_img, a_cam, _, ar = augment.ar_aug(img, cam, None, rng.child(0), cfg)
        frames, _, a_cam, fj = augment.flip_and_jitter([a_img], rng.child(1), cfg, camera=a_cam)
        name = f"sample_{i:04d}.png"
        io.write_png(out / name, frames[0])
        if ar is None:
            desc = "ratio=none crop=none"
        else:
            rh, rw = cfg.table.ratios[ar.ratio_index]
            desc = f"ratio={rw}:{rh} crop={','.join(str(v) for v in ar.crop)}"
        lines.append(f"file={name} seed={args.seed} index={i} {desc} size={a_img.shape[0]}x{a_img.shape[1]} "
                     f"flip={int(fj.flipped)} camera=\"{a_cam.to_text()}\"")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    print(f"wrote {args.n} samples to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- benchmark

def _load_metric_files(paths):
    rows = []
    for p in paths:
        p = Path(p)
        if not p.exists():
            raise InputError(f"missing metrics file {p}")
        for line in p.read_text().splitlines():
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            rec, extra = evaluation.MetricsRecord.from_line(line)
            if "image" in extra:
                continue
            rows.append((extra.get("method", p.stem), rec.dataset or "default", rec))
    if not rows:
        raise InputError("no metric records found")
    return rows


def cmd_benchmark(args) -> int:
    rows = _load_metric_files(args.metrics)
    orient = evaluation.METRIC_ORIENTATION
    tables = {}
    for m, d, rec in rows:
        tables.setdefault(d, {})[m] = {k: getattr(rec, k) for k in orient}
    reports = evaluation.aggregate_datasets(tables, orient, args.baseline)
    header = ["method", "rank"] + (["improvement"] if args.baseline else [])
    out_rows = [[r.method, r.rank] + ([r.improvement] if args.baseline else []) for r in reports]
    print(" ".join(f"{h:>12}" for h in header))
    for r in out_rows:
        print(" ".join(f"{v:>12}" if isinstance(v, str) else f"{v:>12.4f}" for v in r))
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(out_rows)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="photodepth", description="Self-supervised photometric depth toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="render an oracle plane scene to a directory")
    s.add_argument("--out", required=True)
    s.add_argument("--kind", choices=("two-plane", "step", "static", "occluder"), default="two-plane")
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--width", type=int, default=96)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("optimize", help="recover depth (and pose / intrinsics) for a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="JSON run config")
    s.add_argument("--learn-intrinsics", action="store_true")
    s.add_argument("--fix-pose", action="store_true", help="hold poses at the manifest records")
    s.add_argument("--iterations", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--lr-pose", type=float, help="step size for pose blocks (default 1e-3)")
    s.add_argument("--smoothness", type=float)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_optimize)

    s = sub.add_parser("eval", help="align and score predicted depth maps")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--align", choices=("lsq", "median", "none"), default="lsq")
    s.add_argument("--camera", help="'fx fy cx cy W H' or a file containing it")
    s.add_argument("--cap", type=float, help="max ground-truth depth counted as valid")
    s.add_argument("--threshold", type=float, default=0.10, help="F-score distance threshold")
    s.add_argument("--dataset", default="")
    s.add_argument("--method", default="method")
    s.add_argument("--out", help="write the dataset summary record here")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    s.add_argument("--height", type=int, default=16)
    s.add_argument("--width", type=int, default=24)
    s.add_argument("--coords", type=int, default=200)
    s.add_argument("--step", type=float, default=1e-5)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--terms", choices=("all", "photometric", "smoothness"), default="all")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("augment-preview", help="write augmented samples and their parameters")
    s.add_argument("--out", required=True)
    s.add_argument("--image")
    s.add_argument("--camera")
    s.add_argument("--size", type=int, nargs=2, default=(384, 640), metavar=("H", "W"))
    s.add_argument("--n", type=int, default=8)
    s.add_argument("--ar-prob", type=float, default=0.7)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_augment_preview)

    s = sub.add_parser("benchmark", help="rank / improvement table over metric files")
    s.add_argument("metrics", nargs="+")
    s.add_argument("--baseline")
    s.add_argument("--csv")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    log.info("kernels backend: %s", kernels.BACKEND)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, OSError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
