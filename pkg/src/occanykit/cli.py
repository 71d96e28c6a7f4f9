"""Command-line surface for the occupancy pipeline.

Exit codes: 0 success, 2 configuration error, 3 runtime error.  Logging level
comes from the OCCANYKIT_LOG environment variable (DEBUG/INFO/WARNING/...).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

logger = logging.getLogger("occanykit")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _setup_logging() -> None:
    level = os.environ.get("OCCANYKIT_LOG", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(levelname)s %(name)s: %(message)s",
    )


def _grid_spec_from_arg(arg: str):
    """Parse --grid: a JSON file path or an inline JSON object."""
    from .occupancy import VoxelGridSpec

    text = Path(arg).read_text() if Path(arg).exists() else arg
    raw = json.loads(text)
    return VoxelGridSpec(
        origin=tuple(raw["origin"]), voxel=float(raw["voxel"]), dims=tuple(raw["dims"])
    )


def _ttva_from_arg(arg: str | None):
    from .nvr import TTVAConfig

    if arg is None:
        return TTVAConfig()
    return TTVAConfig.from_json_file(arg)


def _add_pipeline_args(p: argparse.ArgumentParser, *, require_manifest=True) -> None:
    p.add_argument("--manifest", required=require_manifest, help="scene manifest JSON")
    p.add_argument("--checkpoint", help="weight checkpoint directory")
    p.add_argument("--ttva-config", help="TTVA JSON config file")
    p.add_argument("--grid", help="voxel grid spec (JSON file or inline JSON)")
    p.add_argument("--min-conf", type=float, default=1.5, help="confidence filter threshold")
    p.add_argument("--tau", type=float, default=0.5, help="occupancy mass threshold")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-ttva", action="store_true", help="skip the rendering stage")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--gt-grid", help="ground-truth grid prefix for metrics")
    p.add_argument("--oracle-scene", help="scene.json for oracle pointmap injection")
    p.add_argument("--classes", help="class mapping JSON (default: shipped table)")


def _pipeline_config(args):
    from .pipeline import PipelineConfig

    return PipelineConfig(
        manifest=Path(args.manifest),
        out_dir=Path(args.out),
        checkpoint=Path(args.checkpoint) if args.checkpoint else None,
        ttva=_ttva_from_arg(args.ttva_config),
        grid=_grid_spec_from_arg(args.grid) if args.grid else None,
        min_conf=args.min_conf,
        tau=args.tau,
        no_ttva=args.no_ttva,
        seed=args.seed,
        threads=args.threads,
        gt_grid=Path(args.gt_grid) if args.gt_grid else None,
        oracle_scene=Path(args.oracle_scene) if args.oracle_scene else None,
        classes=Path(args.classes) if args.classes else None,
    )


def cmd_synth(args) -> int:
    from .dataset import DatasetConfig, write_dataset
    from .synth import SynthSceneSpec

    spec = SynthSceneSpec(seed=args.seed)
    ds = DatasetConfig(
        n_frames=args.frames, h=args.height, w=args.width, tau=args.tau,
        write_intrinsics=args.write_intrinsics,
    )
    manifest = write_dataset(spec, args.out, ds, _ttva_from_arg(args.ttva_config))
    print(f"wrote {manifest}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    from .pipeline import run_pipeline

    result = run_pipeline(_pipeline_config(args))
    print(
        f"points: {result.n_points_recon} reconstructed, "
        f"{result.n_points_rendered} rendered; "
        f"occupied voxels: {int(result.pred_grid.occupancy(args.tau).sum())}"
    )
    if result.report is not None:
        print(result.report.to_markdown())
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    args.no_ttva = True
    from .pipeline import run_pipeline

    result = run_pipeline(_pipeline_config(args))
    print(f"reconstructed {len(result.poses)} frames -> {result.out_dir}")
    return EXIT_OK


def cmd_render(args) -> int:
    from .pipeline import run_pipeline

    result = run_pipeline(_pipeline_config(args))
    print(f"rendered {len(result.ttva_poses)} novel views -> {result.out_dir}")
    return EXIT_OK


def cmd_voxelize(args) -> int:
    from .occupancy import save_voxel_grid, voxelize_trilinear
    from .tensorio import read_tensor

    pts = []
    for f in args.points:
        arr = read_tensor(f).astype(np.float64).reshape(-1, 3)
        keep = np.isfinite(arr).all(axis=1) & ~np.all(arr == 0.0, axis=1)
        pts.append(arr[keep])
    grid = voxelize_trilinear(np.concatenate(pts), None, _grid_spec_from_arg(args.grid))
    save_voxel_grid(grid, args.out)
    print(f"voxelized {sum(len(p) for p in pts)} points -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import ClassMapping, full_report
    from .occupancy import load_voxel_grid
    from .tensorio import dump_json

    pred = load_voxel_grid(args.pred)
    gt = load_voxel_grid(args.gt)
    mapping = ClassMapping.from_json(args.classes) if args.classes else ClassMapping.default()
    report = full_report(pred, gt, mapping, args.tau)
    print(report.to_markdown())
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        dump_json(report.to_dict(), Path(args.out) / "report.json")
        (Path(args.out) / "report.md").write_text(report.to_markdown() + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .losses import (
        LossConfig,
        gradient_check,
        loss_encoder_distill,
        loss_forcing,
        loss_pointmap,
    )

    rng = np.random.default_rng(args.seed)
    h, w, c = 4, 5, 3
    gt = rng.normal(size=(h, w, 3))
    valid = np.ones((h, w), dtype=bool)
    cfg = LossConfig(alpha=0.2)

    def f_pointmap(x):
        pred = x[: h * w * 3].reshape(h, w, 3)
        raw = x[h * w * 3 :].reshape(h, w)
        res = loss_pointmap(pred, gt, 1.0 + np.exp(raw), valid, cfg)
        return res.value, np.concatenate([res.grad_pred.ravel(), res.grad_conf_raw.ravel()])

    x0 = np.concatenate(
        [(gt + rng.choice([-1, 1], size=(h, w, 3)) * rng.uniform(0.2, 1.0, (h, w, 3))).ravel(),
         rng.normal(size=h * w) * 0.5]
    )
    e1 = gradient_check(f_pointmap, x0)

    teacher = rng.normal(size=(h, w, c))
    conf_feat = 1.0 + np.exp(rng.normal(size=(h, w)))

    def f_forcing(x):
        val, grad = loss_forcing(x.reshape(h, w, c), teacher, conf_feat)
        return val, grad.ravel()

    e2 = gradient_check(f_forcing, rng.normal(size=h * w * c))

    t_tokens = [rng.normal(size=(6, 8))]

    def f_distill(x):
        val, grads = loss_encoder_distill([x.reshape(6, 8)], t_tokens)
        return val, grads[0].ravel()

    e3 = gradient_check(f_distill, rng.normal(size=48))

    print(f"loss_pointmap        max rel err {e1:.3e} (tol 1e-4)")
    print(f"loss_forcing         max rel err {e2:.3e} (tol 1e-6)")
    print(f"loss_encoder_distill max rel err {e3:.3e} (tol 1e-6)")
    ok = e1 < 1e-4 and e2 < 1e-6 and e3 < 1e-6
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_export_ply(args) -> int:
    from .metrics import ClassMapping
    from .occupancy import load_voxel_grid

    grid = load_voxel_grid(args.grid)
    mapping = ClassMapping.from_json(args.classes) if args.classes else ClassMapping.default()
    occ = grid.mass >= args.tau
    idx = np.argwhere(occ)
    origin = np.asarray(grid.spec.origin)
    centers = origin + (idx + 0.5) * grid.spec.voxel
    labels = grid.label[tuple(idx.T)] if grid.label is not None else np.zeros(len(idx), int)
    colors = np.array(
        [mapping.palette.get(int(c), (200, 200, 200)) for c in labels], dtype=np.int64
    ) if len(idx) else np.zeros((0, 3), dtype=np.int64)

    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(centers)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for p, c in zip(centers, colors):
        lines.append(f"{p[0]:.4f} {p[1]:.4f} {p[2]:.4f} {c[0]} {c[1]} {c[2]}")
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"wrote {len(centers)} voxels -> {args.out}")
    return EXIT_OK


def cmd_train_smoke(args) -> int:
    from .nvr import RenderModel
    from .scene_model import save_checkpoint
    from .tensorio import dump_json
    from .training import TrainSmokeConfig, train_smoke

    res = train_smoke(TrainSmokeConfig(seed=args.seed, steps=args.steps, lr=args.lr))
    drop = 100.0 * (1.0 - res.final_loss / res.initial_loss)
    print(
        f"loss {res.initial_loss:.2f} -> {res.final_loss:.2f} ({drop:.1f}% drop) "
        f"in {res.seconds:.1f}s; gauge rotation {res.gauge_pose.rotation_angle():.2e} rad; "
        f"feature cosine within {res.within_class_cos:.3f} vs across {res.across_class_cos:.3f}"
    )
    if args.out:
        out = Path(args.out)
        save_checkpoint(out / "checkpoint", res.model, RenderModel.init_from(res.model, args.seed + 1))
        dump_json(
            {
                "initial_loss": res.initial_loss,
                "final_loss": res.final_loss,
                "within_class_cos": res.within_class_cos,
                "across_class_cos": res.across_class_cos,
                "seconds": res.seconds,
            },
            out / "train_smoke.json",
        )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="occanykit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=5)
    p.add_argument("--height", type=int, default=40)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--ttva-config", help="TTVA JSON used for the visibility survey")
    p.add_argument("--write-intrinsics", action="store_true")
    p.set_defaults(fn=cmd_synth)

    for name, fn, help_text in (
        ("pipeline", cmd_pipeline, "run the full two-stage pipeline"),
        ("render", cmd_render, "reconstruct then render novel views"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_pipeline_args(p)
        p.set_defaults(fn=fn)

    p = sub.add_parser("reconstruct", help="run the reconstruction stage only")
    _add_pipeline_args(p)
    # reconstruct implies --no-ttva; flag kept for interface uniformity
    p.set_defaults(fn=cmd_reconstruct)

    p = sub.add_parser("voxelize", help="voxelize pointmap tensors into a grid")
    p.add_argument("--points", nargs="+", required=True, help="tensor files of (...,3) points")
    p.add_argument("--grid", required=True)
    p.add_argument("--out", required=True, help="output grid prefix")
    p.add_argument("--tau", type=float, default=0.5)
    p.set_defaults(fn=cmd_voxelize)

    p = sub.add_parser("eval", help="evaluate a predicted grid against ground truth")
    p.add_argument("--pred", required=True, help="predicted grid prefix")
    p.add_argument("--gt", required=True, help="ground-truth grid prefix")
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--classes")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the loss gradients")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("export-ply", help="export occupied voxel centers as ASCII PLY")
    p.add_argument("--grid", required=True, help="grid prefix")
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--classes")
    p.set_defaults(fn=cmd_export_ply)

    p = sub.add_parser("train-smoke", help="gradient-descent smoke training")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=3e-5)
    p.set_defaults(fn=cmd_train_smoke)

    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, KeyError) as e:
        logger.error("configuration error: %s", e)
        return EXIT_CONFIG
    except Exception as e:
        logger.error("runtime error: %s", e)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
