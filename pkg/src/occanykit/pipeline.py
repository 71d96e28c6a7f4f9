"""End-to-end occupancy pipeline.

Stages: reconstruct -> fit trajectory -> sample augmentation poses ->
project/tokenize/render novel views -> confidence-filter -> aggregate ->
voxelize -> label -> evaluate (when ground truth is present).

Two sources can drive the geometry:

* model mode: the miniature transformer (random seeded weights when no
  checkpoint is given);
* oracle mode (``oracle_scene`` set): ground-truth pointmaps from the
  manifest replace reconstruction outputs, and novel views are analytic
  ray casts of the stored scene.  This validates every stage around the
  network with exact inputs.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataset import ORACLE_CONFIDENCE, pose_from_json
from .geometry import (
    DegenerateGeometryError,
    Intrinsics,
    Pose7,
    apply_pose,
    compose,
    estimate_focal,
    fit_trajectory_line,
)
from .metrics import ClassMapping, MetricsReport, full_report
from .nvr import TTVAConfig, project_cloud, render_novel_views, sample_ttva_poses
from .occupancy import (
    VoxelGrid,
    VoxelGridSpec,
    assign_voxel_labels,
    load_voxel_grid,
    save_voxel_grid,
    voxelize_trilinear,
)
from .scene_model import ModelConfig, SceneModel, load_checkpoint
from .synth import Scene, cast_rays, pixel_rays
from .tensorio import dump_json, load_scene_manifest, read_tensor, write_tensor

logger = logging.getLogger(__name__)


class PipelineConfigError(ValueError):
    """Bad configuration; maps to exit code 2."""


class PipelineStageError(RuntimeError):
    """A stage failed at runtime; maps to exit code 3."""


@dataclass
class PipelineConfig:
    manifest: Path
    out_dir: Path
    checkpoint: Path | None = None
    ttva: TTVAConfig = field(default_factory=TTVAConfig)
    grid: VoxelGridSpec | None = None
    min_conf: float = 1.5
    tau: float = 0.5
    no_ttva: bool = False
    seed: int = 0
    threads: int = 1
    gt_grid: Path | None = None
    oracle_scene: Path | None = None
    classes: Path | None = None
    patch: int = 8


@dataclass
class FrameGeometry:
    local: np.ndarray  # (H, W, 3)
    global_: np.ndarray  # (H, W, 3)
    conf: np.ndarray  # (H, W)
    valid: np.ndarray  # (H, W) bool
    labels: np.ndarray  # (H, W) uint16
    features: np.ndarray | None  # (H', W', C)
    pose: Pose7
    pose_degenerate: bool


@dataclass
class PipelineResult:
    pred_grid: VoxelGrid
    report: MetricsReport | None
    poses: list[Pose7]
    ttva_poses: list[Pose7]
    n_points_recon: int
    n_points_rendered: int
    out_dir: Path


def _stage(name: str):
    def wrap(fn):
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except (PipelineConfigError, PipelineStageError):
                raise
            except Exception as e:
                raise PipelineStageError(f"[{name}] {e}") from e

        return inner

    return wrap


@_stage("reconstruct")
def _reconstruct_frames(cfg: PipelineConfig, manifest) -> tuple[list[FrameGeometry], object]:
    """Per-frame geometry plus the scene memory (model mode only)."""
    h, w = manifest.resolution
    frames: list[FrameGeometry] = []

    def read_labels(entry):
        if entry.labels is not None:
            return read_tensor(entry.labels).astype(np.uint16)
        return np.zeros((h, w), dtype=np.uint16)

    if cfg.oracle_scene is not None:
        from .geometry import register_pointmaps

        for i, entry in enumerate(manifest.frames):
            if entry.pointmap is None:
                raise PipelineConfigError(
                    f"oracle mode requires a ground-truth pointmap for frame {i}"
                )
            pm = read_tensor(entry.pointmap).astype(np.float64)
            local, glob = pm[0], pm[1]
            valid = local[:, :, 2] > 0
            conf = np.where(valid, ORACLE_CONFIDENCE, 1.0 + 1e-4)
            feats = (
                read_tensor(entry.features).astype(np.float64)
                if entry.features is not None
                else None
            )
            try:
                pose = register_pointmaps(local, glob, conf, valid)
                degen = False
            except DegenerateGeometryError:
                pose, degen = Pose7.identity(), True
            frames.append(
                FrameGeometry(
                    local=local, global_=glob, conf=conf, valid=valid,
                    labels=read_labels(entry), features=feats,
                    pose=pose, pose_degenerate=degen,
                )
            )
        return frames, None

    recon, render = _load_models(cfg)
    images = [read_tensor(e.image).astype(np.float32) for e in manifest.frames]
    out = recon.reconstruct_sequence(images)
    for entry, fo in zip(manifest.frames, out.frames):
        frames.append(
            FrameGeometry(
                local=fo.p_local, global_=fo.p_global, conf=fo.conf,
                valid=fo.conf > cfg.min_conf,
                labels=read_labels(entry), features=fo.feat,
                pose=fo.pose, pose_degenerate=fo.pose_degenerate,
            )
        )
    return frames, (out.memory, render)


def _load_models(cfg: PipelineConfig):
    from .nvr import RenderModel

    if cfg.checkpoint is not None:
        recon, render = load_checkpoint(cfg.checkpoint)
        if render is None:
            render = RenderModel.init_from(recon, cfg.seed + 1)
        return recon, render
    recon = SceneModel.seeded(ModelConfig(patch=cfg.patch), cfg.seed)
    recon.eval()
    render = RenderModel.init_from(recon, cfg.seed + 1)
    render.eval()
    return recon, render


def _intrinsics_for(cfg: PipelineConfig, manifest, frames: list[FrameGeometry]) -> Intrinsics:
    h, w = manifest.resolution
    if manifest.intrinsics is not None:
        i = manifest.intrinsics
        return Intrinsics(i["fx"], i["fy"], i["cx"], i["cy"])
    ref = frames[0]
    try:
        f = estimate_focal(ref.local, (w / 2, h / 2), ref.valid)
    except DegenerateGeometryError as e:
        f = 0.9 * w
        logger.warning("focal estimation failed (%s); falling back to f=%.1f px", e, f)
    return Intrinsics(f, f, w / 2, h / 2)


@_stage("render")
def _render_novel(cfg: PipelineConfig, manifest, frames, memory_bundle, ttva_poses):
    """Returns (points, labels) contributed by novel views."""
    h, w = manifest.resolution
    if not ttva_poses:
        return np.zeros((0, 3)), np.zeros(0, dtype=np.uint16)

    if cfg.oracle_scene is not None:
        raw = json.loads(Path(cfg.oracle_scene).read_text())
        scene = Scene.from_json(raw)
        ref_world = pose_from_json(raw["camera_poses_world"][raw.get("ref_index", 0)])
        k = _intrinsics_for(cfg, manifest, frames)
        dirs_cam = pixel_rays(k, h, w).reshape(-1, 3)
        pts, labs = [], []
        for t_j in ttva_poses:
            pose_w = compose(ref_world, t_j)
            rot = pose_w.rotation
            t, cls = cast_rays(
                scene, np.broadcast_to(pose_w.translation, dirs_cam.shape), dirs_cam @ rot.T
            )
            valid = np.isfinite(t)
            local = t[valid, None] * dirs_cam[valid]
            pts.append(apply_pose(t_j, local))
            labs.append(cls[valid])
        return np.concatenate(pts), np.concatenate(labs).astype(np.uint16)

    memory, render_model = memory_bundle
    k = _intrinsics_for(cfg, manifest, frames)
    hp, wp = render_model.cfg.feat_hw(h, w)
    cdim = render_model.cfg.feat_channels

    # merged reconstruction cloud with per-point attributes
    pts_list, conf_list, fidx_list, lab_list = [], [], [], []
    bank = np.zeros((len(frames) * hp * wp, cdim))
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    fr = (rr * hp) // h
    fc = (cc * wp) // w
    for i, fg in enumerate(frames):
        bank[i * hp * wp : (i + 1) * hp * wp] = (
            fg.features.reshape(hp * wp, cdim) if fg.features is not None else 0.0
        )
        m = fg.valid
        pts_list.append(fg.global_[m])
        conf_list.append(fg.conf[m])
        fidx_list.append((i * hp * wp + fr * wp + fc)[m])
        lab_list.append(fg.labels[m])
    if not pts_list or sum(len(p) for p in pts_list) == 0:
        return np.zeros((0, 3)), np.zeros(0, dtype=np.uint16)
    cloud = np.concatenate(pts_list)
    cloud_conf = np.concatenate(conf_list)
    cloud_fidx = np.concatenate(fidx_list)
    cloud_labels = np.concatenate(lab_list)

    bundles = [
        project_cloud(cloud, cloud_conf, cloud_fidx, bank, pose, k, h, w, (hp, wp))
        for pose in ttva_poses
    ]
    outs = render_novel_views(memory, bundles, render_model)
    pts, labs = [], []
    for bundle, heads in zip(bundles, outs):
        p_g = heads.p_global.numpy().astype(np.float64)
        conf = heads.conf.numpy().astype(np.float64)
        m = conf > cfg.min_conf
        if not m.any():
            continue
        # novel-view labels inherit from the projected source point, 0 elsewhere
        view_labels = np.zeros((h, w), dtype=np.uint16)
        has_src = bundle.corr >= 0
        view_labels[has_src] = cloud_labels[bundle.corr[has_src]]
        pts.append(p_g[m])
        labs.append(view_labels[m])
    if not pts:
        return np.zeros((0, 3)), np.zeros(0, dtype=np.uint16)
    return np.concatenate(pts), np.concatenate(labs)


def run_pipeline(cfg: PipelineConfig) -> PipelineResult:
    torch.set_num_threads(max(1, cfg.threads))
    torch.manual_seed(cfg.seed)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    try:
        manifest = load_scene_manifest(cfg.manifest, cfg.patch)
    except Exception as e:
        raise PipelineConfigError(f"[manifest] {e}") from e

    frames, memory_bundle = _reconstruct_frames(cfg, manifest)
    poses = [f.pose for f in frames]
    for i, f in enumerate(frames):
        if f.pose_degenerate:
            logger.warning("frame %d: registration degenerate, pose flagged", i)

    ttva_poses: list[Pose7] = []
    if not cfg.no_ttva:
        try:
            origin, direction = fit_trajectory_line(poses)
            ttva_poses = sample_ttva_poses(origin, direction, cfg.ttva)
        except Exception as e:
            raise PipelineStageError(f"[ttva] {e}") from e

    rendered_pts, rendered_labels = _render_novel(cfg, manifest, frames, memory_bundle, ttva_poses)

    recon_pts = [f.global_[f.valid] for f in frames]
    recon_labels = [f.labels[f.valid] for f in frames]
    recon_pts = np.concatenate(recon_pts) if recon_pts else np.zeros((0, 3))
    recon_labels = (
        np.concatenate(recon_labels) if recon_labels else np.zeros(0, dtype=np.uint16)
    )
    all_pts = np.concatenate([recon_pts, rendered_pts])
    all_labels = np.concatenate([recon_labels, rendered_labels])

    spec = cfg.grid
    if spec is None:
        if manifest.grid is None:
            raise PipelineConfigError("no voxel grid: pass --grid or put one in the manifest")
        spec = VoxelGridSpec.from_json(manifest.grid)

    try:
        grid = voxelize_trilinear(all_pts, None, spec)
        grid = assign_voxel_labels(grid, all_pts, all_labels, cfg.tau)
    except Exception as e:
        raise PipelineStageError(f"[voxelize] {e}") from e

    report = None
    gt_prefix = cfg.gt_grid
    if gt_prefix is None:
        candidate = Path(cfg.manifest).parent / "gt_grid"
        if candidate.with_suffix(".json").exists():
            gt_prefix = candidate
    if gt_prefix is not None:
        try:
            gt = load_voxel_grid(gt_prefix)
            mapping = (
                ClassMapping.from_json(cfg.classes) if cfg.classes else ClassMapping.default()
            )
            report = full_report(grid, gt, mapping, cfg.tau)
        except Exception as e:
            raise PipelineStageError(f"[metrics] {e}") from e
    else:
        logger.warning("no ground-truth grid found; skipping metrics")

    _write_artifacts(cfg, out, frames, poses, ttva_poses, grid, report)
    return PipelineResult(
        pred_grid=grid,
        report=report,
        poses=poses,
        ttva_poses=ttva_poses,
        n_points_recon=len(recon_pts),
        n_points_rendered=len(rendered_pts),
        out_dir=out,
    )


@_stage("artifacts")
def _write_artifacts(cfg, out: Path, frames, poses, ttva_poses, grid, report):
    from .dataset import pose_to_json

    save_voxel_grid(grid, out / "pred_grid")
    write_tensor(
        np.stack([f.global_ for f in frames]).astype(np.float32), out / "recon.global.tens"
    )
    write_tensor(
        np.stack([f.local for f in frames]).astype(np.float32), out / "recon.local.tens"
    )
    write_tensor(np.stack([f.conf for f in frames]).astype(np.float32), out / "recon.conf.tens")
    dump_json(
        {
            "frame_poses": [pose_to_json(p) for p in poses],
            "ttva_poses": [pose_to_json(p) for p in ttva_poses],
            "degenerate": [f.pose_degenerate for f in frames],
        },
        out / "poses.json",
    )
    if report is not None:
        dump_json(report.to_dict(), out / "report.json")
        (out / "report.md").write_text(report.to_markdown() + "\n")
