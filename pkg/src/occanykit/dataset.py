"""Serialize synthetic scenes into pipeline-ready datasets.

A dataset directory holds:

    manifest.json                 frame list, resolution, optional intrinsics,
                                  reference-frame grid spec
    frames/frame_XXX.image.tens   H x W x 3 f32 in [0, 1]
    frames/frame_XXX.pointmap.tens  (2, H, W, 3) f32: [local, global] pointmaps
    frames/frame_XXX.labels.tens  H x W u16 class ids (0 = sky)
    frames/frame_XXX.features.tens  H' x W' x C f32 teacher features
    scene.json                    primitives + world camera poses (oracle source)
    ttva.json                     augmentation config the known-mask was built with
    gt_grid.{json,*.tens}         analytic labels + visible-surface known mask,
                                  in the reference frame

Ground-truth global pointmaps, grid, and poses are all expressed in the
reference frame (camera frame of frame 0).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Intrinsics, Pose7, apply_pose, compose, fit_trajectory_line, inverse
from .metrics import ClassMapping
from .nvr import TTVAConfig, sample_ttva_poses
from .occupancy import VoxelGrid, save_voxel_grid
from .synth import (
    Scene,
    SynthSceneSpec,
    default_camera_poses,
    generate_scene,
    grid_world_to_ref,
    render_oracle_views,
    synthesize_image,
    visible_surface_known,
)
from .tensorio import dump_json, write_tensor

ORACLE_CONFIDENCE = 4.0  # stands in for model confidence on oracle pointmaps


@dataclass(frozen=True)
class DatasetConfig:
    n_frames: int = 5
    frame_spacing: float = 1.5
    cam_height: float = 1.6
    focal: float = 55.0
    h: int = 40
    w: int = 64
    channels: int = 16
    tau: float = 0.5
    feat_seed: int = 1234
    write_intrinsics: bool = False


def pose_to_json(p: Pose7) -> dict:
    return {"q": list(p.q), "t": list(p.t)}


def pose_from_json(d: dict) -> Pose7:
    return Pose7.create(d["q"], d["t"])


def write_dataset(
    spec: SynthSceneSpec,
    out_dir: str | Path,
    ds: DatasetConfig = DatasetConfig(),
    ttva: TTVAConfig = TTVAConfig(),
    scene: Scene | None = None,
) -> Path:
    """Generate (or take) a scene and write the dataset; returns the manifest path.

    The GT grid's known mask marks visible-surface voxels: those receiving at
    least ``tau`` trilinear mass from analytic surface points over the survey
    pose set (input frames plus the full TTVA enumeration along the true
    trajectory).
    """
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    if scene is None:
        scene, gt_world = generate_scene(spec)
    else:
        from .synth import analytic_gt_grid

        gt_world = analytic_gt_grid(scene)

    poses_w = default_camera_poses(ds.n_frames, ds.frame_spacing, ds.cam_height)
    ref = poses_w[0]
    ref_from_world = inverse(ref)
    poses_ref = [compose(ref_from_world, p) for p in poses_w]
    k = Intrinsics(ds.focal, ds.focal, ds.w / 2, ds.h / 2)
    views = render_oracle_views(
        scene, poses_w, k, ds.h, ds.w, ds.channels, feat_seed=ds.feat_seed
    )
    palette = ClassMapping.default().palette

    frames_json = []
    for i, view in enumerate(views):
        stem = f"frames/frame_{i:03d}"
        image = synthesize_image(view, palette)
        local = view.pointmap
        glob = np.zeros_like(local)
        if view.valid.any():
            glob[view.valid] = apply_pose(poses_ref[i], local[view.valid])
        write_tensor(image, out / f"{stem}.image.tens")
        write_tensor(
            np.stack([local, glob]).astype(np.float32), out / f"{stem}.pointmap.tens"
        )
        write_tensor(view.label_map.astype(np.uint16), out / f"{stem}.labels.tens")
        write_tensor(
            view.teacher_features.astype(np.float32), out / f"{stem}.features.tens"
        )
        frames_json.append(
            {
                "image": f"{stem}.image.tens",
                "pointmap": f"{stem}.pointmap.tens",
                "labels": f"{stem}.labels.tens",
                "features": f"{stem}.features.tens",
            }
        )

    spec_ref, arrs = grid_world_to_ref(
        scene.grid_world,
        {"mass": gt_world.mass, "label": gt_world.label},
        ref,
    )

    origin, direction = fit_trajectory_line(poses_ref)
    survey = poses_ref + sample_ttva_poses(origin, direction, ttva)
    known = visible_surface_known(scene, survey, ref, k, ds.h, ds.w, spec_ref, ds.tau)
    save_voxel_grid(
        VoxelGrid(spec=spec_ref, mass=arrs["mass"], label=arrs["label"], known=known),
        out / "gt_grid",
    )

    manifest = {
        "frames": frames_json,
        "resolution": {"H": ds.h, "W": ds.w},
        "grid": {
            "origin": list(spec_ref.origin),
            "voxel": spec_ref.voxel,
            "dims": list(spec_ref.dims),
        },
    }
    if ds.write_intrinsics:
        manifest["intrinsics"] = {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy}
    dump_json(manifest, out / "manifest.json")

    dump_json(
        {
            **scene.to_json(),
            "camera_poses_world": [pose_to_json(p) for p in poses_w],
            "ref_index": 0,
            "feat_seed": ds.feat_seed,
            "channels": ds.channels,
        },
        out / "scene.json",
    )
    dump_json(ttva.to_json(), out / "ttva.json")
    return out / "manifest.json"
