"""Deterministic synthetic urban scenes with analytic ground truth.

Scenes are authored in a z-up world frame (ground plane at z = 0) from three
primitive kinds with closed-form ray intersections: axis-aligned boxes
(buildings, vehicles, ground slab), vertical capped cylinders (poles), and
nothing else.  Box faces are snapped to the voxel-center lattice of the scene
grid so that every surface point splats only into voxels whose centers lie
inside (or on) the primitive; this keeps the end-to-end voxelization oracle
sharp.  Cylinder walls are left unsnapped.

All pipeline-facing ground truth (pointmaps, grids, poses) is emitted in the
reference frame: the camera frame of the first input view.  The reference
camera is constrained to an axis-permutation orientation (level, forward
along a world axis, y down), so the world grid maps onto a reference-frame
grid by an exact axis permutation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Intrinsics, Pose7, apply_pose, inverse
from .occupancy import VoxelGrid, VoxelGridSpec, voxelize_trilinear

RAY_T_MIN = 1e-6
FEATURE_NOISE = 0.01
SKY_COLOR = (0.55, 0.7, 0.9)


class SynthError(ValueError):
    """Invalid scene specification or failed placement."""


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    class_id: int

    def contains(self, pts: np.ndarray) -> np.ndarray:
        """Closed containment test for (..., 3) points."""
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        return np.all((pts >= lo) & (pts <= hi), axis=-1)


@dataclass(frozen=True)
class Cylinder:
    """Vertical capped cylinder from z0 to z1."""

    cx: float
    cy: float
    radius: float
    z0: float
    z1: float
    class_id: int

    def contains(self, pts: np.ndarray) -> np.ndarray:
        r2 = (pts[..., 0] - self.cx) ** 2 + (pts[..., 1] - self.cy) ** 2
        return (r2 <= self.radius**2) & (pts[..., 2] >= self.z0) & (pts[..., 2] <= self.z1)


@dataclass
class Scene:
    primitives: list  # Box | Cylinder, ground first; later entries override labels
    grid_world: VoxelGridSpec
    seed: int = 0

    def to_json(self) -> dict:
        prims = []
        for p in self.primitives:
            if isinstance(p, Box):
                prims.append({"kind": "box", "lo": list(p.lo), "hi": list(p.hi), "class_id": p.class_id})
            else:
                prims.append(
                    {
                        "kind": "cylinder",
                        "cx": p.cx,
                        "cy": p.cy,
                        "radius": p.radius,
                        "z0": p.z0,
                        "z1": p.z1,
                        "class_id": p.class_id,
                    }
                )
        return {
            "primitives": prims,
            "grid": {
                "origin": list(self.grid_world.origin),
                "voxel": self.grid_world.voxel,
                "dims": list(self.grid_world.dims),
            },
            "seed": self.seed,
        }

    @staticmethod
    def from_json(raw: dict) -> "Scene":
        prims = []
        for p in raw["primitives"]:
            if p["kind"] == "box":
                prims.append(Box(lo=tuple(p["lo"]), hi=tuple(p["hi"]), class_id=p["class_id"]))
            else:
                prims.append(
                    Cylinder(
                        cx=p["cx"], cy=p["cy"], radius=p["radius"],
                        z0=p["z0"], z1=p["z1"], class_id=p["class_id"],
                    )
                )
        g = raw["grid"]
        return Scene(
            primitives=prims,
            grid_world=VoxelGridSpec(tuple(g["origin"]), g["voxel"], tuple(g["dims"])),
            seed=raw.get("seed", 0),
        )


@dataclass(frozen=True)
class SynthSceneSpec:
    """Seeded generator parameters for a random urban block."""

    seed: int = 0
    x_range: tuple[float, float] = (2.0, 30.0)
    y_range: tuple[float, float] = (-9.5, 9.5)
    n_buildings: int = 5
    building_xy: tuple[float, float] = (2.0, 6.0)
    building_height: tuple[float, float] = (2.0, 4.0)
    n_vehicles: int = 3
    vehicle_xy: tuple[float, float] = (1.0, 2.5)
    vehicle_height: tuple[float, float] = (1.0, 1.5)
    n_poles: int = 2
    pole_radius: tuple[float, float] = (0.1, 0.2)
    pole_height: tuple[float, float] = (1.5, 3.0)
    ground_z: float = 0.0
    corridor_half_width: float = 3.2  # kept clear around the camera path (y = 0)
    class_ids: dict = field(
        default_factory=lambda: {"ground": 1, "building": 2, "vehicle": 3, "pole": 4}
    )
    grid: VoxelGridSpec = VoxelGridSpec(origin=(-2.0, -10.0, -0.25), voxel=0.5, dims=(64, 40, 9))


def _center_lattice_snap(value: float, origin: float, voxel: float) -> float:
    """Snap a coordinate to the nearest voxel-center plane of the grid axis."""
    k = round((value - origin) / voxel - 0.5)
    return origin + (k + 0.5) * voxel


def generate_scene(spec: SynthSceneSpec) -> tuple[Scene, VoxelGrid]:
    """Place primitives with a seeded generator; returns (scene, analytic GT grid).

    Box faces land on the grid's voxel-center lattice; placement retries a
    bounded number of times and raises SynthError for overcrowded specs.
    """
    rng = np.random.default_rng(spec.seed)
    g = spec.grid
    cls = spec.class_ids

    ground = Box(
        lo=(g.origin[0], g.origin[1], spec.ground_z - 1.0),
        hi=(g.origin[0] + g.dims[0] * g.voxel, g.origin[1] + g.dims[1] * g.voxel, spec.ground_z),
        class_id=cls["ground"],
    )
    prims: list = [ground]
    placed_xy: list[tuple[float, float, float, float]] = []

    def snap(v: float, axis: int) -> float:
        return _center_lattice_snap(v, g.origin[axis], g.voxel)

    def try_place_box(size_xy, height_range, class_id) -> Box | None:
        for _ in range(100):
            sx = rng.uniform(*size_xy)
            sy = rng.uniform(*size_xy)
            h = rng.uniform(*height_range)
            x0 = rng.uniform(spec.x_range[0], spec.x_range[1] - sx)
            side = 1 if rng.random() < 0.5 else -1
            ylo_min = spec.corridor_half_width if side > 0 else spec.y_range[0]
            ylo_max = (spec.y_range[1] - sy) if side > 0 else (-spec.corridor_half_width - sy)
            if ylo_max <= ylo_min:
                continue
            y0 = rng.uniform(ylo_min, ylo_max)
            lo = (snap(x0, 0), snap(y0, 1), spec.ground_z)
            hi = (snap(x0 + sx, 0), snap(y0 + sy, 1), snap(spec.ground_z + h, 2))
            if hi[0] - lo[0] < g.voxel or hi[1] - lo[1] < g.voxel or hi[2] - lo[2] < g.voxel:
                continue
            if any(
                lo[0] < ohi_x and hi[0] > olo_x and lo[1] < ohi_y and hi[1] > olo_y
                for olo_x, olo_y, ohi_x, ohi_y in placed_xy
            ):
                continue
            placed_xy.append((lo[0], lo[1], hi[0], hi[1]))
            return Box(lo=lo, hi=hi, class_id=class_id)
        return None

    for count, size_xy, h_range, kind in (
        (spec.n_buildings, spec.building_xy, spec.building_height, "building"),
        (spec.n_vehicles, spec.vehicle_xy, spec.vehicle_height, "vehicle"),
    ):
        for _ in range(count):
            box = try_place_box(size_xy, h_range, cls[kind])
            if box is None:
                raise SynthError(f"failed to place a {kind} after 100 retries (overcrowded spec)")
            prims.append(box)

    for _ in range(spec.n_poles):
        placed = False
        for _ in range(100):
            r = rng.uniform(*spec.pole_radius)
            h = rng.uniform(*spec.pole_height)
            x = rng.uniform(spec.x_range[0] + r, spec.x_range[1] - r)
            side = 1 if rng.random() < 0.5 else -1
            y = side * rng.uniform(spec.corridor_half_width + r, abs(spec.y_range[0]) - r)
            if any(
                x + r > olx and x - r < ohx and y + r > oly and y - r < ohy
                for olx, oly, ohx, ohy in placed_xy
            ):
                continue
            placed_xy.append((x - r, y - r, x + r, y + r))
            prims.append(
                Cylinder(cx=x, cy=y, radius=r, z0=spec.ground_z,
                         z1=_center_lattice_snap(spec.ground_z + h, g.origin[2], g.voxel),
                         class_id=cls["pole"])
            )
            placed = True
            break
        if not placed:
            raise SynthError("failed to place a pole after 100 retries (overcrowded spec)")

    scene = Scene(primitives=prims, grid_world=g, seed=spec.seed)
    return scene, analytic_gt_grid(scene)


def occluded_demo_scene() -> Scene:
    """Hand-built scene for augmentation studies: a wall hides a back block,
    and side structures sit outside the forward field of view.

    Forward motion past the wall reveals the back block; yawed / laterally
    shifted views reveal the side structures.  All faces are snapped to the
    voxel-center lattice of the bundled grid.
    """
    grid = VoxelGridSpec(origin=(-2.0, -10.0, -0.25), voxel=0.5, dims=(88, 40, 9))

    def snap(v: float, axis: int) -> float:
        return _center_lattice_snap(v, grid.origin[axis], grid.voxel)

    def box(x0, x1, y0, y1, z1, class_id):
        return Box(
            lo=(snap(x0, 0), snap(y0, 1), 0.0),
            hi=(snap(x1, 0), snap(y1, 1), snap(z1, 2)),
            class_id=class_id,
        )

    ground = Box(
        lo=(grid.origin[0], grid.origin[1], -1.0),
        hi=(
            grid.origin[0] + grid.dims[0] * grid.voxel,
            grid.origin[1] + grid.dims[1] * grid.voxel,
            0.0,
        ),
        class_id=1,
    )
    prims = [
        ground,
        box(12.0, 12.5, -9.5, 9.5, 3.0, 2),  # occluding wall across the road
        box(18.0, 22.0, -6.0, -2.0, 3.0, 2),  # hidden behind the wall
        box(18.0, 22.0, 2.0, 6.0, 3.0, 2),  # hidden behind the wall
        box(14.0, 20.0, 7.0, 9.5, 2.5, 2),  # side structure, needs yaw/lateral
        box(14.0, 20.0, -9.5, -7.0, 2.5, 2),  # side structure, needs yaw/lateral
        box(24.0, 27.0, -5.0, -3.0, 1.5, 3),  # vehicle deep behind the wall
    ]
    return Scene(primitives=prims, grid_world=grid, seed=0)


def analytic_gt_grid(scene: Scene) -> VoxelGrid:
    """Occupancy/labels from closed containment of voxel centers; later primitives override."""
    g = scene.grid_world
    cx, cy, cz = g.centers()
    centers = np.stack(np.meshgrid(cx, cy, cz, indexing="ij"), axis=-1)
    label = np.zeros(g.dims, dtype=np.uint16)
    for p in scene.primitives:
        label[p.contains(centers)] = p.class_id
    mass = (label > 0).astype(np.float64)
    return VoxelGrid(spec=g, mass=mass, label=label)


def _ray_box(origins, dirs, box: Box):
    lo = np.asarray(box.lo)
    hi = np.asarray(box.hi)
    d = np.where(np.abs(dirs) < 1e-12, np.copysign(1e-12, np.where(dirs == 0, 1.0, dirs)), dirs)
    t1 = (lo - origins) / d
    t2 = (hi - origins) / d
    tn = np.minimum(t1, t2).max(axis=-1)
    tf = np.maximum(t1, t2).min(axis=-1)
    hit_near = (tf >= tn) & (tn > RAY_T_MIN)
    hit_far = (tf >= np.maximum(tn, RAY_T_MIN)) & (tf > RAY_T_MIN)
    t = np.where(hit_near, tn, np.where(hit_far, tf, np.inf))
    return t


def _ray_cylinder(origins, dirs, cyl: Cylinder):
    ox = origins[..., 0] - cyl.cx
    oy = origins[..., 1] - cyl.cy
    oz = origins[..., 2]
    dx, dy, dz = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    a = dx * dx + dy * dy
    b = 2 * (ox * dx + oy * dy)
    c = ox * ox + oy * oy - cyl.radius**2
    disc = b * b - 4 * a * c
    sq = np.sqrt(np.maximum(disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        a_safe = np.where(a < 1e-16, 1.0, a)
        t_side1 = np.where(a < 1e-16, np.inf, (-b - sq) / (2 * a_safe))
        t_side2 = np.where(a < 1e-16, np.inf, (-b + sq) / (2 * a_safe))
        dz_safe = np.where(np.abs(dz) < 1e-16, 1.0, dz)
        t_top = np.where(np.abs(dz) < 1e-16, np.inf, (cyl.z1 - oz) / dz_safe)
        t_bot = np.where(np.abs(dz) < 1e-16, np.inf, (cyl.z0 - oz) / dz_safe)

    def side_ok(t):
        tf = np.where(np.isfinite(t), t, 0.0)
        z = oz + tf * dz
        return np.isfinite(t) & (disc >= 0) & (t > RAY_T_MIN) & (z >= cyl.z0) & (z <= cyl.z1)

    def cap_ok(t):
        tf = np.where(np.isfinite(t), t, 0.0)
        x = ox + tf * dx
        y = oy + tf * dy
        return np.isfinite(t) & (t > RAY_T_MIN) & (x * x + y * y <= cyl.radius**2)

    best = np.full(origins.shape[:-1], np.inf)
    for t, ok in (
        (t_side1, side_ok(t_side1)),
        (t_side2, side_ok(t_side2)),
        (t_top, cap_ok(t_top)),
        (t_bot, cap_ok(t_bot)),
    ):
        best = np.where(ok & (t < best), t, best)
    return best


def cast_rays(scene: Scene, origins: np.ndarray, dirs: np.ndarray):
    """Nearest analytic intersection; returns (t, class_id) with t = inf for sky."""
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    best_t = np.full(origins.shape[:-1], np.inf)
    best_c = np.zeros(origins.shape[:-1], dtype=np.uint16)
    for p in scene.primitives:
        t = _ray_box(origins, dirs, p) if isinstance(p, Box) else _ray_cylinder(origins, dirs, p)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_c = np.where(closer, np.uint16(p.class_id), best_c)
    return best_t, best_c


def point_inside_any(scene: Scene, pts: np.ndarray) -> np.ndarray:
    inside = np.zeros(pts.shape[:-1], dtype=bool)
    for p in scene.primitives:
        inside |= p.contains(pts)
    return inside


@dataclass
class OracleView:
    pointmap: np.ndarray  # H x W x 3, camera frame; zeros where invalid
    label_map: np.ndarray  # H x W uint16, 0 = sky
    teacher_features: np.ndarray  # H' x W' x C
    valid: np.ndarray  # H x W bool (not sky)


def class_embeddings(n_ids: int, channels: int, seed: int) -> np.ndarray:
    """Orthonormal per-class unit embeddings (rows), fixed by seed."""
    if n_ids > channels:
        raise SynthError(f"need channels >= class count, got {channels} < {n_ids}")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((channels, channels)))
    return q[:n_ids]


def pixel_rays(k: Intrinsics, h: int, w: int) -> np.ndarray:
    """Camera-frame direction per pixel, z component 1 (so hit t equals depth)."""
    cc, rr = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    return np.stack([(cc - k.cx) / k.fx, (rr - k.cy) / k.fy, np.ones_like(cc)], axis=-1)


def render_oracle_views(
    scene: Scene,
    poses: list[Pose7],
    k: Intrinsics,
    h: int,
    w: int,
    channels: int = 16,
    feat_resolution: tuple[int, int] | None = None,
    feat_seed: int = 1234,
) -> list[OracleView]:
    """Analytic per-pixel ray casting for each camera pose (camera-to-world).

    Teacher features are the class embedding of the nearest label pixel plus
    0.01-amplitude seeded noise at (H', W') resolution (default H/2, W/2).
    """
    hp, wp = feat_resolution if feat_resolution is not None else (h // 2, w // 2)
    dirs_cam = pixel_rays(k, h, w).reshape(-1, 3)
    max_class = max((p.class_id for p in scene.primitives), default=0)
    emb = class_embeddings(max_class + 1, channels, feat_seed)

    views = []
    for vi, pose in enumerate(poses):
        rot = pose.rotation
        dirs_w = dirs_cam @ rot.T
        origins = np.broadcast_to(pose.translation, dirs_w.shape)
        t, cls_flat = cast_rays(scene, origins, dirs_w)
        valid = np.isfinite(t)
        pm = np.zeros((len(t), 3))
        pm[valid] = t[valid, None] * dirs_cam[valid]
        pm = pm.reshape(h, w, 3)
        labels = np.where(valid, cls_flat, 0).astype(np.uint16).reshape(h, w)

        rows = (np.arange(hp) * h) // hp
        cols = (np.arange(wp) * w) // wp
        lab_small = labels[np.ix_(rows, cols)]
        rng = np.random.default_rng((feat_seed, vi))
        feats = emb[lab_small] + FEATURE_NOISE * rng.standard_normal((hp, wp, channels))
        views.append(
            OracleView(
                pointmap=pm,
                label_map=labels,
                teacher_features=feats,
                valid=valid.reshape(h, w),
            )
        )
    return views


def synthesize_image(view: OracleView, palette: dict[int, tuple[int, int, int]]) -> np.ndarray:
    """Class-colored shaded rendering in [0, 1] (f32), sky pale blue."""
    h, w = view.label_map.shape
    img = np.empty((h, w, 3), dtype=np.float64)
    img[:] = SKY_COLOR
    depth = view.pointmap[:, :, 2]
    shade = 1.0 / (1.0 + 0.03 * np.maximum(depth, 0.0))
    for c in np.unique(view.label_map):
        if c == 0:
            continue
        color = np.asarray(palette.get(int(c), (200, 200, 200)), dtype=np.float64) / 255.0
        sel = view.label_map == c
        img[sel] = color * shade[sel][:, None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# --- reference-frame conversion -------------------------------------------

# Default camera orientation: forward along world +x, y down (level camera).
# Columns are (right, down, forward) expressed in world axes.
REF_ROTATION = np.array(
    [
        [0.0, 0.0, 1.0],
        [-1.0, 0.0, 0.0],
        [0.0, -1.0, 0.0],
    ]
)


def default_camera_poses(n_frames: int, spacing: float, height: float, start_x: float = 0.0):
    """World poses of a straight forward path; frame 0 is the reference."""
    return [
        Pose7.from_matrix(REF_ROTATION, (start_x + i * spacing, 0.0, height))
        for i in range(n_frames)
    ]


def world_points_to_ref(pts: np.ndarray, ref_pose: Pose7) -> np.ndarray:
    return apply_pose(inverse(ref_pose), pts)


def _signed_permutation(rot_t: np.ndarray):
    """(world axis, sign) feeding each reference axis; errors if not a permutation."""
    out = []
    for a in range(3):
        row = rot_t[a]
        w = int(np.argmax(np.abs(row)))
        s = float(np.sign(row[w]))
        if not (np.isclose(abs(row[w]), 1.0, atol=1e-9) and np.allclose(np.delete(row, w), 0.0, atol=1e-9)):
            raise SynthError("reference rotation is not an axis permutation; cannot permute grid")
        out.append((w, s))
    return out


def grid_world_to_ref(spec: VoxelGridSpec, grid_arrays: dict[str, np.ndarray], ref_pose: Pose7):
    """Re-express a world-frame grid in the reference camera frame.

    Valid only when the reference rotation is an exact axis permutation; the
    voxel lattice then maps onto another axis-aligned lattice and arrays are
    transposed/flipped without resampling.
    """
    rot_t = ref_pose.rotation.T
    t = ref_pose.translation
    perm = _signed_permutation(rot_t)
    origin = [0.0, 0.0, 0.0]
    dims = [0, 0, 0]
    transpose_order = []
    flips = []
    for a, (w, s) in enumerate(perm):
        extent = spec.dims[w] * spec.voxel
        if s > 0:
            origin[a] = spec.origin[w] - t[w]
        else:
            origin[a] = t[w] - (spec.origin[w] + extent)
        dims[a] = spec.dims[w]
        transpose_order.append(w)
        flips.append(s < 0)
    new_spec = VoxelGridSpec(origin=tuple(origin), voxel=spec.voxel, dims=tuple(dims))
    out = {}
    for name, arr in grid_arrays.items():
        a = np.transpose(arr, transpose_order)
        for axis, f in enumerate(flips):
            if f:
                a = np.flip(a, axis=axis)
        out[name] = np.ascontiguousarray(a)
    return new_spec, out


def visible_surface_known(
    scene: Scene,
    poses_ref: list[Pose7],
    ref_pose_world: Pose7,
    k: Intrinsics,
    h: int,
    w: int,
    spec_ref: VoxelGridSpec,
    tau: float,
) -> np.ndarray:
    """Voxels receiving at least tau of trilinear mass from analytic surface
    points visible in the survey pose set (poses given in the reference frame)."""
    from .geometry import compose

    dirs_cam = pixel_rays(k, h, w).reshape(-1, 3)
    pts = []
    for pose_ref in poses_ref:
        pose_w = compose(ref_pose_world, pose_ref)
        rot = pose_w.rotation
        t, _ = cast_rays(scene, np.broadcast_to(pose_w.translation, (len(dirs_cam), 3)), dirs_cam @ rot.T)
        valid = np.isfinite(t)
        local = t[valid, None] * dirs_cam[valid]
        pts.append(apply_pose(pose_ref, local))
    if not pts:
        return np.zeros(spec_ref.dims, dtype=bool)
    mass = voxelize_trilinear(np.concatenate(pts), None, spec_ref).mass
    return mass >= tau
