"""Voxel grids: trilinear mass splatting and semantic label assignment.

Voxel centers sit at ``origin + (index + 0.5) * voxel``.  A point's weight is
distributed over the 8 voxel centers enclosing it with trilinear weights;
contributions falling outside the grid are dropped (not clamped).
Accumulation runs in point-major order (point 0 corners 0..7, point 1 ...),
which makes the result bit-reproducible and equal to a per-point brute-force
accumulation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensorio import GridSpecJson, dump_json, read_tensor, write_tensor

logger = logging.getLogger(__name__)

DEFAULT_TAU = 0.5


class GridError(ValueError):
    """Invalid grid specification or mismatched grid inputs."""


@dataclass(frozen=True)
class VoxelGridSpec:
    """Axis-aligned grid: minimum corner, cubic voxel edge, voxel counts."""

    origin: tuple[float, float, float]
    voxel: float
    dims: tuple[int, int, int]

    def __post_init__(self):
        if self.voxel <= 0:
            raise GridError(f"voxel size must be positive, got {self.voxel}")
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise GridError(f"dims must be three counts >= 1, got {self.dims}")

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    def centers(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-axis center coordinate vectors."""
        o = np.asarray(self.origin, dtype=np.float64)
        return tuple(
            o[a] + (np.arange(self.dims[a], dtype=np.float64) + 0.5) * self.voxel
            for a in range(3)
        )

    def to_json(self) -> GridSpecJson:
        return GridSpecJson(origin=self.origin, voxel=self.voxel, dims=self.dims)

    @staticmethod
    def from_json(g: GridSpecJson) -> "VoxelGridSpec":
        return VoxelGridSpec(origin=tuple(g.origin), voxel=g.voxel, dims=tuple(g.dims))


@dataclass
class VoxelGrid:
    spec: VoxelGridSpec
    mass: np.ndarray  # dims-shaped float64, nonnegative
    label: np.ndarray | None = None  # dims-shaped uint16, 0 = free/none
    known: np.ndarray | None = field(default=None)  # dims-shaped bool

    def __post_init__(self):
        if self.mass.shape != tuple(self.spec.dims):
            raise GridError(f"mass shape {self.mass.shape} != dims {self.spec.dims}")
        if self.known is None:
            self.known = np.ones(self.spec.dims, dtype=bool)

    def occupancy(self, tau: float = DEFAULT_TAU) -> np.ndarray:
        return self.mass >= tau


def _trilinear_corners(points: np.ndarray, spec: VoxelGridSpec):
    """Corner indices (N,8,3), weights (N,8), in a fixed corner order."""
    o = np.asarray(spec.origin, dtype=np.float64)
    g = (points - o) / spec.voxel - 0.5
    base = np.floor(g).astype(np.int64)
    frac = g - base
    # corner order: bit k of c selects the +1 offset on axis k
    offsets = np.array(
        [[(c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.int64
    )
    idx = base[:, None, :] + offsets[None, :, :]
    w_axis = np.where(offsets[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :])
    weights = w_axis.prod(axis=2)
    return idx, weights


def voxelize_trilinear(
    points: np.ndarray,
    weights: np.ndarray | float | None = None,
    spec: VoxelGridSpec | None = None,
) -> VoxelGrid:
    """Splat points into a mass grid via trilinear interpolation.

    Non-finite points are skipped (counted and reported via logging).
    Weights default to 1 per point and must be nonnegative.
    """
    if spec is None:
        raise GridError("a VoxelGridSpec is required")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if weights is None:
        w = np.ones(len(pts), dtype=np.float64)
    else:
        w = np.broadcast_to(np.asarray(weights, dtype=np.float64), (len(pts),)).copy()
    if np.any(w < 0):
        raise GridError("point weights must be nonnegative")

    finite = np.isfinite(pts).all(axis=1)
    n_skipped = int(len(pts) - finite.sum())
    if n_skipped:
        logger.warning("voxelize_trilinear: skipped %d non-finite points", n_skipped)
        pts = pts[finite]
        w = w[finite]

    mass = np.zeros(spec.dims, dtype=np.float64)
    if len(pts):
        idx, tw = _trilinear_corners(pts, spec)
        dims = np.asarray(spec.dims)
        inside = np.all((idx >= 0) & (idx < dims), axis=2)
        contrib = tw * w[:, None]
        flat_idx = (idx[..., 0] * dims[1] + idx[..., 1]) * dims[2] + idx[..., 2]
        keep = inside.reshape(-1)
        # point-major order so accumulation matches the brute-force oracle exactly
        np.add.at(mass.reshape(-1), flat_idx.reshape(-1)[keep], contrib.reshape(-1)[keep])
    return VoxelGrid(spec=spec, mass=mass)


def assign_voxel_labels(
    grid: VoxelGrid,
    points: np.ndarray,
    labels: np.ndarray,
    tau: float = DEFAULT_TAU,
) -> VoxelGrid:
    """Threshold occupancy at ``tau`` and vote semantic labels per voxel.

    Each class's points are splatted with the same trilinear rule; an occupied
    voxel takes the argmax class, ties broken toward the smallest class id.
    Voxels below ``tau`` get label 0.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    labs = np.asarray(labels).reshape(-1)
    if len(labs) != len(pts):
        raise GridError(f"labels length {len(labs)} != points length {len(pts)}")
    finite = np.isfinite(pts).all(axis=1)
    pts, labs = pts[finite], labs[finite]

    occupied = grid.mass >= tau
    label_grid = np.zeros(grid.spec.dims, dtype=np.uint16)
    classes = np.unique(labs)
    classes = classes[classes != 0]
    if len(classes) and occupied.any():
        class_mass = np.zeros((len(classes),) + tuple(grid.spec.dims), dtype=np.float64)
        for ci, c in enumerate(classes):
            sel = labs == c
            if sel.any():
                class_mass[ci] = voxelize_trilinear(pts[sel], None, grid.spec).mass
        best = np.argmax(class_mass, axis=0)  # first max wins -> smallest class id
        has_mass = class_mass.max(axis=0) > 0
        label_grid[occupied & has_mass] = classes[best[occupied & has_mass]].astype(np.uint16)
    return VoxelGrid(spec=grid.spec, mass=grid.mass, label=label_grid, known=grid.known)


def save_voxel_grid(grid: VoxelGrid, prefix: str | Path) -> None:
    """Write <prefix>.json spec sidecar plus mass/label/known tensors."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    dump_json(
        {
            "origin": list(grid.spec.origin),
            "voxel": grid.spec.voxel,
            "dims": list(grid.spec.dims),
        },
        prefix.with_suffix(".json"),
    )
    write_tensor(grid.mass.astype(np.float32), prefix.parent / (prefix.name + ".mass.tens"))
    label = grid.label if grid.label is not None else np.zeros(grid.spec.dims, dtype=np.uint16)
    write_tensor(label.astype(np.uint16), prefix.parent / (prefix.name + ".label.tens"))
    write_tensor(
        grid.known.astype(np.uint8), prefix.parent / (prefix.name + ".known.tens")
    )


def load_voxel_grid(prefix: str | Path) -> VoxelGrid:
    import json

    prefix = Path(prefix)
    meta = json.loads(prefix.with_suffix(".json").read_text())
    spec = VoxelGridSpec(
        origin=tuple(meta["origin"]), voxel=float(meta["voxel"]), dims=tuple(meta["dims"])
    )
    mass = read_tensor(prefix.parent / (prefix.name + ".mass.tens")).astype(np.float64)
    label = read_tensor(prefix.parent / (prefix.name + ".label.tens"))
    known = read_tensor(prefix.parent / (prefix.name + ".known.tens")).astype(bool)
    return VoxelGrid(spec=spec, mass=mass, label=label, known=known)
