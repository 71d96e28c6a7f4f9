"""Novel-view rendering: pose augmentation, point projection, and the
student-encoder / frozen-memory rendering decoder.

Test-time view augmentation walks forward along the fitted trajectory every
``rho_fwd`` meters; at each stop it enumerates lateral shifts {0, +-rho_lat}
along the horizontal axis perpendicular to the travel direction and yaw
angles {0, +-phi} about the vertical axis (y-down camera convention, so
vertical is -y of the reference frame).  Duplicates within 1e-9 collapse.

Projection rasterizes each point to its nearest pixel with a single-pixel
z-buffer (nearest depth wins); features are splatted by the same rule at
feature resolution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .geometry import GeometryError, Intrinsics, Pose7, apply_pose, inverse, rotate_about_axis
from .scene_model.blocks import DecoderBlock, EncoderBlock
from .scene_model.model import (
    HeadOutputs,
    ModelConfig,
    SceneMemory,
    SceneModel,
    TaskTokens,
    TokenGrid,
    _patchify,
    grid_positions,
    run_prediction_heads,
)

Z_NEAR = 0.05  # meters; excludes numerically unstable divisions


class NvrError(ValueError):
    """Invalid rendering inputs."""


@dataclass(frozen=True)
class TTVAConfig:
    n_fwd: int = 10
    rho_fwd: float = 3.0
    rho_lat: float = 2.0
    phi_deg: float = 60.0
    include_zero_lateral: bool = True

    def __post_init__(self):
        if self.n_fwd < 1:
            raise NvrError(f"n_fwd must be >= 1, got {self.n_fwd}")
        if self.rho_fwd <= 0:
            raise NvrError(f"rho_fwd must be > 0, got {self.rho_fwd}")
        if self.rho_lat < 0:
            raise NvrError(f"rho_lat must be >= 0, got {self.rho_lat}")
        if not 0 <= self.phi_deg < 180:
            raise NvrError(f"phi_deg must be in [0, 180), got {self.phi_deg}")

    def to_json(self) -> dict:
        return {
            "n_fwd": self.n_fwd,
            "rho_fwd": self.rho_fwd,
            "rho_lat": self.rho_lat,
            "phi_deg": self.phi_deg,
            "include_zero_lateral": self.include_zero_lateral,
        }

    @staticmethod
    def from_json_file(path: str | Path) -> "TTVAConfig":
        raw = json.loads(Path(path).read_text())
        return TTVAConfig(**raw)


def _camera_rotation(forward: np.ndarray, down_hint: np.ndarray) -> np.ndarray:
    """Columns (right, down, forward) with down projected orthogonal to forward."""
    f = forward / np.linalg.norm(forward)
    d = down_hint - (down_hint @ f) * f
    n = np.linalg.norm(d)
    if n < 1e-9:
        # forward is vertical; fall back to world +z as the down hint
        d = np.array([0.0, 0.0, 1.0]) - (np.array([0.0, 0.0, 1.0]) @ f) * f
        n = np.linalg.norm(d)
    d = d / n
    r = np.cross(d, f)
    return np.stack([r, d, f], axis=1)


def sample_ttva_poses(origin, direction, cfg: TTVAConfig) -> list[Pose7]:
    """Enumerate augmentation poses: k-major, then lateral {0,+,-}, then yaw {0,+,-}.

    Positions are origin + k*rho_fwd*direction for k = 1..n_fwd; duplicates
    within 1e-9 are removed.  All poses are in the frame of ``origin`` /
    ``direction`` (the reference frame), with vertical = -y.
    """
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    norm = np.linalg.norm(direction)
    if norm < 1e-12:
        raise GeometryError("zero direction")
    direction = direction / norm
    down = np.array([0.0, 1.0, 0.0])
    vertical = -down
    lateral_axis = np.cross(down, direction)
    lat_norm = np.linalg.norm(lateral_axis)
    lateral_axis = lateral_axis / lat_norm if lat_norm > 1e-9 else np.array([1.0, 0.0, 0.0])

    laterals = [0.0, cfg.rho_lat, -cfg.rho_lat] if cfg.include_zero_lateral else [cfg.rho_lat, -cfg.rho_lat]
    phi = np.deg2rad(cfg.phi_deg)
    yaws = [0.0, phi, -phi]

    poses: list[Pose7] = []
    kept: list[np.ndarray] = []
    for k in range(1, cfg.n_fwd + 1):
        base = origin + k * cfg.rho_fwd * direction
        for lat in laterals:
            pos = base + lat * lateral_axis
            for yaw in yaws:
                fwd = rotate_about_axis(direction, vertical, yaw)
                pose = Pose7.from_matrix(_camera_rotation(fwd, down), pos)
                v = pose.as_vector()
                if any(np.max(np.abs(v - u)) <= 1e-9 for u in kept):
                    continue
                kept.append(v)
                poses.append(pose)
    return poses


@dataclass
class NovelViewBundle:
    """Projection of the merged cloud into one novel pinhole view."""

    xyz_image: np.ndarray  # (H, W, 3) in the novel camera frame; zeros when invalid
    depth: np.ndarray  # (H, W); 0 when invalid
    corr: np.ndarray  # (H, W) int64 source-point index; -1 when invalid
    feat_proj: np.ndarray  # (H', W', C)
    conf_proj: np.ndarray  # (H, W)
    valid: np.ndarray  # (H, W) bool

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())


def _zbuffer(rows, cols, depth, h, w):
    """Indices of the nearest point per pixel; stable for reproducibility."""
    order = np.argsort(-depth, kind="stable")  # farthest first, nearest written last
    winner = np.full((h, w), -1, dtype=np.int64)
    winner[rows[order], cols[order]] = order
    return winner


def project_cloud(
    points: np.ndarray,
    conf: np.ndarray,
    feat_index: np.ndarray,
    feature_bank: np.ndarray,
    pose: Pose7,
    k: Intrinsics,
    h: int,
    w: int,
    feat_hw: tuple[int, int],
) -> NovelViewBundle:
    """Project reference-frame points into the camera at ``pose`` (camera-to-ref).

    Points behind z_near are discarded; each survivor lands on its nearest
    pixel and the per-pixel z-buffer keeps the closest point.  An empty
    frustum yields an all-invalid bundle, not an error.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    conf = np.asarray(conf, dtype=np.float64).reshape(-1)
    feat_index = np.asarray(feat_index).reshape(-1)
    hp, wp = feat_hw
    cdim = feature_bank.shape[1] if feature_bank is not None else 0

    cam = apply_pose(inverse(pose), pts)
    z = cam[:, 2]
    keep = z > Z_NEAR
    idx_orig = np.nonzero(keep)[0]
    cam = cam[keep]
    z = z[keep]

    xyz = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    corr = np.full((h, w), -1, dtype=np.int64)
    conf_proj = np.zeros((h, w))
    feat_proj = np.zeros((hp, wp, cdim))
    valid = np.zeros((h, w), dtype=bool)

    if len(cam):
        u = k.fx * cam[:, 0] / z + k.cx
        v = k.fy * cam[:, 1] / z + k.cy
        cols = np.rint(u).astype(np.int64)
        rows = np.rint(v).astype(np.int64)
        inside = (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
        if inside.any():
            cam_i = cam[inside]
            z_i = z[inside]
            rows_i = rows[inside]
            cols_i = cols[inside]
            src = idx_orig[inside]
            winner = _zbuffer(rows_i, cols_i, z_i, h, w)
            hit = winner >= 0
            sel = winner[hit]
            xyz[hit] = cam_i[sel]
            depth[hit] = z_i[sel]
            corr[hit] = src[sel]
            conf_proj[hit] = conf[src[sel]]
            valid = hit

        if cdim:
            kf = k.scaled(wp / w, hp / h)
            uf = kf.fx * cam[:, 0] / z + kf.cx
            vf = kf.fy * cam[:, 1] / z + kf.cy
            fcols = np.rint(uf).astype(np.int64)
            frows = np.rint(vf).astype(np.int64)
            finside = (fcols >= 0) & (fcols < wp) & (frows >= 0) & (frows < hp)
            if finside.any():
                fwinner = _zbuffer(frows[finside], fcols[finside], z[finside], hp, wp)
                fhit = fwinner >= 0
                fsel = fwinner[fhit]
                feat_proj[fhit] = feature_bank[feat_index[idx_orig[finside][fsel]]]

    return NovelViewBundle(
        xyz_image=xyz, depth=depth, corr=corr,
        feat_proj=feat_proj, conf_proj=conf_proj, valid=valid,
    )


class NovelViewTokenizer(nn.Module):
    """Per-modality MLPs over patchified projection images, fused to d tokens."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d, p, c = cfg.d, cfg.patch, cfg.feat_channels
        widths = {"xyz": 3 * p * p, "conf": p * p, "valid": p * p, "feat": 16 * c}
        self.mlps = nn.ModuleDict(
            {
                name: nn.Sequential(nn.Linear(width, d), nn.GELU(), nn.Linear(d, d))
                for name, width in widths.items()
            }
        )
        self.fuse = nn.Linear(4 * d, d)

    def forward(self, bundle: NovelViewBundle) -> TokenGrid:
        p = self.cfg.patch
        h, w = bundle.depth.shape
        ht, wt = self.cfg.token_hw(h, w)
        xyz = torch.as_tensor(bundle.xyz_image, dtype=torch.float32)
        conf = torch.as_tensor(bundle.conf_proj, dtype=torch.float32).unsqueeze(-1)
        validch = torch.as_tensor(bundle.valid, dtype=torch.float32).unsqueeze(-1)
        feat = torch.as_tensor(bundle.feat_proj, dtype=torch.float32)

        parts = [
            self.mlps["xyz"](_patchify(xyz, p)),
            self.mlps["conf"](_patchify(conf, p)),
            self.mlps["valid"](_patchify(validch, p)),
            self.mlps["feat"](_patchify(feat, 4)),  # feature res is 4x the token grid
        ]
        tokens = self.fuse(torch.cat(parts, dim=-1))
        return TokenGrid(tokens=tokens, positions=grid_positions(ht, wt))


class RenderModel(nn.Module):
    """Student encoder plus a rendering decoder reading the frozen scene memory."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d
        self.tokenizer = NovelViewTokenizer(cfg)
        self.student_blocks = nn.ModuleList(
            EncoderBlock(d, cfg.heads, cfg.rope_base) for _ in range(cfg.student_layers)
        )
        self.dec_blocks = nn.ModuleList(
            DecoderBlock(d, cfg.heads, cfg.rope_base) for _ in range(cfg.dec_layers)
        )
        self.non_reference_token = nn.Parameter(torch.randn(d) * 0.02)
        self.task_g = nn.Parameter(torch.randn(d) * 0.02)
        self.task_s = nn.Parameter(torch.randn(d) * 0.02)
        # heads mirror the reconstruction model's
        p, c = cfg.patch, cfg.feat_channels
        self.pointmap_head = nn.Linear(d, p * p * 7)
        self.feat_fc1 = nn.Linear(d, d)
        self.feat_fc2 = nn.Linear(d, c)
        self.up1_conv = nn.Conv2d(c, c, 3, padding=1)
        self.up1_norm = nn.LayerNorm(c)
        self.up2_conv = nn.Conv2d(c, c, 3, padding=1)
        self.up2_norm = nn.LayerNorm(c)
        self.act = nn.GELU()

    @staticmethod
    def init_from(recon: SceneModel, seed: int = 0) -> "RenderModel":
        """Fresh tokenizer/student, decoder/heads/task tokens copied from the teacher."""
        torch.manual_seed(seed)
        model = RenderModel(recon.cfg)
        with torch.no_grad():
            for src, dst in zip(recon.dec_blocks, model.dec_blocks):
                dst.load_state_dict(src.state_dict())
            model.non_reference_token.copy_(recon.non_reference_token)
            model.task_g.copy_(recon.task_g)
            model.task_s.copy_(recon.task_s)
            for name in (
                "pointmap_head", "feat_fc1", "feat_fc2",
                "up1_conv", "up1_norm", "up2_conv", "up2_norm",
            ):
                getattr(model, name).load_state_dict(getattr(recon, name).state_dict())
        return model

    @property
    def task_tokens(self) -> TaskTokens:
        return TaskTokens(t_g=self.task_g, t_s=self.task_s)

    def encode_student(self, grid: TokenGrid) -> TokenGrid:
        x = grid.flat
        for blk in self.student_blocks:
            x = blk(x, grid.positions)
        return grid.with_tokens(x)

    def render_view(self, bundle: NovelViewBundle, memory: SceneMemory) -> HeadOutputs:
        grid = self.tokenizer(bundle)
        enc = self.encode_student(grid)
        x = enc.flat + self.non_reference_token
        mem_tokens, mem_positions = memory.stacked()
        for blk in self.dec_blocks:
            x = blk(x, enc.positions, mem_tokens, mem_positions)
        return run_prediction_heads(self, enc.with_tokens(x), self.task_tokens)


def render_novel_views(
    memory: SceneMemory,
    bundles: list[NovelViewBundle],
    model: RenderModel,
) -> list[HeadOutputs]:
    """Render each bundle against the frozen memory; the memory must not change."""
    if memory.entry_count == 0:
        raise NvrError("empty scene memory")
    before = memory.checksum()
    outputs = []
    with torch.no_grad():
        for bundle in bundles:
            outputs.append(model.render_view(bundle, memory))
    if memory.checksum() != before:
        raise NvrError("scene memory mutated during rendering")
    return outputs
