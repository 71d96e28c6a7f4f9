"""Miniature two-stage reconstruction transformer.

A shared encoder and a memory-cross-attention decoder turn each frame into
decoder tokens; per-frame heads read out a global pointmap, a local pointmap,
a confidence map (strictly > 1), and a feature map at 4x the token resolution.
The scene memory is the append-only stack of decoder token grids; frame 1 is
the reference and decodes memory-free, later frames cross-attend to all
earlier tokens.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from ..geometry import DegenerateGeometryError, Pose7, register_pointmaps
from .blocks import DecoderBlock, EncoderBlock

RAW_CONF_CLAMP = (-15.0, 20.0)  # keeps conf = 1 + exp(raw) strictly > 1 in f32


class ModelError(ValueError):
    """Invalid model configuration or inputs."""


@dataclass(frozen=True)
class ModelConfig:
    patch: int = 8
    d: int = 64
    heads: int = 4
    enc_layers: int = 4
    dec_layers: int = 2
    feat_channels: int = 16
    student_layers: int = 1  # rendering-encoder depth (distilled toward enc_layers)
    rope_base: float = 100.0

    def __post_init__(self):
        if self.d % (2 * self.heads) != 0:
            raise ModelError(f"d={self.d} must be divisible by 2*heads={2 * self.heads}")
        if self.patch < 1 or min(self.enc_layers, self.dec_layers, self.student_layers) < 1:
            raise ModelError("patch and layer counts must be >= 1")

    def token_hw(self, h: int, w: int) -> tuple[int, int]:
        if h % self.patch or w % self.patch:
            raise ModelError(f"{h}x{w} not divisible by patch {self.patch}")
        return h // self.patch, w // self.patch

    def feat_hw(self, h: int, w: int) -> tuple[int, int]:
        ht, wt = self.token_hw(h, w)
        return 4 * ht, 4 * wt  # two x2 upsamplings from the token grid

    def to_dict(self) -> dict:
        return {
            "patch": self.patch,
            "d": self.d,
            "heads": self.heads,
            "enc_layers": self.enc_layers,
            "dec_layers": self.dec_layers,
            "feat_channels": self.feat_channels,
            "student_layers": self.student_layers,
            "rope_base": self.rope_base,
        }


@dataclass
class TokenGrid:
    """Tokens on the (H/patch, W/patch) grid with integer (row, col) positions."""

    tokens: torch.Tensor  # (Ht, Wt, d)
    positions: torch.Tensor  # (Ht*Wt, 2) long

    @property
    def grid_hw(self) -> tuple[int, int]:
        return int(self.tokens.shape[0]), int(self.tokens.shape[1])

    @property
    def flat(self) -> torch.Tensor:
        ht, wt, d = self.tokens.shape
        return self.tokens.reshape(ht * wt, d)

    def with_tokens(self, flat: torch.Tensor) -> "TokenGrid":
        return TokenGrid(tokens=flat.reshape(self.tokens.shape), positions=self.positions)


def grid_positions(ht: int, wt: int) -> torch.Tensor:
    rr, cc = torch.meshgrid(torch.arange(ht), torch.arange(wt), indexing="ij")
    return torch.stack([rr.reshape(-1), cc.reshape(-1)], dim=-1).long()


@dataclass
class SceneMemory:
    """Append-only stack of per-frame decoder token grids."""

    entries: list[tuple[int, TokenGrid]] = field(default_factory=list)

    @property
    def entry_count(self) -> int:
        return len(self.entries)

    @property
    def total_tokens(self) -> int:
        return sum(g.flat.shape[0] for _, g in self.entries)

    def append(self, frame_index: int, grid: TokenGrid) -> None:
        self.entries.append((frame_index, grid))

    def stacked(self) -> tuple[torch.Tensor | None, torch.Tensor | None]:
        if not self.entries:
            return None, None
        toks = torch.cat([g.flat for _, g in self.entries], dim=0)
        pos = torch.cat([g.positions for _, g in self.entries], dim=0)
        return toks, pos

    def checksum(self) -> str:
        h = hashlib.sha256()
        for idx, g in self.entries:
            h.update(str(idx).encode())
            h.update(g.tokens.detach().cpu().numpy().tobytes())
        return h.hexdigest()


@dataclass
class TaskTokens:
    """Learned head-selection tokens: t_g for pointmaps, t_s for features."""

    t_g: torch.Tensor
    t_s: torch.Tensor


@dataclass
class HeadOutputs:
    p_global: torch.Tensor  # (H, W, 3)
    p_local: torch.Tensor  # (H, W, 3)
    conf: torch.Tensor  # (H, W), strictly > 1
    conf_raw: torch.Tensor  # (H, W), clamped pre-activation
    feat: torch.Tensor  # (H', W', C)


@dataclass
class FrameOutput:
    p_global: np.ndarray
    p_local: np.ndarray
    conf: np.ndarray
    feat: np.ndarray
    pose: Pose7
    pose_degenerate: bool = False


@dataclass
class ReconstructionOutput:
    frames: list[FrameOutput]
    memory: SceneMemory


def _patchify(image: torch.Tensor, patch: int) -> torch.Tensor:
    h, w, ch = image.shape
    ht, wt = h // patch, w // patch
    x = image.view(ht, patch, wt, patch, ch).permute(0, 2, 1, 3, 4)
    return x.reshape(ht, wt, patch * patch * ch)


def _unpatchify(x: torch.Tensor, patch: int, channels: int) -> torch.Tensor:
    ht, wt, _ = x.shape
    x = x.view(ht, wt, patch, patch, channels).permute(0, 2, 1, 3, 4)
    return x.reshape(ht * patch, wt * patch, channels)


def run_prediction_heads(m: nn.Module, decoded: "TokenGrid", task: "TaskTokens") -> "HeadOutputs":
    """Head computation shared by the reconstruction and rendering models.

    ``m`` carries pointmap_head, feat_fc1/2, up{1,2}_{conv,norm}, act, cfg.
    """
    p = m.cfg.patch
    geo = m.pointmap_head(decoded.tokens + task.t_g)
    maps = _unpatchify(geo, p, 7)
    raw = torch.clamp(maps[..., 6], *RAW_CONF_CLAMP)
    conf = 1.0 + torch.exp(raw)

    f = m.feat_fc2(m.act(m.feat_fc1(decoded.tokens + task.t_s)))
    f = f.permute(2, 0, 1).unsqueeze(0)  # (1, C, Ht, Wt)
    for conv, norm in ((m.up1_conv, m.up1_norm), (m.up2_conv, m.up2_norm)):
        f = torch.nn.functional.interpolate(
            f, scale_factor=2, mode="bilinear", align_corners=False
        )
        f = conv(f)
        f = norm(f.permute(0, 2, 3, 1))
        f = m.act(f).permute(0, 3, 1, 2)
    feat = f.squeeze(0).permute(1, 2, 0)
    return HeadOutputs(
        p_global=maps[..., 0:3],
        p_local=maps[..., 3:6],
        conf=conf,
        conf_raw=raw,
        feat=feat,
    )


class SceneModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d, p = cfg.d, cfg.patch
        self.embed = nn.Linear(3 * p * p, d)
        self.enc_blocks = nn.ModuleList(
            EncoderBlock(d, cfg.heads, cfg.rope_base) for _ in range(cfg.enc_layers)
        )
        self.dec_blocks = nn.ModuleList(
            DecoderBlock(d, cfg.heads, cfg.rope_base) for _ in range(cfg.dec_layers)
        )
        self.non_reference_token = nn.Parameter(torch.randn(d) * 0.02)
        self.task_g = nn.Parameter(torch.randn(d) * 0.02)
        self.task_s = nn.Parameter(torch.randn(d) * 0.02)
        self.pointmap_head = nn.Linear(d, p * p * 7)
        c = cfg.feat_channels
        self.feat_fc1 = nn.Linear(d, d)
        self.feat_fc2 = nn.Linear(d, c)
        self.up1_conv = nn.Conv2d(c, c, 3, padding=1)
        self.up1_norm = nn.LayerNorm(c)
        self.up2_conv = nn.Conv2d(c, c, 3, padding=1)
        self.up2_norm = nn.LayerNorm(c)
        self.act = nn.GELU()

    @staticmethod
    def seeded(cfg: ModelConfig, seed: int) -> "SceneModel":
        torch.manual_seed(seed)
        return SceneModel(cfg)

    @property
    def task_tokens(self) -> TaskTokens:
        return TaskTokens(t_g=self.task_g, t_s=self.task_s)

    def patchify_embed(self, image) -> TokenGrid:
        """Linear patch embedding; grid positions from patch indices."""
        img = torch.as_tensor(np.asarray(image), dtype=torch.float32)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ModelError(f"image must be HxWx3, got {tuple(img.shape)}")
        ht, wt = self.cfg.token_hw(img.shape[0], img.shape[1])
        tokens = self.embed(_patchify(img, self.cfg.patch))
        return TokenGrid(tokens=tokens, positions=grid_positions(ht, wt))

    def encode_frame(self, grid: TokenGrid) -> TokenGrid:
        x = grid.flat
        for blk in self.enc_blocks:
            x = blk(x, grid.positions)
        if not torch.isfinite(x).all():
            raise ModelError("non-finite encoder activations (exploded weights?)")
        return grid.with_tokens(x)

    def decode_frame_with_memory(
        self, grid: TokenGrid, memory: SceneMemory, is_reference: bool
    ) -> TokenGrid:
        if memory.entry_count == 0 and not is_reference:
            raise ModelError("empty memory is only allowed for the reference frame")
        x = grid.flat
        if not is_reference:
            x = x + self.non_reference_token
        mem_tokens, mem_positions = memory.stacked()
        for blk in self.dec_blocks:
            x = blk(x, grid.positions, mem_tokens, mem_positions)
        return grid.with_tokens(x)

    def apply_prediction_heads(
        self, decoded: TokenGrid, task: TaskTokens | None = None
    ) -> HeadOutputs:
        """Pointmap/confidence from a linear head, features from the MLP+upsample head."""
        task = task if task is not None else self.task_tokens
        return run_prediction_heads(self, decoded, task)

    def forward_frame(
        self,
        image,
        memory: SceneMemory,
        is_reference: bool,
        task: TaskTokens | None = None,
    ) -> tuple[HeadOutputs, TokenGrid]:
        """Full per-frame pass; appends nothing (caller owns the memory)."""
        grid = self.patchify_embed(image)
        enc = self.encode_frame(grid)
        dec = self.decode_frame_with_memory(enc, memory, is_reference)
        return self.apply_prediction_heads(dec, task), dec

    def reconstruct_sequence(self, frames: list) -> ReconstructionOutput:
        """Process frames in order, growing the scene memory by one entry each.

        Frame 1 decodes with empty memory as the reference; frame i >= 2
        cross-attends to all earlier decoder tokens.  Per-frame poses come
        from confidence-weighted registration of the local pointmap onto the
        global one; registration degeneracy is flagged, not fatal.
        """
        if not frames:
            raise ModelError("empty frame list")
        memory = SceneMemory()
        outputs: list[FrameOutput] = []
        with torch.no_grad():
            for i, image in enumerate(frames):
                heads, dec = self.forward_frame(image, memory, is_reference=(i == 0))
                memory.append(i, dec)
                p_g = heads.p_global.numpy().astype(np.float64)
                p_l = heads.p_local.numpy().astype(np.float64)
                conf = heads.conf.numpy().astype(np.float64)
                try:
                    pose = register_pointmaps(p_l, p_g, conf)
                    degenerate = False
                except DegenerateGeometryError:
                    pose = Pose7.identity()
                    degenerate = True
                outputs.append(
                    FrameOutput(
                        p_global=p_g,
                        p_local=p_l,
                        conf=conf,
                        feat=heads.feat.numpy().astype(np.float64),
                        pose=pose,
                        pose_degenerate=degenerate,
                    )
                )
        return ReconstructionOutput(frames=outputs, memory=memory)
