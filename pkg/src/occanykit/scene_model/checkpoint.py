"""Weight checkpoints: a directory of named tensors plus a JSON config.

Layout:

    <dir>/config.json                  model configuration
    <dir>/recon/<param.name>.tens      reconstruction model weights
    <dir>/render/<param.name>.tens     rendering model weights (optional)

Parameter names follow the module tree (e.g. ``enc_blocks.0.attn.qkv.weight``).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from torch import nn

from ..tensorio import dump_json, read_tensor, write_tensor
from .model import ModelConfig, SceneModel


class CheckpointError(ValueError):
    """Missing or inconsistent checkpoint contents."""


def _save_module(module: nn.Module, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for name, tensor in module.state_dict().items():
        write_tensor(tensor.detach().cpu().numpy().astype(np.float32), directory / f"{name}.tens")


def _load_module(module: nn.Module, directory: Path) -> None:
    state = {}
    for name, tensor in module.state_dict().items():
        path = directory / f"{name}.tens"
        if not path.exists():
            raise CheckpointError(f"checkpoint missing tensor {path}")
        arr = read_tensor(path)
        if tuple(arr.shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"{name}: checkpoint shape {arr.shape} != model shape {tuple(tensor.shape)}"
            )
        state[name] = torch.from_numpy(arr.astype(np.float32))
    module.load_state_dict(state)


def save_checkpoint(directory: str | Path, recon: SceneModel, render=None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dump_json(recon.cfg.to_dict(), directory / "config.json")
    _save_module(recon, directory / "recon")
    if render is not None:
        _save_module(render, directory / "render")


def load_checkpoint(directory: str | Path):
    """Returns (recon model, render model or None)."""
    from ..nvr import RenderModel

    directory = Path(directory)
    cfg_path = directory / "config.json"
    if not cfg_path.exists():
        raise CheckpointError(f"no config.json under {directory}")
    cfg = ModelConfig(**json.loads(cfg_path.read_text()))
    recon = SceneModel(cfg)
    _load_module(recon, directory / "recon")
    render = None
    if (directory / "render").exists():
        render = RenderModel(cfg)
        _load_module(render, directory / "render")
    recon.eval()
    if render is not None:
        render.eval()
    return recon, render
