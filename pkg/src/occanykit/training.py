"""Plain gradient-descent smoke training of the miniature model.

The model forward runs in torch; the losses and their gradients come from the
hand-derived numpy implementations and are injected back into the torch graph
via ``torch.autograd.backward`` with explicit gradient tensors.  This keeps a
single source of truth for the loss math (the finite-difference-verified
code) while torch handles the network chain rule.

The batch is one synthetic view duplicated into a two-frame sequence: the
second frame exercises the memory cross-attention path, and because the
global and local ground truth coincide for every frame, tying the local head
rows to the global ones at init keeps both pointmap heads identical
throughout training, so registering frame 1 returns the identity pose (the
reference-frame gauge).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .geometry import Intrinsics, Pose7, register_pointmaps
from .losses import LossConfig, loss_forcing, loss_pointmap
from .metrics import ClassMapping
from .scene_model import ModelConfig, SceneMemory, SceneModel
from .synth import (
    SynthSceneSpec,
    default_camera_poses,
    generate_scene,
    render_oracle_views,
    synthesize_image,
)


@dataclass(frozen=True)
class TrainSmokeConfig:
    seed: int = 0
    steps: int = 200
    lr: float = 3e-5
    h: int = 32
    w: int = 32
    model: ModelConfig = ModelConfig()
    loss: LossConfig = LossConfig(alpha=0.2, scale_mode="normalized")


@dataclass
class TrainSmokeResult:
    initial_loss: float
    final_loss: float
    history: list[float]
    gauge_pose: Pose7
    within_class_cos: float
    across_class_cos: float
    seconds: float
    model: SceneModel = field(repr=False, default=None)


def average_pool_confidence(conf: np.ndarray, feat_hw: tuple[int, int]) -> np.ndarray:
    """Average-pool an HxW confidence map to feature resolution (H', W')."""
    h, w = conf.shape
    hp, wp = feat_hw
    if h % hp or w % wp:
        raise ValueError(f"confidence {h}x{w} not divisible by feature grid {hp}x{wp}")
    return conf.reshape(hp, h // hp, wp, w // wp).mean(axis=(1, 3))


def tie_local_head_to_global(model: SceneModel) -> None:
    """Copy the global-pointmap rows of the shared head onto the local rows.

    The head emits 7 channels per patch pixel (3 global, 3 local, 1 raw
    confidence); rows 3:6 of each group are set equal to rows 0:3.
    """
    with torch.no_grad():
        w = model.pointmap_head.weight
        b = model.pointmap_head.bias
        out = w.shape[0]
        for g in range(out // 7):
            w[g * 7 + 3 : g * 7 + 6] = w[g * 7 : g * 7 + 3]
            b[g * 7 + 3 : g * 7 + 6] = b[g * 7 : g * 7 + 3]


def feature_class_cosines(
    feat: np.ndarray, labels: np.ndarray, max_per_class: int = 128, seed: int = 0
) -> tuple[float, float]:
    """Mean cosine similarity of feature pixels within vs across label classes."""
    hp, wp, _ = feat.shape
    f = feat.reshape(hp * wp, -1)
    norms = np.linalg.norm(f, axis=1, keepdims=True)
    f = f / np.maximum(norms, 1e-12)
    lab = labels.reshape(-1)
    rng = np.random.default_rng(seed)
    by_class = {}
    for c in np.unique(lab):
        idx = np.nonzero(lab == c)[0]
        if len(idx) >= 2:
            if len(idx) > max_per_class:
                idx = rng.choice(idx, size=max_per_class, replace=False)
            by_class[int(c)] = f[idx]
    within, across = [], []
    classes = sorted(by_class)
    for i, c in enumerate(classes):
        fc = by_class[c]
        g = fc @ fc.T
        n = len(fc)
        within.append((g.sum() - np.trace(g)) / (n * (n - 1)))
        for c2 in classes[i + 1 :]:
            across.append(float((fc @ by_class[c2].T).mean()))
    return float(np.mean(within)), float(np.mean(across)) if across else 0.0


def build_training_batch(cfg: TrainSmokeConfig):
    """One oracle view of a seeded scene, duplicated into a 2-frame sequence."""
    spec = SynthSceneSpec(seed=cfg.seed)
    scene, _ = generate_scene(spec)
    pose_w = default_camera_poses(1, 1.5, 1.6)[0]
    k = Intrinsics(0.9 * cfg.w, 0.9 * cfg.w, cfg.w / 2, cfg.h / 2)
    hp, wp = cfg.model.feat_hw(cfg.h, cfg.w)
    view = render_oracle_views(
        scene, [pose_w], k, cfg.h, cfg.w, cfg.model.feat_channels,
        feat_resolution=(hp, wp), feat_seed=cfg.seed + 99,
    )[0]
    image = synthesize_image(view, ClassMapping.default().palette)
    return view, image


def train_smoke(cfg: TrainSmokeConfig = TrainSmokeConfig()) -> TrainSmokeResult:
    """Run fixed-step gradient descent on one synthetic batch.

    Minimizes L_glo + L_loc + L_forcing; the confidence path of the forcing
    loss is a stop-gradient by contract.
    """
    t_start = time.time()
    torch.manual_seed(cfg.seed)
    model = SceneModel(cfg.model)
    tie_local_head_to_global(model)
    view, image = build_training_batch(cfg)
    frames = [image, image]  # frame 2 exercises the memory path; same ground truth

    gt_pm = view.pointmap.astype(np.float64)
    valid = view.valid
    teacher = view.teacher_features.astype(np.float64)
    hp, wp = cfg.model.feat_hw(cfg.h, cfg.w)

    params = [p for p in model.parameters() if p.requires_grad]
    history: list[float] = []

    for _ in range(cfg.steps):
        memory = SceneMemory()
        targets: list[torch.Tensor] = []
        grads: list[torch.Tensor] = []
        total = 0.0
        for i, img in enumerate(frames):
            heads, dec = model.forward_frame(img, memory, is_reference=(i == 0))
            memory.append(i, dec)
            conf_np = heads.conf.detach().numpy().astype(np.float64)
            res_g = loss_pointmap(
                heads.p_global.detach().numpy().astype(np.float64),
                gt_pm, conf_np, valid, cfg.loss,
            )
            res_l = loss_pointmap(
                heads.p_local.detach().numpy().astype(np.float64),
                gt_pm, conf_np, valid, cfg.loss,
            )
            conf_feat = average_pool_confidence(conf_np, (hp, wp))
            val_f, grad_f = loss_forcing(
                heads.feat.detach().numpy().astype(np.float64), teacher, conf_feat
            )
            total += res_g.value + res_l.value + val_f
            targets += [heads.p_global, heads.p_local, heads.conf_raw, heads.feat]
            grads += [
                torch.as_tensor(res_g.grad_pred, dtype=torch.float32),
                torch.as_tensor(res_l.grad_pred, dtype=torch.float32),
                torch.as_tensor(res_g.grad_conf_raw + res_l.grad_conf_raw, dtype=torch.float32),
                torch.as_tensor(grad_f, dtype=torch.float32),
            ]
        history.append(total)
        torch.autograd.backward(targets, grads)
        with torch.no_grad():
            for p in params:
                if p.grad is not None:
                    p -= cfg.lr * p.grad
                    p.grad = None

    # post-training diagnostics on the training view
    with torch.no_grad():
        memory = SceneMemory()
        heads, dec = model.forward_frame(frames[0], memory, is_reference=True)
    gauge = register_pointmaps(
        heads.p_local.numpy().astype(np.float64),
        heads.p_global.numpy().astype(np.float64),
        heads.conf.numpy().astype(np.float64),
    )
    rows = (np.arange(hp) * cfg.h) // hp
    cols = (np.arange(wp) * cfg.w) // wp
    labels_small = view.label_map[np.ix_(rows, cols)]
    within, across = feature_class_cosines(heads.feat.numpy(), labels_small, seed=cfg.seed)

    return TrainSmokeResult(
        initial_loss=history[0],
        final_loss=history[-1],
        history=history,
        gauge_pose=gauge,
        within_class_cos=within,
        across_class_cos=across,
        seconds=time.time() - t_start,
        model=model,
    )
