"""Training losses with analytic gradients, plus a finite-difference harness.

Confidence-weighted pointmap loss (serves both the global and local pair):

    L = (1/s) * sum_valid || C (.) (P - P*) ||_1  -  alpha * sum_valid log C

with C broadcast over the 3 channels, C = 1 + exp(raw) > 1, and s = 1 in
metric mode or the mean distance of valid GT points to the origin in
normalized mode.  Only the L1 term is scaled by 1/s; both terms are summed
over valid pixels without a pixel mean.

Feature-forcing loss (per stacked frame batch):

    L = (1/(H'*W')) * sum_frames sum_pixels || C (.) (F - F*) ||_2^2

The confidence factor is a stop-gradient input: its gradient is zero by
contract.  The encoder distillation loss is a plain squared-L2 over token
grids with the teacher held constant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class LossError(ValueError):
    """Invalid loss inputs (shape mismatch, empty valid set, zero scale)."""


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.2
    scale_mode: str = "metric"  # "metric" (s = 1) or "normalized"

    def __post_init__(self):
        if self.alpha < 0:
            raise LossError(f"alpha must be >= 0, got {self.alpha}")
        if self.scale_mode not in ("metric", "normalized"):
            raise LossError(f"unknown scale_mode {self.scale_mode!r}")


@dataclass
class PointmapLossResult:
    value: float
    grad_pred: np.ndarray  # d value / d pred, zero on invalid pixels
    grad_conf_raw: np.ndarray  # d value / d raw, where conf = 1 + exp(raw)
    grad_conf: np.ndarray  # d value / d conf, for chaining into frameworks
    scale: float


def _resolve_scale(gt: np.ndarray, valid: np.ndarray, cfg: LossConfig) -> float:
    if cfg.scale_mode == "metric":
        return 1.0
    s = float(np.linalg.norm(gt[valid], axis=-1).mean())
    if s <= 0:
        raise LossError("normalization scale is zero (all valid GT points at origin)")
    return s


def loss_pointmap(
    pred: np.ndarray,
    gt: np.ndarray,
    conf: np.ndarray,
    valid: np.ndarray | None = None,
    cfg: LossConfig = LossConfig(),
) -> PointmapLossResult:
    """Confidence-weighted L1 pointmap loss with log-confidence regularizer.

    The L1 subgradient at exact zeros is 0.  Gradients on invalid pixels are
    identically zero.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    conf = np.asarray(conf, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[:-1] != conf.shape or pred.shape[-1] != 3:
        raise LossError(
            f"shape mismatch: pred {pred.shape}, gt {gt.shape}, conf {conf.shape}"
        )
    if valid is None:
        valid = np.ones(conf.shape, dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != conf.shape:
        raise LossError(f"valid shape {valid.shape} != conf shape {conf.shape}")
    if not valid.any():
        raise LossError("all pixels invalid")
    # the head activation guarantees conf > 1; the math only needs positivity
    if np.any(conf[valid] <= 0.0):
        raise LossError("confidence must be positive on valid pixels")
    if not np.all(np.isfinite(gt[valid])):
        raise LossError("GT pointmap not finite on valid pixels")

    s = _resolve_scale(gt, valid, cfg)
    diff = pred - gt
    vmask3 = valid[..., None]
    abs_term = float((conf[..., None] * np.abs(diff))[np.broadcast_to(vmask3, diff.shape)].sum())
    log_term = float(np.log(conf[valid]).sum())
    value = abs_term / s - cfg.alpha * log_term

    sign = np.sign(diff)
    grad_pred = np.where(vmask3, conf[..., None] * sign / s, 0.0)
    grad_conf = np.where(valid, np.abs(diff).sum(axis=-1) / s - cfg.alpha / conf, 0.0)
    grad_conf_raw = grad_conf * (conf - 1.0)  # d conf / d raw = exp(raw) = conf - 1
    return PointmapLossResult(
        value=value,
        grad_pred=grad_pred,
        grad_conf_raw=grad_conf_raw,
        grad_conf=grad_conf,
        scale=s,
    )


def loss_forcing(
    feat_pred: np.ndarray,
    feat_teacher: np.ndarray,
    conf_feat: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Confidence-weighted MSE between predicted and teacher feature maps.

    Accepts (H', W', C) single frames or (N, H', W', C) stacks with conf at
    (H', W') / (N, H', W'); the sum over frames is normalized by H'*W' only.
    Returns (value, grad wrt feat_pred); the confidence gradient is zero by
    the stop-gradient contract and is not returned.
    """
    fp = np.asarray(feat_pred, dtype=np.float64)
    ft = np.asarray(feat_teacher, dtype=np.float64)
    cf = np.asarray(conf_feat, dtype=np.float64)
    if fp.ndim == 3:
        fp, ft, cf = fp[None], ft[None], cf[None]
    if fp.shape != ft.shape or cf.shape != fp.shape[:-1] or fp.ndim != 4:
        raise LossError(
            f"shape mismatch: pred {feat_pred.shape}, teacher {feat_teacher.shape}, "
            f"conf {conf_feat.shape}"
        )
    hw = fp.shape[1] * fp.shape[2]
    weighted = cf[..., None] * (fp - ft)
    value = float((weighted**2).sum()) / hw
    grad = 2.0 * cf[..., None] ** 2 * (fp - ft) / hw
    if feat_pred.ndim == 3:
        grad = grad[0]
    return value, grad


def loss_encoder_distill(
    student_tokens: Sequence[np.ndarray],
    teacher_tokens: Sequence[np.ndarray],
) -> tuple[float, list[np.ndarray]]:
    """Squared L2 distance between token grids, summed over views.

    Teacher tokens are constants; returns (value, per-view grads wrt student).
    """
    if len(student_tokens) == 0:
        raise LossError("empty view list")
    if len(student_tokens) != len(teacher_tokens):
        raise LossError("student/teacher view counts differ")
    value = 0.0
    grads = []
    for i, (s, t) in enumerate(zip(student_tokens, teacher_tokens)):
        s = np.asarray(s, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        if s.shape != t.shape:
            raise LossError(f"view {i}: student {s.shape} != teacher {t.shape}")
        d = s - t
        value += float((d**2).sum())
        grads.append(2.0 * d)
    return value, grads


def gradient_check(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0: np.ndarray,
    eps: float = 1e-5,
) -> float:
    """Max relative error between f's analytic gradient and central differences.

    ``f`` maps a flat parameter vector to (scalar, gradient).  Differences are
    formed in the widest float precision available (longdouble).  Returns
    max_i |analytic_i - fd_i| / max(1, |fd_i|).
    """
    x0 = np.asarray(x0, dtype=np.float64).ravel()
    _, analytic = f(x0)
    analytic = np.asarray(analytic, dtype=np.longdouble).ravel()
    if analytic.shape != x0.shape:
        raise LossError(f"gradient shape {analytic.shape} != x0 shape {x0.shape}")
    worst = 0.0
    for i in range(len(x0)):
        xp = x0.copy()
        xm = x0.copy()
        xp[i] += eps
        xm[i] -= eps
        fp_val, _ = f(xp)
        fm_val, _ = f(xm)
        if not (np.isfinite(fp_val) and np.isfinite(fm_val)):
            raise LossError(f"non-finite loss near x0 (coordinate {i})")
        fd = (np.longdouble(fp_val) - np.longdouble(fm_val)) / (2 * np.longdouble(eps))
        err = abs(analytic[i] - fd) / max(1.0, abs(fd))
        worst = max(worst, float(err))
    return worst
