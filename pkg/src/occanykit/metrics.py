"""Occupancy evaluation: precision / recall / IoU, per-class and super-class mIoU.

All metrics are reported in percent over the caller-supplied ``known`` mask.
A 0/0 ratio is *undefined* and reported as ``None`` rather than 0 or 100,
so small test grids don't corrupt averages.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .occupancy import VoxelGrid


class MetricsError(ValueError):
    """Mismatched grids or labels outside the class mapping."""


@dataclass(frozen=True)
class ClassMapping:
    """Class ids -> names and super-class grouping, with ids to ignore."""

    names: dict[int, str]
    superclass: dict[int, str]
    ignore: frozenset[int] = frozenset()
    palette: dict[int, tuple[int, int, int]] = field(default_factory=dict)

    def __post_init__(self):
        missing = [c for c in self.names if c not in self.ignore and c not in self.superclass]
        if missing:
            raise MetricsError(f"classes without a super-class: {missing}")

    @staticmethod
    def from_json(path: str | Path) -> "ClassMapping":
        raw = json.loads(Path(path).read_text())
        return ClassMapping(
            names={int(k): v for k, v in raw["names"].items()},
            superclass={int(k): v for k, v in raw.get("superclass", {}).items()},
            ignore=frozenset(int(c) for c in raw.get("ignore", [])),
            palette={int(k): tuple(v) for k, v in raw.get("palette", {}).items()},
        )

    @staticmethod
    def default() -> "ClassMapping":
        with resources.files("occanykit.data").joinpath("classes.json").open() as f:
            raw = json.load(f)
        return ClassMapping(
            names={int(k): v for k, v in raw["names"].items()},
            superclass={int(k): v for k, v in raw.get("superclass", {}).items()},
            ignore=frozenset(int(c) for c in raw.get("ignore", [])),
            palette={int(k): tuple(v) for k, v in raw.get("palette", {}).items()},
        )


@dataclass
class MetricsReport:
    precision: float | None = None
    recall: float | None = None
    iou: float | None = None
    per_class_iou: dict[int, float | None] = field(default_factory=dict)
    miou: float | None = None
    miou_sc: float | None = None
    counts: tuple[int, int, int] = (0, 0, 0)  # TP, FP, FN

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "iou": self.iou,
            "per_class_iou": {str(k): v for k, v in self.per_class_iou.items()},
            "miou": self.miou,
            "miou_sc": self.miou_sc,
            "counts": {"tp": self.counts[0], "fp": self.counts[1], "fn": self.counts[2]},
        }

    def to_markdown(self) -> str:
        def fmt(v):
            return "--" if v is None else f"{v:.2f}"

        header = "| Prec. | Rec. | IoU | mIoU | mIoU^sc |"
        rule = "|---|---|---|---|---|"
        row = (
            f"| {fmt(self.precision)} | {fmt(self.recall)} | {fmt(self.iou)} "
            f"| {fmt(self.miou)} | {fmt(self.miou_sc)} |"
        )
        return "\n".join([header, rule, row])


def _as_bool_array(grid, ref_spec=None) -> np.ndarray:
    if isinstance(grid, VoxelGrid):
        if ref_spec is not None and grid.spec != ref_spec:
            raise MetricsError(f"grid specs disagree: {grid.spec} vs {ref_spec}")
        return grid.occupancy()
    return np.asarray(grid, dtype=bool)


def _ratio(num: int, den: int) -> float | None:
    if den == 0:
        return None
    return 100.0 * num / den


def binary_metrics(
    pred, gt, known: np.ndarray | None = None
) -> tuple[float | None, float | None, float | None]:
    """(precision, recall, IoU) in percent over known voxels; None means 0/0."""
    ref_spec = pred.spec if isinstance(pred, VoxelGrid) else None
    p = _as_bool_array(pred)
    g = _as_bool_array(gt, ref_spec)
    if p.shape != g.shape:
        raise MetricsError(f"pred shape {p.shape} != gt shape {g.shape}")
    if known is None:
        known = np.ones(p.shape, dtype=bool)
    known = np.asarray(known, dtype=bool)
    if known.shape != p.shape:
        raise MetricsError(f"known shape {known.shape} != grid shape {p.shape}")
    tp, fp, fn = _counts(p, g, known)
    return _ratio(tp, tp + fp), _ratio(tp, tp + fn), _ratio(tp, tp + fp + fn)


def _counts(p: np.ndarray, g: np.ndarray, known: np.ndarray) -> tuple[int, int, int]:
    tp = int(np.count_nonzero(p & g & known))
    fp = int(np.count_nonzero(p & ~g & known))
    fn = int(np.count_nonzero(~p & g & known))
    return tp, fp, fn


def semantic_miou(
    pred_labels: np.ndarray,
    gt_labels: np.ndarray,
    known: np.ndarray,
    mapping: ClassMapping,
    use_superclass: bool = False,
) -> tuple[float | None, dict[int, float | None]]:
    """Mean IoU over classes present in GT or prediction (ignored ids excluded).

    With ``use_superclass`` the labels are first remapped through the
    super-class table; per-class keys are then super-class group indices.
    """
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    known = np.asarray(known, dtype=bool)
    if pred.shape != gt.shape or known.shape != gt.shape:
        raise MetricsError("pred/gt/known shapes disagree")
    present = set(np.unique(pred[known]).tolist()) | set(np.unique(gt[known]).tolist())
    unknown_ids = [c for c in present if c != 0 and c not in mapping.names]
    if unknown_ids:
        raise MetricsError(f"label ids outside mapping: {sorted(unknown_ids)}")

    if use_superclass:
        groups = sorted(set(mapping.superclass.values()))
        group_id = {name: i + 1 for i, name in enumerate(groups)}
        remap = {c: group_id[mapping.superclass[c]] for c in mapping.superclass}
        eval_ids = sorted(group_id.values())
    else:
        remap = {c: c for c in mapping.names}
        eval_ids = sorted(c for c in mapping.names if c not in mapping.ignore)

    def remapped(a: np.ndarray) -> np.ndarray:
        out = np.zeros_like(a, dtype=np.int64)
        for c, r in remap.items():
            out[a == c] = r
        for c in mapping.ignore:
            out[a == c] = 0
        return out

    pr = remapped(pred)
    gr = remapped(gt)
    per_class: dict[int, float | None] = {}
    included = []
    for c in eval_ids:
        pc = (pr == c) & known
        gc = (gr == c) & known
        tp = int(np.count_nonzero(pc & gc))
        union = int(np.count_nonzero(pc | gc))
        if union == 0:
            per_class[c] = None  # absent in both: excluded from the mean
            continue
        iou = 100.0 * tp / union
        per_class[c] = iou
        included.append(iou)
    miou = float(np.mean(included)) if included else None
    return miou, per_class


def full_report(
    pred: VoxelGrid,
    gt: VoxelGrid,
    mapping: ClassMapping | None = None,
    tau: float = 0.5,
) -> MetricsReport:
    """Binary metrics plus mIoU / mIoU^sc when both grids carry labels."""
    if pred.spec != gt.spec:
        raise MetricsError(f"grid specs disagree: {pred.spec} vs {gt.spec}")
    known = gt.known
    p = pred.mass >= tau
    g = gt.occupancy(0.5) if gt.label is None else (gt.label > 0)
    tp, fp, fn = _counts(p, g, known)
    report = MetricsReport(
        precision=_ratio(tp, tp + fp),
        recall=_ratio(tp, tp + fn),
        iou=_ratio(tp, tp + fp + fn),
        counts=(tp, fp, fn),
    )
    if pred.label is not None and gt.label is not None and mapping is not None:
        report.miou, report.per_class_iou = semantic_miou(
            pred.label, gt.label, known, mapping, use_superclass=False
        )
        report.miou_sc, _ = semantic_miou(
            pred.label, gt.label, known, mapping, use_superclass=True
        )
    return report
