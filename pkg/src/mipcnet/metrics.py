"""Segmentation evaluation metrics: confusion counts, overlap/pixel ratios,
boundary Hausdorff distance, and per-class reports.

Conventions for degenerate inputs (documented so reports stay auditable):
  * ratio metrics with a zero denominator are 1.0 and flagged "vacuous"
    (the condition they measure is vacuously satisfied);
  * Hausdorff of two empty masks is 0.0; one empty mask against a non-empty
    one scores the full image diagonal as a penalty, flagged;
  * class 0 is background and never enters report means.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


class MaskShapeError(ValueError):
    pass


def _as_binary(mask: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise MaskShapeError(f"{name} must be 2-D (H, W), got shape {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        bad = arr[~np.isin(arr, (0, 1))].flat[0]
        raise ValueError(f"{name} must contain only 0/1, found {bad!r}")
    return arr.astype(bool)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion_counts(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    """Exact pixelwise confusion counts between two binary masks."""
    p = _as_binary(pred, "pred")
    g = _as_binary(gt, "gt")
    if p.shape != g.shape:
        raise MaskShapeError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(np.count_nonzero(~p & ~g))
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def pixel_metrics(c: ConfusionCounts) -> tuple[float, float, float]:
    """(accuracy, precision, specificity) with the vacuous-1.0 convention."""
    ac = (c.tp + c.tn) / c.total if c.total else 1.0
    pr = c.tp / (c.tp + c.fp) if (c.tp + c.fp) else 1.0
    sp = c.tn / (c.tn + c.fp) if (c.tn + c.fp) else 1.0
    return ac, pr, sp


def overlap_metrics(c: ConfusionCounts) -> tuple[float, float]:
    """(iou, dice); both masks empty yields (1.0, 1.0)."""
    denom = c.tp + c.fp + c.fn
    if denom == 0:
        return 1.0, 1.0
    iou = c.tp / denom
    dice = 2 * c.tp / (2 * c.tp + c.fp + c.fn)
    return iou, dice


def boundary_points(mask: np.ndarray) -> np.ndarray:
    """Boundary pixels of a binary mask as an (N, 2) array of (row, col).

    A foreground pixel is a boundary pixel when any of its 8 neighbours
    (pixels outside the image count as background) is background.
    """
    m = _as_binary(mask, "mask")
    if not m.any():
        return np.zeros((0, 2), dtype=np.int64)
    padded = np.pad(m, 1, constant_values=False)
    interior = np.ones_like(m)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            interior &= padded[1 + dy : 1 + dy + m.shape[0], 1 + dx : 1 + dx + m.shape[1]]
    boundary = m & ~interior
    return np.argwhere(boundary).astype(np.int64)


def image_diagonal(shape: tuple[int, int], spacing: tuple[float, float] = (1.0, 1.0)) -> float:
    """Full image diagonal, used as the one-mask-empty Hausdorff penalty."""
    h, w = shape
    sy, sx = spacing
    return float(np.hypot(h * sy, w * sx))


def hausdorff(
    a: np.ndarray,
    b: np.ndarray,
    spacing: tuple[float, float] = (1.0, 1.0),
) -> float:
    """Symmetric Hausdorff distance between the boundaries of two masks.

    Euclidean metric over 8-connectivity boundary pixels, coordinates scaled
    by ``spacing`` (mm/px per axis); the default (1, 1) yields pixel units.
    Nearest-neighbour queries run on a KD-tree; tests cross-check the result
    against an all-pairs computation.
    """
    pa = _as_binary(a, "a")
    pb = _as_binary(b, "b")
    if pa.shape != pb.shape:
        raise MaskShapeError(f"shape mismatch: a {pa.shape} vs b {pb.shape}")
    a_empty, b_empty = not pa.any(), not pb.any()
    if a_empty and b_empty:
        return 0.0
    if a_empty or b_empty:
        return image_diagonal(pa.shape, spacing)
    sy, sx = float(spacing[0]), float(spacing[1])
    pts_a = boundary_points(pa).astype(np.float64) * np.array([sy, sx])
    pts_b = boundary_points(pb).astype(np.float64) * np.array([sy, sx])
    d_ab = cKDTree(pts_b).query(pts_a)[0].max()
    d_ba = cKDTree(pts_a).query(pts_b)[0].max()
    return float(max(d_ab, d_ba))


def hausdorff_percentile(
    a: np.ndarray,
    b: np.ndarray,
    spacing: tuple[float, float] = (1.0, 1.0),
    q: float = 95.0,
) -> float:
    """Percentile variant (e.g. HD95) of the symmetric boundary distance.

    Provided for convenience; the plain maximum is the reported metric.
    """
    pa = _as_binary(a, "a")
    pb = _as_binary(b, "b")
    if pa.shape != pb.shape:
        raise MaskShapeError(f"shape mismatch: a {pa.shape} vs b {pb.shape}")
    a_empty, b_empty = not pa.any(), not pb.any()
    if a_empty and b_empty:
        return 0.0
    if a_empty or b_empty:
        return image_diagonal(pa.shape, spacing)
    sy, sx = float(spacing[0]), float(spacing[1])
    pts_a = boundary_points(pa).astype(np.float64) * np.array([sy, sx])
    pts_b = boundary_points(pb).astype(np.float64) * np.array([sy, sx])
    d_ab = cKDTree(pts_b).query(pts_a)[0]
    d_ba = cKDTree(pts_a).query(pts_b)[0]
    return float(np.percentile(np.concatenate([d_ab, d_ba]), q))


@dataclass
class ClassMetrics:
    dice: float
    iou: float
    hd: float
    ac: float
    pr: float
    sp: float
    present_in_gt: bool
    present_in_pred: bool
    vacuous: bool = False
    flags: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "dice": self.dice, "iou": self.iou, "hd": self.hd,
            "ac": self.ac, "pr": self.pr, "sp": self.sp,
            "present_in_gt": self.present_in_gt,
            "present_in_pred": self.present_in_pred,
            "vacuous": self.vacuous, "flags": list(self.flags),
        }


@dataclass
class MetricsReport:
    """Per-class and mean metrics for one case or one aggregated run.

    Means are arithmetic means over foreground classes present in the
    ground truth; vacuous classes are listed but excluded.
    """

    per_class: dict[int, ClassMetrics]
    class_names: dict[int, str]
    case_count: int
    spacing: tuple[float, float] | None = None
    notes: list[str] = field(default_factory=list)

    def _present(self) -> list[int]:
        return [k for k, m in sorted(self.per_class.items()) if m.present_in_gt]

    def _mean(self, attr: str) -> float:
        present = self._present()
        if not present:
            return float("nan")
        return float(np.mean([getattr(self.per_class[k], attr) for k in present]))

    @property
    def mean_dice(self) -> float:
        return self._mean("dice")

    @property
    def mean_hd(self) -> float:
        return self._mean("hd")

    @property
    def mean_iou(self) -> float:
        return self._mean("iou")

    @property
    def mean_ac(self) -> float:
        return self._mean("ac")

    @property
    def mean_pr(self) -> float:
        return self._mean("pr")

    @property
    def mean_sp(self) -> float:
        return self._mean("sp")

    def as_dict(self) -> dict:
        return {
            "case_count": self.case_count,
            "spacing": list(self.spacing) if self.spacing else None,
            "means": {
                "dice": self.mean_dice, "hd": self.mean_hd, "iou": self.mean_iou,
                "ac": self.mean_ac, "pr": self.mean_pr, "sp": self.mean_sp,
            },
            "per_class": {
                str(k): {"name": self.class_names.get(k, str(k)), **m.as_dict()}
                for k, m in sorted(self.per_class.items())
            },
            "notes": list(self.notes),
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.as_dict(), indent=indent)

    def to_markdown(self) -> str:
        """One-row table: mean DSC, mean HD, then per-class DSC columns."""
        classes = sorted(self.per_class)
        header = ["mDSC", "mHD"] + [self.class_names.get(k, f"class{k}") for k in classes]
        row = [f"{self.mean_dice:.4f}", f"{self.mean_hd:.2f}"]
        for k in classes:
            m = self.per_class[k]
            row.append("vacuous" if m.vacuous else f"{m.dice:.4f}")
        lines = [
            "| " + " | ".join(header) + " |",
            "| " + " | ".join("---" for _ in header) + " |",
            "| " + " | ".join(row) + " |",
        ]
        return "\n".join(lines)


def _validate_labels(labels: np.ndarray, num_classes: int, name: str) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise MaskShapeError(f"{name} must be 2-D (H, W), got shape {arr.shape}")
    if arr.min() < 0 or arr.max() >= num_classes:
        raise ValueError(
            f"{name} values must lie in [0, {num_classes - 1}], "
            f"found range [{arr.min()}, {arr.max()}]"
        )
    return arr.astype(np.int64)


def per_class_report(
    pred_labels: np.ndarray,
    gt_labels: np.ndarray,
    num_classes: int,
    spacing: tuple[float, float] | None = None,
    class_names: dict[int, str] | None = None,
) -> MetricsReport:
    """One-vs-rest metrics for every foreground class of one label-map pair."""
    pred = _validate_labels(pred_labels, num_classes, "pred_labels")
    gt = _validate_labels(gt_labels, num_classes, "gt_labels")
    if pred.shape != gt.shape:
        raise MaskShapeError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    sp_tuple = spacing if spacing is not None else (1.0, 1.0)
    per_class: dict[int, ClassMetrics] = {}
    for k in range(1, num_classes):
        p = (pred == k).astype(np.uint8)
        g = (gt == k).astype(np.uint8)
        in_pred = bool(p.any())
        in_gt = bool(g.any())
        c = confusion_counts(p, g)
        ac, pr, sp = pixel_metrics(c)
        iou, dice = overlap_metrics(c)
        hd = hausdorff(p, g, sp_tuple)
        flags = []
        if not in_pred and not in_gt:
            flags.append("absent from pred and gt")
        elif in_pred != in_gt:
            flags.append("hd is the image-diagonal penalty")
        if c.tp + c.fp == 0 and (in_gt or in_pred):
            flags.append("precision vacuous (no positive predictions)")
        per_class[k] = ClassMetrics(
            dice=dice, iou=iou, hd=hd, ac=ac, pr=pr, sp=sp,
            present_in_gt=in_gt, present_in_pred=in_pred,
            vacuous=not in_pred and not in_gt, flags=flags,
        )
    names = class_names or {k: f"class{k}" for k in range(1, num_classes)}
    return MetricsReport(per_class=per_class, class_names=names, case_count=1, spacing=spacing)


def aggregate_reports(reports: list[MetricsReport]) -> MetricsReport:
    """Average per-case reports class-by-class.

    A class value is averaged over the cases whose ground truth contains the
    class; classes in no ground truth stay vacuous at the aggregate level.
    """
    if not reports:
        raise ValueError("cannot aggregate an empty list of reports")
    class_ids = sorted({k for r in reports for k in r.per_class})
    per_class: dict[int, ClassMetrics] = {}
    for k in class_ids:
        entries = [r.per_class[k] for r in reports if k in r.per_class]
        counted = [m for m in entries if m.present_in_gt]
        if counted:
            per_class[k] = ClassMetrics(
                dice=float(np.mean([m.dice for m in counted])),
                iou=float(np.mean([m.iou for m in counted])),
                hd=float(np.mean([m.hd for m in counted])),
                ac=float(np.mean([m.ac for m in counted])),
                pr=float(np.mean([m.pr for m in counted])),
                sp=float(np.mean([m.sp for m in counted])),
                present_in_gt=True,
                present_in_pred=any(m.present_in_pred for m in counted),
                flags=[f"averaged over {len(counted)}/{len(entries)} cases"],
            )
        else:
            per_class[k] = ClassMetrics(
                dice=1.0, iou=1.0, hd=0.0, ac=1.0, pr=1.0, sp=1.0,
                present_in_gt=False,
                present_in_pred=any(m.present_in_pred for m in entries),
                vacuous=True, flags=["absent from every ground truth"],
            )
    names = reports[0].class_names
    notes = sorted({n for r in reports for n in r.notes})
    return MetricsReport(
        per_class=per_class, class_names=names,
        case_count=sum(r.case_count for r in reports),
        spacing=reports[0].spacing, notes=notes,
    )
