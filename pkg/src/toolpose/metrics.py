"""Pose and segmentation evaluation.

Pose: ADD (mean model-vertex distance, mm) and 2D projection error (mean
pixel distance of projected vertices), with recall at fixed thresholds
(strict "<"), mean and population standard deviation.

Segmentation: COCO-style mask AP/AR averaged over IoU 0.50:0.05:0.95,
101-point interpolated precision, size strata by ground-truth pixel area.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from toolpose.geometry import BehindCameraError, CameraIntrinsics, RigidTransform, project_points
from toolpose.maps import BinaryMask
from toolpose.mesh import TriangleMesh

ADD_THRESHOLDS_MM = (1.0, 2.5, 5.0)
PROJ_THRESHOLDS_PX = (5.0, 20.0, 50.0)
IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
SMALL_AREA = 32**2
LARGE_AREA = 96**2


def add_metric(mesh: TriangleMesh, gt: RigidTransform, pred: RigidTransform) -> float:
    """Mean distance (mm) between model vertices under the two poses."""
    V = mesh.vertices
    return float(np.linalg.norm(gt.apply(V) - pred.apply(V), axis=1).mean())


def projection_metric(mesh: TriangleMesh, gt: RigidTransform, pred: RigidTransform,
                      intr: CameraIntrinsics) -> float:
    """Mean pixel distance between vertex projections under the two poses."""
    V = mesh.vertices
    uv = {}
    for name, pose in (("ground-truth", gt), ("predicted", pred)):
        try:
            uv[name] = project_points(intr, pose.apply(V))
        except BehindCameraError as e:
            raise BehindCameraError(f"{name} pose puts model vertices behind the camera: {e}") from None
    return float(np.linalg.norm(uv["ground-truth"] - uv["predicted"], axis=1).mean())


@dataclass(frozen=True)
class PoseMetricRecord:
    frame_id: int
    add_mm: float
    proj_px: float

    def __post_init__(self):
        for name in ("add_mm", "proj_px"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"frame {self.frame_id}: {name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class PoseMetricSummary:
    recalls_add: dict[float, float]
    recalls_proj: dict[float, float]
    mean_add: float
    std_add: float
    mean_proj: float
    std_proj: float
    n_frames: int
    n_excluded: int = 0
    std_kind: str = "population"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["recalls_add"] = {f"{k:g}mm": v for k, v in self.recalls_add.items()}
        d["recalls_proj"] = {f"{k:g}px": v for k, v in self.recalls_proj.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        """Plain-text table laid out like a results table: recalls in %, then mean/std."""
        head = [f"ADD<{t:g}mm" for t in self.recalls_add] + ["ADD mu", "ADD sigma"]
        head += [f"2D<{t:g}px" for t in self.recalls_proj] + ["2D mu", "2D sigma"]
        row = [f"{100 * v:.2f}" for v in self.recalls_add.values()]
        row += [f"{self.mean_add:.2f}", f"{self.std_add:.2f}"]
        row += [f"{100 * v:.2f}" for v in self.recalls_proj.values()]
        row += [f"{self.mean_proj:.2f}", f"{self.std_proj:.2f}"]
        widths = [max(len(h), len(r)) for h, r in zip(head, row)]
        lines = [
            "  ".join(h.rjust(w) for h, w in zip(head, widths)),
            "  ".join(r.rjust(w) for r, w in zip(row, widths)),
            f"frames evaluated: {self.n_frames}, excluded (failed estimate or behind camera): "
            f"{self.n_excluded}; recalls in %, sigma is the {self.std_kind} standard deviation",
        ]
        return "\n".join(lines) + "\n"


def recall_at(values, threshold: float, n_total: int | None = None) -> float:
    values = np.asarray(values, dtype=np.float64)
    n = len(values) if n_total is None else n_total
    return float((values < threshold).sum()) / n if n else 0.0


def summarize_pose(records, n_excluded: int = 0,
                   add_thresholds=ADD_THRESHOLDS_MM,
                   proj_thresholds=PROJ_THRESHOLDS_PX) -> PoseMetricSummary:
    """Recalls, mean and population std over `records`.

    Excluded frames (failed estimates) count as misses in the recalls but
    do not enter the mean/std.
    """
    records = list(records)
    if not records:
        raise ValueError("cannot summarise an empty list of pose records")
    add = np.array([r.add_mm for r in records])
    proj = np.array([r.proj_px for r in records])
    n_total = len(records) + n_excluded
    return PoseMetricSummary(
        recalls_add={float(t): recall_at(add, t, n_total) for t in add_thresholds},
        recalls_proj={float(t): recall_at(proj, t, n_total) for t in proj_thresholds},
        mean_add=float(add.mean()),
        std_add=float(add.std()),
        mean_proj=float(proj.mean()),
        std_proj=float(proj.std()),
        n_frames=len(records),
        n_excluded=n_excluded,
    )


# ---------------------------------------------------------------- segmentation


def mask_iou(a: BinaryMask, b: BinaryMask) -> float:
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a.bits | b.bits)
    if union == 0:
        return 0.0
    return np.count_nonzero(a.bits & b.bits) / union


@dataclass(frozen=True)
class SegMetricSummary:
    """AP/AR fractions. A size stratum without ground truth reports None."""

    ap_5095: float
    ap_small: float | None
    ap_medium: float | None
    ap_large: float | None
    ar_5095: float
    ap_50: float = 0.0
    ap_75: float = 0.0
    per_threshold_ap: list = field(default_factory=list)
    per_threshold_recall: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        def fmt(v):
            return "   n/a" if v is None else f"{100 * v:6.1f}"

        rows = [
            ("AP@[IoU=0.50:0.95]", self.ap_5095),
            ("AP@[IoU=0.50]", self.ap_50),
            ("AP@[IoU=0.75]", self.ap_75),
            ("AP_s (small)", self.ap_small),
            ("AP_m (medium)", self.ap_medium),
            ("AP_l (large)", self.ap_large),
            ("AR@[IoU=0.50:0.95]", self.ar_5095),
        ]
        return "".join(f"{name:<20}{fmt(v)}\n" for name, v in rows)


def _area_range(stratum: str) -> tuple[float, float]:
    # small < 32^2, medium 32^2..96^2 inclusive, large > 96^2
    return {
        "all": (0, math.inf),
        "small": (0, SMALL_AREA - 0.5),
        "medium": (SMALL_AREA, LARGE_AREA),
        "large": (LARGE_AREA + 0.5, math.inf),
    }[stratum]


def _evaluate(frames, stratum: str):
    """Per-threshold (AP, recall) arrays for one area stratum, or None without GT."""
    lo, hi = _area_range(stratum)
    n_thr = len(IOU_THRESHOLDS)
    scores, tps, ignored = [], [], []
    n_gt = 0
    for preds, gts, ious in frames:
        gt_area = np.array([g.count() for g in gts])
        gt_ign = (gt_area < lo) | (gt_area > hi)
        n_gt += int((~gt_ign).sum())
        order_g = np.argsort(gt_ign, kind="stable")  # non-ignored ground truth first
        order_d = np.argsort([-c for _, c in preds], kind="stable")
        start = len(scores)
        for di in order_d:
            scores.append(preds[di][1])
            tps.append(np.zeros(n_thr, dtype=bool))
            ignored.append(np.zeros(n_thr, dtype=bool))
        # greedy matching in confidence order, independently per threshold
        for ti, thr in enumerate(IOU_THRESHOLDS):
            taken = np.zeros(len(gts), dtype=bool)
            for k, di in enumerate(order_d):
                best_iou = min(thr, 1 - 1e-10)
                match = -1
                for gi in order_g:
                    if taken[gi]:
                        continue
                    if match > -1 and not gt_ign[match] and gt_ign[gi]:
                        break
                    if ious[di, gi] < best_iou:
                        continue
                    best_iou = ious[di, gi]
                    match = gi
                if match > -1:
                    taken[match] = True
                    tps[start + k][ti] = True
                    ignored[start + k][ti] = bool(gt_ign[match])
                else:
                    area = preds[di][0].count()
                    ignored[start + k][ti] = area < lo or area > hi
    if n_gt == 0:
        return None
    ap = np.zeros(n_thr)
    rec = np.zeros(n_thr)
    if scores:
        order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="mergesort")
        tp_all = np.array(tps)[order]
        ign_all = np.array(ignored)[order]
        for ti in range(n_thr):
            keep = ~ign_all[:, ti]
            tp = np.cumsum(tp_all[keep, ti])
            fp = np.cumsum(~tp_all[keep, ti])
            if len(tp) == 0:
                continue
            precision = tp / (tp + fp)
            precision = np.maximum.accumulate(precision[::-1])[::-1]
            # first detection reaching recall k/100, compared in integers so
            # recall levels like 3/10 are not lost to rounding
            idx = np.searchsorted(100 * tp, np.arange(len(RECALL_POINTS)) * n_gt, side="left")
            q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
            ap[ti] = q.mean()
            rec[ti] = tp[-1] / n_gt
    return ap, rec


def seg_ap_ar(frames) -> SegMetricSummary:
    """COCO-style mask AP/AR.

    `frames` is a sequence of (predictions, gts) where predictions is a list of
    (BinaryMask, confidence) and gts a list of BinaryMask for the same image.
    """
    prepared = []
    for fi, (preds, gts) in enumerate(frames):
        preds = list(preds)
        gts = list(gts)
        for _, c in preds:
            if not (isinstance(c, (int, float, np.floating)) and 0.0 <= float(c) <= 1.0):
                raise ValueError(f"frame {fi}: confidence must be a number in [0, 1], got {c!r}")
        ious = np.array([[mask_iou(p, g) for g in gts] for p, _ in preds]).reshape(len(preds), len(gts))
        prepared.append(([(m, float(c)) for m, c in preds], gts, ious))

    res = {s: _evaluate(prepared, s) for s in ("all", "small", "medium", "large")}
    if res["all"] is None:
        ap_all, rec_all = np.zeros(len(IOU_THRESHOLDS)), np.zeros(len(IOU_THRESHOLDS))
    else:
        ap_all, rec_all = res["all"]

    def mean_ap(s):
        return None if res[s] is None else float(res[s][0].mean())

    return SegMetricSummary(
        ap_5095=float(ap_all.mean()),
        ap_small=mean_ap("small"),
        ap_medium=mean_ap("medium"),
        ap_large=mean_ap("large"),
        ar_5095=float(rec_all.mean()),
        ap_50=float(ap_all[0]),
        ap_75=float(ap_all[5]),
        per_threshold_ap=[float(v) for v in ap_all],
        per_threshold_recall=[float(v) for v in rec_all],
    )
