"""Detection scoring and super-resolution map rendering.

``evaluate`` reproduces the COCO bbox protocol for a single category and the
``all`` area range: per-image detections sorted by score and capped at
``max_dets``, greedy matching to the highest-IoU unmatched ground truth,
101-point interpolated AP, and recall at the cap. Center-distance precision
and recall are reported next to it since localization microscopy cares about
where the center lands more than about box overlap.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import BBoxA, pairwise_iou_array, to_absolute

COCO_IOU_THRESHOLDS = tuple(float(t) for t in np.linspace(0.5, 0.95, 10))
RECALL_THRESHOLDS = np.linspace(0.0, 1.0, 101)
DEFAULT_CENTER_RADIUS = 2.0
DEFAULT_MAX_DETS = 100


@dataclass
class EvalReport:
    ap_per_threshold: dict
    recall_per_threshold: dict
    mAP: float
    mAR: float
    center_precision: float
    center_recall: float
    center_radius: float
    counts: dict = field(default_factory=dict)
    n_gt: int = 0
    n_detections: int = 0

    def ap_at(self, threshold: float) -> float:
        return self.ap_per_threshold[_key(threshold)]

    def to_dict(self) -> dict:
        return {
            "mAP": self.mAP,
            "mAR": self.mAR,
            "ap_per_threshold": self.ap_per_threshold,
            "recall_per_threshold": self.recall_per_threshold,
            "center_precision": self.center_precision,
            "center_recall": self.center_recall,
            "center_radius": self.center_radius,
            "counts": self.counts,
            "n_gt": self.n_gt,
            "n_detections": self.n_detections,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["ap_per_threshold"], d["recall_per_threshold"], d["mAP"], d["mAR"],
                   d["center_precision"], d["center_recall"], d["center_radius"],
                   d.get("counts", {}), d.get("n_gt", 0), d.get("n_detections", 0))


def _key(t: float) -> str:
    return f"{t:.2f}"


def _det_arrays(dets):
    boxes = np.array([d.box.as_array() for d in dets], dtype=np.float64).reshape(-1, 4)
    scores = np.array([d.confidence for d in dets], dtype=np.float64)
    return boxes, scores


def _gt_array(gts):
    return np.array([g.as_array() for g in gts], dtype=np.float64).reshape(-1, 4)


def gt_boxes_absolute(items, frame_w: int, frame_h: int) -> list[BBoxA]:
    """Ground-truth items (normalized) to pixel boxes."""
    return [to_absolute(it.box, frame_w, frame_h) for it in items]


def _match_image(ious: np.ndarray, threshold: float) -> np.ndarray:
    """Greedy COCO matching for score-sorted detections; returns a TP flag per detection."""
    n_det, n_gt = ious.shape
    gt_taken = np.zeros(n_gt, dtype=bool)
    tp = np.zeros(n_det, dtype=bool)
    for d in range(n_det):
        best = min(threshold, 1 - 1e-10)
        m = -1
        for g in range(n_gt):
            if gt_taken[g] or ious[d, g] < best:
                continue
            best = ious[d, g]
            m = g
        if m >= 0:
            gt_taken[m] = True
            tp[d] = True
    return tp


def _interpolated_ap(tp_sorted: np.ndarray, n_gt: int) -> tuple[float, float]:
    if n_gt == 0:
        return 0.0, 0.0
    if tp_sorted.size == 0:
        return 0.0, 0.0
    tps = np.cumsum(tp_sorted, dtype=np.float64)
    fps = np.cumsum(~tp_sorted, dtype=np.float64)
    rc = tps / n_gt
    pr = tps / (tps + fps + np.spacing(1))
    pr = np.maximum.accumulate(pr[::-1])[::-1]
    inds = np.searchsorted(rc, RECALL_THRESHOLDS, side="left")
    q = np.zeros(len(RECALL_THRESHOLDS))
    valid = inds < len(pr)
    q[valid] = pr[inds[valid]]
    return float(q.mean()), float(rc[-1])


def _center_match(dets_sorted, gts, radius: float) -> int:
    if not dets_sorted or not gts:
        return 0
    gc = np.array([g.center for g in gts], dtype=np.float64)
    taken = np.zeros(len(gts), dtype=bool)
    hits = 0
    for d in dets_sorted:
        dist = np.hypot(gc[:, 0] - d.center[0], gc[:, 1] - d.center[1])
        dist[taken] = np.inf
        j = int(np.argmin(dist))
        if dist[j] <= radius:
            taken[j] = True
            hits += 1
    return hits


def evaluate(detections, ground_truth, iou_thresholds=COCO_IOU_THRESHOLDS,
             center_radius: float = DEFAULT_CENTER_RADIUS,
             max_dets: int = DEFAULT_MAX_DETS) -> EvalReport:
    """Score per-frame detections against per-frame ground-truth pixel boxes.

    ``detections[f]`` is a list of :class:`~ulmdetr.patching.Detection` and
    ``ground_truth[f]`` a list of :class:`~ulmdetr.geometry.BBoxA`, aligned by
    frame. Frames are processed in the given order, which decides how equal
    scores from different frames are ranked.
    """
    thresholds = [float(t) for t in iou_thresholds]
    if not thresholds:
        raise ValueError("need at least one IoU threshold")
    if any(not 0 < t <= 1 for t in thresholds):
        raise ValueError("IoU thresholds must lie in (0, 1]")
    detections = list(detections)
    ground_truth = list(ground_truth)
    if len(detections) != len(ground_truth):
        raise ValueError("detections and ground truth must cover the same frames")

    per_frame = []
    n_gt = 0
    n_det = 0
    center_hits = 0
    for dets, gts in zip(detections, ground_truth):
        order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)[:max_dets]
        dets_sorted = [dets[i] for i in order]
        boxes, scores = _det_arrays(dets_sorted)
        gboxes = _gt_array(gts)
        ious = pairwise_iou_array(boxes, gboxes) if len(boxes) and len(gboxes) else \
            np.zeros((len(boxes), len(gboxes)))
        per_frame.append((scores, ious))
        n_gt += len(gts)
        n_det += len(dets_sorted)
        center_hits += _center_match(dets_sorted, gts, center_radius)

    all_scores = np.concatenate([s for s, _ in per_frame]) if per_frame else np.zeros(0)
    rank = np.argsort(-all_scores, kind="mergesort")
    ap, rec, counts = {}, {}, {}
    for t in thresholds:
        tp = np.concatenate([_match_image(ious, t) for _, ious in per_frame]) if per_frame \
            else np.zeros(0, dtype=bool)
        a, r = _interpolated_ap(tp[rank], n_gt)
        ap[_key(t)] = a
        rec[_key(t)] = r
        n_tp = int(tp.sum())
        counts[_key(t)] = {"tp": n_tp, "fp": int(tp.size - n_tp), "fn": int(n_gt - n_tp)}

    return EvalReport(
        ap_per_threshold=ap,
        recall_per_threshold=rec,
        mAP=float(np.mean(list(ap.values()))),
        mAR=float(np.mean(list(rec.values()))),
        center_precision=center_hits / n_det if n_det else 0.0,
        center_recall=center_hits / n_gt if n_gt else 0.0,
        center_radius=float(center_radius),
        counts=counts,
        n_gt=n_gt,
        n_detections=n_det,
    )


# --- super-resolution accumulation map ----------------------------------------

@dataclass
class SrMap:
    """Detection-center histogram on a grid ``upsample_factor`` times finer than the frame.

    ``grid[iy, ix]`` counts centers with ``floor(x * factor) == ix`` and
    ``floor(y * factor) == iy``.
    """

    grid: np.ndarray
    upsample_factor: int
    discarded: int = 0

    @property
    def total(self) -> int:
        return int(self.grid.sum())


def render_sr_map(detections, frame_dims, upsample_factor: int = 10) -> SrMap:
    """Accumulate detection centers (or raw ``(x, y)`` pairs) into an :class:`SrMap`."""
    if upsample_factor < 1 or int(upsample_factor) != upsample_factor:
        raise ValueError("upsample_factor must be an integer >= 1")
    f = int(upsample_factor)
    w, h = frame_dims
    grid = np.zeros((h * f, w * f), dtype=np.int64)
    discarded = 0
    for d in detections:
        x, y = d.center if hasattr(d, "center") else d
        ix, iy = math.floor(x * f), math.floor(y * f)
        if 0 <= ix < w * f and 0 <= iy < h * f:
            grid[iy, ix] += 1
        else:
            discarded += 1
    return SrMap(grid, f, discarded)


def save_sr_png16(sr: SrMap, path) -> None:
    """16-bit grayscale PNG of raw counts (saturating at 65535)."""
    from PIL import Image

    arr = np.clip(sr.grid, 0, 65535).astype(np.uint16)
    Image.fromarray(arr).save(path)


def save_sr_ulmf(sr: SrMap, path) -> None:
    from .frames import save_ulmf

    save_ulmf(sr.grid.astype(np.float32), path)
