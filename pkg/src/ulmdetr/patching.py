"""Tile frames into a k x k grid, map patch predictions back to the frame, and
drop duplicate detections of one bubble seen from both sides of a patch border.

Patches are numbered row-major: index ``row * k + col``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .frames import Frame
from .geometry import BBoxA, BBoxN

DEFAULT_BAND = 4.0
DEFAULT_RADIUS = 2.0


@dataclass(frozen=True)
class PatchGrid:
    k: int
    frame_w: int
    frame_h: int

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("grid dimension k must be >= 1")
        if self.k > self.frame_w or self.k > self.frame_h:
            raise ValueError(f"k={self.k} exceeds the {self.frame_w}x{self.frame_h} frame")

    @property
    def patch_w(self) -> int:
        return self.frame_w // self.k

    @property
    def patch_h(self) -> int:
        return self.frame_h // self.k

    @property
    def x_edges(self) -> list[int]:
        return [c * self.patch_w for c in range(self.k)] + [self.frame_w]

    @property
    def y_edges(self) -> list[int]:
        return [r * self.patch_h for r in range(self.k)] + [self.frame_h]

    @property
    def offsets(self) -> list[tuple[int, int]]:
        xs, ys = self.x_edges, self.y_edges
        return [(xs[c], ys[r]) for r in range(self.k) for c in range(self.k)]

    def patch_bounds(self, index: int) -> tuple[int, int, int, int]:
        """``(x0, y0, x1, y1)`` of patch ``index``; the last row/column absorb the remainder."""
        r, c = divmod(index, self.k)
        return self.x_edges[c], self.y_edges[r], self.x_edges[c + 1], self.y_edges[r + 1]

    def row_col(self, index: int) -> tuple[int, int]:
        return divmod(index, self.k)

    @classmethod
    def for_frame(cls, frame: Frame, k: int) -> "PatchGrid":
        return cls(k, frame.width, frame.height)


@dataclass(frozen=True)
class Detection:
    center: tuple[float, float]
    box: BBoxA
    confidence: float
    source_patch: int = 0

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        x, y = self.center
        b = self.box
        if not (b.x0 <= x <= b.x1 and b.y0 <= y <= b.y1):
            raise ValueError("detection center must lie inside its box")


def split(frame: Frame, k: int) -> list[tuple[Frame, tuple[int, int]]]:
    """Cut ``frame`` into ``k * k`` non-overlapping patches with their pixel offsets."""
    grid = PatchGrid.for_frame(frame, k)
    out = []
    for i, (ox, oy) in enumerate(grid.offsets):
        x0, y0, x1, y1 = grid.patch_bounds(i)
        out.append((Frame(frame.pixels[y0:y1, x0:x1].copy(), frame_id=frame.frame_id), (ox, oy)))
    return out


def reassemble(patches, width: int, height: int) -> Frame:
    """Paste patches back at their offsets; inverse of :func:`split`."""
    canvas = np.zeros((height, width), dtype=np.float32)
    frame_id = 0
    for patch, (ox, oy) in patches:
        canvas[oy:oy + patch.height, ox:ox + patch.width] = patch.pixels
        frame_id = patch.frame_id
    return Frame(canvas, frame_id=frame_id)


def to_global(preds, offset, patch_dims, confidence_threshold: float = 0.5,
              source_patch: int = 0) -> list[Detection]:
    """Keep predictions with microbubble probability >= threshold and map them to frame pixels.

    ``patch_dims`` is the ``(width, height)`` the normalized boxes refer to.
    """
    if not 0.0 <= confidence_threshold <= 1.0:
        raise ValueError("confidence threshold must be in [0, 1]")
    ox, oy = offset
    pw, ph = patch_dims
    dets = []
    for p in preds:
        conf = p.confidence
        if conf < confidence_threshold:
            continue
        x0, y0, x1, y1 = p.box.corners()
        box = BBoxA(x0 * pw + ox, y0 * ph + oy, x1 * pw + ox, y1 * ph + oy)
        center = (p.box.cx * pw + ox, p.box.cy * ph + oy)
        dets.append(Detection(center, box, min(max(conf, 0.0), 1.0), source_patch))
    return dets


def to_patch_normalized(det: Detection, offset, patch_dims) -> BBoxN:
    """Inverse of the box remap in :func:`to_global`."""
    ox, oy = offset
    pw, ph = patch_dims
    b = det.box
    return BBoxN(0.5 * (b.x0 + b.x1 - 2 * ox) / pw, 0.5 * (b.y0 + b.y1 - 2 * oy) / ph,
                 (b.x1 - b.x0) / pw, (b.y1 - b.y0) / ph)


def _share_border(a: Detection, b: Detection, grid: PatchGrid, band: float) -> bool:
    ra, ca = grid.row_col(a.source_patch)
    rb, cb = grid.row_col(b.source_patch)
    if abs(ra - rb) > 1 or abs(ca - cb) > 1 or (ra == rb and ca == cb):
        return False
    if ca != cb:
        line = grid.x_edges[max(ca, cb)]
        if abs(a.center[0] - line) > band or abs(b.center[0] - line) > band:
            return False
    if ra != rb:
        line = grid.y_edges[max(ra, rb)]
        if abs(a.center[1] - line) > band or abs(b.center[1] - line) > band:
            return False
    return True


def _is_duplicate(a: Detection, b: Detection, grid: PatchGrid, band: float, radius: float) -> bool:
    if math.dist(a.center, b.center) > radius:
        return False
    return _share_border(a, b, grid, band)


def dedup_borders(dets, grid: PatchGrid, band: float = DEFAULT_BAND,
                  radius: float = DEFAULT_RADIUS) -> list[Detection]:
    """Greedy border de-duplication.

    Two detections are duplicates when they come from adjacent patches, both
    centers sit within ``band`` px of the boundary separating those patches,
    and the centers are at most ``radius`` px apart. Detections are visited
    by descending confidence (ties: lower ``source_patch``); each one is kept
    unless it duplicates an already kept one. Output is sorted by center
    ``(y, x)``.
    """
    if band < 0 or radius < 0:
        raise ValueError("band and radius must be non-negative")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, dets[i].source_patch, i))
    kept: list[Detection] = []
    for i in order:
        d = dets[i]
        if not any(_is_duplicate(d, k, grid, band, radius) for k in kept):
            kept.append(d)
    return sorted(kept, key=_sort_key)


def _sort_key(d: Detection):
    return (d.center[1], d.center[0], -d.confidence, d.source_patch)


CSV_HEADER = ["frame_id", "x", "y", "confidence", "x0", "y0", "x1", "y1"]


def write_detections_csv(detections_by_frame: dict, path) -> None:
    """One row per detection, frames in ascending id order, 6-decimal fixed point."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for fid in sorted(detections_by_frame):
            for d in detections_by_frame[fid]:
                b = d.box
                w.writerow([int(fid)] + [f"{v:.6f}" for v in
                                         (d.center[0], d.center[1], d.confidence,
                                          b.x0, b.y0, b.x1, b.y1)])


def read_detections_csv(path) -> dict[int, list[Detection]]:
    out: dict[int, list[Detection]] = {}
    with open(Path(path), newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_HEADER) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"detections CSV lacks columns {sorted(missing)}")
        for row in reader:
            box = BBoxA(float(row["x0"]), float(row["y0"]), float(row["x1"]), float(row["y1"]))
            det = Detection((float(row["x"]), float(row["y"])), box, float(row["confidence"]))
            out.setdefault(int(row["frame_id"]), []).append(det)
    return out
