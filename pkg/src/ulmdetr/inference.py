"""Patch-and-stitch detection over whole frames."""
from __future__ import annotations

import numpy as np
import torch

from .frames import Frame
from .model import DetrTiny, outputs_to_predictions
from .patching import DEFAULT_BAND, DEFAULT_RADIUS, PatchGrid, dedup_borders, split, to_global


def _pad_to(pixels: np.ndarray, size: int) -> np.ndarray:
    h, w = pixels.shape
    if h > size or w > size:
        raise ValueError(f"{w}x{h} patch exceeds the model input size {size}; use a larger grid")
    out = np.zeros((size, size), dtype=np.float32)
    out[:h, :w] = pixels
    return out


@torch.no_grad()
def detect_frame(model: DetrTiny, frame: Frame, k: int = 1, confidence_threshold: float = 0.5,
                 band: float = DEFAULT_BAND, radius: float = DEFAULT_RADIUS, dedup: bool = True):
    """Split into a ``k x k`` grid, run the model per patch, remap and de-duplicate.

    Patches smaller than the model input are zero-padded at the bottom/right;
    detections whose center falls in that padding are dropped.
    """
    model.eval()
    size = model.config.patch_input_size
    grid = PatchGrid.for_frame(frame, k)
    patches = split(frame, k)
    batch = torch.as_tensor(np.stack([_pad_to(p.pixels, size) for p, _ in patches]))[:, None]
    out = model(batch)
    dets = []
    for i, ((patch, offset), logits, boxes) in enumerate(zip(patches, out["logits"], out["boxes"])):
        preds = outputs_to_predictions(logits, boxes)
        ox, oy = offset
        for d in to_global(preds, offset, (size, size), confidence_threshold, source_patch=i):
            if ox <= d.center[0] < ox + patch.width and oy <= d.center[1] < oy + patch.height:
                dets.append(d)
    if dedup:
        return dedup_borders(dets, grid, band, radius)
    return sorted(dets, key=lambda d: (d.center[1], d.center[0], -d.confidence, d.source_patch))


def detect(model: DetrTiny, frames, k: int = 1, confidence_threshold: float = 0.5,
           band: float = DEFAULT_BAND, radius: float = DEFAULT_RADIUS) -> dict:
    """``{frame_id: detections}`` for an iterable of frames."""
    return {f.frame_id: detect_frame(model, f, k, confidence_threshold, band, radius) for f in frames}
