"""Set-prediction training for :class:`~ulmdetr.model.DetrTiny`.

The matching is recomputed every step without gradient; the loss is
accumulated in float64 on top of float32 parameters.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .geometry import BBoxN
from .losses import (DEFAULT_NO_OBJECT_WEIGHT, LossBreakdown, class_index, match_tensors,
                     set_loss_terms)
from .matching import DEFAULT_LAMBDA_CLASS, DEFAULT_LAMBDA_GIOU, DEFAULT_LAMBDA_L1
from .model import Checkpoint, DetrTiny, ModelConfig, NumericalError
from .simulator import GroundTruthItem

log = logging.getLogger(__name__)


@dataclass
class TrainSettings:
    epochs: int = 50
    batch_size: int = 2
    lr: float = 5e-4
    weight_decay: float = 1e-4
    seed: int = 0
    lambda_class: float = DEFAULT_LAMBDA_CLASS
    lambda_l1: float = DEFAULT_LAMBDA_L1
    lambda_giou: float = DEFAULT_LAMBDA_GIOU
    no_object_weight: float = DEFAULT_NO_OBJECT_WEIGHT
    grad_clip: float | None = 0.1
    max_steps: int | None = None
    # multiply the learning rate by lr_drop_factor from this epoch on (None: constant rate)
    lr_drop_epoch: int | None = 40
    lr_drop_factor: float = 0.1


@dataclass
class PatchSamples:
    """Model-ready patches with per-patch ground truth in patch-normalized cxcywh."""

    images: torch.Tensor
    gt_boxes: list
    gt_classes: list

    def __len__(self):
        return self.images.shape[0]

    def subset(self, idx) -> "PatchSamples":
        idx = list(idx)
        return PatchSamples(self.images[idx], [self.gt_boxes[i] for i in idx],
                            [self.gt_classes[i] for i in idx])

    def max_objects(self) -> int:
        return max((len(b) for b in self.gt_boxes), default=0)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    train_curve: list = field(default_factory=list)
    val_curve: list = field(default_factory=list)
    best_epoch: int = -1
    steps: int = 0

    def totals(self) -> list[float]:
        return [b.total for b in self.train_curve]


def _clip_to_patch(item: GroundTruthItem, frame_w, frame_h, ox, oy, size):
    x0, y0, x1, y1 = item.box.corners()
    x0, x1 = x0 * frame_w - ox, x1 * frame_w - ox
    y0, y1 = y0 * frame_h - oy, y1 * frame_h - oy
    x0, y0 = max(x0, 0.0), max(y0, 0.0)
    x1, y1 = min(x1, size), min(y1, size)
    if x1 <= x0 or y1 <= y0:
        return None
    return [0.5 * (x0 + x1) / size, 0.5 * (y0 + y1) / size, (x1 - x0) / size, (y1 - y0) / size]


def make_patch_samples(frames_with_gt, patch_size: int) -> PatchSamples:
    """Tile each frame into ``patch_size`` squares (zero-padded at the edges).

    A ground-truth item goes to the patch holding its center, with its box
    clipped to that patch.
    """
    images, boxes, classes = [], [], []
    for frame, gt in frames_with_gt:
        px = frame.pixels
        h, w = px.shape
        ny, nx = math.ceil(h / patch_size), math.ceil(w / patch_size)
        for r in range(ny):
            for c in range(nx):
                ox, oy = c * patch_size, r * patch_size
                patch = np.zeros((patch_size, patch_size), dtype=np.float32)
                tile = px[oy:oy + patch_size, ox:ox + patch_size]
                patch[:tile.shape[0], :tile.shape[1]] = tile
                pb, pc = [], []
                for item in gt:
                    cx, cy = item.center[0] * w - ox, item.center[1] * h - oy
                    if not (0 <= cx < patch_size and 0 <= cy < patch_size):
                        continue
                    box = _clip_to_patch(item, w, h, ox, oy, patch_size)
                    if box is not None:
                        pb.append(box)
                        pc.append(class_index(item.class_label))
                images.append(patch)
                boxes.append(torch.tensor(pb, dtype=torch.float64).reshape(-1, 4))
                classes.append(torch.tensor(pc, dtype=torch.long))
    return PatchSamples(torch.as_tensor(np.stack(images))[:, None], boxes, classes)


def batch_loss(model: DetrTiny, samples: PatchSamples, idx, settings: TrainSettings,
               outputs: dict | None = None):
    """Mean per-image set loss over ``idx`` as a float64 tensor, plus summed term values."""
    if outputs is None:
        outputs = model(samples.images[idx])
    total, parts = _set_loss(outputs, samples, idx, settings)
    for aux in outputs.get("aux", []):
        aux_total, _ = _set_loss(aux, samples, idx, settings)
        total = total + aux_total
    return total / len(idx), parts


def _set_loss(outputs, samples, idx, settings):
    logits = outputs["logits"].double()
    boxes = outputs["boxes"].double()
    log_probs = torch.log_softmax(logits, dim=-1)
    total = logits.new_zeros(())
    parts = np.zeros(3)
    for b, i in enumerate(idx):
        gb, gc = samples.gt_boxes[i], samples.gt_classes[i]
        assignment = match_tensors(log_probs[b].exp(), boxes[b], gb, gc, settings.lambda_class,
                                   settings.lambda_l1, settings.lambda_giou)
        t = set_loss_terms(log_probs[b], boxes[b], gb, gc, assignment.pairs, settings.lambda_l1,
                           settings.lambda_giou, settings.no_object_weight)
        total = total + t["total"]
        parts += [float(t["class_nll"].detach()), float(t["l1"].detach()),
                  float(t["giou_term"].detach())]
    return total, parts


def _breakdown(parts: np.ndarray, n: int) -> LossBreakdown:
    p = parts / max(n, 1)
    return LossBreakdown(float(p[0]), float(p[1]), float(p[2]), float(p.sum()))


@torch.no_grad()
def evaluate_loss(model: DetrTiny, samples: PatchSamples, settings: TrainSettings,
                  batch_size: int = 64) -> LossBreakdown:
    model.eval()
    parts = np.zeros(3)
    for start in range(0, len(samples), batch_size):
        idx = list(range(start, min(start + batch_size, len(samples))))
        _, p = batch_loss(model, samples, idx, settings)
        parts += p
    return _breakdown(parts, len(samples))


def train(samples: PatchSamples, config: ModelConfig | None = None,
          settings: TrainSettings | None = None, val_samples: PatchSamples | None = None,
          init: Checkpoint | None = None, progress=None) -> TrainResult:
    """Train with AdamW; returns the best-validation (or final) checkpoint and loss curves.

    ``init`` warm-starts from an existing checkpoint (its config wins).
    ``progress`` is called as ``progress(epoch, train_breakdown, val_breakdown)``.
    """
    settings = settings or TrainSettings()
    torch.manual_seed(settings.seed)
    if init is not None:
        model = init.build_model()
        config = model.config
    else:
        model = DetrTiny(config or ModelConfig())
        config = model.config
    if samples.max_objects() >= config.n_queries:
        raise ValueError(
            f"a training patch holds {samples.max_objects()} objects; "
            f"n_queries={config.n_queries} must exceed it")
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=settings.lr,
                            weight_decay=settings.weight_decay)
    rng = np.random.default_rng(settings.seed)
    result = TrainResult(Checkpoint.from_model(model, 0, settings.seed))
    best = math.inf
    step = 0
    for epoch in range(settings.epochs):
        if settings.lr_drop_epoch is not None and epoch == settings.lr_drop_epoch:
            for group in opt.param_groups:
                group["lr"] = settings.lr * settings.lr_drop_factor
        model.train()
        order = rng.permutation(len(samples))
        parts = np.zeros(3)
        seen = 0
        for bstart in range(0, len(order), settings.batch_size):
            idx = [int(i) for i in order[bstart:bstart + settings.batch_size]]
            try:
                loss, p = batch_loss(model, samples, idx, settings)
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch} batch {bstart // settings.batch_size}: {exc}") from exc
            if not torch.isfinite(loss):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch} batch {bstart // settings.batch_size}")
            opt.zero_grad()
            loss.backward()
            if settings.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), settings.grad_clip)
            opt.step()
            parts += p
            seen += len(idx)
            step += 1
            if settings.max_steps is not None and step >= settings.max_steps:
                break
        tb = _breakdown(parts, seen)
        result.train_curve.append(tb)
        vb = evaluate_loss(model, val_samples, settings) if val_samples is not None and len(val_samples) else None
        if vb is not None:
            result.val_curve.append(vb)
        score = vb.total if vb is not None else tb.total
        if vb is None or score < best:
            best = min(best, score)
            result.checkpoint = Checkpoint.from_model(model, step, settings.seed)
            result.best_epoch = epoch
        log.info("epoch %d train %.4f val %s", epoch, tb.total,
                 "-" if vb is None else f"{vb.total:.4f}")
        if progress is not None:
            progress(epoch, tb, vb)
        if settings.max_steps is not None and step >= settings.max_steps:
            break
    result.steps = step
    model.eval()
    return result


def split_train_val(n: int, train_fraction: float, seed: int = 0):
    """Shuffled index split; ``train_fraction`` of items go to training."""
    if not 0 < train_fraction <= 1:
        raise ValueError("train_fraction must be in (0, 1]")
    order = np.random.default_rng(seed).permutation(n)
    k = int(round(train_fraction * n))
    return sorted(order[:k].tolist()), sorted(order[k:].tolist())


def gt_from_normalized(boxes) -> list[GroundTruthItem]:
    return [GroundTruthItem(box=BBoxN(*map(float, b))) for b in boxes]
