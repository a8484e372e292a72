"""Hungarian set-prediction loss over matched pairs plus no-object padding.

Class index convention for probability vectors: column 0 is microbubble,
column 1 is no-object.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .geometry import MIN_BOX_SIDE, BBoxN
from .matching import (DEFAULT_LAMBDA_CLASS, DEFAULT_LAMBDA_GIOU, DEFAULT_LAMBDA_L1,
                       Assignment, cost_matrix_from_arrays, solve_assignment)
from .simulator import MICROBUBBLE, NO_OBJECT

MB_INDEX = 0
NO_OBJECT_INDEX = 1
N_CLASSES = 2
PROB_FLOOR = 1e-12
DEFAULT_NO_OBJECT_WEIGHT = 0.1
_LOG_FLOOR = float(np.log(PROB_FLOOR))


def class_index(label: int) -> int:
    """Map a COCO category id to its probability column."""
    if label == MICROBUBBLE:
        return MB_INDEX
    if label == NO_OBJECT:
        return NO_OBJECT_INDEX
    raise ValueError(f"unknown class label {label}")


@dataclass
class Prediction:
    """One query's output: class probabilities and a normalized box.

    ``logits`` keeps the raw class scores when the prediction came from the
    model; probabilities are always the softmax of those scores.
    """

    class_probs: np.ndarray
    box: BBoxN
    logits: np.ndarray | None = None

    def __post_init__(self):
        self.class_probs = np.asarray(self.class_probs, dtype=np.float64)
        if self.class_probs.shape != (N_CLASSES,):
            raise ValueError(f"expected {N_CLASSES} class probabilities")
        if np.any(self.class_probs < 0) or abs(self.class_probs.sum() - 1.0) > 1e-6:
            raise ValueError(f"class probabilities {self.class_probs} do not form a distribution")

    @property
    def confidence(self) -> float:
        return float(self.class_probs[MB_INDEX])

    @classmethod
    def from_logits(cls, logits, box) -> "Prediction":
        logits = np.asarray(logits, dtype=np.float64)
        z = logits - logits.max()
        p = np.exp(z) / np.exp(z).sum()
        if not isinstance(box, BBoxN):
            box = BBoxN(*(float(v) for v in box))
        return cls(p, box, logits)


@dataclass
class LossBreakdown:
    class_nll: float
    l1: float
    giou_term: float
    total: float
    floored: int = 0
    extras: dict = field(default_factory=dict)


def box_cxcywh_to_xyxy(b: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = b.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def elementwise_giou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """GIoU of matched rows of two (n, 4) corner-box tensors."""
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = torch.maximum(a[:, :2], b[:, :2])
    rb = torch.minimum(a[:, 2:], b[:, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[:, 0] * wh[:, 1]
    union = area_a + area_b - inter
    wh_c = torch.maximum(a[:, 2:], b[:, 2:]) - torch.minimum(a[:, :2], b[:, :2])
    enclose = wh_c[:, 0] * wh_c[:, 1]
    return inter / union - (enclose - union) / enclose


def clamp_box_sides(boxes: torch.Tensor, min_side: float = MIN_BOX_SIDE) -> torch.Tensor:
    return torch.cat([boxes[..., :2], boxes[..., 2:].clamp(min=min_side)], dim=-1)


def floored_log(probs: torch.Tensor) -> torch.Tensor:
    return torch.log(probs.clamp(min=PROB_FLOOR))


def set_loss_terms(log_probs: torch.Tensor, boxes: torch.Tensor, gt_boxes: torch.Tensor,
                   gt_classes: torch.Tensor, pairs, lambda_l1: float = DEFAULT_LAMBDA_L1,
                   lambda_giou: float = DEFAULT_LAMBDA_GIOU,
                   no_object_weight: float = DEFAULT_NO_OBJECT_WEIGHT):
    """Differentiable loss terms for one image.

    ``log_probs`` (N, 2) and ``boxes`` (N, 4, cxcywh) are the predictions,
    ``gt_classes`` holds probability-column indices. Log-probabilities below
    ``log(PROB_FLOOR)`` are floored there. Returns a dict of
    scalar tensors ``class_nll, l1, giou_term, total`` plus the number of
    floored probabilities.
    """
    n_pred = log_probs.shape[0]
    gt_idx = torch.as_tensor([i for i, _ in pairs], dtype=torch.long)
    pred_idx = torch.as_tensor([j for _, j in pairs], dtype=torch.long)
    matched = torch.zeros(n_pred, dtype=torch.bool)
    matched[pred_idx] = True

    target = torch.full((n_pred,), NO_OBJECT_INDEX, dtype=torch.long)
    if len(pairs):
        target[pred_idx] = gt_classes[gt_idx]
    logp = log_probs.gather(1, target[:, None]).squeeze(1)
    floored = int((logp.detach() <= _LOG_FLOOR).sum())
    nll = -logp.clamp(min=_LOG_FLOOR)
    weights = torch.where(matched, torch.ones_like(nll), torch.full_like(nll, no_object_weight))
    class_nll = (weights * nll).sum()

    zero = log_probs.new_zeros(())
    if len(pairs):
        has_object = gt_classes[gt_idx] != NO_OBJECT_INDEX
        gt_idx, pred_idx = gt_idx[has_object], pred_idx[has_object]
    if len(pairs) and len(pred_idx):
        pb = clamp_box_sides(boxes[pred_idx])
        gb = gt_boxes[gt_idx].to(pb.dtype)
        l1 = lambda_l1 * (pb - gb).abs().sum()
        g = elementwise_giou(box_cxcywh_to_xyxy(gb), box_cxcywh_to_xyxy(pb))
        giou_term = lambda_giou * (1.0 - g).sum()
    else:
        l1 = zero
        giou_term = zero
    total = class_nll + l1 + giou_term
    return {"class_nll": class_nll, "l1": l1, "giou_term": giou_term, "total": total,
            "floored": floored}


def _gt_tensors(gt, dtype=torch.float64):
    if gt:
        boxes = torch.as_tensor(np.stack([g.box.as_array() for g in gt]), dtype=dtype)
        classes = torch.as_tensor([class_index(g.class_label) for g in gt], dtype=torch.long)
    else:
        boxes = torch.zeros((0, 4), dtype=dtype)
        classes = torch.zeros((0,), dtype=torch.long)
    return boxes, classes


def _check_assignment(assignment: Assignment, n_gt: int, n_pred: int):
    if n_pred < n_gt:
        raise ValueError(f"{n_pred} predictions cannot cover {n_gt} ground-truth items")
    gts = sorted(i for i, _ in assignment.pairs)
    preds = [j for _, j in assignment.pairs]
    if gts != list(range(n_gt)) or len(set(preds)) != len(preds):
        raise ValueError("assignment is not a valid injective map of all ground truth")
    if preds and not (0 <= min(preds) and max(preds) < n_pred):
        raise ValueError("assignment references a prediction out of range")


def hungarian_loss(gt, preds, assignment: Assignment | None = None,
                   lambda_l1: float = DEFAULT_LAMBDA_L1, lambda_giou: float = DEFAULT_LAMBDA_GIOU,
                   no_object_weight: float = DEFAULT_NO_OBJECT_WEIGHT,
                   lambda_class: float = DEFAULT_LAMBDA_CLASS) -> LossBreakdown:
    """Set loss for one image from ground-truth items and :class:`Prediction` objects.

    Matched predictions pay ``-log p(class) + box_loss``; the unmatched ones
    pay ``no_object_weight * -log p(no-object)``. When ``assignment`` is
    omitted it is solved from the matching cost first.
    """
    if assignment is None:
        assignment = match_predictions(gt, preds, lambda_class, lambda_l1, lambda_giou)
    _check_assignment(assignment, len(gt), len(preds))
    probs = torch.as_tensor(np.stack([p.class_probs for p in preds]), dtype=torch.float64)
    boxes = torch.as_tensor(np.stack([p.box.as_array() for p in preds]), dtype=torch.float64)
    gt_boxes, gt_classes = _gt_tensors(gt)
    t = set_loss_terms(floored_log(probs), boxes, gt_boxes, gt_classes, assignment.pairs,
                       lambda_l1, lambda_giou, no_object_weight)
    return LossBreakdown(float(t["class_nll"]), float(t["l1"]), float(t["giou_term"]),
                         float(t["total"]), floored=t["floored"])


def match_predictions(gt, preds, lambda_class: float = DEFAULT_LAMBDA_CLASS,
                      lambda_l1: float = DEFAULT_LAMBDA_L1,
                      lambda_giou: float = DEFAULT_LAMBDA_GIOU) -> Assignment:
    from .matching import build_cost_matrix

    return solve_assignment(build_cost_matrix(gt, preds, lambda_class, lambda_l1, lambda_giou))


def match_tensors(probs: torch.Tensor, boxes: torch.Tensor, gt_boxes: torch.Tensor,
                  gt_classes: torch.Tensor, lambda_class: float = DEFAULT_LAMBDA_CLASS,
                  lambda_l1: float = DEFAULT_LAMBDA_L1,
                  lambda_giou: float = DEFAULT_LAMBDA_GIOU) -> Assignment:
    """Solve the matching for tensor predictions; the result carries no gradient."""
    if gt_boxes.shape[0] == 0:
        return Assignment([], 0.0)
    cost = cost_matrix_from_arrays(gt_boxes.detach().double().numpy(), gt_classes.numpy(),
                                   probs.detach().double().numpy(),
                                   boxes.detach().double().numpy(),
                                   lambda_class, lambda_l1, lambda_giou)
    return solve_assignment(cost)


def loss_gradient(gt, logits, boxes, assignment: Assignment | None = None,
                  lambda_l1: float = DEFAULT_LAMBDA_L1, lambda_giou: float = DEFAULT_LAMBDA_GIOU,
                  no_object_weight: float = DEFAULT_NO_OBJECT_WEIGHT,
                  lambda_class: float = DEFAULT_LAMBDA_CLASS):
    """Total loss and its gradients w.r.t. raw class scores and box parameters.

    ``logits`` is (N, 2) and ``boxes`` (N, 4). The assignment is held fixed
    (solved from the inputs when not given). Returns
    ``(total, d_total/d_logits, d_total/d_boxes)`` as float64 numpy arrays.
    """
    lg = torch.tensor(np.asarray(logits, dtype=np.float64), requires_grad=True)
    bx = torch.tensor(np.asarray(boxes, dtype=np.float64), requires_grad=True)
    probs = torch.softmax(lg, dim=-1)
    gt_boxes, gt_classes = _gt_tensors(gt)
    if assignment is None:
        assignment = match_tensors(probs, bx, gt_boxes, gt_classes,
                                   lambda_class, lambda_l1, lambda_giou)
    _check_assignment(assignment, len(gt), lg.shape[0])
    t = set_loss_terms(torch.log_softmax(lg, dim=-1), bx, gt_boxes, gt_classes, assignment.pairs,
                       lambda_l1, lambda_giou, no_object_weight)
    t["total"].backward()
    g_boxes = bx.grad.numpy().copy() if bx.grad is not None else np.zeros_like(bx.detach().numpy())
    return float(t["total"].detach()), lg.grad.numpy().copy(), g_boxes
