"""
Matching predictions to microbubbles
====================================

A detector that outputs a fixed-size set of guesses has to decide which guess
answers for which bubble before any loss can be computed. This walk-through
builds one simulated frame, invents a handful of predictions, and follows the
Hungarian matching and the set loss by hand.
"""

import numpy as np

from ulmdetr.geometry import BBoxN, giou, to_absolute
from ulmdetr.losses import Prediction, hungarian_loss, match_predictions
from ulmdetr.matching import build_cost_matrix, solve_assignment
from ulmdetr.simulator import PsfModel, simulate_frame

# A 64 x 64 frame with three Gaussian spots, sigma 2 px, light noise.
frame, gt = simulate_frame(64, 64, 3, PsfModel(2.0, 2.0), noise_std=0.05, seed=3)
for item in gt:
    box = to_absolute(item.box, 64, 64)
    print("bubble at", np.round(np.array(item.center) * 64, 2), "box corners", np.round(box.as_array(), 2))

# Five predictions: two good ones, one sloppy, two pure background guesses.
# Boxes are normalized (cx, cy, w, h); the first probability is "microbubble".
boxes = [gt[1].box.as_array() + [0.01, 0, 0, 0], gt[0].box.as_array(),
         gt[2].box.as_array() + [0.05, -0.04, 0.05, 0.0], [0.1, 0.9, 0.1, 0.1], [0.8, 0.1, 0.2, 0.2]]
probs = [0.9, 0.8, 0.6, 0.2, 0.1]
preds = [Prediction(np.array([p, 1 - p]), BBoxN(*b)) for p, b in zip(probs, boxes)]

# The cost of pairing bubble i with guess j mixes confidence, L1 box distance and GIoU.
cost = build_cost_matrix(gt, preds)
print("\ncost matrix (rows: bubbles, columns: predictions)")
print(np.round(cost.costs, 3))

# Exactly one guess per bubble, chosen to minimize the summed cost.
assignment = solve_assignment(cost)
print("\npairs", assignment.pairs, "total cost", round(assignment.total_cost, 4))

# The unmatched guesses are trained toward "no object" with a down-weighted term.
loss = hungarian_loss(gt, preds, match_predictions(gt, preds))
print(f"\nclass NLL {loss.class_nll:.4f}  L1 {loss.l1:.4f}  GIoU term {loss.giou_term:.4f}  "
      f"total {loss.total:.4f}")

# GIoU keeps a gradient even when boxes do not overlap, unlike plain IoU.
a, b = to_absolute(gt[0].box, 64, 64), to_absolute(BBoxN(0.1, 0.9, 0.1, 0.1), 64, 64)
print("GIoU of a disjoint pair:", round(giou(a, b), 4))
