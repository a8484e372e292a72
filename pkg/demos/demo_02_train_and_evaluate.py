"""
Training a tiny detection transformer
=====================================

Train the default model briefly on simulated frames, then score it on
frames it never saw. Ten epochs on 200 frames take about a minute on one
core; the scores are far from converged but show the whole loop.
"""

import torch

from ulmdetr.evaluation import evaluate, gt_boxes_absolute
from ulmdetr.inference import detect
from ulmdetr.model import ModelConfig
from ulmdetr.simulator import simulate_dataset
from ulmdetr.training import TrainSettings, make_patch_samples, split_train_val, train

torch.set_num_threads(1)

data = simulate_dataset(200, 64, 64, bubbles=(1, 5), seed=42)
train_idx, val_idx = split_train_val(len(data), 0.7, seed=42)
train_set = make_patch_samples([data[i] for i in train_idx], 64)
val_set = make_patch_samples([data[i] for i in val_idx], 64)


def report(epoch, tr, va):
    print(f"epoch {epoch:2d}  train {tr.total:7.3f}  (nll {tr.class_nll:.3f}, l1 {tr.l1:.3f}, "
          f"giou {tr.giou_term:.3f})  val {va.total:7.3f}")


result = train(train_set, ModelConfig(), TrainSettings(epochs=10, seed=0), val_set, progress=report)
print("best validation epoch:", result.best_epoch)

# Detection keeps queries whose microbubble probability clears 0.5.
model = result.checkpoint.build_model()
held_out = [data[i] for i in val_idx]
frames = [f for f, _ in held_out]
dets = detect(model, frames, k=1, confidence_threshold=0.5)
rep = evaluate([dets[f.frame_id] for f in frames], [gt_boxes_absolute(g, 64, 64) for _, g in held_out])
print(f"\nAP@0.5 {rep.ap_at(0.5):.3f}   mAP {rep.mAP:.3f}   mAR {rep.mAR:.3f}")
print(f"center recall within {rep.center_radius:g} px: {rep.center_recall:.3f}, "
      f"precision {rep.center_precision:.3f}")
