"""Central finite-difference check of the set-loss gradient w.r.t. model parameters.

The Hungarian assignment is computed once at the unperturbed parameters and
held fixed, since the matching itself carries no gradient.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch

from .losses import match_tensors, set_loss_terms
from .model import DetrTiny
from .training import PatchSamples, TrainSettings

# denominators below this are treated as this, so near-zero gradients compare absolutely
REL_ERROR_FLOOR = 1e-6


@dataclass
class ProbeResult:
    name: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        denom = max(abs(self.analytic), abs(self.numeric), REL_ERROR_FLOOR)
        return abs(self.analytic - self.numeric) / denom


def _fixed_pairs(model, samples, idx, settings):
    with torch.no_grad():
        out = model(samples.images[idx].to(next(model.parameters()).dtype))
    log_probs = torch.log_softmax(out["logits"].double(), -1)
    return [match_tensors(log_probs[b].exp(), out["boxes"][b].double(), samples.gt_boxes[i],
                          samples.gt_classes[i], settings.lambda_class, settings.lambda_l1,
                          settings.lambda_giou).pairs
            for b, i in enumerate(idx)]


def _loss(model, samples, idx, pairs, settings):
    out = model(samples.images[idx].to(next(model.parameters()).dtype))
    log_probs = torch.log_softmax(out["logits"].double(), -1)
    boxes = out["boxes"].double()
    total = log_probs.new_zeros(())
    for b, i in enumerate(idx):
        t = set_loss_terms(log_probs[b], boxes[b], samples.gt_boxes[i], samples.gt_classes[i],
                           pairs[b], settings.lambda_l1, settings.lambda_giou,
                           settings.no_object_weight)
        total = total + t["total"]
    return total / len(idx)


def check_gradients(model: DetrTiny, samples: PatchSamples, idx, n_probes: int = 10,
                    step: float = 1e-4, dtype=torch.float64, seed: int = 0,
                    settings: TrainSettings | None = None) -> list[ProbeResult]:
    """Compare autograd and central differences on ``n_probes`` random scalar parameters.

    The model is copied and cast to ``dtype``; parameter values stay the
    float32 ones the model was built with. The loss is summed in float64.
    """
    settings = settings or TrainSettings()
    idx = list(idx)
    m = copy.deepcopy(model).to(dtype).eval()
    pairs = _fixed_pairs(m, samples, idx, settings)
    m.zero_grad()
    _loss(m, samples, idx, pairs, settings).backward()
    named = [(n, p) for n, p in m.named_parameters() if p.requires_grad]
    sizes = np.array([p.numel() for _, p in named], dtype=np.float64)
    rng = np.random.default_rng(seed)
    results = []
    for _ in range(n_probes):
        k = int(rng.choice(len(named), p=sizes / sizes.sum()))
        name, p = named[k]
        flat = int(rng.integers(p.numel()))
        index = tuple(int(i) for i in np.unravel_index(flat, tuple(p.shape)))
        analytic = float(p.grad[index])
        with torch.no_grad():
            orig = p[index].item()
            p[index] = orig + step
            up = float(_loss(m, samples, idx, pairs, settings))
            p[index] = orig - step
            down = float(_loss(m, samples, idx, pairs, settings))
            p[index] = orig
        results.append(ProbeResult(name, index, analytic, (up - down) / (2 * step)))
    return results
