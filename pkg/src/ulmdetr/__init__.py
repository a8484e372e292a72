"""Microbubble detection with a small detection transformer.

Simulate ultrasound localization frames, train a set-prediction detector,
run it patch-wise over full frames, and score or render the detections.
"""
__version__ = "0.1.0"

from .evaluation import EvalReport, evaluate, render_sr_map
from .frames import Frame, load_ulmf, save_ulmf
from .geometry import BBoxA, BBoxN, giou, iou
from .inference import detect, detect_frame
from .matching import CostMatrix, build_cost_matrix, solve_assignment
from .model import Checkpoint, DetrTiny, ModelConfig, load_checkpoint, save_checkpoint
from .patching import Detection, PatchGrid, dedup_borders, reassemble, split
from .simulator import GroundTruthItem, PsfModel, simulate_dataset, simulate_frame
from .training import TrainSettings, make_patch_samples, train

__all__ = [
    "BBoxA", "BBoxN", "Checkpoint", "CostMatrix", "Detection", "DetrTiny", "EvalReport", "Frame",
    "GroundTruthItem", "ModelConfig", "PatchGrid", "PsfModel", "TrainSettings",
    "build_cost_matrix", "dedup_borders", "detect", "detect_frame", "evaluate", "giou", "iou",
    "load_checkpoint", "load_ulmf", "make_patch_samples", "reassemble", "render_sr_map",
    "save_checkpoint", "save_ulmf", "simulate_dataset", "simulate_frame", "solve_assignment",
    "split", "train",
]
