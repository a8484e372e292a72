import numpy as np
import pytest
import torch

from ulmdetr.frames import Frame
from ulmdetr.inference import detect, detect_frame
from ulmdetr.model import DetrTiny, ModelConfig


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    m = DetrTiny(ModelConfig(d_model=32, class_prior=0.6, query_anchors=True)).eval()
    return m


def test_detect_single_patch_matches_predict(model):
    frame = Frame(np.random.default_rng(0).normal(size=(64, 64)).astype(np.float32))
    dets = detect_frame(model, frame, k=1, confidence_threshold=0.0, dedup=False)
    preds = model.predict(frame)
    assert len(dets) == len(preds)
    assert sorted(d.confidence for d in dets) == pytest.approx(sorted(p.confidence for p in preds))


def test_detect_grid_offsets_and_sources(model):
    frame = Frame(np.zeros((128, 128), dtype=np.float32))
    dets = detect_frame(model, frame, k=2, confidence_threshold=0.0, dedup=False)
    assert {d.source_patch for d in dets} <= {0, 1, 2, 3}
    for d in dets:
        r, c = divmod(d.source_patch, 2)
        assert 64 * c <= d.center[0] < 64 * (c + 1) and 64 * r <= d.center[1] < 64 * (r + 1)


def test_detect_small_patches_drop_padding(model):
    frame = Frame(np.zeros((40, 40), dtype=np.float32))
    for d in detect_frame(model, frame, k=1, confidence_threshold=0.0):
        assert d.center[0] < 40 and d.center[1] < 40


def test_detect_rejects_oversized_patches(model):
    with pytest.raises(ValueError, match="grid"):
        detect_frame(model, Frame(np.zeros((100, 100))), k=1)


def test_detect_threshold_and_determinism(model):
    frames = [Frame(np.random.default_rng(i).normal(size=(64, 64)), frame_id=i) for i in range(3)]
    a = detect(model, frames, confidence_threshold=0.3)
    b = detect(model, frames, confidence_threshold=0.3)
    assert a == b and sorted(a) == [0, 1, 2]
    assert all(d.confidence >= 0.3 for ds in a.values() for d in ds)
