import json

import pytest

from ulmdetr import coco
from ulmdetr.geometry import BBoxN
from ulmdetr.simulator import GroundTruthItem, PsfModel, simulate_dataset, simulate_frame


def test_empty_scene():
    ds = coco.to_coco([simulate_frame(64, 64, 0, PsfModel(), 0.0)])
    assert len(ds.images) == 1 and ds.annotations == []


def test_full_frame_conversion():
    frame, _ = simulate_frame(64, 64, 0, PsfModel(), 0.0)
    ds = coco.to_coco([(frame, [GroundTruthItem(BBoxN(0.5, 0.5, 1.0, 1.0))])])
    (ann,) = ds.annotations
    assert ann["bbox"] == [0, 0, 64, 64]
    assert ann["area"] == 4096
    assert ann["id"] == 1 and ann["iscrowd"] == 0 and ann["category_id"] == 1


def test_empty_dataset_json():
    payload = json.loads(coco.to_json(coco.CocoDataset()))
    assert payload == {"images": [], "annotations": [], "categories": []}


def test_key_order_and_sorting():
    ds = coco.to_coco(simulate_dataset(3, bubbles=2, seed=1))
    ds.annotations.reverse()
    payload = json.loads(coco.to_json(ds))
    assert list(payload) == ["images", "annotations", "categories"]
    assert list(payload["annotations"][0]) == ["id", "image_id", "category_id", "bbox", "area", "iscrowd"]
    assert [a["id"] for a in payload["annotations"]] == sorted(a["id"] for a in ds.annotations)


def test_round_trip_byte_stable(tmp_path):
    ds = coco.to_coco(simulate_dataset(100, bubbles=(0, 6), seed=3))
    coco.save(ds, tmp_path / "a.json")
    loaded = coco.load(tmp_path / "a.json")
    assert loaded == ds
    coco.save(loaded, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert len(ds.annotations) == sum(len(gt) for _, gt in simulate_dataset(100, bubbles=(0, 6), seed=3))


def test_to_coco_needs_frames():
    with pytest.raises(ValueError):
        coco.to_coco([])


def _write(tmp_path, payload):
    p = tmp_path / "x.json"
    p.write_text(payload if isinstance(payload, str) else json.dumps(payload))
    return p


def test_load_errors_are_categorized(tmp_path):
    with pytest.raises(coco.MalformedJsonError):
        coco.load(_write(tmp_path, "{not json"))
    with pytest.raises(coco.MissingKeyError):
        coco.load(_write(tmp_path, {"images": [], "annotations": []}))
    bad_ref = {
        "images": [{"id": 1, "file_name": "a", "width": 4, "height": 4}],
        "annotations": [{"id": 1, "image_id": 2, "category_id": 1, "bbox": [0, 0, 1, 1],
                         "area": 1, "iscrowd": 0}],
        "categories": [{"id": 1, "name": "microbubble"}],
    }
    with pytest.raises(coco.ReferentialIntegrityError, match="referential integrity"):
        coco.load(_write(tmp_path, bad_ref))
    bad_ref["annotations"][0]["image_id"] = 1
    del bad_ref["annotations"][0]["area"]
    with pytest.raises(coco.MissingKeyError):
        coco.load(_write(tmp_path, bad_ref))
    bad_ref["annotations"][0]["area"] = 1
    bad_ref["annotations"][0]["bbox"] = [0, 0, 0, 1]
    with pytest.raises(coco.InvalidAnnotationError):
        coco.load(_write(tmp_path, bad_ref))


def test_gt_items_round_trip():
    data = simulate_dataset(2, bubbles=3, seed=5)
    ds = coco.to_coco(data)
    items = coco.gt_items_for_image(ds, 0)
    for a, b in zip(items, data[0][1]):
        assert a.box.as_array() == pytest.approx(b.box.as_array(), abs=1e-6)
