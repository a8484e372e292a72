"""COCO object-detection JSON for simulated microbubble datasets.

Boxes follow COCO's ``[x_top_left, y_top_left, width, height]`` convention in
absolute pixels. Category id 1 is ``microbubble``; id 0 stands for no-object
and is never written.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .geometry import BBoxA, BBoxN, to_absolute

CATEGORY_ID = 1
CATEGORY_NAME = "microbubble"
FLOAT_DECIMALS = 6


class CocoError(ValueError):
    """Base class for dataset load/validation failures."""

    category = "invalid"

    def __str__(self):
        return f"{self.category}: {super().__str__()}"


class MalformedJsonError(CocoError):
    category = "malformed json"


class MissingKeyError(CocoError):
    category = "missing key"


class ReferentialIntegrityError(CocoError):
    category = "referential integrity"


class InvalidAnnotationError(CocoError):
    category = "invalid annotation"


_IMAGE_KEYS = ("id", "file_name", "width", "height")
_ANN_KEYS = ("id", "image_id", "category_id", "bbox", "area", "iscrowd")
_CAT_KEYS = ("id", "name")


@dataclass
class CocoDataset:
    images: list = field(default_factory=list)
    annotations: list = field(default_factory=list)
    categories: list = field(default_factory=list)

    def annotations_for(self, image_id: int) -> list:
        return [a for a in self.annotations if a["image_id"] == image_id]

    def validate(self) -> None:
        for kind, records, keys in (
            ("image", self.images, _IMAGE_KEYS),
            ("annotation", self.annotations, _ANN_KEYS),
            ("category", self.categories, _CAT_KEYS),
        ):
            for rec in records:
                missing = [k for k in keys if k not in rec]
                if missing:
                    raise MissingKeyError(f"{kind} record {rec!r} lacks {missing}")
            ids = [r["id"] for r in records]
            if len(set(ids)) != len(ids):
                raise ReferentialIntegrityError(f"duplicate {kind} ids")
        image_ids = {im["id"] for im in self.images}
        cat_ids = {c["id"] for c in self.categories}
        for ann in self.annotations:
            if ann["image_id"] not in image_ids:
                raise ReferentialIntegrityError(
                    f"annotation {ann['id']} references missing image {ann['image_id']}"
                )
            if ann["category_id"] not in cat_ids:
                raise ReferentialIntegrityError(
                    f"annotation {ann['id']} references missing category {ann['category_id']}"
                )
            bbox = ann["bbox"]
            if len(bbox) != 4 or bbox[2] <= 0 or bbox[3] <= 0:
                raise InvalidAnnotationError(f"annotation {ann['id']} has bad bbox {bbox}")
            if ann["iscrowd"] != 0:
                raise InvalidAnnotationError(f"annotation {ann['id']} is marked crowd")


def _r(x: float) -> float:
    return round(float(x), FLOAT_DECIMALS)


def coco_bbox(box: BBoxA) -> list[float]:
    return [_r(box.x0), _r(box.y0), _r(box.x1 - box.x0), _r(box.y1 - box.y0)]


def bbox_to_corners(bbox) -> BBoxA:
    x, y, w, h = bbox
    return BBoxA(x, y, x + w, y + h)


def to_coco(frames_with_gt, category_name: str = CATEGORY_NAME, file_pattern: str = "frame_{:06d}.ulmf") -> CocoDataset:
    """Build a dataset with one image per frame and one annotation per ground-truth item.

    Image ids are the frames' ``frame_id`` (made unique by position if they
    collide); annotation ids run from 1.
    """
    frames_with_gt = list(frames_with_gt)
    if not frames_with_gt:
        raise ValueError("to_coco needs at least one frame")
    ds = CocoDataset(categories=[{"id": CATEGORY_ID, "name": category_name}])
    frame_ids = [f.frame_id for f, _ in frames_with_gt]
    if len(set(frame_ids)) != len(frame_ids):
        frame_ids = list(range(len(frames_with_gt)))
    ann_id = 1
    for image_id, (frame, gt) in zip(frame_ids, frames_with_gt):
        ds.images.append({
            "id": int(image_id),
            "file_name": file_pattern.format(image_id),
            "width": frame.width,
            "height": frame.height,
        })
        for item in gt:
            bbox = coco_bbox(to_absolute(item.box, frame.width, frame.height))
            if bbox[2] <= 0 or bbox[3] <= 0:
                raise InvalidAnnotationError(f"ground truth {item} has non-positive area in pixels")
            ds.annotations.append({
                "id": ann_id,
                "image_id": int(image_id),
                "category_id": CATEGORY_ID,
                "bbox": bbox,
                "area": _r(bbox[2] * bbox[3]),
                "iscrowd": 0,
            })
            ann_id += 1
    return ds


def gt_boxes_for_image(ds: CocoDataset, image_id: int) -> list[BBoxA]:
    return [bbox_to_corners(a["bbox"]) for a in ds.annotations_for(image_id)]


def gt_items_for_image(ds: CocoDataset, image_id: int):
    """Rebuild normalized ground-truth items for one image."""
    from .simulator import GroundTruthItem

    image = next(im for im in ds.images if im["id"] == image_id)
    w, h = image["width"], image["height"]
    items = []
    for box in gt_boxes_for_image(ds, image_id):
        items.append(GroundTruthItem(box=BBoxN(
            0.5 * (box.x0 + box.x1) / w, 0.5 * (box.y0 + box.y1) / h,
            box.width / w, box.height / h,
        )))
    return items


def _ordered(rec: dict, keys) -> dict:
    return {k: rec[k] for k in keys}


def to_json(ds: CocoDataset) -> str:
    payload = {
        "images": [_ordered(r, _IMAGE_KEYS) for r in sorted(ds.images, key=lambda r: r["id"])],
        "annotations": [
            _ordered(r, _ANN_KEYS) for r in sorted(ds.annotations, key=lambda r: r["id"])
        ],
        "categories": [
            _ordered(r, _CAT_KEYS) for r in sorted(ds.categories, key=lambda r: r["id"])
        ],
    }
    return json.dumps(payload, indent=1, ensure_ascii=False) + "\n"


def from_json(text: str) -> CocoDataset:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedJsonError(str(exc)) from exc
    if not isinstance(payload, dict):
        raise MalformedJsonError("top level must be a JSON object")
    for key in ("images", "annotations", "categories"):
        if key not in payload:
            raise MissingKeyError(f"dataset lacks '{key}'")
        if not isinstance(payload[key], list):
            raise MalformedJsonError(f"'{key}' must be a list")
    ds = CocoDataset(
        images=[dict(r) for r in payload["images"]],
        annotations=[dict(r) for r in payload["annotations"]],
        categories=[dict(r) for r in payload["categories"]],
    )
    ds.validate()
    return ds


def save(ds: CocoDataset, path) -> None:
    Path(path).write_text(to_json(ds), encoding="utf-8")


def load(path) -> CocoDataset:
    return from_json(Path(path).read_text(encoding="utf-8"))


def detections_to_results(detections_by_image: dict) -> list[dict]:
    """COCO results records (``image_id, category_id, bbox, score``) for scored detections."""
    out = []
    for image_id in sorted(detections_by_image):
        for det in detections_by_image[image_id]:
            out.append({
                "image_id": int(image_id),
                "category_id": CATEGORY_ID,
                "bbox": coco_bbox(det.box),
                "score": _r(det.confidence),
            })
    return out


def save_results(detections_by_image: dict, path) -> None:
    Path(path).write_text(json.dumps(detections_to_results(detections_by_image)) + "\n", encoding="utf-8")
