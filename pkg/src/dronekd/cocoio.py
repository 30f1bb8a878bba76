"""COCO-format annotation ingestion and export.

Only the annotation tables are handled (images/annotations/categories);
pixels come from elsewhere. Boxes arrive as [x, y, w, h] and are converted to
corner form. Category ids are remapped to a contiguous 0-based range in
sorted original-id order.
"""

from __future__ import annotations

import json

from .boxes import BBox
from .synth import Dataset


class CocoFormatError(ValueError):
    """Malformed COCO document; the message names the offending location."""


def _require(table: dict, key: str, where: str):
    if key not in table:
        raise CocoFormatError(f"{where}: missing required key {key!r}")
    return table[key]


def load_coco_annotations(text: str) -> tuple[Dataset, int]:
    """Parse a COCO annotation document into a Dataset index.

    Returns the dataset (without pixel data) and the number of annotations
    dropped because their boxes were smaller than one pixel.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CocoFormatError(f"document: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise CocoFormatError("document: top level must be an object")
    for table in ("images", "annotations", "categories"):
        if table not in doc:
            raise CocoFormatError(f"document: missing {table!r} table")
        if not isinstance(doc[table], list):
            raise CocoFormatError(f"{table}: must be a list")

    cats = {}
    for i, cat in enumerate(doc["categories"]):
        cid = _require(cat, "id", f"categories[{i}]")
        cats[cid] = str(cat.get("name", f"category{cid}"))
    remap = {cid: k for k, cid in enumerate(sorted(cats))}

    images = {}
    order = []
    for i, im in enumerate(doc["images"]):
        iid = _require(im, "id", f"images[{i}]")
        width = _require(im, "width", f"images[{i}]")
        height = _require(im, "height", f"images[{i}]")
        images[iid] = (int(height), int(width))
        order.append(iid)

    anns_by_image = {iid: [] for iid in order}
    dropped = 0
    for i, ann in enumerate(doc["annotations"]):
        where = f"annotations[{i}]"
        iid = _require(ann, "image_id", where)
        if iid not in images:
            raise CocoFormatError(f"{where}: unknown image_id {iid!r}")
        cid = _require(ann, "category_id", where)
        if cid not in remap:
            raise CocoFormatError(f"{where}: unknown category_id {cid!r}")
        bbox = _require(ann, "bbox", where)
        if not isinstance(bbox, (list, tuple)) or len(bbox) != 4:
            raise CocoFormatError(f"{where}: bbox must be [x, y, w, h]")
        x, y, w, h = (float(v) for v in bbox)
        if w < 1.0 or h < 1.0:
            dropped += 1
            continue
        ih, iw = images[iid]
        box = BBox(max(x, 0.0), max(y, 0.0), min(x + w, iw), min(y + h, ih))
        anns_by_image[iid].append((box, remap[cid]))

    names = [cats[cid] for cid in sorted(cats)]
    ds = Dataset(
        annotations=[anns_by_image[iid] for iid in order],
        num_classes=len(names),
        image_sizes=[images[iid] for iid in order],
        images=None,
        split="coco",
        category_names=names,
    )
    return ds, dropped


def export_coco(ds: Dataset) -> str:
    """Serialize annotations as a COCO document with stable key ordering."""
    images = [
        {"id": i, "width": w, "height": h, "file_name": f"{ds.split}_{i:06d}.ppm"}
        for i, (h, w) in enumerate(ds.image_sizes)
    ]
    annotations = []
    aid = 0
    for i, anns in enumerate(ds.annotations):
        for box, cls in anns:
            annotations.append(
                {
                    "id": aid,
                    "image_id": i,
                    "category_id": cls,
                    "bbox": [box.x1, box.y1, box.width, box.height],
                    "area": box.area,
                    "iscrowd": 0,
                }
            )
            aid += 1
    categories = [
        {"id": c, "name": name} for c, name in enumerate(ds.category_names)
    ]
    doc = {"images": images, "annotations": annotations, "categories": categories}
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))
