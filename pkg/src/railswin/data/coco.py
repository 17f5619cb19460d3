"""COCO-style annotation ingestion and regeneration.

A dataset is a list of annotated images plus a category table.  Pixel
data is optional: annotation-only documents load fine, and image payloads
are attached from sibling PGM/PPM files when they exist (PNG and other
formats are expected to arrive as already-decoded arrays).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from ..errors import DanglingReference, ParseError
from .boxes import BBox
from .imageio import read_pnm, write_pnm


@dataclass
class AnnotatedImage:
    id: int
    width: int
    height: int
    channels: int = 1
    pixels: np.ndarray | None = None  # uint8 [H, W] or [H, W, 3]
    instances: list = field(default_factory=list)  # [(BBox, category_id)]
    file_name: str | None = None

    def category_ids(self):
        return {cat for _, cat in self.instances}


@dataclass
class Dataset:
    images: list = field(default_factory=list)
    categories: dict = field(default_factory=dict)  # id -> name

    def __len__(self):
        return len(self.images)

    def instance_count(self, category_id=None):
        if category_id is None:
            return sum(len(im.instances) for im in self.images)
        return sum(1 for im in self.images for _, c in im.instances if c == category_id)

    def image_count(self, category_id):
        """Number of images containing at least one instance of the category."""
        return sum(1 for im in self.images if category_id in im.category_ids())


def load_coco(path, load_pixels=True):
    """Parse a COCO-style annotation document into a Dataset.

    Annotations referencing unknown image or category ids raise
    DanglingReference; structural problems raise ParseError.
    """
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ParseError(f"cannot read {path}: {e}") from e
    return parse_coco(doc, base_dir=os.path.dirname(os.fspath(path)), load_pixels=load_pixels)


def parse_coco(doc, base_dir="", load_pixels=False):
    if not isinstance(doc, dict):
        raise ParseError("annotation document must be a JSON object")
    for key in ("images", "annotations", "categories"):
        if key not in doc or not isinstance(doc[key], list):
            raise ParseError(f"annotation document missing list field {key!r}")

    categories = {}
    for cat in doc["categories"]:
        try:
            categories[int(cat["id"])] = str(cat.get("name", cat["id"]))
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"bad category entry {cat!r}") from e

    images = {}
    for im in doc["images"]:
        try:
            rec = AnnotatedImage(id=int(im["id"]), width=int(im["width"]),
                                 height=int(im["height"]),
                                 file_name=im.get("file_name"))
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"bad image entry {im!r}") from e
        if rec.id in images:
            raise ParseError(f"duplicate image id {rec.id}")
        if load_pixels and rec.file_name:
            full = os.path.join(base_dir, rec.file_name)
            if os.path.exists(full) and full.endswith((".pgm", ".ppm", ".pnm")):
                rec.pixels = read_pnm(full)
                rec.channels = 1 if rec.pixels.ndim == 2 else 3
        images[rec.id] = rec

    for ann in doc["annotations"]:
        try:
            image_id = int(ann["image_id"])
            category_id = int(ann["category_id"])
            x, y, w, h = (float(v) for v in ann["bbox"])
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"bad annotation entry {ann!r}") from e
        if image_id not in images:
            raise DanglingReference(f"annotation references missing image {image_id}")
        if category_id not in categories:
            raise DanglingReference(f"annotation references missing category {category_id}")
        images[image_id].instances.append((BBox(x, y, w, h), category_id))

    return Dataset(images=list(images.values()), categories=categories)


def dataset_to_coco(dataset):
    """Regenerate a COCO-style document from a Dataset."""
    doc = {"images": [], "annotations": [], "categories": []}
    for cid in sorted(dataset.categories):
        doc["categories"].append({"id": cid, "name": dataset.categories[cid]})
    ann_id = 1
    for im in dataset.images:
        doc["images"].append({
            "id": im.id, "width": im.width, "height": im.height,
            "file_name": im.file_name or f"img_{im.id:06d}.pgm",
        })
        for box, cat in im.instances:
            doc["annotations"].append({
                "id": ann_id, "image_id": im.id, "category_id": cat,
                "bbox": [box.x, box.y, box.w, box.h], "area": box.area,
                "iscrowd": 0,
            })
            ann_id += 1
    return doc


def save_dataset(dataset, out_dir, write_images=True):
    """Write annotations.json plus one PGM/PPM per image with pixel data."""
    os.makedirs(out_dir, exist_ok=True)
    for im in dataset.images:
        if im.file_name is None:
            im.file_name = f"img_{im.id:06d}.pgm" if im.channels == 1 else f"img_{im.id:06d}.ppm"
        if write_images and im.pixels is not None:
            write_pnm(os.path.join(out_dir, im.file_name), im.pixels)
    path = os.path.join(out_dir, "annotations.json")
    with open(path, "w") as fh:
        json.dump(dataset_to_coco(dataset), fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path
