"""COCO-style annotation ingestion, dataset splits, and box rescaling.

Boxes carry an explicit coordinate-space tag (``native``, ``net416`` or
``map``) so that detections and ground truth can never be compared across
mismatched resolutions by accident. Splits and negative mixing are
deterministic functions of their seed.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

SPACES = ("native", "net416", "map")
NET_SIZE = 416


class CocoParseError(ValueError):
    """The document is not valid JSON or lacks the required arrays."""


class ReferentialIntegrityError(ValueError):
    """An annotation references an image id that does not exist."""


class CocoValidationError(ValueError):
    """A record is structurally present but carries invalid values."""


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    w: float
    h: float
    space: str = "native"

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box dims must be positive, got w={self.w} h={self.h}")
        if self.space not in SPACES:
            raise ValueError(f"unknown coordinate space {self.space!r}")

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    width: int
    height: int
    disease_labels: frozenset[str] = frozenset()


@dataclass(frozen=True)
class Annotation:
    image_id: str
    phrase: str
    boxes: tuple[Box, ...]
    disease_tags: frozenset[str] = frozenset()


@dataclass(frozen=True)
class DatasetSplit:
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    seed: int
    ratios: tuple[float, float, float]

    def to_dict(self) -> dict:
        return {
            "train_ids": list(self.train_ids),
            "val_ids": list(self.val_ids),
            "test_ids": list(self.test_ids),
            "seed": self.seed,
            "ratios": list(self.ratios),
        }


_DISEASE_CATEGORIES = {"pneumonia", "pneumothorax"}


def load_coco(source) -> tuple[list[ImageRecord], list[Annotation]]:
    """Load images and annotations from a COCO-style export.

    ``source`` may be a path or an already-parsed dict. Annotation rows
    sharing (image id, phrase) are merged into one multi-box Annotation.
    """
    if isinstance(source, (str, Path)):
        raw = Path(source).read_text(encoding="utf-8")
        try:
            doc = json.loads(raw)
        except json.JSONDecodeError as e:
            raise CocoParseError(
                f"malformed JSON at offset {e.pos} (line {e.lineno}): {e.msg}"
            ) from e
    else:
        doc = source

    for key in ("images", "annotations", "categories"):
        if key not in doc:
            raise CocoParseError(f"document is missing the {key!r} array")

    categories = {}
    for cat in doc["categories"]:
        name = str(cat.get("name", ""))
        categories[cat["id"]] = name

    images: dict[str, ImageRecord] = {}
    for im in doc["images"]:
        image_id = str(im["id"])
        width = im.get("width", 0)
        height = im.get("height", 0)
        if width <= 0 or height <= 0:
            raise CocoValidationError(
                f"image {image_id}: non-positive dimensions {width}x{height}"
            )
        images[image_id] = ImageRecord(image_id, int(width), int(height))

    grouped: dict[tuple[str, str], dict] = {}
    for ann in doc["annotations"]:
        image_id = str(ann["image_id"])
        if image_id not in images:
            raise ReferentialIntegrityError(
                f"annotation references unknown image id {image_id!r}"
            )
        bbox = ann.get("bbox")
        if not bbox or len(bbox) != 4:
            raise CocoValidationError(f"annotation on image {image_id}: missing bbox")
        x, y, w, h = (float(v) for v in bbox)
        if w <= 0 or h <= 0:
            raise CocoValidationError(
                f"annotation on image {image_id}: non-positive bbox dims {w}x{h}"
            )
        cat_name = categories.get(ann.get("category_id"), "")
        phrase = ann.get("caption") or ann.get("phrase") or cat_name
        if not phrase:
            raise CocoValidationError(f"annotation on image {image_id}: empty phrase")
        tag = cat_name.lower()
        tags = frozenset({tag}) if tag in _DISEASE_CATEGORIES else frozenset()
        key = (image_id, phrase)
        entry = grouped.setdefault(key, {"boxes": [], "tags": set()})
        entry["boxes"].append(Box(x, y, w, h, "native"))
        entry["tags"].update(tags)

    annotations = [
        Annotation(image_id, phrase, tuple(v["boxes"]), frozenset(v["tags"]))
        for (image_id, phrase), v in grouped.items()
    ]

    labels: dict[str, set[str]] = {i: set() for i in images}
    for ann in annotations:
        labels[ann.image_id].update(ann.disease_tags)
    records = [
        replace(images[i], disease_labels=frozenset(labels[i])) for i in images
    ]
    return records, annotations


def to_coco(images: list[ImageRecord], annotations: list[Annotation]) -> dict:
    """Serialize records back into the ingested COCO layout."""
    cat_names = sorted({t for a in annotations for t in a.disease_tags})
    cat_ids = {name: i + 1 for i, name in enumerate(cat_names)}
    doc = {
        "images": [
            {"id": im.image_id, "width": im.width, "height": im.height}
            for im in images
        ],
        "annotations": [],
        "categories": [{"id": i, "name": n} for n, i in cat_ids.items()],
    }
    next_id = 1
    for ann in annotations:
        tag = min(ann.disease_tags) if ann.disease_tags else None
        for box in ann.boxes:
            doc["annotations"].append({
                "id": next_id,
                "image_id": ann.image_id,
                "bbox": box.as_list(),
                "caption": ann.phrase,
                "category_id": cat_ids.get(tag, 0),
            })
            next_id += 1
    return doc


def make_split(ids, ratios, seed: int) -> DatasetSplit:
    """Deterministically split ids into train/val/test buckets.

    Bucket sizes are floor(n * ratio); ids left over after flooring go to
    the train bucket.
    """
    ids = [str(i) for i in ids]
    if not ids:
        raise ValueError("cannot split an empty id list")
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValueError("ratios must be three non-negative numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]

    n = len(ids)
    n_train = math.floor(n * ratios[0])
    n_val = math.floor(n * ratios[1])
    n_test = math.floor(n * ratios[2])
    n_train += n - (n_train + n_val + n_test)  # remainder to the largest bucket

    return DatasetSplit(
        train_ids=tuple(shuffled[:n_train]),
        val_ids=tuple(shuffled[n_train:n_train + n_val]),
        test_ids=tuple(shuffled[n_train + n_val:]),
        seed=int(seed),
        ratios=ratios,
    )


def mix_negatives(positive_ids, negative_pool, ratio: float, seed: int) -> list[str]:
    """Positives plus a seeded sample of floor(ratio * n_pos) negatives.

    Ratio 1.0 mixes negatives and positives equally. A pool smaller than
    the request yields the whole pool and a warning.
    """
    if ratio <= 0:
        raise ValueError("ratio must be positive")
    positive_ids = [str(i) for i in positive_ids]
    negative_pool = [str(i) for i in negative_pool]
    want = math.floor(ratio * len(positive_ids))
    rng = np.random.default_rng(seed)
    if want > len(negative_pool):
        logger.warning(
            "negative pool has %d ids, wanted %d; taking the whole pool",
            len(negative_pool), want,
        )
        sampled = list(negative_pool)
        rng.shuffle(sampled)
    else:
        idx = rng.choice(len(negative_pool), size=want, replace=False)
        sampled = [negative_pool[i] for i in idx]
    return positive_ids + sampled


def rescale_box(box: Box, from_dims, to_dims, to_space: str | None = None) -> Box:
    """Rescale a box between resolutions by independent axis ratios."""
    fw, fh = from_dims
    tw, th = to_dims
    if tw <= 0 or th <= 0:
        raise ValueError(f"target dims must be positive, got {to_dims}")
    if fw <= 0 or fh <= 0:
        raise ValueError(f"source dims must be positive, got {from_dims}")
    sx = tw / fw
    sy = th / fh
    return Box(
        x=box.x * sx, y=box.y * sy, w=box.w * sx, h=box.h * sy,
        space=to_space if to_space is not None else box.space,
    )


def read_id_file(path) -> list[str]:
    with open(path, "r", encoding="utf-8") as f:
        return [line.strip() for line in f if line.strip()]
