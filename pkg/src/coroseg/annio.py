"""COCO-subset annotation parsing, polygon rasterization, and raster file formats.

Masks are plain ``numpy.uint8`` arrays of shape ``(height, width)``:
class masks hold ids 0..26, binary masks hold 0/255. Probability maps are
``float32`` arrays of shape ``(classes, height, width)``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DegeneratePolygonError,
    DomainError,
    FormatError,
    LookupFailure,
    ParseError,
    ReferentialError,
    SizeMismatchError,
    UnsupportedDepthError,
    UnsupportedFormatError,
    ValidityError,
)

MAX_CLASS_ID = 26
NUM_CLASSES = MAX_CLASS_ID + 1  # background included

# Table-row order of the challenge labels; index = class id.
CLASS_NAMES = (
    "Background", "1", "2", "3", "4", "5", "6", "7", "8", "9", "9a", "10", "10a",
    "11", "12", "12a", "13", "14", "14a", "15", "16", "16a", "16b", "16c", "12b",
    "14b", "Stenosis",
)

PROBMAP_MAGIC = b"ARTPROB1"

Polygon = Sequence[tuple[float, float]]


@dataclass(frozen=True)
class AnnotationRecord:
    annotation_id: int
    image_id: int
    category_id: int
    polygons: tuple[tuple[tuple[float, float], ...], ...]


@dataclass(frozen=True)
class ImageInfo:
    width: int
    height: int
    file_name: str


@dataclass
class AnnotationSet:
    images: dict[int, ImageInfo] = field(default_factory=dict)
    annotations: list[AnnotationRecord] = field(default_factory=list)

    def for_image(self, image_id: int) -> list[AnnotationRecord]:
        return [a for a in self.annotations if a.image_id == image_id]


def _byte_offset(text: str, char_pos: int) -> int:
    return len(text[:char_pos].encode("utf-8"))


def _polygon_from_flat(flat, ann_id) -> tuple[tuple[float, float], ...]:
    if not isinstance(flat, list) or len(flat) % 2:
        raise ParseError(f"annotation {ann_id}: polygon must be a flat x,y list of even length")
    pts = []
    for x, y in zip(flat[0::2], flat[1::2]):
        x, y = float(x), float(y)
        if not (math.isfinite(x) and math.isfinite(y)):
            raise DomainError(f"annotation {ann_id}: non-finite polygon coordinate")
        pts.append((x, y))
    if len(pts) < 3:
        raise DegeneratePolygonError(
            f"annotation {ann_id}: polygon has {len(pts)} vertices, need at least 3"
        )
    return tuple(pts)


def parse_coco(document_text: str) -> AnnotationSet:
    """Parse a COCO-style document restricted to polygon segmentations.

    Records keep document order. RLE segmentations are rejected with
    :class:`UnsupportedFormatError`.
    """
    try:
        doc = json.loads(document_text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON: {exc.msg}", _byte_offset(document_text, exc.pos)) from None
    if not isinstance(doc, dict):
        raise ParseError("top-level JSON value must be an object", 0)
    for key in ("images", "annotations", "categories"):
        if not isinstance(doc.get(key), list):
            raise ParseError(f"missing or non-array field '{key}'")

    out = AnnotationSet()
    for img in doc["images"]:
        try:
            out.images[int(img["id"])] = ImageInfo(
                int(img["width"]), int(img["height"]), str(img.get("file_name", ""))
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad image entry {img!r}: {exc}") from None

    for ann in doc["annotations"]:
        try:
            ann_id = int(ann["id"])
            image_id = int(ann["image_id"])
            cat = int(ann["category_id"])
            seg = ann["segmentation"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad annotation entry: missing/invalid {exc}") from None
        if image_id not in out.images:
            raise ReferentialError(f"annotation {ann_id} references missing image {image_id}")
        if not 1 <= cat <= MAX_CLASS_ID:
            raise DomainError(f"annotation {ann_id}: category id {cat} outside 1..{MAX_CLASS_ID}")
        if isinstance(seg, dict):
            raise UnsupportedFormatError(
                f"annotation {ann_id}: RLE segmentation is not supported (polygons only)"
            )
        if not isinstance(seg, list):
            raise ParseError(f"annotation {ann_id}: segmentation must be a list of polygons")
        polys = tuple(_polygon_from_flat(p, ann_id) for p in seg)
        out.annotations.append(AnnotationRecord(ann_id, image_id, cat, polys))
    return out


def load_coco(path) -> AnnotationSet:
    return parse_coco(Path(path).read_text(encoding="utf-8"))


def _crossings(xs0, ys0, xs1, ys1, yc):
    """x positions where the horizontal line ``y = yc`` crosses the edges (half-open rule)."""
    hit = (ys0 > yc) != (ys1 > yc)
    x0, y0, x1, y1 = xs0[hit], ys0[hit], xs1[hit], ys1[hit]
    return (x1 - x0) * (yc - y0) / (y1 - y0) + x0


def rasterize_polygon(polygon: Polygon, width: int, height: int) -> np.ndarray:
    """Scanline fill: a pixel is set when its center lies inside under the even-odd rule.

    Returns a binary mask with values 0/255.
    """
    if len(polygon) < 3:
        raise DegeneratePolygonError(f"polygon has {len(polygon)} vertices, need at least 3")
    if width < 1 or height < 1:
        raise DomainError("raster dimensions must be positive")
    pts = np.asarray(polygon, dtype=np.float64)
    xs0, ys0 = pts[:, 0], pts[:, 1]
    xs1, ys1 = np.roll(xs0, -1), np.roll(ys0, -1)
    out = np.zeros((height, width), dtype=np.uint8)
    centers = np.arange(width) + 0.5

    ylo = max(0, int(math.floor(ys0.min() - 0.5)))
    yhi = min(height - 1, int(math.ceil(ys0.max())))
    for row in range(ylo, yhi + 1):
        xi = np.sort(_crossings(xs0, ys0, xs1, ys1, row + 0.5))
        if xi.size == 0:
            continue
        # number of crossings strictly right of each center
        right = xi.size - np.searchsorted(xi, centers, side="right")
        out[row, (right & 1) == 1] = 255
    return out


def rasterize_annotation(record: AnnotationRecord, width: int, height: int) -> np.ndarray:
    """Union of the record's polygons as a boolean mask."""
    covered = np.zeros((height, width), dtype=bool)
    for poly in record.polygons:
        covered |= rasterize_polygon(poly, width, height) > 0
    return covered


def build_class_mask(aset: AnnotationSet, image_id: int, overlap_policy: str = "last-wins") -> np.ndarray:
    """Flatten the annotations of one image into a class-id mask.

    Overlapping annotations are resolved in document order: ``last-wins``
    (default) or ``first-wins``.
    """
    if image_id not in aset.images:
        raise LookupFailure(f"image {image_id} not in annotation set")
    if overlap_policy not in ("last-wins", "first-wins"):
        raise DomainError(f"unknown overlap policy {overlap_policy!r}")
    info = aset.images[image_id]
    mask = np.zeros((info.height, info.width), dtype=np.uint8)
    for rec in aset.for_image(image_id):
        cov = rasterize_annotation(rec, info.width, info.height)
        if overlap_policy == "first-wins":
            cov &= mask == 0
        mask[cov] = rec.category_id
    return mask


def binarize_mask(mask: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8)


# --- PGM (P5) masks -------------------------------------------------------

def write_mask(mask: np.ndarray, path) -> None:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise DomainError(f"mask must be 2-D, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
            raise DomainError("mask values must fit in 0..255")
        arr = arr.astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr).tobytes())


def _pgm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(data[start:pos])
    return tokens, pos


def read_mask(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise FormatError(f"{path}: unsupported magic {data[:2]!r}, expected b'P5'")
    (magic, w, h, maxval), pos = _pgm_tokens(data, 4)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise FormatError(f"{path}: non-numeric PGM header") from None
    if maxval != 255:
        raise UnsupportedDepthError(f"{path}: maxval {maxval} unsupported (only 255)")
    payload = data[pos + 1:]  # exactly one whitespace byte ends the header
    if len(payload) != w * h:
        raise SizeMismatchError(f"{path}: pixel payload size mismatch", w * h, len(payload))
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


# --- ARTPROB1 probability maps -------------------------------------------

def write_probmap(pmap: np.ndarray, path) -> None:
    arr = np.asarray(pmap)
    if arr.ndim != 3:
        raise DomainError(f"probability map must be C x H x W, got shape {arr.shape}")
    arr = arr.astype("<f4", copy=False)
    if not np.all(np.isfinite(arr)):
        raise ValidityError("probability map contains NaN or Inf")
    if arr.size and (arr.min() < 0 or arr.max() > 1):
        raise ValidityError("probability map values must lie in [0, 1]")
    c, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(PROBMAP_MAGIC)
        fh.write(struct.pack("<III", c, h, w))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_probmap(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != PROBMAP_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:8]!r}, expected {PROBMAP_MAGIC!r}")
    if len(data) < 20:
        raise SizeMismatchError(f"{path}: truncated header", 20, len(data))
    c, h, w = struct.unpack("<III", data[8:20])
    expected = 4 * c * h * w
    if len(data) - 20 != expected:
        raise SizeMismatchError(f"{path}: payload size mismatch", expected, len(data) - 20)
    return np.frombuffer(data, dtype="<f4", offset=20).reshape(c, h, w).astype(np.float32)


def coco_document(images: Iterable[tuple[int, int, int, str]],
                  annotations: Iterable[tuple[int, int, int, Sequence[Polygon]]],
                  categories: Iterable[int]) -> str:
    """Serialize a COCO-subset document.

    ``images`` yields ``(id, width, height, file_name)``; ``annotations`` yields
    ``(id, image_id, category_id, polygons)``.
    """
    doc = {
        "images": [{"id": i, "width": w, "height": h, "file_name": f} for i, w, h, f in images],
        "annotations": [
            {
                "id": a,
                "image_id": im,
                "category_id": c,
                "segmentation": [[float(v) for pt in poly for v in pt] for poly in polys],
                "iscrowd": 0,
            }
            for a, im, c, polys in annotations
        ],
        "categories": [{"id": c, "name": CLASS_NAMES[c]} for c in sorted(categories)],
    }
    return json.dumps(doc, indent=1)
