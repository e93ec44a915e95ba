"""Procedural vessel-like angiograms with exact class masks and plane labels.

Each image draws an acquisition plane, then strokes 2-5 quadratic Bezier
tubes whose classes come from that plane's allowed set. Tubes are darker
than the textured background; a class has its own width and contrast so the
label is recoverable from local appearance. Masks are produced by
rasterizing the very polygons written to the COCO document, so re-parsing
the document reproduces them exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .annio import build_class_mask, coco_document, parse_coco, rasterize_polygon
from .errors import ConfigError
from .pipeline import ViewLabelTable


@dataclass(frozen=True)
class SynthConfig:
    count: int = 50
    size: int = 64
    classes: tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    planes: int = 3
    plane_classes: tuple[tuple[int, ...], ...] | None = None
    branches: tuple[int, int] = (2, 5)
    width_range: tuple[float, float] = (3.0, 7.0)
    contrast_range: tuple[float, float] = (40.0, 140.0)
    background: float = 170.0
    noise: float = 5.0
    texture: float = 6.0
    seed: int = 0

    def __post_init__(self):
        if self.count < 0 or self.size < 8:
            raise ConfigError("count must be >= 0 and size >= 8")
        if not 1 <= self.planes <= 11:
            raise ConfigError("planes must lie in 1..11")
        if not self.classes or any(not 1 <= c <= 26 for c in self.classes):
            raise ConfigError("classes must be a non-empty subset of 1..26")
        if self.width_range[0] < 1 or self.width_range[0] > self.width_range[1]:
            raise ConfigError("width range must satisfy 1 <= lo <= hi")
        lo, hi = self.branches
        if not 1 <= lo <= hi:
            raise ConfigError("branch range must satisfy 1 <= lo <= hi")
        for allowed in self.allowed_sets():
            if not allowed or not set(allowed) <= set(self.classes):
                raise ConfigError("every plane needs a non-empty allowed set within the used classes")

    def allowed_sets(self) -> tuple[tuple[int, ...], ...]:
        if self.plane_classes is not None:
            if len(self.plane_classes) != self.planes:
                raise ConfigError("plane_classes must list one allowed set per plane")
            return tuple(tuple(sorted(s)) for s in self.plane_classes)
        # overlapping windows over the class list, one window per plane
        cls = sorted(self.classes)
        n = len(cls)
        span = max(1, min(n, (2 * n + self.planes - 1) // self.planes))
        sets = []
        for p in range(self.planes):
            start = (p * n) // self.planes
            sets.append(tuple(sorted({cls[(start + k) % n] for k in range(span)})))
        return tuple(sets)

    def class_style(self, class_id: int) -> tuple[float, float]:
        """(width px, contrast) for a class, spread evenly over the configured ranges."""
        cls = sorted(self.classes)
        t = cls.index(class_id) / max(1, len(cls) - 1)
        w = self.width_range[0] + t * (self.width_range[1] - self.width_range[0])
        c = self.contrast_range[0] + t * (self.contrast_range[1] - self.contrast_range[0])
        return w, c


@dataclass
class SynthDataset:
    images: dict[int, np.ndarray]
    masks: dict[int, np.ndarray]
    views: ViewLabelTable
    coco_json: str
    polygons: dict[int, list[tuple[int, tuple[tuple[float, float], ...]]]] = field(default_factory=dict)


def _bezier(p0, p1, p2, n):
    t = np.linspace(0.0, 1.0, n)[:, None]
    pts = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2
    d = 2 * (1 - t) * (p1 - p0) + 2 * t * (p2 - p1)
    return pts, d


def _tube_polygon(rng, size, width):
    """Stroke outline of a random gentle quadratic curve as a closed polygon."""
    margin = size * 0.08
    p0 = rng.uniform(margin, size - margin, 2)
    ang = rng.uniform(0, 2 * np.pi)
    length = rng.uniform(0.45, 0.8) * size
    p2 = np.clip(p0 + length * np.array([np.cos(ang), np.sin(ang)]), margin, size - margin)
    mid = (p0 + p2) / 2
    normal = np.array([-(p2 - p0)[1], (p2 - p0)[0]])
    normal /= np.linalg.norm(normal) + 1e-12
    p1 = mid + normal * rng.uniform(-0.25, 0.25) * length
    pts, d = _bezier(p0, p1, p2, 24)
    nrm = np.stack([-d[:, 1], d[:, 0]], axis=1)
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True) + 1e-12
    left = pts + nrm * width / 2
    right = pts - nrm * width / 2
    poly = np.concatenate([left, right[::-1]])
    # round to 1/64 px so the JSON text round-trips exactly
    return tuple((float(x), float(y)) for x, y in np.round(poly * 64) / 64)


def _render_image(rng, mask, cfg: SynthConfig):
    size = cfg.size
    texture = ndimage.gaussian_filter(rng.normal(0, 1, (size, size)), 4.0, mode="mirror")
    texture /= texture.std() + 1e-12
    img = cfg.background + cfg.texture * texture
    for c in np.unique(mask):
        if c:
            img[mask == c] -= cfg.class_style(int(c))[1]
    img = ndimage.gaussian_filter(img, 0.6, mode="mirror")
    img += rng.normal(0, cfg.noise, img.shape)
    return np.floor(np.clip(img, 0, 255) + 0.5).astype(np.uint8)


def generate(cfg: SynthConfig) -> SynthDataset:
    """Build ``cfg.count`` images (ids 1..count); deterministic given ``cfg.seed``."""
    allowed = cfg.allowed_sets()
    size = cfg.size
    images, planes, polys = {}, {}, {}
    coco_images, coco_anns = [], []
    ann_id = 1
    for iid in range(1, cfg.count + 1):
        rng = np.random.default_rng([cfg.seed, iid])
        plane = int(rng.integers(cfg.planes))
        choices = allowed[plane]
        k = int(rng.integers(cfg.branches[0], cfg.branches[1] + 1))
        k = min(k, len(choices))
        classes = sorted(int(c) for c in rng.choice(choices, size=k, replace=False))
        occupied = np.zeros((size, size), dtype=bool)
        placed = []
        for c in classes:
            width, _ = cfg.class_style(c)
            for _ in range(30):
                poly = _tube_polygon(rng, size, width)
                cov = rasterize_polygon(poly, size, size) > 0
                grown = ndimage.binary_dilation(cov, iterations=2)
                if cov.any() and not (grown & occupied).any():
                    occupied |= cov
                    placed.append((c, poly))
                    break
        planes[iid] = plane
        polys[iid] = placed
        coco_images.append((iid, size, size, f"{iid:05d}.pgm"))
        for c, poly in placed:
            coco_anns.append((ann_id, iid, c, [poly]))
            ann_id += 1

    text = coco_document(coco_images, coco_anns, cfg.classes)
    aset = parse_coco(text)
    masks = {}
    for iid in range(1, cfg.count + 1):
        masks[iid] = build_class_mask(aset, iid)
        images[iid] = _render_image(np.random.default_rng([cfg.seed, iid, 1]), masks[iid], cfg)
    views = ViewLabelTable(planes, {p: set(s) for p, s in enumerate(allowed)})
    return SynthDataset(images, masks, views, text, polys)
