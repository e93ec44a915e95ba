"""Dataset statistics, difficulty-aware stratified splitting and class-frequency sampling."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from functools import reduce
from typing import Iterable, Mapping, Sequence

import numpy as np

from .annio import CLASS_NAMES, MAX_CLASS_ID, AnnotationSet, rasterize_annotation
from .errors import ConfigError, DomainError, EmptyPopulationError
from .postprocess import connected_components

ALL_CLASSES = tuple(range(1, MAX_CLASS_ID + 1))


@dataclass(frozen=True)
class Segment:
    image_id: int
    class_id: int
    size: int
    index: int  # position within its image, for stable tie-breaking


@dataclass
class DatasetIndex:
    """Per-image segment inventory: ``images[image_id] = [(class_id, size), ...]``."""

    images: dict[int, list[tuple[int, int]]]
    classes: tuple[int, ...] = ALL_CLASSES

    def __post_init__(self):
        for iid, segs in self.images.items():
            for c, s in segs:
                if s < 1:
                    raise DomainError(f"image {iid}: segment of class {c} has size {s} < 1")

    @property
    def class_counts(self) -> dict[int, int]:
        counts = Counter(c for segs in self.images.values() for c, _ in segs)
        return {c: counts.get(c, 0) for c in self.classes}

    @property
    def total_segments(self) -> int:
        return sum(len(s) for s in self.images.values())

    def segments(self) -> list[Segment]:
        return [
            Segment(iid, c, s, k)
            for iid in sorted(self.images)
            for k, (c, s) in enumerate(self.images[iid])
        ]

    def classes_of(self, image_id: int) -> set[int]:
        return {c for c, _ in self.images[image_id]}


def index_from_masks(masks: Mapping[int, np.ndarray], classes: Sequence[int] = ALL_CLASSES) -> DatasetIndex:
    """One segment per 8-connected instance of each class."""
    images = {}
    for iid in sorted(masks):
        m = np.asarray(masks[iid])
        segs = []
        for c in np.unique(m):
            if c == 0:
                continue
            lab = connected_components(m == c, class_id=int(c))
            segs.extend((int(c), b.count) for b in lab.blobs)
        images[iid] = segs
    return DatasetIndex(images, tuple(classes))


def index_from_annotations(aset: AnnotationSet, classes: Sequence[int] = ALL_CLASSES) -> DatasetIndex:
    """One segment per annotation; size is the rasterized pixel count of its polygons."""
    images = {iid: [] for iid in sorted(aset.images)}
    for rec in aset.annotations:
        info = aset.images[rec.image_id]
        size = int(rasterize_annotation(rec, info.width, info.height).sum())
        if size:
            images[rec.image_id].append((rec.category_id, size))
    return DatasetIndex(images, tuple(classes))


# --- statistics -----------------------------------------------------------

@dataclass(frozen=True)
class StatsRow:
    class_id: int
    count: int
    total_pixels: int
    min_size: int | None
    max_size: int | None
    avg_size: float
    share_pct: float

    @property
    def name(self) -> str:
        return CLASS_NAMES[self.class_id]


def dataset_stats(index: DatasetIndex, background_pixels) -> list[StatsRow]:
    """Class-wise summary rows (background first).

    ``background_pixels`` is either a total pixel count or a sequence of
    per-image background counts (which also yields min/max for the row).
    Shares are percentages of all per-annotation pixel totals plus background.
    """
    if not index.images:
        raise EmptyPopulationError("dataset index is empty")
    sizes: dict[int, list[int]] = {}
    for segs in index.images.values():
        for c, s in segs:
            sizes.setdefault(c, []).append(s)

    if isinstance(background_pixels, (int, np.integer)):
        bg_total, bg_list = int(background_pixels), None
    else:
        bg_list = [int(v) for v in background_pixels]
        bg_total = sum(bg_list)
    denom = bg_total + sum(sum(v) for v in sizes.values())

    bg_count = len(bg_list) if bg_list is not None else len(index.images)
    rows = [StatsRow(
        0, bg_count, bg_total,
        min(bg_list) if bg_list else None,
        max(bg_list) if bg_list else None,
        round(bg_total / bg_count, 2) if bg_count else 0.0,
        round(100.0 * bg_total / denom, 4) if denom else 0.0,
    )]
    for c in sorted(sizes):
        v = sizes[c]
        rows.append(StatsRow(c, len(v), sum(v), min(v), max(v),
                             round(sum(v) / len(v), 2), round(100.0 * sum(v) / denom, 4)))
    return rows


STATS_HEADER = ("class_id", "class_name", "segments", "total_pixels", "min_size",
                "max_size", "avg_size", "dataset_pct")


def format_stats_tsv(rows: Iterable[StatsRow]) -> str:
    lines = ["\t".join(STATS_HEADER)]
    for r in rows:
        lines.append("\t".join([
            str(r.class_id), r.name, str(r.count), str(r.total_pixels),
            "-" if r.min_size is None else str(r.min_size),
            "-" if r.max_size is None else str(r.max_size),
            f"{r.avg_size:.2f}", f"{r.share_pct:.4f}",
        ]))
    return "\n".join(lines) + "\n"


# --- stratified split -----------------------------------------------------

def allocate_validation(class_counts: Mapping[int, int], V: int) -> dict[int, int]:
    """Split ``V`` validation segments over classes proportionally to ``N / n_i``.

    Fractional quotas are resolved by largest remainder, ties to the lower
    class id, so the allocation always sums to ``V``. Classes with no
    segments receive nothing. Integer arithmetic throughout, so remainders
    compare exactly.
    """
    if V < 0:
        raise ConfigError("V must be non-negative")
    present = sorted(c for c, n in class_counts.items() if n > 0)
    if not present:
        return {c: 0 for c in class_counts}
    # P_i = N / n_i; the common factor N cancels, leaving weights lcm / n_i
    lcm = reduce(math.lcm, (class_counts[c] for c in present))
    w = {c: lcm // class_counts[c] for c in present}
    total = sum(w.values())
    alloc = {c: V * w[c] // total for c in present}
    rem = {c: V * w[c] % total for c in present}
    short = V - sum(alloc.values())
    for c in sorted(present, key=lambda c: (-rem[c], c))[:short]:
        alloc[c] += 1
    return {c: alloc.get(c, 0) for c in sorted(class_counts)}


@dataclass
class StratifiedSplitPlan:
    V: int
    size_threshold: float
    proportions: dict[int, float]
    allocation: dict[int, int]
    seed: int


@dataclass
class SplitResult:
    assignment: dict[int, str]
    plan: StratifiedSplitPlan
    val_segments: list[Segment] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def train_ids(self) -> list[int]:
        return sorted(i for i, s in self.assignment.items() if s == "train")

    @property
    def val_ids(self) -> list[int]:
        return sorted(i for i, s in self.assignment.items() if s == "val")


def stratified_split(index: DatasetIndex, V: int, size_threshold: float, seed: int) -> SplitResult:
    """Assign images to train/val, favouring small segments for validation.

    Each class receives ``V_i`` validation segments; segments smaller than
    ``size_threshold`` go first (ascending size), the rest of the quota is
    drawn uniformly with the seeded generator. An image is validation iff it
    owns at least one validation segment.
    """
    n_images = len(index.images)
    if not 0 < V < n_images:
        raise ConfigError(f"V must satisfy 0 < V < {n_images} (number of images), got {V}")
    if size_threshold <= 0:
        raise ConfigError("size threshold must be positive")

    counts = index.class_counts
    N = index.total_segments
    proportions = {c: N / n for c, n in counts.items() if n > 0}
    alloc = allocate_validation(counts, V)
    warnings = []
    by_class: dict[int, list[Segment]] = {}
    for seg in index.segments():
        by_class.setdefault(seg.class_id, []).append(seg)

    rng = np.random.default_rng(seed)
    chosen: list[Segment] = []
    for c in sorted(by_class):
        want = alloc.get(c, 0)
        pool = by_class[c]
        if want > len(pool):
            warnings.append(f"class {c}: allocation {want} clipped to {len(pool)} available segments")
            want = len(pool)
            alloc[c] = want
        small = sorted((s for s in pool if s.size < size_threshold),
                       key=lambda s: (s.size, s.image_id, s.index))
        picks = small[:want]
        rest = [s for s in pool if s.size >= size_threshold]
        need = want - len(picks)
        if need > 0:
            idx = rng.choice(len(rest), size=need, replace=False)
            picks.extend(rest[i] for i in sorted(idx))
        chosen.extend(picks)

    val_images = {s.image_id for s in chosen}
    assignment = {iid: ("val" if iid in val_images else "train") for iid in sorted(index.images)}
    plan = StratifiedSplitPlan(V, size_threshold, proportions, alloc, seed)
    return SplitResult(assignment, plan, chosen, warnings)


def format_split(assignment: Mapping[int, str]) -> str:
    return "".join(f"{iid}\t{assignment[iid]}\n" for iid in sorted(assignment))


def parse_split(text: str) -> dict[int, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or parts[1] not in ("train", "val"):
            raise DomainError(f"split line {n}: expected 'image_id<TAB>train|val', got {line!r}")
        out[int(parts[0])] = parts[1]
    return out


# --- class-frequency weighting --------------------------------------------

@dataclass
class WeightTable:
    frequency: dict[int, float]
    score: dict[int, float]
    excluded: list[int] = field(default_factory=list)
    image_weight: dict[int, float] = field(default_factory=dict)
    mode: str = "intent"


def class_frequency_scores(index: DatasetIndex) -> WeightTable:
    """F_c = n_c / N and S_c = sqrt(F_c) for every class with segments."""
    N = index.total_segments
    if N <= 0:
        raise EmptyPopulationError("dataset has no segments")
    freq, score, excluded = {}, {}, []
    for c, n in sorted(index.class_counts.items()):
        if n == 0:
            excluded.append(c)
            continue
        freq[c] = n / N
        score[c] = math.sqrt(freq[c])
    return WeightTable(freq, score, excluded)


def image_weights(index: DatasetIndex, table: WeightTable, mode: str = "intent") -> dict[int, float]:
    """Per-image sampling weight from the scores of the classes present.

    ``intent`` (default): reciprocal of the lowest class score, so the
    rarest class present drives the weight. ``as-written``: the minimum of
    the reciprocals, as the displayed formula reads literally.
    Images without segments weigh 1.0.
    """
    if mode not in ("intent", "as-written"):
        raise ConfigError(f"unknown weighting mode {mode!r}")
    out = {}
    for iid in sorted(index.images):
        present = index.classes_of(iid)
        if not present:
            out[iid] = 1.0
            continue
        missing = present - table.score.keys()
        if missing:
            raise DomainError(f"image {iid}: classes {sorted(missing)} have no score")
        scores = [table.score[c] for c in sorted(present)]
        if any(s == 0 for s in scores):
            raise DomainError(f"image {iid}: zero class score has no reciprocal")
        out[iid] = 1.0 / min(scores) if mode == "intent" else min(1.0 / s for s in scores)
    table.image_weight = out
    table.mode = mode
    return out


def weighted_sample(weights: Mapping[int, float], batch: int, rng_seed) -> list[int]:
    """Draw ``batch`` ids with replacement, probability proportional to weight."""
    if not weights:
        raise EmptyPopulationError("cannot sample from an empty weight map")
    if batch < 1:
        raise ConfigError("batch must be >= 1")
    ids = sorted(weights)
    w = np.array([weights[i] for i in ids], dtype=np.float64)
    if np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise DomainError("all weights must be positive and finite")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    picks = rng.choice(len(ids), size=batch, replace=True, p=w / w.sum())
    return [ids[i] for i in picks]


def format_weights(table: WeightTable) -> str:
    lines = ["# class\tfrequency\tscore"]
    lines += [f"class\t{c}\t{table.frequency[c]:.10f}\t{table.score[c]:.10f}" for c in sorted(table.score)]
    lines += [f"excluded\t{c}" for c in table.excluded]
    lines.append(f"# image\tweight ({table.mode})")
    lines += [f"image\t{i}\t{w:.10f}" for i, w in sorted(table.image_weight.items())]
    return "\n".join(lines) + "\n"
