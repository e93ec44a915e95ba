"""Soft-voting ensembles over probability maps, performance weights and subset search."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np

from .errors import DimensionError, DomainError, EmptyPopulationError
from .lossmetric import image_f1, mean_f1


def _members(maps) -> list[tuple[object, np.ndarray]]:
    """Normalise to ``(source_id, map)`` pairs sorted by source id."""
    if isinstance(maps, Mapping):
        items = [(k, maps[k]) for k in sorted(maps)]
    else:
        items = list(enumerate(maps))
    if not items:
        raise EmptyPopulationError("ensemble needs at least one member")
    return items


def ensemble_average(maps, weights=None) -> np.ndarray:
    """Pixelwise (weighted) mean of ``C x H x W`` probability maps.

    ``maps`` is a sequence or a ``{source_id: map}`` mapping; ``weights``
    matches it (sequence or mapping). Members are always accumulated in
    ascending source-id order in float64, so reordering a mapping cannot
    change a single bit of the float32 result.
    """
    items = _members(maps)
    shape = np.shape(items[0][1])
    for k, m in items:
        if np.shape(m) != shape:
            raise DimensionError(f"member {k!r} has shape {np.shape(m)}, expected {shape}")
    if weights is None:
        acc = np.zeros(shape, dtype=np.float64)
        for _, m in items:
            acc += np.asarray(m, dtype=np.float64)
        return (acc / len(items)).astype(np.float32)

    if isinstance(weights, Mapping):
        w = [float(weights[k]) for k, _ in items]
    elif isinstance(maps, Mapping):
        raise DomainError("weights for a mapping of members must be a mapping with the same keys")
    else:
        if len(weights) != len(items):
            raise DimensionError(f"{len(weights)} weights for {len(items)} members")
        w = [float(x) for x in weights]
    if any(x < 0 for x in w) or abs(sum(w) - 1.0) > 1e-9:
        raise DomainError(f"weights must be non-negative and sum to 1, got {w}")
    acc = np.zeros(shape, dtype=np.float64)
    for wi, (_, m) in zip(w, items):
        acc += wi * np.asarray(m, dtype=np.float64)
    return acc.astype(np.float32)


def performance_weights(scores: Sequence[float]) -> list[float]:
    """Weights proportional to each member's mean F1; uniform when all are zero."""
    vals = [float(s) for s in scores]
    if not vals:
        raise EmptyPopulationError("no member scores")
    if any(v < 0 for v in vals):
        raise DomainError("member scores must be non-negative")
    total = sum(vals)
    if total == 0:
        return [1.0 / len(vals)] * len(vals)
    return [v / total for v in vals]


def decode_argmax(pmap) -> np.ndarray:
    """Per-pixel argmax over channels (background included); ties go to the lower id."""
    return np.asarray(pmap).argmax(axis=0).astype(np.uint8)


@dataclass
class SearchResult:
    best_subset: tuple[int, ...]
    best_f1: float
    log: list[tuple[tuple[int, ...], float]] = field(default_factory=list)
    num_members: int = 0

    def bitmask(self, subset: Sequence[int]) -> str:
        """Member ``i`` is character ``i`` from the left."""
        return "".join("1" if i in subset else "0" for i in range(self.num_members))

    def to_text(self) -> str:
        return "".join(f"{self.bitmask(s)}\t{f:.10f}\n" for s, f in self.log)


def _ensemble_f1(member_maps, subset, gts, weights):
    scores = []
    for j, gt in enumerate(gts):
        maps = {i: member_maps[i][j] for i in subset}
        w = None if weights is None else dict(zip(subset, performance_weights([weights[i] for i in subset])))
        scores.append(image_f1(decode_argmax(ensemble_average(maps, w)), gt).f1)
    return mean_f1(scores)


def subset_search(member_maps: Sequence[Sequence[np.ndarray]], gts: Sequence[np.ndarray],
                  weighting: str = "uniform", member_scores: Sequence[float] | None = None) -> SearchResult:
    """Exhaustively score every non-empty member subset on a validation set.

    ``member_maps[i][j]`` is member ``i``'s probability map for image ``j``.
    With ``weighting="performance"`` a subset's members are weighted by
    ``member_scores`` (default: each member's own validation mean F1).
    The best mean F1 wins; ties go to the smaller subset, then the
    lexicographically least index tuple.
    """
    b = len(member_maps)
    if b == 0:
        raise EmptyPopulationError("no ensemble members")
    if b > 8:
        raise DomainError(f"exhaustive search supports at most 8 members, got {b}")
    if weighting not in ("uniform", "performance"):
        raise DomainError(f"unknown weighting {weighting!r}")
    if any(len(m) != len(gts) for m in member_maps):
        raise DimensionError("every member needs one map per validation image")

    scores = None
    if weighting == "performance":
        if member_scores is None:
            member_scores = [_ensemble_f1(member_maps, (i,), gts, None) for i in range(b)]
        scores = list(member_scores)

    log = []
    for size in range(1, b + 1):
        for subset in combinations(range(b), size):
            log.append((subset, _ensemble_f1(member_maps, subset, gts, scores)))
    # enumeration order is (size, lexicographic), so the first maximum wins ties
    best_subset, best_f1 = max(log, key=lambda e: e[1])
    for subset, f in log:
        if f == best_f1:
            best_subset = subset
            break
    return SearchResult(best_subset, best_f1, log, b)
