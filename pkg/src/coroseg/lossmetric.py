"""Segmentation losses with analytic gradients, the per-image F1 metric, and a gradient checker.

Loss functions take ``probs`` of shape ``(C, ...)`` (class axis first, any
spatial/batch axes after it) and return ``(loss, d loss / d probs)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, DomainError, EmptyPopulationError

PROB_FLOOR = 1e-7


@dataclass(frozen=True)
class ComboLossConfig:
    alpha: float = 0.5
    gamma: float = 2.0
    tversky_alpha: float = 0.3
    tversky_beta: float = 0.7
    smooth: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.smooth <= 0:
            raise ConfigError("smooth must be > 0")
        for name in ("tversky_alpha", "tversky_beta"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")


@dataclass
class PixelTargets:
    """Class-index targets plus an optional validity mask (same spatial shape)."""

    labels: np.ndarray
    num_classes: int
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.intp)
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DomainError(f"target labels must lie in 0..{self.num_classes - 1}")
        if self.valid is not None:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.labels.shape:
                raise DimensionError("valid mask shape differs from labels")

    def one_hot(self) -> np.ndarray:
        eye = np.eye(self.num_classes, dtype=np.float64)
        return np.moveaxis(eye[self.labels], -1, 0)

    def valid_mask(self) -> np.ndarray:
        return np.ones(self.labels.shape, dtype=bool) if self.valid is None else self.valid


def _check_shapes(probs, targets: PixelTargets):
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (targets.num_classes, *targets.labels.shape):
        raise DimensionError(
            f"probs shape {probs.shape} does not match targets "
            f"({targets.num_classes}, {', '.join(map(str, targets.labels.shape))})"
        )
    return probs


def focal_loss(probs, targets: PixelTargets, gamma: float = 2.0):
    """Mean of -(1 - p_t)^gamma * ln(p_t) over valid pixels, p_t floored at 1e-7."""
    probs = _check_shapes(probs, targets)
    valid = targets.valid_mask()
    n = int(valid.sum())
    grad = np.zeros_like(probs)
    if n == 0:
        return 0.0, grad
    pt_raw = np.take_along_axis(probs, targets.labels[None], axis=0)[0]
    pt = np.maximum(pt_raw, PROB_FLOOR)
    q = 1.0 - pt
    log_pt = np.log(pt)
    loss_px = -np.power(q, gamma) * log_pt
    loss = float(loss_px[valid].sum() / n)

    if gamma == 0:
        dpt = -1.0 / pt
    else:
        # d/dp [-(1-p)^g ln p] = g (1-p)^(g-1) ln p - (1-p)^g / p
        with np.errstate(divide="ignore", invalid="ignore"):
            lead = np.where(q > 0, gamma * np.power(q, gamma - 1.0) * log_pt, 0.0)
        dpt = lead - np.power(q, gamma) / pt
    dpt = np.where(valid & (pt_raw > PROB_FLOOR), dpt / n, 0.0)
    np.put_along_axis(grad, targets.labels[None], dpt[None], axis=0)
    return loss, grad


def tversky_loss(probs, targets: PixelTargets, t_alpha: float = 0.3, t_beta: float = 0.7,
                 gamma: float = 1.0, smooth: float = 1.0):
    """Focal-Tversky loss averaged over foreground classes present in the targets.

    TI_c = (TP + s) / (TP + a*FP + b*FN + s) on soft probabilities;
    loss = mean_c (1 - TI_c)^gamma.
    """
    probs = _check_shapes(probs, targets)
    valid = targets.valid_mask()
    g = targets.one_hot() * valid
    p = probs * valid
    grad = np.zeros_like(probs)
    axes = tuple(range(1, probs.ndim))
    present = [c for c in range(1, targets.num_classes) if g[c].any()]
    if not present:
        return 0.0, grad
    loss = 0.0
    k = len(present)
    for c in present:
        tp = float((p[c] * g[c]).sum())
        fp = float((p[c] * (1 - g[c]) * valid).sum())
        fn = float(((1 - p[c]) * g[c]).sum())
        num = tp + smooth
        den = tp + t_alpha * fp + t_beta * fn + smooth
        ti = num / den
        one_minus = 1.0 - ti
        loss += one_minus ** gamma / k
        if gamma == 0:
            continue
        if one_minus > 0:
            dl_dti = -gamma * one_minus ** (gamma - 1.0)
        else:
            dl_dti = -1.0 if gamma == 1 else 0.0
        dnum = g[c]
        dden = g[c] + t_alpha * (1 - g[c]) - t_beta * g[c]
        dti = (dnum * den - num * dden) / den ** 2
        grad[c] = dl_dti * dti * valid / k
    return float(loss), grad


def combo_loss(probs, targets: PixelTargets, cfg: ComboLossConfig = ComboLossConfig()):
    """alpha * focal + (1 - alpha) * Tversky, with the same gamma in both parts."""
    if cfg.alpha == 1.0:
        return focal_loss(probs, targets, cfg.gamma)
    tl, tg = tversky_loss(probs, targets, cfg.tversky_alpha, cfg.tversky_beta, cfg.gamma, cfg.smooth)
    if cfg.alpha == 0.0:
        return tl, tg
    fl, fg = focal_loss(probs, targets, cfg.gamma)
    return cfg.alpha * fl + (1 - cfg.alpha) * tl, cfg.alpha * fg + (1 - cfg.alpha) * tg


def cross_entropy(class_probs, label: int, sum_tol: float | None = 1e-6):
    """-ln(p_label) with the 1e-7 floor; gradient w.r.t. the probability vector."""
    p = np.asarray(class_probs, dtype=np.float64)
    if not 0 <= label < p.shape[-1]:
        raise DomainError(f"label {label} outside 0..{p.shape[-1] - 1}")
    if sum_tol is not None and abs(p.sum() - 1.0) > sum_tol:
        raise DomainError(f"probability vector sums to {p.sum()}, not 1")
    pl = max(p[label], PROB_FLOOR)
    grad = np.zeros_like(p)
    if p[label] > PROB_FLOOR:
        grad[label] = -1.0 / pl
    return float(-np.log(pl)), grad


# --- metric ---------------------------------------------------------------

@dataclass
class ClassScore:
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        d = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / d if d else 0.0


@dataclass
class ImageScore:
    per_class: dict[int, ClassScore]
    f1: float


def image_f1(pred, gt) -> ImageScore:
    """Union-macro F1: mean of per-class F1 over foreground classes in pred or gt.

    Both masks empty scores 1.0.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction shape {pred.shape} differs from ground truth {gt.shape}")
    n = int(max(pred.max(initial=0), gt.max(initial=0))) + 1
    # joint histogram gives the full confusion matrix in one pass
    conf = np.bincount(gt.ravel().astype(np.int64) * n + pred.ravel(), minlength=n * n).reshape(n, n)
    per_class = {}
    for c in range(1, n):
        tp = int(conf[c, c])
        fp = int(conf[:, c].sum()) - tp
        fn = int(conf[c, :].sum()) - tp
        if tp + fp + fn:
            per_class[c] = ClassScore(tp, fp, fn)
    if not per_class:
        return ImageScore({}, 1.0)
    return ImageScore(per_class, float(np.mean([s.f1 for s in per_class.values()])))


def mean_f1(scores: Sequence[float]) -> float:
    vals = [float(s) for s in scores]
    if not vals:
        raise EmptyPopulationError("mean F1 of an empty score list")
    return float(sum(sorted(vals)) / len(vals))


# --- gradient verification ------------------------------------------------

def finite_diff_check(fn: Callable[[np.ndarray], tuple[float, np.ndarray]], point, eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|), central differences."""
    x = np.array(point, dtype=np.float64)
    _, analytic = fn(x.copy())
    analytic = np.asarray(analytic, dtype=np.float64)
    worst = 0.0
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up, _ = fn(x.copy())
        flat[i] = orig - eps
        down, _ = fn(x.copy())
        flat[i] = orig
        numeric = (up - down) / (2 * eps)
        err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
