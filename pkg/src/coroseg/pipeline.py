"""Five-stage training orchestration and the F1-driven curriculum.

Stages, each starting from the previous stage's model:

1. binary pretraining on binarized masks (fresh model, 2 outputs);
2. multi-class training from the binary model with a new 27-way head;
3. as 2, with mini-batches drawn by class-frequency image weights;
4. as 2, with mini-batches drawn by the curriculum sampler;
5. joint segmentation + acquisition-plane training.

Stages 2-5 start with ``warm_epochs`` in which only the head trains (the
plane head in stage 5), then all groups train at discriminative rates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DomainError, SequencingError
from .imgproc import AugmentConfig, compose_augment
from .lossmetric import ComboLossConfig, image_f1, mean_f1
from .nnet import (
    LrSchedule,
    ModelState,
    NetConfig,
    adapt_output_head,
    forward_batch,
    init_model,
    train_step,
)
from .postprocess import connected_components
from .splitsample import class_frequency_scores, image_weights, index_from_masks, weighted_sample

SAMPLERS = ("uniform", "class-frequency-weighted", "curriculum")
_DEFAULT_SAMPLER = {1: "uniform", 2: "uniform", 3: "class-frequency-weighted", 4: "curriculum", 5: "uniform"}


# --- plane labels ---------------------------------------------------------

@dataclass
class ViewLabelTable:
    image_plane: dict[int, int]
    plane_classes: dict[int, set[int]]

    def __post_init__(self):
        for iid, p in self.image_plane.items():
            if not 0 <= p < 11:
                raise DomainError(f"image {iid}: plane id {p} outside 0..10")
        for p, allowed in self.plane_classes.items():
            if not 0 <= p < 11:
                raise DomainError(f"plane id {p} outside 0..10")
            if not allowed:
                raise DomainError(f"plane {p} has an empty allowed-class set")

    def to_text(self) -> str:
        lines = [f"{iid}\t{self.image_plane[iid]}" for iid in sorted(self.image_plane)]
        lines += [
            f"plane\t{p}\t{','.join(str(c) for c in sorted(self.plane_classes[p]))}"
            for p in sorted(self.plane_classes)
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ViewLabelTable":
        planes, allowed = {}, {}
        for n, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            try:
                if parts[0] == "plane" and len(parts) == 3:
                    allowed[int(parts[1])] = {int(c) for c in parts[2].split(",") if c}
                elif len(parts) == 2:
                    planes[int(parts[0])] = int(parts[1])
                else:
                    raise ValueError
            except ValueError:
                raise DomainError(f"view table line {n}: cannot parse {line!r}") from None
        return cls(planes, allowed)

    def allowed_mask(self, num_classes: int) -> np.ndarray:
        """``(11, num_classes)`` boolean table; background always allowed."""
        out = np.zeros((11, num_classes), dtype=bool)
        out[:, 0] = True
        for p, allowed in self.plane_classes.items():
            for c in allowed:
                if c < num_classes:
                    out[p, c] = True
        unknown = [p for p in range(11) if p not in self.plane_classes]
        out[unknown] = True
        return out


# --- curriculum -----------------------------------------------------------

def initial_difficulty(mask) -> float:
    """Segment-size variability squashed to [0, 1): cv / (1 + cv); 0 below two segments."""
    m = np.asarray(mask)
    sizes = []
    for c in np.unique(m):
        if c:
            sizes.extend(b.count for b in connected_components(m == c).blobs)
    if len(sizes) < 2:
        return 0.0
    s = np.asarray(sizes, dtype=np.float64)
    cv = s.std() / s.mean()
    return float(cv / (1.0 + cv))


@dataclass
class CurriculumState:
    initial: dict[int, float]
    difficulty: dict[int, float] = field(default_factory=dict)
    beta: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError("beta must lie in [0, 1]")

    def current(self, image_id: int) -> float:
        return self.difficulty.get(image_id, self.initial[image_id])

    @classmethod
    def from_masks(cls, masks: Mapping[int, np.ndarray], beta: float = 0.8) -> "CurriculumState":
        return cls({iid: initial_difficulty(masks[iid]) for iid in sorted(masks)}, {}, beta)


def update_difficulty(state: CurriculumState, image_id: int, f1: float, beta: float | None = None) -> CurriculumState:
    """Exponential smoothing of ``1 - f1`` into the image's running difficulty."""
    if not 0.0 <= f1 <= 1.0:
        raise DomainError(f"f1 must lie in [0, 1], got {f1}")
    b = state.beta if beta is None else beta
    d = dict(state.difficulty)
    d[image_id] = b * state.current(image_id) + (1.0 - b) * (1.0 - f1)
    return CurriculumState(state.initial, d, state.beta)


def inclusion_quantile(epoch: int, warmup_epochs: int, q0: float = 0.5) -> float:
    if warmup_epochs < 1:
        raise ConfigError("warmup_epochs must be >= 1")
    if warmup_epochs == 1:
        return 1.0
    return q0 + (1.0 - q0) * min(1.0, epoch / (warmup_epochs - 1))


def curriculum_probabilities(state: CurriculumState, epoch: int, warmup_epochs: int,
                             q0: float = 0.5) -> dict[int, float]:
    """Weight ``1 + d`` for the easiest ``q(epoch)`` fraction of images, 0 for the rest.

    Ties in difficulty go to the lower image id.
    """
    q = inclusion_quantile(epoch, warmup_epochs, q0)
    ids = sorted(state.initial, key=lambda i: (state.current(i), i))
    n_in = max(1, min(len(ids), int(math.floor(q * len(ids) + 1e-9))))
    included = set(ids[:n_in])
    return {i: (1.0 + state.current(i)) if i in included else 0.0 for i in sorted(state.initial)}


# --- stages ---------------------------------------------------------------

@dataclass(frozen=True)
class StageConfig:
    stage: int
    epochs: int = 10
    warm_epochs: int = 0
    base_lr: float = 0.05
    batch_size: int = 8
    sampler: str | None = None
    multi_target: bool | None = None
    loss: ComboLossConfig = ComboLossConfig()
    view_weight: float = 1.0
    curriculum_warmup: int = 3
    curriculum_q0: float = 0.5
    curriculum_beta: float = 0.8
    augment: AugmentConfig | None = None
    clip_norm: float | None = None

    def __post_init__(self):
        if self.stage not in (1, 2, 3, 4, 5):
            raise ConfigError(f"stage must be 1..5, got {self.stage}")
        if self.epochs < 1 or self.batch_size < 1 or self.warm_epochs < 0:
            raise ConfigError("epochs and batch_size must be >= 1, warm_epochs >= 0")
        if self.sampler is not None and self.sampler not in SAMPLERS:
            raise ConfigError(f"unknown sampler {self.sampler!r}")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive when set")

    @property
    def sampler_name(self) -> str:
        return self.sampler or _DEFAULT_SAMPLER[self.stage]

    @property
    def uses_views(self) -> bool:
        return self.stage == 5 if self.multi_target is None else self.multi_target


@dataclass
class StageData:
    images: dict[int, np.ndarray]
    masks: dict[int, np.ndarray]
    train_ids: list[int]
    val_ids: list[int]
    views: ViewLabelTable | None = None


@dataclass
class StageReport:
    stage: int
    rows: list[tuple[int, float, float]] = field(default_factory=list)

    def append(self, epoch: int, loss: float, f1: float) -> None:
        self.rows.append((epoch, loss, f1))

    @property
    def final_f1(self) -> float:
        return self.rows[-1][2] if self.rows else float("nan")

    def to_text(self) -> str:
        return "".join(f"{e}\t{loss:.10f}\t{f1:.10f}\n" for e, loss, f1 in self.rows)

    @classmethod
    def from_text(cls, stage: int, text: str) -> "StageReport":
        rows = []
        for line in text.splitlines():
            if line.strip():
                e, loss, f1 = line.split("\t")
                rows.append((int(e), float(loss), float(f1)))
        return cls(stage, rows)


def predict_probs(model: ModelState, images: Sequence[np.ndarray], views: ViewLabelTable | None = None,
                  batch: int = 16) -> np.ndarray:
    """Probability maps ``(N, C, H, W)``; with ``views``, classes outside the predicted plane are masked out."""
    out = []
    allowed = views.allowed_mask(model.config.out_classes) if views is not None else None
    for s in range(0, len(images), batch):
        probs, view = forward_batch(model, np.stack(images[s:s + batch]))
        if allowed is not None:
            keep = allowed[view.argmax(axis=1)][:, :, None, None]
            probs = probs * keep
            probs = probs / probs.sum(axis=1, keepdims=True)
        out.append(probs)
    return np.concatenate(out) if out else np.zeros((0,))


def _targets(mask: np.ndarray, binary: bool) -> np.ndarray:
    return (mask > 0).astype(np.intp) if binary else mask.astype(np.intp)


def evaluate_model(model: ModelState, data: StageData, ids: Sequence[int],
                   views: ViewLabelTable | None = None) -> dict[int, float]:
    """Per-image F1 of argmax predictions (binary targets for 2-class models)."""
    ids = list(ids)
    if not ids:
        return {}
    binary = model.config.out_classes == 2
    probs = predict_probs(model, [data.images[i] for i in ids], views)
    preds = probs.argmax(axis=1).astype(np.uint8)
    return {i: image_f1(p, _targets(data.masks[i], binary)).f1 for i, p in zip(ids, preds)}


def naive_multilabel_f1(binary_model: ModelState, data: StageData, ids: Sequence[int]) -> float:
    """Mean F1 of a binary model's argmax read directly as class ids (foreground -> class 1).

    This is the reference a multi-class stage has to beat.
    """
    if binary_model.config.out_classes != 2:
        raise ConfigError("naive baseline needs a binary model")
    ids = list(ids)
    if not ids:
        raise ConfigError("no images to score")
    probs = predict_probs(binary_model, [data.images[i] for i in ids])
    preds = probs.argmax(axis=1).astype(np.uint8)
    return mean_f1([image_f1(p, data.masks[i]).f1 for i, p in zip(ids, preds)])


def _epoch_order(cfg: StageConfig, data: StageData, rng, weights, curriculum, epoch):
    n = len(data.train_ids)
    name = cfg.sampler_name
    if name == "uniform":
        return [data.train_ids[i] for i in rng.permutation(n)]
    if name == "class-frequency-weighted":
        return weighted_sample(weights, n, rng)
    w = curriculum_probabilities(curriculum, epoch, cfg.curriculum_warmup, cfg.curriculum_q0)
    return weighted_sample({i: v for i, v in w.items() if v > 0}, n, rng)


def _schedule(cfg: StageConfig, epoch: int) -> LrSchedule:
    if cfg.stage == 1:
        return LrSchedule.uniform(cfg.base_lr)
    if epoch < cfg.warm_epochs:
        return LrSchedule.only(cfg.base_lr, ("view",) if cfg.uses_views else ("head",))
    return LrSchedule.discriminative(cfg.base_lr)


def _check_prerequisites(cfg: StageConfig, model_in: ModelState | None, data: StageData):
    k = cfg.stage
    if k == 1:
        if model_in is not None:
            raise SequencingError("stage 1 trains a fresh binary model; no input model expected")
        return
    if model_in is None:
        raise SequencingError(f"stage {k} requires the stage-{k - 1} checkpoint, none given")
    if model_in.stage != k - 1:
        raise SequencingError(
            f"stage {k} requires the stage-{k - 1} checkpoint, got a stage-{model_in.stage} model"
        )
    if cfg.uses_views and data.views is None:
        raise ConfigError(f"stage {k} uses plane labels but no view label table was provided")
    if cfg.uses_views:
        missing = [i for i in data.train_ids if i not in data.views.image_plane]
        if missing:
            raise ConfigError(f"view label table lacks planes for images {missing[:5]}")


def run_stage(cfg: StageConfig, model_in: ModelState | None, data: StageData, seed: int = 0,
              net: NetConfig | None = None) -> tuple[ModelState, StageReport]:
    """Train one stage; deterministic in (cfg, model_in, data, seed)."""
    _check_prerequisites(cfg, model_in, data)
    if not data.train_ids:
        raise ConfigError("no training images")
    if cfg.stage == 1:
        model = init_model(replace(net or NetConfig(), out_classes=2, seed=seed))
    elif cfg.stage == 2:
        model = adapt_output_head(model_in, 27, seed)
    else:
        model = model_in.copy()

    binary = cfg.stage == 1
    weights = None
    if cfg.sampler_name == "class-frequency-weighted":
        idx = index_from_masks({i: data.masks[i] for i in data.train_ids})
        weights = image_weights(idx, class_frequency_scores(idx), "intent")
    curriculum = None
    if cfg.sampler_name == "curriculum":
        curriculum = CurriculumState.from_masks({i: data.masks[i] for i in data.train_ids}, cfg.curriculum_beta)
    eval_views = data.views if cfg.uses_views else None

    report = StageReport(cfg.stage)
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([seed, cfg.stage, epoch])
        order = _epoch_order(cfg, data, rng, weights, curriculum, epoch)
        schedule = _schedule(cfg, epoch)
        losses = []
        for s in range(0, len(order), cfg.batch_size):
            ids = order[s:s + cfg.batch_size]
            imgs = []
            for j, i in enumerate(ids):
                img = data.images[i]
                if cfg.augment is not None:
                    aug_seed = int(rng.integers(2 ** 31))
                    img = compose_augment(img, replace(cfg.augment, seed=aug_seed))
                imgs.append(img)
            targets = np.stack([_targets(data.masks[i], binary) for i in ids])
            view_labels = [data.views.image_plane[i] for i in ids] if cfg.uses_views else None
            losses.append(train_step(model, np.stack(imgs), targets, cfg.loss, schedule,
                                     view_labels, cfg.view_weight, cfg.clip_norm))
        if curriculum is not None:
            for i, f in evaluate_model(model, data, data.train_ids).items():
                curriculum = update_difficulty(curriculum, i, f)
        val = evaluate_model(model, data, data.val_ids, eval_views)
        report.append(epoch, float(np.mean(losses)), mean_f1(list(val.values())) if val else float("nan"))
    model.stage = cfg.stage
    return model, report


def default_stage_configs(epochs: Sequence[int] = (5, 8, 3, 3, 3), base_lr: float = 0.05,
                          fine_tune_lr: float = 4.0, batch_size: int = 4, clip_norm: float | None = 1.0,
                          loss: ComboLossConfig = ComboLossConfig()) -> list[StageConfig]:
    """Toy-scale budgets for the five stages.

    Stage 1 trains every group at ``base_lr``. Later stages use the
    discriminative ladder, whose decoder rate is only ~1/86 of its base, so
    their base rate ``fine_tune_lr`` is much larger.
    """
    out = []
    for k, e in enumerate(epochs, start=1):
        warm = 0 if k == 1 else min(1, e - 1)
        out.append(StageConfig(k, epochs=e, warm_epochs=warm, base_lr=base_lr if k == 1 else fine_tune_lr,
                               batch_size=batch_size, loss=loss, clip_norm=clip_norm))
    return out


def train_all_stages(stages: Sequence[StageConfig], data: StageData, seed: int = 0,
                     net: NetConfig | None = None):
    """Run stages in order; returns the per-stage models and reports."""
    models, reports = [], []
    model = None
    for cfg in stages:
        model, rep = run_stage(cfg, model, data, seed, net)
        models.append(model.copy())
        reports.append(rep)
    return models, reports
