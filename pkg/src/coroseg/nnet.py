"""A small U-shaped segmentation network in numpy with hand-written backprop.

Layout is NHWC internally; public outputs are ``(C, H, W)`` probability maps.
Everything runs in float64 so parameter gradients can be checked tightly
against finite differences.

Parameter groups, earliest to latest: ``encoder``, ``decoder``, ``view``
(plane-classifier head), ``head`` (1x1 segmentation head).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorruptionError, DimensionError, FormatError, TrainingDiagnosticsError
from .lossmetric import ComboLossConfig, PixelTargets, combo_loss

GROUPS = ("encoder", "decoder", "view", "head")
CKPT_MAGIC = b"ARTCKPT1"
VIEW_CLASSES = 11


@dataclass(frozen=True)
class NetConfig:
    height: int = 64
    width: int = 64
    base: int = 8
    depth: int = 2
    out_classes: int = 27
    view_classes: int = VIEW_CLASSES
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1 or self.base < 1:
            raise ConfigError("depth and base channels must be >= 1")
        step = 2 ** self.depth
        if self.height % step or self.width % step or self.height < 1 or self.width < 1:
            raise ConfigError(
                f"input {self.height}x{self.width} not divisible by 2^depth = {step}"
            )
        if self.out_classes not in (2, 27):
            raise ConfigError(f"out_classes must be 2 or 27, got {self.out_classes}")
        if self.view_classes < 1:
            raise ConfigError("view_classes must be >= 1")

    def channels(self, level: int) -> int:
        return self.base * 2 ** level


def layer_specs(cfg: NetConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """Ordered ``(name, shape, fan_in)`` for every parameter tensor."""
    specs = []

    def conv(name, cin, cout):
        specs.append((f"{name}.w", (cout, cin, 3, 3), cin * 9))
        specs.append((f"{name}.b", (cout,), cin * 9))

    cin = 1
    for lvl in range(cfg.depth + 1):
        c = cfg.channels(lvl)
        conv(f"enc{lvl}.conv1", cin, c)
        conv(f"enc{lvl}.conv2", c, c)
        cin = c
    for lvl in reversed(range(cfg.depth)):
        c = cfg.channels(lvl)
        conv(f"dec{lvl}.up", cfg.channels(lvl + 1), c)
        conv(f"dec{lvl}.conv1", 2 * c, c)
        conv(f"dec{lvl}.conv2", c, c)
    cd, c0 = cfg.channels(cfg.depth), cfg.channels(0)
    specs.append(("view.w", (cfg.view_classes, cd), cd))
    specs.append(("view.b", (cfg.view_classes,), cd))
    specs.append(("head.w", (cfg.out_classes, c0), c0))
    specs.append(("head.b", (cfg.out_classes,), c0))
    return specs


def param_group(name: str) -> str:
    prefix = name.split(".", 1)[0]
    if prefix.startswith("enc"):
        return "encoder"
    if prefix.startswith("dec"):
        return "decoder"
    return prefix


def _he(rng, shape, fan_in, name):
    # output layers start at zero so early loss gradients cannot kill the ReLU features
    if name.endswith(".b") or param_group(name) in ("head", "view"):
        return np.zeros(shape)
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


@dataclass
class ModelState:
    config: NetConfig
    params: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray]
    step: int = 0
    stage: int = 0

    def copy(self) -> "ModelState":
        return ModelState(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.momentum.items()},
            self.step,
            self.stage,
        )

    def group(self, name: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.params.items() if param_group(k) == name}

    @property
    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())


def init_model(cfg: NetConfig) -> ModelState:
    rng = np.random.default_rng(cfg.seed)
    params = {name: _he(rng, shape, fan_in, name) for name, shape, fan_in in layer_specs(cfg)}
    return ModelState(cfg, params, {k: np.zeros_like(v) for k, v in params.items()})


# --- layers ---------------------------------------------------------------

def _wmat(w):
    # (O, C, 3, 3) -> (O, 9*C) matching the tap-major column layout below
    return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)


def _conv_fwd(x, w, b):
    B, H, W, C = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.concatenate([xp[:, i:i + H, j:j + W, :] for i in range(3) for j in range(3)], axis=-1)
    cols = cols.reshape(B * H * W, 9 * C)
    y = cols @ _wmat(w).T + b
    return y.reshape(B, H, W, -1), cols


def _conv_bwd(dy, cols, w, xshape):
    B, H, W, C = xshape
    dym = dy.reshape(-1, dy.shape[-1])
    dw = (dym.T @ cols).reshape(w.shape[0], 3, 3, C).transpose(0, 3, 1, 2)
    db = dym.sum(axis=0)
    dcols = (dym @ _wmat(w)).reshape(B, H, W, 9 * C)
    dxp = np.zeros((B, H + 2, W + 2, C))
    for t in range(9):
        i, j = divmod(t, 3)
        dxp[:, i:i + H, j:j + W, :] += dcols[..., t * C:(t + 1) * C]
    return dxp[:, 1:-1, 1:-1, :], dw, db


def _pool_fwd(x):
    B, H, W, C = x.shape
    win = x.reshape(B, H // 2, 2, W // 2, 2, C).transpose(0, 1, 3, 5, 2, 4).reshape(B, H // 2, W // 2, C, 4)
    arg = win.argmax(axis=-1)
    return np.take_along_axis(win, arg[..., None], axis=-1)[..., 0], arg


def _pool_bwd(dy, arg, xshape):
    B, H, W, C = xshape
    dwin = np.zeros((B, H // 2, W // 2, C, 4))
    np.put_along_axis(dwin, arg[..., None], dy[..., None], axis=-1)
    return dwin.reshape(B, H // 2, W // 2, C, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(B, H, W, C)


def _up_fwd(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def _up_bwd(dy):
    B, H, W, C = dy.shape
    return dy.reshape(B, H // 2, 2, W // 2, 2, C).sum(axis=(2, 4))


def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_bwd(p, dp):
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True))


# --- forward / backward ---------------------------------------------------

def _prepare_input(model: ModelState, images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    cfg = model.config
    if x.shape[1:] != (cfg.height, cfg.width):
        raise DimensionError(
            f"input {x.shape[1]}x{x.shape[2]} does not match network {cfg.height}x{cfg.width}"
        )
    return (x / 255.0)[..., None]


def _forward(model: ModelState, x):
    P, cfg = model.params, model.config
    cache = {}

    def conv_relu(name, h):
        z, cols = _conv_fwd(h, P[f"{name}.w"], P[f"{name}.b"])
        cache[name] = (cols, h.shape, z > 0)
        return np.maximum(z, 0.0)

    skips = []
    h = x
    for lvl in range(cfg.depth + 1):
        if lvl:
            h, arg = _pool_fwd(h)
            cache[f"pool{lvl}"] = (arg, skips[-1].shape)
        h = conv_relu(f"enc{lvl}.conv1", h)
        h = conv_relu(f"enc{lvl}.conv2", h)
        skips.append(h)
    bottleneck = h
    for lvl in reversed(range(cfg.depth)):
        u = conv_relu(f"dec{lvl}.up", _up_fwd(h))
        h = np.concatenate([u, skips[lvl]], axis=-1)
        h = conv_relu(f"dec{lvl}.conv1", h)
        h = conv_relu(f"dec{lvl}.conv2", h)

    probs = _softmax(h @ P["head.w"].T + P["head.b"])
    pooled = bottleneck.mean(axis=(1, 2))
    view = _softmax(pooled @ P["view.w"].T + P["view.b"])
    cache.update(top=h, bottleneck_shape=bottleneck.shape, pooled=pooled)
    return probs, view, cache


def _backward(model: ModelState, cache, dprobs, probs, dview, view):
    """Gradients of every parameter given d loss / d probs and d loss / d view."""
    P, cfg = model.params, model.config
    G = {}

    dz = _softmax_bwd(probs, dprobs)
    top = cache["top"]
    G["head.w"] = dz.reshape(-1, dz.shape[-1]).T @ top.reshape(-1, top.shape[-1])
    G["head.b"] = dz.reshape(-1, dz.shape[-1]).sum(axis=0)
    dh = dz @ P["head.w"]

    dzv = _softmax_bwd(view, dview)
    G["view.w"] = dzv.T @ cache["pooled"]
    G["view.b"] = dzv.sum(axis=0)
    B, Hd, Wd, Cd = cache["bottleneck_shape"]
    dbottleneck = np.broadcast_to((dzv @ P["view.w"])[:, None, None, :] / (Hd * Wd), (B, Hd, Wd, Cd))

    def conv_relu_bwd(name, dout):
        cols, xshape, active = cache[name]
        dx, G[f"{name}.w"], G[f"{name}.b"] = _conv_bwd(dout * active, cols, P[f"{name}.w"], xshape)
        return dx

    dskips = {}
    for lvl in range(cfg.depth):
        c = cfg.channels(lvl)
        dh = conv_relu_bwd(f"dec{lvl}.conv2", dh)
        dh = conv_relu_bwd(f"dec{lvl}.conv1", dh)
        du, dskips[lvl] = dh[..., :c], dh[..., c:]
        dh = _up_bwd(conv_relu_bwd(f"dec{lvl}.up", du))

    dh = dh + dbottleneck
    for lvl in reversed(range(cfg.depth + 1)):
        if lvl < cfg.depth:
            dh = dh + dskips[lvl]
        dh = conv_relu_bwd(f"enc{lvl}.conv2", dh)
        dh = conv_relu_bwd(f"enc{lvl}.conv1", dh)
        if lvl:
            arg, shape = cache[f"pool{lvl}"]
            dh = _pool_bwd(dh, arg, shape)
    return {k: G[k] for k in P}


def forward_batch(model: ModelState, images):
    """Probabilities ``(B, C, H, W)`` and view distributions ``(B, V)`` for a stack of images."""
    probs, view, _ = _forward(model, _prepare_input(model, images))
    return np.moveaxis(probs, -1, 1), view


def forward(model: ModelState, img):
    """Class probability map ``(C, H, W)`` and view distribution for one 8-bit image."""
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise DimensionError(f"expected a single 2-D image, got shape {arr.shape}")
    probs, view = forward_batch(model, arr[None])
    return probs[0], view[0]


# --- training -------------------------------------------------------------

def discriminative_lrs(base: float, groups: int) -> list[float]:
    """Geometric ladder from base/400 (earliest group) to base/4 (latest)."""
    if groups < 1:
        raise ConfigError("groups must be >= 1")
    if groups == 1:
        return [base / 4]
    lo, hi = base / 400, base / 4
    return [lo * (hi / lo) ** (k / (groups - 1)) for k in range(groups)]


@dataclass(frozen=True)
class LrSchedule:
    """Per-group learning rates (``base_lr * multiplier``); a zero rate freezes the group."""

    base_lr: float
    multipliers: dict = field(default_factory=lambda: {g: 1.0 for g in GROUPS})
    momentum: float = 0.9

    def rate(self, group: str) -> float:
        return self.base_lr * self.multipliers.get(group, 0.0)

    @classmethod
    def uniform(cls, base_lr: float) -> "LrSchedule":
        return cls(base_lr)

    @classmethod
    def only(cls, base_lr: float, groups=("head",)) -> "LrSchedule":
        return cls(base_lr, {g: (1.0 if g in groups else 0.0) for g in GROUPS})

    @classmethod
    def discriminative(cls, base_lr: float) -> "LrSchedule":
        return cls(base_lr, dict(zip(GROUPS, discriminative_lrs(1.0, len(GROUPS)))))


def loss_and_grads(model: ModelState, images, targets, loss_cfg: ComboLossConfig,
                   view_labels=None, view_weight: float = 1.0):
    """Total loss ``combo + view_weight * CE(view)`` and its parameter gradients."""
    x = _prepare_input(model, images)
    labels = np.asarray(targets)
    if labels.shape != x.shape[:3]:
        raise DimensionError(f"targets shape {labels.shape} does not match batch {x.shape[:3]}")
    probs, view, cache = _forward(model, x)
    k = model.config.out_classes
    pt = PixelTargets(labels, k)
    loss, dp = combo_loss(np.moveaxis(probs, -1, 0), pt, loss_cfg)
    dprobs = np.moveaxis(dp, 0, -1)

    dview = np.zeros_like(view)
    if view_labels is not None and view_weight != 0:
        vl = np.asarray(view_labels, dtype=np.intp)
        n = len(vl)
        rows = np.arange(n)
        pv = np.maximum(view[rows, vl], 1e-7)
        loss += view_weight * float(-np.log(pv).mean())
        dview[rows, vl] = np.where(view[rows, vl] > 1e-7, -view_weight / (pv * n), 0.0)
    grads = _backward(model, cache, dprobs, probs, dview, view)
    return float(loss), grads


def train_step(model: ModelState, images, targets, loss_cfg: ComboLossConfig, schedule: LrSchedule,
               view_labels=None, view_weight: float = 1.0, clip_norm: float | None = None) -> float:
    """One SGD-with-momentum update in place; returns the pre-update loss.

    With ``clip_norm`` the gradient is rescaled so its global L2 norm over
    the trainable groups does not exceed that value.
    """
    loss, grads = loss_and_grads(model, images, targets, loss_cfg, view_labels, view_weight)
    if not math.isfinite(loss):
        raise TrainingDiagnosticsError(f"non-finite loss {loss} at step {model.step}; update skipped")
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise TrainingDiagnosticsError(f"non-finite gradients in {bad[:3]} at step {model.step}")
    mu = schedule.momentum
    if clip_norm is not None:
        live = [g for k, g in grads.items() if schedule.rate(param_group(k)) != 0.0]
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in live))
        if norm > clip_norm:
            grads = {k: g * (clip_norm / norm) for k, g in grads.items()}
    for name, g in grads.items():
        lr = schedule.rate(param_group(name))
        if lr == 0.0:
            continue
        v = model.momentum[name]
        v *= mu
        v += g
        model.params[name] -= lr * v
    model.step += 1
    return loss


def adapt_output_head(model: ModelState, new_classes: int = 27, seed: int = 0) -> ModelState:
    """Copy a binary model and give it a freshly initialised multi-class head."""
    if model.config.out_classes == new_classes:
        raise ConfigError(f"model already has {new_classes} output classes")
    if model.config.out_classes != 2:
        raise ConfigError("only binary models can be adapted")
    cfg = replace(model.config, out_classes=new_classes)
    out = model.copy()
    out.config = cfg
    rng = np.random.default_rng(seed)
    for name, shape, fan_in in layer_specs(cfg):
        if param_group(name) == "head":
            out.params[name] = _he(rng, shape, fan_in, name)
            out.momentum[name] = np.zeros(shape)
    out.momentum = {k: out.momentum[k] for k in out.params}
    return out


# --- checkpoints ----------------------------------------------------------

def _config_block(model: ModelState) -> bytes:
    meta = {"config": asdict(model.config), "step": model.step, "stage": model.stage}
    return json.dumps(meta, sort_keys=True).encode("utf-8")


def save_checkpoint(model: ModelState, path) -> None:
    """``ARTCKPT1`` | u32 config length | JSON config | float64 params | float64 momentum."""
    for k, v in model.params.items():
        if not np.all(np.isfinite(v)):
            raise ConfigError(f"parameter {k} is not finite; refusing to save")
    block = _config_block(model)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(block)))
        fh.write(block)
        for tensors in (model.params, model.momentum):
            for name, _, _ in layer_specs(model.config):
                fh.write(np.ascontiguousarray(tensors[name], dtype="<f8").tobytes())


def load_checkpoint(path, expected: NetConfig | None = None) -> ModelState:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic/version {data[:8]!r}, expected {CKPT_MAGIC!r}")
    if len(data) < 12:
        raise CorruptionError(f"{path}: truncated header", 12, len(data))
    (n,) = struct.unpack("<I", data[8:12])
    try:
        meta = json.loads(data[12:12 + n].decode("utf-8"))
        cfg = NetConfig(**meta["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptionError(f"{path}: unreadable config block ({exc})") from None
    if expected is not None and expected != cfg:
        raise ConfigError(f"{path}: checkpoint config {cfg} does not match expected {expected}")
    specs = layer_specs(cfg)
    count = sum(math.prod(s) for _, s, _ in specs)
    want = 12 + n + 2 * 8 * count
    if len(data) != want:
        raise CorruptionError(f"{path}: tensor payload does not match config", want, len(data))
    flat = np.frombuffer(data, dtype="<f8", offset=12 + n).astype(np.float64)
    tensors, pos = [], 0
    for _ in range(2):
        d = {}
        for name, shape, _ in specs:
            size = math.prod(shape)
            d[name] = flat[pos:pos + size].reshape(shape).copy()
            pos += size
        tensors.append(d)
    return ModelState(cfg, tensors[0], tensors[1], int(meta["step"]), int(meta["stage"]))
