"""Run configuration: a sectioned key-value file plus ``--section.key=value`` overrides.

Every accepted key is declared in :data:`SCHEMA`; anything else is rejected so
that a typo cannot silently fall back to a default.
"""

from __future__ import annotations

import configparser
import difflib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .errors import ConfigError


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(kind):
    def parse(text: str):
        return None if not text.strip() else kind(text)
    parse.__name__ = f"optional {kind.__name__}"
    return parse


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


@dataclass(frozen=True)
class Key:
    kind: Callable[[str], Any]
    default: str
    help: str


SCHEMA: dict[str, dict[str, Key]] = {
    "run": {
        "seed": Key(int, "0", "seed for training and sampling"),
    },
    "paths": {
        "data": Key(str, "data", "dataset directory (images/, masks/, annotations.json, views.tsv)"),
        "workdir": Key(str, "work", "directory holding stage checkpoints and reports"),
        "out": Key(str, "", "output file or directory (command-specific default when empty)"),
        "annotations": Key(str, "", "COCO annotation file (default: <data>/annotations.json)"),
        "split": Key(str, "", "split file (default: <data>/split.tsv)"),
    },
    "synth": {
        "count": Key(int, "200", "number of images"),
        "size": Key(int, "64", "image side in pixels"),
        "classes": Key(_ints, "1,2,3,4,5,6", "comma-separated foreground class ids"),
        "planes": Key(int, "3", "number of acquisition planes"),
        "seed": Key(int, "0", "generator seed"),
    },
    "convert": {
        "overlap_policy": Key(str, "last-wins", "last-wins or first-wins for overlapping annotations"),
    },
    "split": {
        "val_segments": Key(_optional(int), "", "number of validation segments V (required)"),
        "size_threshold": Key(_optional(float), "", "size threshold S_t in pixels (required)"),
        "seed": Key(int, "0", "sampling seed"),
    },
    "weights": {
        "mode": Key(str, "intent", "intent or as-written image weighting"),
    },
    "net": {
        "base": Key(int, "4", "channels at the first level"),
        "depth": Key(int, "2", "number of 2x downsamplings"),
    },
    "train": {
        "stage": Key(int, "1", "stage to train (1-5)"),
        "epochs": Key(_ints, "5,8,3,3,3", "epochs for stages 1-5"),
        "base_lr": Key(float, "0.05", "stage-1 learning rate"),
        "fine_tune_lr": Key(float, "4.0", "base rate of the discriminative ladder in stages 2-5"),
        "warm_epochs": Key(int, "1", "head-only epochs at the start of stages 2-5"),
        "batch_size": Key(int, "4", "mini-batch size"),
        "clip_norm": Key(float, "1.0", "global gradient-norm clip (0 disables)"),
        "view_weight": Key(float, "1.0", "weight of the plane loss in stage 5"),
        "curriculum_warmup": Key(int, "3", "epochs until the curriculum admits every image"),
        "curriculum_q0": Key(float, "0.5", "initial curriculum inclusion quantile"),
        "curriculum_beta": Key(float, "0.8", "difficulty smoothing factor"),
        "augment": Key(_bool, "false", "apply the training augmentation stack"),
    },
    "loss": {
        "alpha": Key(float, "0.5", "focal share of the combo loss"),
        "gamma": Key(float, "2.0", "focusing exponent"),
        "tversky_alpha": Key(float, "0.3", "false-positive weight"),
        "tversky_beta": Key(float, "0.7", "false-negative weight"),
        "smooth": Key(float, "1.0", "Tversky smoothing constant"),
    },
    "predict": {
        "checkpoint": Key(str, "", "model to run (default: <workdir>/stage5.ckpt)"),
        "subset": Key(str, "val", "val or all images"),
        "gate_views": Key(_bool, "true", "mask classes outside the predicted plane (27-class models)"),
    },
    "ensemble": {
        "members": Key(str, "", "comma-separated prediction directories"),
        "weighting": Key(str, "uniform", "uniform or performance"),
    },
    "refine": {
        "input": Key(str, "", "directory of class masks to refine"),
        "kernel": Key(int, "3", "odd structuring-element size"),
        "min_size": Key(int, "64", "smallest kept blob (pixels)"),
        "max_size": Key(int, "8192", "largest kept blob (pixels)"),
        "fill_holes": Key(_bool, "true", "fill enclosed holes"),
        "passes": Key(int, "1", "number of refinement passes"),
        "scale": Key(_bool, "false", "scale size limits from 512x512 to the image area"),
    },
    "evaluate": {
        "pred": Key(str, "", "directory of predicted class masks"),
        "gt": Key(str, "", "directory of reference masks (default: <data>/masks)"),
    },
}

CHOICES = {
    ("convert", "overlap_policy"): ("last-wins", "first-wins"),
    ("weights", "mode"): ("intent", "as-written"),
    ("predict", "subset"): ("val", "all"),
    ("ensemble", "weighting"): ("uniform", "performance"),
}


def all_keys() -> list[str]:
    return [f"{s}.{k}" for s, keys in SCHEMA.items() for k in keys]


def suggest(name: str, candidates) -> str:
    close = difflib.get_close_matches(name, list(candidates), n=1, cutoff=0.5)
    return f"; did you mean {close[0]!r}?" if close else ""


class RunConfig:
    """Typed view over the merged defaults, file values and overrides."""

    def __init__(self, raw: dict[str, dict[str, str]]):
        self._values: dict[str, dict[str, Any]] = {}
        for section, keys in SCHEMA.items():
            self._values[section] = {}
            for key, spec in keys.items():
                text = raw.get(section, {}).get(key, spec.default)
                try:
                    value = spec.kind(text)
                except ValueError as exc:
                    raise ConfigError(f"{section}.{key}: {exc}") from None
                allowed = CHOICES.get((section, key))
                if allowed and value not in allowed:
                    raise ConfigError(f"{section}.{key} must be one of {', '.join(allowed)}, got {value!r}")
                self._values[section][key] = value

    def get(self, dotted: str):
        section, key = dotted.split(".", 1)
        return self._values[section][key]

    def section(self, name: str) -> dict[str, Any]:
        return dict(self._values[name])

    def to_text(self) -> str:
        out = []
        for section, keys in self._values.items():
            out.append(f"[{section}]")
            for k, v in keys.items():
                if isinstance(v, tuple):
                    v = ",".join(map(str, v))
                elif isinstance(v, bool):
                    v = str(v).lower()
                elif v is None:
                    v = ""
                out.append(f"{k} = {v}")
            out.append("")
        return "\n".join(out)


def _check_known(section: str, key: str, where: str) -> None:
    if section not in SCHEMA:
        raise ConfigError(f"{where}: unknown section [{section}]{suggest(section, SCHEMA)}")
    if key not in SCHEMA[section]:
        raise ConfigError(f"{where}: unknown key {section}.{key}{suggest(f'{section}.{key}', all_keys())}")


def load_config(path: str | Path | None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Merge defaults, the optional config file and ``{"section.key": value}`` overrides."""
    raw: dict[str, dict[str, str]] = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        text = Path(path).read_text()
        try:
            parser.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            for key, value in parser.items(section):
                _check_known(section, key, str(path))
                raw.setdefault(section, {})[key] = value
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        _check_known(section, key, "command line")
        raw.setdefault(section, {})[key] = value
    return RunConfig(raw)
