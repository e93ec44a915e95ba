"""Command-line entry point: ``coroseg <command> [--config FILE] [--section.key=value ...]``.

Exit status: 0 on success, 1 on usage or configuration errors, 2 on data
errors (missing or malformed inputs).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import figures
from .annio import build_class_mask, load_coco, read_mask, read_probmap, write_mask, write_probmap
from .config import SCHEMA, RunConfig, all_keys, load_config, suggest
from .ensemble import decode_argmax, ensemble_average, performance_weights, subset_search
from .errors import ConfigError, CorosegError, DataError, TrainingDiagnosticsError
from .imgproc import AugmentConfig
from .lossmetric import ComboLossConfig, image_f1, mean_f1
from .nnet import NetConfig, load_checkpoint, save_checkpoint
from .pipeline import StageConfig, StageData, ViewLabelTable, evaluate_model, predict_probs, run_stage
from .postprocess import RefineConfig, refine_mask
from .splitsample import (
    class_frequency_scores,
    dataset_stats,
    format_split,
    format_stats_tsv,
    format_weights,
    image_weights,
    index_from_annotations,
    parse_split,
    stratified_split,
)
from .synthgen import SynthConfig, generate

COMMANDS = {
    "convert": "rasterize COCO annotations into class masks",
    "stats": "class-wise segment statistics (TSV + bar chart)",
    "split": "stratified train/validation split",
    "weights": "class-frequency scores and per-image sampling weights",
    "synth": "generate a synthetic dataset",
    "train": "train one stage (--stage N)",
    "predict": "write probability maps and argmax masks",
    "ensemble": "search member subsets and write the averaged prediction",
    "refine": "post-process class masks",
    "evaluate": "per-image F1 report against reference masks",
}

ALIASES = {
    "--stage": "train.stage",
    "--data": "paths.data",
    "--out": "paths.out",
    "--workdir": "paths.workdir",
    "--seed": "run.seed",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    top = _Parser(prog="coroseg", description="Staged multi-class vessel segmentation toolkit.",
                  allow_abbrev=False)
    sub = top.add_subparsers(dest="command", metavar="command")
    for name, text in COMMANDS.items():
        p = sub.add_parser(name, help=text, description=text, allow_abbrev=False,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", metavar="FILE", help="sectioned key-value configuration file")
        for flag, dest in ALIASES.items():
            p.add_argument(flag, dest=dest, metavar="VALUE", help=f"alias for --{dest}")
        for section, keys in SCHEMA.items():
            group = p.add_argument_group(f"[{section}]")
            for key, spec in keys.items():
                dotted = f"{section}.{key}"
                group.add_argument(f"--{dotted}", dest=dotted, metavar="VALUE",
                                   help=f"{spec.help} (default: {spec.default or 'unset'})")
    return top


def _parse(argv):
    parser = _build_parser()
    if not argv:
        parser.print_help()
        raise UsageError("no command given")
    if not argv[0].startswith("-") and argv[0] not in COMMANDS:
        raise UsageError(f"unknown command {argv[0]!r}{suggest(argv[0], COMMANDS)}")
    args, extra = parser.parse_known_args(argv)
    if extra:
        flag = extra[0].split("=", 1)[0]
        known = ["--config", *ALIASES, *(f"--{k}" for k in all_keys())]
        raise UsageError(f"unrecognized argument {extra[0]!r}{suggest(flag, known)}")
    if args.command is None:
        raise UsageError("no command given")
    overrides = {k: v for k, v in vars(args).items() if "." in k and v is not None}
    return args.command, load_config(args.config, overrides)


# --- dataset helpers ------------------------------------------------------

def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(path)
    return path


def _stem_ids(directory: Path, suffix: str) -> list[int]:
    _require(directory)
    ids = []
    for p in directory.iterdir():
        if p.suffix == suffix and p.stem.isdigit():
            ids.append(int(p.stem))
    return sorted(ids)


def _name(iid: int, suffix: str) -> str:
    return f"{iid:05d}{suffix}"


def _read_dir(directory: Path, ids=None) -> dict[int, np.ndarray]:
    ids = _stem_ids(directory, ".pgm") if ids is None else ids
    return {i: read_mask(_require(directory / _name(i, ".pgm"))) for i in ids}


def _paths(cfg: RunConfig):
    data = Path(cfg.get("paths.data"))
    work = Path(cfg.get("paths.workdir"))
    ann = Path(cfg.get("paths.annotations") or data / "annotations.json")
    split = Path(cfg.get("paths.split") or data / "split.tsv")
    return data, work, ann, split


def _out(cfg: RunConfig, default: Path) -> Path:
    return Path(cfg.get("paths.out") or default)


def _load_split(path: Path) -> dict[int, str]:
    return parse_split(_require(path).read_text())


def _load_views(data: Path, required: bool) -> ViewLabelTable | None:
    path = data / "views.tsv"
    if not path.exists():
        if required:
            raise FileNotFoundError(path)
        return None
    return ViewLabelTable.from_text(path.read_text())


def _stage_data(cfg: RunConfig, need_views: bool) -> StageData:
    data, _, _, split_path = _paths(cfg)
    split = _load_split(split_path)
    ids = sorted(split)
    images = _read_dir(data / "images", ids)
    masks = _read_dir(data / "masks", ids)
    return StageData(images, masks,
                     [i for i in ids if split[i] == "train"],
                     [i for i in ids if split[i] == "val"],
                     _load_views(data, need_views))


def _loss(cfg: RunConfig) -> ComboLossConfig:
    return ComboLossConfig(**cfg.section("loss"))


# --- commands -------------------------------------------------------------

def cmd_convert(cfg: RunConfig) -> str:
    data, _, ann, _ = _paths(cfg)
    aset = load_coco(_require(ann))
    out = _out(cfg, data / "masks")
    out.mkdir(parents=True, exist_ok=True)
    policy = cfg.get("convert.overlap_policy")
    for iid in sorted(aset.images):
        write_mask(build_class_mask(aset, iid, policy), out / _name(iid, ".pgm"))
    return f"convert: wrote {len(aset.images)} masks to {out}"


def cmd_stats(cfg: RunConfig) -> str:
    _, work, ann, _ = _paths(cfg)
    aset = load_coco(_require(ann))
    index = index_from_annotations(aset)
    background = [int((build_class_mask(aset, i) == 0).sum()) for i in sorted(aset.images)]
    rows = dataset_stats(index, background)
    out = _out(cfg, work / "stats.tsv")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(format_stats_tsv(rows))
    figures.class_stats(rows, out.with_suffix(".png"))
    return f"stats: {len(rows) - 1} classes, {index.total_segments} segments -> {out}"


def cmd_split(cfg: RunConfig) -> str:
    _, _, ann, split_path = _paths(cfg)
    index = index_from_annotations(load_coco(_require(ann)))
    s = cfg.section("split")
    for key in ("val_segments", "size_threshold"):
        if s[key] is None:
            raise ConfigError(f"split.{key} has no default and must be given")
    result = stratified_split(index, s["val_segments"], s["size_threshold"], s["seed"])
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    out = _out(cfg, split_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(format_split(result.assignment))
    return f"split: {len(result.train_ids)} train, {len(result.val_ids)} val -> {out}"


def cmd_weights(cfg: RunConfig) -> str:
    _, work, ann, split_path = _paths(cfg)
    index = index_from_annotations(load_coco(_require(ann)))
    if split_path.exists():
        split = _load_split(split_path)
        index.images = {i: s for i, s in index.images.items() if split.get(i) == "train"}
    table = class_frequency_scores(index)
    image_weights(index, table, cfg.get("weights.mode"))
    out = _out(cfg, work / "weights.tsv")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(format_weights(table))
    return f"weights: {len(table.score)} classes, {len(table.image_weight)} images -> {out}"


def cmd_synth(cfg: RunConfig) -> str:
    s = cfg.section("synth")
    ds = generate(SynthConfig(count=s["count"], size=s["size"], classes=s["classes"],
                              planes=s["planes"], seed=s["seed"]))
    out = _out(cfg, Path(cfg.get("paths.data")))
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for iid in sorted(ds.images):
        write_mask(ds.images[iid], out / "images" / _name(iid, ".pgm"))
        write_mask(ds.masks[iid], out / "masks" / _name(iid, ".pgm"))
    (out / "annotations.json").write_text(ds.coco_json)
    (out / "views.tsv").write_text(ds.views.to_text())
    return f"synth: {len(ds.images)} images -> {out}"


def stage_config(cfg: RunConfig, stage: int) -> StageConfig:
    t = cfg.section("train")
    epochs = t["epochs"]
    if len(epochs) != 5:
        raise ConfigError(f"train.epochs needs 5 values, got {len(epochs)}")
    e = epochs[stage - 1]
    augment = AugmentConfig.training_default(cfg.get("run.seed")) if t["augment"] else None
    return StageConfig(
        stage,
        epochs=e,
        warm_epochs=0 if stage == 1 else min(t["warm_epochs"], e - 1),
        base_lr=t["base_lr"] if stage == 1 else t["fine_tune_lr"],
        batch_size=t["batch_size"],
        loss=_loss(cfg),
        view_weight=t["view_weight"],
        curriculum_warmup=t["curriculum_warmup"],
        curriculum_q0=t["curriculum_q0"],
        curriculum_beta=t["curriculum_beta"],
        augment=augment,
        clip_norm=t["clip_norm"] or None,
    )


def cmd_train(cfg: RunConfig) -> str:
    stage = cfg.get("train.stage")
    if stage not in (1, 2, 3, 4, 5):
        raise ConfigError(f"train.stage must be 1..5, got {stage}")
    _, work, _, _ = _paths(cfg)
    scfg = stage_config(cfg, stage)
    model_in = None
    if stage > 1:
        prev = work / f"stage{stage - 1}.ckpt"
        if not prev.exists():
            raise FileNotFoundError(prev)
        model_in = load_checkpoint(prev)
    data = _stage_data(cfg, scfg.uses_views)
    net = NetConfig(base=cfg.get("net.base"), depth=cfg.get("net.depth"),
                    height=next(iter(data.images.values())).shape[0],
                    width=next(iter(data.images.values())).shape[1])
    model, report = run_stage(scfg, model_in, data, cfg.get("run.seed"), net)
    work.mkdir(parents=True, exist_ok=True)
    ckpt = work / f"stage{stage}.ckpt"
    save_checkpoint(model, ckpt)
    (work / f"stage{stage}_report.tsv").write_text(report.to_text())
    figures.stage_curve(report.rows, stage, work / f"stage{stage}_curve.png")
    return f"train: stage {stage} final val mean F1 {report.final_f1:.4f} -> {ckpt}"


def cmd_predict(cfg: RunConfig) -> str:
    data, work, _, split_path = _paths(cfg)
    ckpt = Path(cfg.get("predict.checkpoint") or work / "stage5.ckpt")
    model = load_checkpoint(_require(ckpt))
    if cfg.get("predict.subset") == "val":
        ids = [i for i, s in sorted(_load_split(split_path).items()) if s == "val"]
    else:
        ids = _stem_ids(data / "images", ".pgm")
    images = _read_dir(data / "images", ids)
    views = None
    if model.config.out_classes == 27 and cfg.get("predict.gate_views"):
        views = _load_views(data, required=False)
    probs = predict_probs(model, [images[i] for i in ids], views)
    out = _out(cfg, work / "pred")
    out.mkdir(parents=True, exist_ok=True)
    for i, p in zip(ids, probs):
        write_probmap(p.astype(np.float32), out / _name(i, ".prob"))
        write_mask(decode_argmax(p), out / _name(i, ".pgm"))
    return f"predict: {len(ids)} images with {ckpt} -> {out}"


def cmd_ensemble(cfg: RunConfig) -> str:
    data, work, _, _ = _paths(cfg)
    members = [Path(m) for m in cfg.get("ensemble.members").split(",") if m.strip()]
    if not members:
        raise ConfigError("ensemble.members lists no prediction directories")
    id_sets = [_stem_ids(m, ".prob") for m in members]
    ids = id_sets[0]
    for m, s in zip(members, id_sets):
        if s != ids:
            raise DataError(f"{m}: image ids differ from {members[0]}")
    maps = [[read_probmap(m / _name(i, ".prob")) for i in ids] for m in members]
    gts = [read_mask(_require(data / "masks" / _name(i, ".pgm"))) for i in ids]
    weighting = cfg.get("ensemble.weighting")
    result = subset_search(maps, gts, weighting)

    weights = None
    if weighting == "performance":
        own = [mean_f1([image_f1(decode_argmax(p), g).f1 for p, g in zip(maps[k], gts)])
               for k in result.best_subset]
        weights = dict(zip(result.best_subset, performance_weights(own)))
    out = _out(cfg, work / "ensemble")
    out.mkdir(parents=True, exist_ok=True)
    for j, i in enumerate(ids):
        avg = ensemble_average({k: maps[k][j] for k in result.best_subset}, weights)
        write_probmap(avg, out / _name(i, ".prob"))
        write_mask(decode_argmax(avg), out / _name(i, ".pgm"))
    (out / "search.tsv").write_text(result.to_text())
    figures.search_log(result, out / "search.png")
    return (f"ensemble: best subset {result.bitmask(result.best_subset)} "
            f"mean F1 {result.best_f1:.4f} -> {out}")


def cmd_refine(cfg: RunConfig) -> str:
    _, work, _, _ = _paths(cfg)
    src = Path(cfg.get("refine.input") or work / "ensemble")
    r = cfg.section("refine")
    base = RefineConfig(r["kernel"], r["min_size"], r["max_size"], r["fill_holes"], r["passes"])
    out = _out(cfg, work / "refined")
    out.mkdir(parents=True, exist_ok=True)
    masks = _read_dir(src)
    for i, m in masks.items():
        rc = base.scaled_to(*m.shape) if r["scale"] else base
        write_mask(refine_mask(m, rc), out / _name(i, ".pgm"))
    return f"refine: {len(masks)} masks from {src} -> {out}"


def cmd_evaluate(cfg: RunConfig) -> str:
    data, work, _, _ = _paths(cfg)
    pred_dir = Path(cfg.get("evaluate.pred") or work / "refined")
    gt_dir = Path(cfg.get("evaluate.gt") or data / "masks")
    preds = _read_dir(pred_dir)
    if not preds:
        raise DataError(f"{pred_dir}: no masks to evaluate")
    scores = {i: image_f1(p, read_mask(_require(gt_dir / _name(i, ".pgm")))).f1 for i, p in preds.items()}
    mean = mean_f1(list(scores.values()))
    out = _out(cfg, work / "eval.tsv")
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{i}\t{scores[i]:.10f}" for i in sorted(scores)] + [f"MEAN\t{mean:.10f}"]
    out.write_text("\n".join(lines) + "\n")
    figures.f1_histogram(list(scores.values()), out.with_suffix(".png"))
    return f"evaluate: mean F1 {mean:.4f} over {len(scores)} images -> {out}"


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        command, cfg = _parse(argv)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (UsageError, ConfigError) as exc:
        print(f"coroseg: error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"coroseg: error: missing input file {exc.filename or exc}", file=sys.stderr)
        return 2
    try:
        print(HANDLERS[command](cfg))
    except ConfigError as exc:
        print(f"coroseg {command}: configuration error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"coroseg {command}: missing input file {exc.filename or exc}", file=sys.stderr)
        return 2
    except (DataError, TrainingDiagnosticsError) as exc:
        print(f"coroseg {command}: data error: {exc}", file=sys.stderr)
        return 2
    except CorosegError as exc:
        print(f"coroseg {command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
