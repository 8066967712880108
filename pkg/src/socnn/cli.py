"""Command-line entry points: train, eval, predict, ablate and gen-data.

Every command reads an optional flat ``key = value`` config file (``#``
starts a comment) whose keys mirror the model, augmentation and training
settings. CSV outputs always carry a header row.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .data import (CLASSIFICATION_FAMILIES, SEGMENTATION_FAMILIES, ShapeDataset, checkpoint_load,
                   checkpoint_save, dataset_split, load_cloud, load_dataset_dir,
                   make_classification_dataset, make_segmentation_dataset, save_dataset_dir)
from .geometry import AugmentationSpec
from .network import ABLATION_VARIANTS, SOCNNConfig, init_socnn
from .training import TrainConfig, evaluate, fit

CHECKPOINT_NAME = "model.ckpt"


class ConfigError(ValueError):
    """A config file, flag value or environment setting failed validation."""


# config file ---------------------------------------------------------------

_MODEL_KEYS = {f.name for f in fields(SOCNNConfig)}
_TRAIN_KEYS = {"epochs", "batch_size", "lr", "lr_min", "seed", "augment", "bn_momentum",
               "bn_momentum_every"}
_AUG_KEYS = {"aug_scale_min", "aug_scale_max", "aug_translate", "aug_jitter_sigma",
             "aug_jitter_clip", "aug_seed"}
_DATA_KEYS = {"task", "data_per_class", "data_points", "data_noise", "data_seed", "data_fractions"}
KNOWN_KEYS = _MODEL_KEYS | _TRAIN_KEYS | _AUG_KEYS | _DATA_KEYS


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw ``key -> value`` strings; duplicate or unknown keys are errors."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KNOWN_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config_file(path) -> dict[str, str]:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config_text(path.read_text(), str(path))


def _convert(key: str, value: str, kind):
    try:
        if kind is bool:
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {value!r}")
            return low in ("true", "1", "yes")
        if kind == "ints":
            return tuple(int(v) for v in value.replace(",", " ").split())
        if kind == "floats":
            return tuple(float(v) for v in value.replace(",", " ").split())
        if kind == "stages":
            # "64x64, 64x128, 128x256"
            return tuple(tuple(int(c) for c in s.strip().split("x")) for s in value.split(","))
        if kind == "optint":
            return None if value.lower() == "none" else int(value)
        return kind(value)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {exc}") from None


_MODEL_KINDS = {"num_points": int, "k": int, "head": int, "stages": "stages", "tail": int,
                "num_classes": int, "num_parts": "optint", "cls_hidden": "ints", "seg_hidden": "ints",
                "dropout": float, "votes": int, "enable_mp": bool, "enable_intra": bool,
                "enable_inter": bool, "knn_space": str, "slope": float,
                "seg_category_conditioning": bool, "num_categories": int}
_TRAIN_KINDS = {"epochs": int, "batch_size": int, "lr": float, "lr_min": float, "seed": int,
                "augment": bool, "bn_momentum": float, "bn_momentum_every": int}


def _validated(factory, kwargs, what):
    try:
        return factory(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid {what}: {exc}") from None


def model_config_from(raw: dict[str, str], **defaults) -> SOCNNConfig:
    kw = dict(defaults)
    kw.update({k: _convert(k, v, _MODEL_KINDS[k]) for k, v in raw.items() if k in _MODEL_KEYS})
    return _validated(SOCNNConfig, kw, "model config")


def augmentation_from(raw: dict[str, str]) -> AugmentationSpec:
    base = AugmentationSpec()
    lo = _convert("aug_scale_min", raw.get("aug_scale_min", str(base.scale_range[0])), float)
    hi = _convert("aug_scale_max", raw.get("aug_scale_max", str(base.scale_range[1])), float)
    return _validated(AugmentationSpec, dict(
        scale_range=(lo, hi),
        translate=_convert("aug_translate", raw.get("aug_translate", str(base.translate)), float),
        jitter_sigma=_convert("aug_jitter_sigma", raw.get("aug_jitter_sigma", str(base.jitter_sigma)), float),
        jitter_clip=_convert("aug_jitter_clip", raw.get("aug_jitter_clip", str(base.jitter_clip)), float),
        seed=_convert("aug_seed", raw.get("aug_seed", str(base.seed)), int)), "augmentation")


def train_config_from(raw: dict[str, str], no_augment: bool = False) -> TrainConfig:
    kw = {k: _convert(k, v, _TRAIN_KINDS[k]) for k, v in raw.items() if k in _TRAIN_KEYS}
    if no_augment:
        kw["augment"] = False
    kw["augmentation"] = augmentation_from(raw)
    return _validated(TrainConfig, kw, "training config")


# helpers -------------------------------------------------------------------

def _dtype(precision):
    return {None: None, 32: np.float32, 64: np.float64}[precision]


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def _print_table(header, rows, out=sys.stdout) -> None:
    cells = [list(map(str, header))] + [[_fmt(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    for r in cells:
        print("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip(), file=out)


def _load_split(data_dir, split: str) -> ShapeDataset:
    if data_dir is None:
        raise ConfigError("--data is required for this command")
    if not Path(data_dir).is_dir():
        raise ConfigError(f"data directory {data_dir} does not exist")
    return load_dataset_dir(data_dir, split)


def _model_for(dataset: ShapeDataset, raw: dict[str, str]) -> SOCNNConfig:
    defaults = {"num_points": dataset.num_points}
    if dataset.task == "classification":
        defaults["num_classes"] = len(dataset.class_names) or int(dataset.labels.max()) + 1
    else:
        defaults["num_parts"] = dataset.num_parts
        defaults["num_categories"] = len(dataset.parts_per_category)
    return model_config_from(raw, **defaults)


def _train_one(config: SOCNNConfig, train_cfg: TrainConfig, train_set: ShapeDataset, dtype, log=None):
    store = init_socnn(config, seed=train_cfg.seed, dtype=dtype,
                       classification=train_set.task == "classification")
    history = fit(store, config, train_set, train_cfg, log)
    return store, history


def _metric_rows(result: dict, dataset: ShapeDataset):
    names = dataset.class_names
    if dataset.task == "classification":
        key, per = "accuracy", result["per_class"]
    else:
        key, per = "miou", result["per_category"]
    rows = [(c, names[c] if c < len(names) else str(c), int((dataset.labels == c).sum()), v)
            for c, v in sorted(per.items())]
    rows.append(("all", "mean" if key == "miou" else "overall", len(dataset), result[key]))
    return ["category", "name", "shapes", key], rows


# commands ------------------------------------------------------------------

def cmd_train(args, raw) -> int:
    train_set = _load_split(args.data, "train")
    config = _model_for(train_set, raw)
    train_cfg = train_config_from(raw, args.no_augment)
    dtype = _dtype(args.precision) or np.float32
    out = Path(args.out or ".")
    rows = []

    def log(m):
        rows.append((m.epoch, m.loss, m.lr, m.accuracy))
        print(f"epoch {m.epoch:3d}  loss {m.loss:.4f}  lr {m.lr:.6f}  accuracy {m.accuracy:.4f}", flush=True)

    store, _ = _train_one(config, train_cfg, train_set, dtype, log)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / CHECKPOINT_NAME
    extra = {"task": train_set.task, "class_names": list(train_set.class_names),
             "parts_per_category": None if train_set.parts_per_category is None
             else {str(k): v for k, v in train_set.parts_per_category.items()},
             "augmentation": raw_augmentation(train_cfg.augmentation)}
    checkpoint_save(ckpt, store, config, extra)
    _write_csv(out / "train_log.csv", ["epoch", "loss", "lr", "accuracy"], rows)
    print(f"checkpoint written to {ckpt}")
    return 0


def raw_augmentation(spec: AugmentationSpec) -> dict:
    return {"scale_range": list(spec.scale_range), "translate": spec.translate,
            "jitter_sigma": spec.jitter_sigma, "jitter_clip": spec.jitter_clip, "seed": spec.seed}


def _load_model(args):
    if args.checkpoint is None:
        raise ConfigError("--checkpoint is required for this command")
    if not Path(args.checkpoint).is_file():
        raise ConfigError(f"checkpoint {args.checkpoint} does not exist")
    store, config, extra = checkpoint_load(args.checkpoint, with_extra=True)
    dtype = _dtype(args.precision)
    if dtype is not None and np.dtype(dtype) != store.dtype:
        store = store.astype(dtype)
    return store, config, extra


def _vote_spec(args, raw, extra):
    """Augmentation for vote averaging: only when more than one vote is cast."""
    if args.votes <= 1 or args.no_augment:
        return None
    if _AUG_KEYS & raw.keys():
        return augmentation_from(raw)
    aug = extra.get("augmentation")
    if aug is None:
        return AugmentationSpec()
    return AugmentationSpec(tuple(aug["scale_range"]), aug["translate"], aug["jitter_sigma"],
                            aug["jitter_clip"], aug["seed"])


def cmd_eval(args, raw) -> int:
    store, config, extra = _load_model(args)
    dataset = _load_split(args.data, args.split)
    result = evaluate(store, config, dataset, votes=args.votes, aug_spec=_vote_spec(args, raw, extra))
    header, rows = _metric_rows(result, dataset)
    _print_table(header, rows)
    if args.out:
        _write_csv(Path(args.out) / "metrics.csv", header, [[_fmt(c) for c in r] for r in rows])
    return 0


def _predict_inputs(path) -> list[tuple[str, np.ndarray]]:
    path = Path(path)
    if path.is_file():
        return [(path.name, load_cloud(path).coords)]
    if path.is_dir():
        root = path / "test" if (path / "meta.json").exists() else path
        files = sorted(root.glob("*.txt"))
        if files:
            return [(f.name, load_cloud(f).coords) for f in files]
    raise ConfigError(f"no cloud files found at {path}")


def cmd_predict(args, raw) -> int:
    store, config, extra = _load_model(args)
    if args.data is None:
        raise ConfigError("--data is required for predict (a cloud file or directory)")
    if any(n.startswith("seg.") for n in store.params) and not any(n.startswith("cls.") for n in store.params):
        raise ConfigError("predict needs a classification checkpoint")
    from .network import predict_with_voting

    aug = _vote_spec(args, raw, extra)
    names = extra.get("class_names") or []
    rows = []
    for i, (name, coords) in enumerate(_predict_inputs(args.data)):
        probs = predict_with_voting(store, config, coords.astype(store.dtype), aug, args.votes,
                                    seed=None if aug is None else aug.seed + i)
        label = int(probs.argmax())
        rows.append((name, label, names[label] if label < len(names) else str(label), float(probs.max())))
    header = ["cloud", "label", "name", "probability"]
    _print_table(header, rows)
    if args.out:
        _write_csv(Path(args.out) / "predictions.csv", header, [[_fmt(c) for c in r] for r in rows])
    return 0


def parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"--seeds must be a comma-separated list of integers, got {text!r}") from None
    if not seeds:
        raise ConfigError("--seeds must name at least one seed")
    return seeds


def cmd_ablate(args, raw) -> int:
    train_set = _load_split(args.data, "train")
    test_set = _load_split(args.data, "test")
    base = _model_for(train_set, raw)
    seeds = parse_seeds(args.seeds)
    dtype = _dtype(args.precision) or np.float32
    metric = "accuracy" if train_set.task == "classification" else "miou"
    table = []
    for variant, (mp, intra, inter) in ABLATION_VARIANTS.items():
        scores = []
        for seed in seeds:
            train_cfg = train_config_from({**raw, "seed": str(seed)}, args.no_augment)
            t0 = time.time()
            store, _ = _train_one(base.with_variant(variant), train_cfg, train_set, dtype)
            score = evaluate(store, base.with_variant(variant), test_set)[metric]
            scores.append(score)
            print(f"variant {variant} seed {seed}: {metric} {score:.4f} ({time.time() - t0:.0f} s)", flush=True)
        table.append((variant, mp, intra, inter, *scores, float(np.median(scores))))
    header = ["variant", "mp", "intra", "inter", *[f"seed_{s}" for s in seeds], f"median_{metric}"]
    _print_table(header, table)
    out = Path(args.out or ".")
    _write_csv(out / "ablation.csv", header, [[_fmt(c) for c in r] for r in table])
    return 0


def cmd_gen_data(args, raw) -> int:
    task = args.task or raw.get("task", "classification")
    if task not in ("classification", "segmentation"):
        raise ConfigError(f"task must be classification or segmentation, got {task!r}")
    per_class = args.per_class or _convert("data_per_class", raw.get("data_per_class", "20"), int)
    points = args.points or _convert("data_points", raw.get("data_points", raw.get("num_points", "256")), int)
    noise = _convert("data_noise", raw.get("data_noise", "0.005"), float)
    seed = _convert("data_seed", raw.get("data_seed", "0"), int)
    fractions = _convert("data_fractions", raw.get("data_fractions", "0.8, 0.1, 0.1"), "floats")
    if per_class < 1 or points < 1 or noise < 0:
        raise ConfigError("data_per_class and data_points must be positive and data_noise non-negative")
    make = make_classification_dataset if task == "classification" else make_segmentation_dataset
    full = make(per_class, points, seed=seed, noise_sigma=noise)
    try:
        parts = dataset_split(range(len(full)), fractions, seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    splits = {name: full.subset(idx) for name, idx in zip(("train", "val", "test"), parts) if idx}
    if args.out is None:
        raise ConfigError("--out is required for gen-data")
    save_dataset_dir(args.out, splits)
    families = CLASSIFICATION_FAMILIES if task == "classification" else SEGMENTATION_FAMILIES
    print(f"wrote {task} data ({', '.join(families)}) to {args.out}: "
          + ", ".join(f"{n} {len(d)}" for n, d in splits.items()))
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "predict": cmd_predict, "ablate": cmd_ablate,
            "gen-data": cmd_gen_data}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--data", help="dataset directory (or cloud file for predict)")
    common.add_argument("--checkpoint", help="checkpoint path")
    common.add_argument("--out", help="output directory")
    common.add_argument("--votes", type=int, default=1, help="vote-averaged forward passes")
    common.add_argument("--seeds", default="0,1,2", help="comma-separated seeds (ablate)")
    common.add_argument("--precision", type=int, choices=(32, 64), help="float width")
    common.add_argument("--no-augment", action="store_true", help="disable augmentation")
    parser = argparse.ArgumentParser(prog="socnn", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a model and write a checkpoint")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a split")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    sub.add_parser("predict", parents=[common], help="label clouds with a checkpoint")
    sub.add_parser("ablate", parents=[common], help="train and compare the five ablation variants")
    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    p.add_argument("--task", choices=("classification", "segmentation"))
    p.add_argument("--per-class", type=int, help="clouds per class or category")
    p.add_argument("--points", type=int, help="points per cloud")
    return parser


def _thread_limit() -> int | None:
    value = os.environ.get("SHAPECONV_THREADS")
    if value is None or value == "":
        return None
    try:
        n = int(value)
    except ValueError:
        n = 0
    if n < 1:
        raise ConfigError(f"SHAPECONV_THREADS must be a positive integer, got {value!r}")
    return n


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 and a usage message on bad flags
    try:
        if args.votes < 1:
            raise ConfigError("--votes must be at least 1")
        raw = load_config_file(args.config)
        with threadpool_limits(limits=_thread_limit()):
            code = COMMANDS[args.command](args, raw)
        if args.out:
            # a stale error artifact from an earlier failed run would contradict this success
            (Path(args.out) / "error.txt").unlink(missing_ok=True)
        return code
    except Exception as exc:  # reported as an error artifact plus a nonzero exit
        message = f"{type(exc).__name__}: {exc}"
        print(f"socnn {args.command}: error: {message}", file=sys.stderr)
        if args.out:
            try:
                Path(args.out).mkdir(parents=True, exist_ok=True)
                (Path(args.out) / "error.txt").write_text(message + "\n")
            except OSError:
                pass
        return 1


def main() -> None:
    sys.exit(run())
