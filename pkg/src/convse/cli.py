"""Command-line entry point: ``convse {gen-synth,train-base,train-contrastive,eval,sweep}``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .checkpoint import read_checkpoint
from .data import (PairedDataset, SynthConfig, dataset_paths, folds, load_dataset, synth_generate,
                   write_dataset)
from .errors import ConfigError, ConvseError, DataError, NumericError
from .evaluation import RetrievalReport, evaluate, fold_average, format_kv, format_table
from .model import SWEEP_DIMS
from .train import TrainConfig, load_base_checkpoint, train_base, train_contrastive, write_run

log = logging.getLogger("convse")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

SWEEP_DEFAULTS = {"tau": (0.05, 0.1, 0.5, 1.0), "dim": SWEEP_DIMS}

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
_PATH_KEYS = ("data", "features_img", "features_txt", "pairs", "splits", "out", "base_checkpoint")


def _coerce(key: str, value: str):
    kind = str(_FIELD_TYPES[key])
    if value.lower() in ("none", "") and "None" in kind:
        return None
    if kind.startswith("bool"):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    try:
        if kind.startswith("int"):
            return int(value)
        if kind.startswith("float"):
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}") from None
    return value


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key == "stage":
            continue
        if key not in _FIELD_TYPES and key not in _PATH_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, value) if key in _FIELD_TYPES else value
    return values


def resolve(args: argparse.Namespace) -> tuple[TrainConfig, dict]:
    """Merge defaults <- config file <- explicit flags."""
    values = read_config_file(args.config) if getattr(args, "config", None) else {}
    for key in list(_FIELD_TYPES) + list(_PATH_KEYS):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    paths = {k: values.pop(k) for k in _PATH_KEYS if k in values}
    return TrainConfig(**values), paths


def _dataset_files(paths: dict) -> dict:
    files = dataset_paths(paths["data"]) if paths.get("data") else {}
    for key in ("features_img", "features_txt", "pairs", "splits"):
        if paths.get(key):
            files[key] = Path(paths[key])
    missing = [k for k in ("features_img", "features_txt", "pairs", "splits") if k not in files]
    if missing:
        raise ConfigError(f"dataset paths missing: {missing} (give --data DIR or the individual flags)")
    for p in files.values():
        if not p.is_file():
            raise DataError(f"dataset file not found: {p}")
    return files


def load_inputs(paths: dict) -> PairedDataset:
    return load_dataset(**_dataset_files(paths))


def _out_dir(paths: dict) -> Path:
    if not paths.get("out"):
        raise ConfigError("an output directory is required (--out)")
    out = Path(paths["out"])
    if out.exists() and not out.is_dir():
        raise ConfigError(f"{out} exists and is not a directory")
    parent = out if out.exists() else out.parent
    while not parent.exists():
        parent = parent.parent
    if not os.access(parent, os.W_OK):
        raise ConfigError(f"{out} is not writable")
    return out


# -- commands ----------------------------------------------------------------

def cmd_train_base(cfg: TrainConfig, paths: dict) -> Path:
    ds = load_inputs(paths)
    out = _out_dir(paths)
    result = train_base(ds, cfg)
    return write_run(out, result, dataclasses.replace(cfg, loss="MH"), "base")


def cmd_train_contrastive(cfg: TrainConfig, paths: dict) -> Path:
    if not paths.get("base_checkpoint"):
        raise ConfigError("--base-checkpoint is required")
    base = load_base_checkpoint(paths["base_checkpoint"])
    ds = load_inputs(paths)
    out = _out_dir(paths)
    result = train_contrastive(ds, base, cfg)
    return write_run(out, result, cfg, "contrastive")


def cmd_eval(checkpoint, paths: dict, split: str = "test", use_folds: bool = False,
             fold_size: int = 1000) -> list[tuple[str, RetrievalReport]]:
    net, _ = read_checkpoint(checkpoint)
    ds = load_inputs(paths)
    if net.image_base.in_dim != ds.images.dim or net.text_base.in_dim != ds.captions.dim:
        raise ConfigError("checkpoint feature dims do not match the dataset")
    if not use_folds:
        return [(split, evaluate(net, ds, split))]
    parts = folds(ds, split, fold_size)
    reports = [(f"fold{i + 1}", evaluate(net, part, None)) for i, part in enumerate(parts)]
    reports.append(("mean", fold_average([r for _, r in reports])))
    return reports


def _sweep_one(job):
    param, value, cfg, base_path, paths, out = job
    base = load_base_checkpoint(base_path)
    ds = load_inputs(paths)
    run_cfg = dataclasses.replace(cfg, **{param: value})
    result = train_contrastive(ds, base, run_cfg)
    write_run(out, result, run_cfg, "contrastive")
    return result.report


def cmd_sweep(param: str, values, cfg: TrainConfig, paths: dict, jobs: int = 1) -> list[tuple[str, RetrievalReport]]:
    if param not in SWEEP_DEFAULTS:
        raise ConfigError(f"sweep parameter must be one of {sorted(SWEEP_DEFAULTS)}")
    values = list(SWEEP_DEFAULTS[param] if values is None else values)
    if not values:
        raise ConfigError("sweep value list is empty")
    for v in values:
        dataclasses.replace(cfg, **{param: v})  # validates each value up front
    load_inputs(paths)
    out = _out_dir(paths)
    base_path = paths.get("base_checkpoint")
    if base_path:
        load_base_checkpoint(base_path)
    else:
        base_path = cmd_train_base(cfg, {**paths, "out": out / "base"})
    job_list = [(param, v, cfg, base_path, paths, out / f"{param}={v:g}") for v in values]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_sweep_one, job_list))
    else:
        reports = [_sweep_one(job) for job in job_list]
    rows = [(f"{v:g}", r) for v, r in zip(values, reports)]
    (out / "sweep.txt").write_text(format_table(rows, label=param), encoding="utf-8")
    return rows


def cmd_gen_synth(cfg: SynthConfig, out_dir) -> dict[str, Path]:
    out = _out_dir({"out": out_dir})
    return write_dataset(synth_generate(cfg), out)


# -- argument parsing --------------------------------------------------------

def _add_train_flags(p: argparse.ArgumentParser, default_loss: str | None):
    p.add_argument("--config", help="flat key = value config file; flags override it")
    p.add_argument("--loss", default=None, help=f"SH, MH, CSN, CMN_TILDE, CMN or MVN (default {default_loss})")
    p.add_argument("--alpha", type=float, help="margin (default 0.2)")
    p.add_argument("--tau", type=float, help="temperature (default 0.1)")
    p.add_argument("--dim", type=int, help="joint embedding size of the heads (default 1024)")
    p.add_argument("--hidden-dim", dest="hidden_dim", type=int, help="head hidden width (default 2048)")
    p.add_argument("--base-dim", dest="base_dim", type=int, help="base layer width (default 1024)")
    p.add_argument("--batch", type=int, help="mini-batch size (default 128 base, 256 contrastive)")
    p.add_argument("--epochs", type=int, help="epochs per stage (default 30)")
    p.add_argument("--schedule", help="learning-rate stages, e.g. '0:2e-4,15:2e-5'")
    p.add_argument("--seed", type=int)
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--head-init", dest="head_init", choices=("glorot", "identity"))
    p.add_argument("--freeze-base", dest="freeze_base", action="store_const", const=True)
    p.add_argument("--mask-same-image", dest="mask_same_image", action="store_const", const=True)
    p.add_argument("--eval-split", dest="eval_split", choices=("train", "val", "test"))
    _add_data_flags(p)
    p.add_argument("--out", help="run directory")


def _add_data_flags(p: argparse.ArgumentParser):
    p.add_argument("--data", help="dataset directory (images.fvt, captions.fvt, pairs.tsv, splits.tsv)")
    p.add_argument("--features-img", dest="features_img")
    p.add_argument("--features-txt", dest="features_txt")
    p.add_argument("--pairs")
    p.add_argument("--splits")


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="convse", description="Contrastive visual-semantic embeddings "
                                     "on precomputed features.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", help="write a synthetic paired dataset")
    g.add_argument("--latent", type=int, default=16)
    g.add_argument("--img-dim", type=int, default=64)
    g.add_argument("--txt-dim", type=int, default=48)
    g.add_argument("--images", type=int, default=1000)
    g.add_argument("--captions-per-image", type=int, default=5)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--maps", choices=("random", "identity"), default="random")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    _add_train_flags(sub.add_parser("train-base", help="train the headless network with the MH loss"), "MH")
    c = sub.add_parser("train-contrastive", help="add projection heads and train with a contrastive loss")
    _add_train_flags(c, "CMN")
    c.add_argument("--base-checkpoint", dest="base_checkpoint")

    e = sub.add_parser("eval", help="retrieval recall of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    _add_data_flags(e)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--folds", action="store_true", help="average over consecutive folds of --fold-size images")
    e.add_argument("--fold-size", type=int, default=1000)
    e.add_argument("--out", help="also write report.txt / report.kv here")

    s = sub.add_parser("sweep", help="one contrastive run per value of tau or dim")
    _add_train_flags(s, "CMN")
    s.add_argument("--param", required=True, choices=sorted(SWEEP_DEFAULTS))
    s.add_argument("--values", type=_float_list, help="comma-separated values (default: the standard grid)")
    s.add_argument("--base-checkpoint", dest="base_checkpoint")
    s.add_argument("--jobs", type=int, default=1, help="parallel runs (isolated directories)")
    return parser


def _run(args: argparse.Namespace) -> None:
    if args.command == "gen-synth":
        cfg = SynthConfig(args.latent, args.img_dim, args.txt_dim, args.images, args.captions_per_image,
                          args.noise, args.seed, args.maps)
        for p in cmd_gen_synth(cfg, args.out).values():
            print(p)
        return

    if args.command == "eval":
        paths = {k: getattr(args, k) for k in ("data", "features_img", "features_txt", "pairs", "splits")}
        rows = cmd_eval(args.checkpoint, paths, args.split, args.folds, args.fold_size)
        table = format_table(rows, label="fold" if args.folds else "split")
        sys.stdout.write(table)
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            (out / "report.txt").write_text(table, encoding="utf-8")
            (out / "report.kv").write_text("".join(format_kv(r, f"{name}.") for name, r in rows), encoding="utf-8")
        return

    if args.command == "train-base" and args.loss not in (None, "MH"):
        raise ConfigError("the base stage always trains with MH")
    cfg, paths = resolve(args)
    for key, value in cfg.resolved("base" if args.command == "train-base" else "contrastive").items():
        log.info("%s = %s", key, value)
    if args.command == "train-base":
        print(cmd_train_base(cfg, paths))
    elif args.command == "train-contrastive":
        print(cmd_train_contrastive(cfg, paths))
    else:
        values = args.values
        if values is not None and args.param == "dim":
            values = [int(v) for v in values]
        rows = cmd_sweep(args.param, values, cfg, paths, args.jobs)
        sys.stdout.write(format_table(rows, label=args.param))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        _run(args)
    except NumericError as exc:
        print(f"convse: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"convse: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConfigError as exc:
        print(f"convse: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConvseError as exc:
        print(f"convse: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
