"""Command-line entry points: train, eval, generate, baseline pegasos, prepare-data.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shutil
import sys
import time
import typing
from pathlib import Path

import numpy as np

from . import dataio, impute, train
from .dataio import Dataset, IdxFormatError
from .margin import LossMatrix, pegasos_fit, predict
from .models import CheckpointFormatError, Model, MlpSpec, build_model, class_grid, generate, \
    load_checkpoint, save_checkpoint
from .numgrid import ContractError, DimensionError
from .train import NumericalAbort, TrainConfig

log = logging.getLogger("mmdgm")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
MODES = ("va", "mmva", "mmcva")
CHECKPOINT_NAME, MANIFEST_NAME, METRICS_NAME = "params.ckpt", "manifest.json", "metrics.csv"
SYNTH_DEFAULTS = {"M": 4, "per_class": 250, "D": 2, "spread": 0.3}
# seed offsets for the synthetic train / valid / test draws
SYNTH_SPLIT_OFFSETS = {"train": 0, "valid": 1, "test": 2}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- config --------------------------------------------------------------------------

def _field_types() -> dict[str, typing.Any]:
    hints = typing.get_type_hints(TrainConfig)
    return {f.name: hints[f.name] for f in dataclasses.fields(TrainConfig)}


def _convert(key: str, raw):
    if not isinstance(raw, str):
        return raw
    hint = _field_types()[key]
    text = raw.strip()
    optional = type(None) in typing.get_args(hint)
    if optional and text.lower() in ("none", ""):
        return None
    base = next((a for a in typing.get_args(hint) if a is not type(None)), hint) if optional else hint
    origin = typing.get_origin(base)
    try:
        if origin is list:
            return [int(p) for p in text.replace(" ", "").split(",") if p]
        if base is bool:
            return text.lower() in ("1", "true", "yes")
        return base(text)
    except ValueError as err:
        raise UsageError(f"bad value for {key}: {raw!r}") from err


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    known = _field_types()
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in known:
            raise UsageError(f"{path}:{lineno}: unknown or malformed entry {line!r}")
        out[key] = _convert(key, value)
    return out


def build_config(args, mode: str) -> TrainConfig:
    values = read_config_file(args.config) if args.config else {}
    for key in _field_types():
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = _convert(key, flag)
    if mode == "va":
        values["C"] = 0.0
    try:
        return TrainConfig.from_dict(values)
    except (TypeError, ValueError) as err:
        raise UsageError(f"invalid configuration: {err}") from err


# -- data -------------------------------------------------------------------------------

def _synth_params(args) -> dict:
    p = dict(SYNTH_DEFAULTS)
    for key in p:
        v = getattr(args, f"synth_{key}", None)
        if v is not None:
            p[key] = type(p[key])(v)
    return p


def load_splits(data: str, root, synth: dict, data_seed: int) -> dict[str, Dataset | None]:
    """Train / valid / test datasets for a named dataset.

    ``synth`` draws three independent samples; cached datasets use the
    ``<name>``, ``<name>.valid`` and ``<name>.test`` entries when present.
    """
    if data == "synth":
        return {split: dataio.synth_gaussian_classes(synth["M"], synth["per_class"], synth["D"],
                                                     synth["spread"], data_seed + off)
                for split, off in SYNTH_SPLIT_OFFSETS.items()}
    out = {"train": dataio.load_dataset(data, root)}
    for split in ("valid", "test"):
        try:
            out[split] = dataio.load_dataset(f"{data}.{split}", root)
        except FileNotFoundError:
            out[split] = None
    return out


def _xy(ds: Dataset | None):
    return None if ds is None else (ds.images, ds.labels)


# -- manifests ---------------------------------------------------------------------------

def model_from_manifest(manifest: dict) -> Model:
    arch = manifest["architecture"]
    cfg = TrainConfig.from_dict(manifest["config"])
    return build_model(arch["in_dim"], arch["n_classes"], cfg.latent_dim,
                       MlpSpec(cfg.hidden, cfg.nonlinearity), seed=cfg.seed,
                       conditional=arch["conditional"], likelihood=cfg.likelihood,
                       feature_source=cfg.feature_source, sigma_sq=cfg.sigma_sq,
                       classifier_spec=(MlpSpec(cfg.classifier_hidden, cfg.nonlinearity)
                                        if cfg.classifier_hidden else None),
                       dtype=np.dtype(cfg.dtype))


def load_run(path) -> tuple[Model, dict]:
    """Model and manifest from a run directory or a checkpoint path inside one."""
    p = Path(path)
    run_dir = p if p.is_dir() else p.parent
    ckpt = p if p.is_file() else run_dir / CHECKPOINT_NAME
    man_path = run_dir / MANIFEST_NAME
    if not ckpt.exists():
        raise FileNotFoundError(f"no checkpoint at {ckpt}")
    if not man_path.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} next to {ckpt}")
    manifest = json.loads(man_path.read_text())
    model = model_from_manifest(manifest)
    model.store.load_state(load_checkpoint(ckpt))
    return model, manifest


# -- commands ------------------------------------------------------------------------------

def run_training(mode: str, cfg: TrainConfig, data_spec: dict, out_dir: Path) -> dict:
    splits = load_splits(data_spec["data"], data_spec.get("data_root"), data_spec["synth"],
                         data_spec["data_seed"])
    tr = splits["train"]
    if tr.labels is None:
        raise UsageError("training data has no labels")
    M = tr.n_classes
    if mode == "mmcva":
        split = dataio.make_ssl_split(tr, data_spec["n_labeled"], data_spec["n_valid"],
                                      data_spec["split_seed"])
        labeled, unlabeled = tr.subset(split.labeled_idx), tr.subset(split.unlabeled_idx)
        valid = splits["valid"] or (tr.subset(split.valid_idx) if split.valid_idx else None)
    else:
        if data_spec["labels"] != "all":
            raise UsageError("supervised modes need --labels all")
        labeled, unlabeled, valid = tr, None, splits["valid"]
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics = train.MetricsLog(out_dir / METRICS_NAME)
    t0 = time.time()
    try:
        if mode == "mmcva":
            model = train.fit_ssl(labeled.images, labeled.labels, unlabeled.images, cfg, M,
                                  valid=_xy(valid), metrics=metrics, dump_dir=out_dir)
        else:
            model = train.fit_supervised(labeled.images, labeled.labels, cfg, M,
                                         valid=_xy(valid), metrics=metrics, dump_dir=out_dir)
    finally:
        metrics.close()
    t_train = time.time() - t0
    save_checkpoint(out_dir / CHECKPOINT_NAME, model.store)
    summary = {}
    if splits["test"] is not None:
        summary["test_err"] = train.error_rate(model, *_xy(splits["test"]))
    if valid is not None:
        summary["valid_elbo"] = train.mean_elbo(model, valid.images,
                                                seed=cfg.seed + train.SEED_EVAL)
    manifest = {
        "command": "train",
        "mode": mode,
        "config": cfg.to_dict(),
        "data": data_spec,
        "architecture": {"in_dim": tr.dim, "n_classes": M, "conditional": mode == "mmcva",
                         "side": tr.side},
        "checkpoint": CHECKPOINT_NAME,
        "metrics": METRICS_NAME,
        "summary": summary,
        "timings": {"train_seconds": t_train, "total_seconds": time.time() - t0},
    }
    (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2))
    return manifest


def cmd_train(args) -> int:
    if args.resume_manifest:
        old = json.loads(Path(args.resume_manifest).read_text())
        mode, cfg, data_spec = old["mode"], TrainConfig.from_dict(old["config"]), old["data"]
    else:
        if args.mode is None:
            raise UsageError("train needs --mode or --resume-manifest")
        mode = args.mode
        cfg = build_config(args, mode)
        if args.data is None:
            raise UsageError("train needs --data")
        data_spec = {
            "data": args.data, "data_root": args.data_root, "labels": args.labels,
            "n_labeled": args.n_labeled, "n_valid": args.n_valid,
            "split_seed": cfg.seed if args.split_seed is None else args.split_seed,
            "data_seed": args.data_seed, "synth": _synth_params(args),
        }
        if mode == "mmcva" and args.n_labeled is None:
            raise UsageError("mmcva needs --n-labeled")
    out_dir = Path(args.out)
    # fail on missing data before anything is written
    load_splits(data_spec["data"], data_spec.get("data_root"), data_spec["synth"],
                data_spec["data_seed"])
    created = not out_dir.exists()
    try:
        manifest = run_training(mode, cfg, data_spec, out_dir)
    except (UsageError, ValueError) as err:
        if created and out_dir.exists():
            shutil.rmtree(out_dir)
        raise UsageError(str(err)) from err
    s = dict(manifest["summary"])
    if "test_err" in s:
        s["test_err"] = 100.0 * s["test_err"]
    print(" ".join(f"{k}={v!r}" for k, v in s.items()) or "done")
    return EXIT_OK


def _eval_data(args, manifest) -> Dataset:
    spec = dict(manifest["data"])
    name = args.data or spec["data"]
    root = args.data_root or spec.get("data_root")
    if name == "synth":
        splits = load_splits("synth", root, spec["synth"], spec["data_seed"])
        return splits[args.split]
    if args.split == "train":
        return dataio.load_dataset(name, root)
    return dataio.load_dataset(f"{name}.{args.split}", root)


def cmd_eval(args) -> int:
    model, manifest = load_run(args.run)
    ds = _eval_data(args, manifest)
    x, y = ds.images, ds.labels
    if args.impute:
        mask = impute.parse_mask_spec(args.impute, ds.side, ds.dim, args.seed)
        if mask.n_missing:
            pred = impute.classify_after_impute(model, x, mask, args.impute_iters, seed=args.seed)
            err = float(np.mean(pred != y))
        else:
            err = train.error_rate(model, x, y)
    else:
        err = train.error_rate(model, x, y)
    elbo = train.mean_elbo(model, x, y if model.conditional and args.elbo_true_labels else None,
                           seed=args.seed)
    print(f"test_err={100.0 * err!r} elbo={elbo!r}")
    return EXIT_OK


def cmd_generate(args) -> int:
    model, manifest = load_run(args.run)
    side = manifest["architecture"].get("side")
    if side is None:
        raise UsageError("generation needs square images")
    dec = model.dec
    if (args.klass is not None or args.share_z) and not model.conditional:
        raise UsageError("--class / --share-z need a class-conditional checkpoint")
    rng = np.random.default_rng(args.seed)
    if args.share_z:
        grid = class_grid(dec, args.n, seed=args.seed)
    else:
        n, m = args.n, args.m
        if model.conditional:
            if args.klass is not None:
                if not 0 <= args.klass < model.n_classes:
                    raise UsageError(f"--class must lie in [0, {model.n_classes})")
                y = np.full(n * m, args.klass)
            else:
                y = rng.integers(0, model.n_classes, size=n * m)
            z = rng.standard_normal((n * m, dec.latent_dim))
            imgs = generate(dec, n * m, y=y, z=z)
        else:
            imgs = generate(dec, n * m, z=rng.standard_normal((n * m, dec.latent_dim)))
        grid = imgs.reshape(n, m, -1)
    impute.write_pgm_grid(args.out, grid, side)
    print(f"wrote {args.out} ({grid.shape[0]}x{grid.shape[1]})")
    return EXIT_OK


def frozen_features(model: Model, x, bias: bool = True, batch: int = 1000) -> np.ndarray:
    f = np.concatenate([model.features(x[i:i + batch]).value for i in range(0, len(x), batch)])
    return np.hstack([f, np.ones((len(f), 1))]) if bias else f


def cmd_baseline(args) -> int:
    if args.which != "pegasos":
        raise UsageError(f"unknown baseline {args.which!r}")
    model, manifest = load_run(args.run)
    spec = manifest["data"]
    root = args.data_root or spec.get("data_root")
    splits = load_splits(spec["data"], root, spec["synth"], spec["data_seed"])
    tr, te = splits["train"], splits["test"]
    if te is None:
        raise UsageError("baseline needs a test split")
    use_bias = not args.no_bias
    w = pegasos_fit(frozen_features(model, tr.images, use_bias), tr.labels, args.reg,
                    args.epochs, seed=args.seed, n_classes=model.n_classes,
                    loss=LossMatrix.zero_one(model.n_classes))
    err = float(np.mean(predict(w, frozen_features(model, te.images, use_bias)) != te.labels))
    print(f"test_err={100.0 * err!r}")
    return EXIT_OK


def cmd_prepare(args) -> int:
    if (args.raw is None) == (args.csv is None):
        raise UsageError("give exactly one of --raw or --csv")
    if args.raw is not None:
        written = dataio.prepare_mnist_subsets(args.raw, args.data_root)
    else:
        written = dataio.prepare_mnist_from_pool(args.csv, args.data_root, seed=args.seed)
    for d in written:
        print(d)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------------

def _add_train_flags(p: argparse.ArgumentParser) -> None:
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        flags = [flag] if flag == flag.lower() else [flag, flag.lower()]
        p.add_argument(*flags, dest=f.name, default=None, metavar=f.name.upper())
    for key in SYNTH_DEFAULTS:
        p.add_argument(f"--synth-{key.replace('_', '-')}", dest=f"synth_{key}", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mmdgm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="train va / mmva / mmcva")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--data")
    p.add_argument("--data-root")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--labels", default="all")
    p.add_argument("--n-labeled", type=int)
    p.add_argument("--n-valid", type=int, default=0)
    p.add_argument("--split-seed", type=int)
    p.add_argument("--config")
    p.add_argument("--out", default="run")
    p.add_argument("--resume-manifest")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="test error and mean bound of a trained run")
    p.add_argument("--run", required=True, help="run directory or checkpoint path")
    p.add_argument("--data")
    p.add_argument("--data-root")
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.add_argument("--impute", help="rect:R or rand:P")
    p.add_argument("--impute-iters", type=int, default=100)
    p.add_argument("--elbo-true-labels", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="write a PGM grid of samples")
    p.add_argument("--run", required=True)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--m", type=int, default=10)
    p.add_argument("--class", dest="klass", type=int)
    p.add_argument("--share-z", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="samples.pgm")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("baseline", help="linear classifier on frozen recognition features")
    p.add_argument("which", choices=("pegasos",))
    p.add_argument("--run", required=True)
    p.add_argument("--data-root")
    p.add_argument("--reg", type=float, default=1e-2)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--no-bias", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("prepare-data", help="build the desk-scale MNIST subsets from raw IDX files or a CSV pool")
    p.add_argument("--raw", help="directory with the four standard MNIST IDX files")
    p.add_argument("--csv", help="CSV rows of 784 pixel bytes plus a trailing label")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data-root")
    p.set_defaults(func=cmd_prepare)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        return args.func(args)
    except NumericalAbort as err:
        print(f"error: numerical abort: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, FileNotFoundError, IdxFormatError, CheckpointFormatError, ContractError,
            DimensionError, ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
