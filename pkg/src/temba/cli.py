"""Command line entry: synth, train, eval, gradcheck, bench.

One JSON run config drives a run. Top-level keys: mode, model, train,
synth, paths; unknown keys anywhere are rejected. Precedence, lowest to
highest: built-in defaults, --config file, --set section.key=value
assignments, named flags. The merged result is echoed to
out_dir/config.resolved.json and can be passed back via --config to
reproduce the run.

Exit codes: 0 success, 1 invalid input or config, 2 numeric fault
(divergence, failed gradient check), 3 I/O or file-format trouble.
Messages go to stderr; TEMBA_LOG=error|info|debug sets verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path


def _configure_runtime() -> None:
    # Single-threaded BLAS pins the reduction order, which is what makes
    # runs bitwise reproducible for a fixed seed. Must happen before numpy
    # is first imported, which is why the package __init__ imports nothing.
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, "1")


_configure_runtime()

from .errors import (ContractViolation, FormatError, NumericFault,  # noqa: E402
                     ValidationError)

log = logging.getLogger("temba")

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO,
               "debug": logging.DEBUG}
_SECTIONS = ("mode", "model", "train", "synth", "paths")
_PATH_KEYS = ("features_dir", "annotations_dir", "manifest", "out_dir")


def _setup_logging() -> None:
    name = os.environ.get("TEMBA_LOG", "info").strip().lower()
    if name not in _LOG_LEVELS:
        raise ValidationError(
            f"TEMBA_LOG must be one of {sorted(_LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=_LOG_LEVELS[name], stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


# ---------------------------------------------------------------------------
# run config assembly


def _load_config_file(path: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ValidationError(f"config {path}: invalid JSON: {e}") from e
    _check_sections(doc, f"config {path}")
    return doc


def _check_sections(doc, where: str) -> None:
    if not isinstance(doc, dict):
        raise ValidationError(f"{where}: top level must be a JSON object")
    extra = set(doc) - set(_SECTIONS)
    if extra:
        raise ValidationError(f"{where}: unknown keys {sorted(extra)}")
    for sec in ("model", "train", "synth", "paths"):
        if sec in doc and not isinstance(doc[sec], dict):
            raise ValidationError(f"{where}: section {sec!r} must be an object")
    if "paths" in doc:
        extra = set(doc["paths"]) - set(_PATH_KEYS)
        if extra:
            raise ValidationError(f"{where}: unknown paths keys {sorted(extra)}")


def _apply_assignments(doc: dict, assignments) -> None:
    for item in assignments or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValidationError(
                f"--set expects section.key=value, got {item!r}")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        parts = key.strip().split(".")
        if parts == ["mode"]:
            doc["mode"] = parsed
            continue
        if len(parts) != 2 or parts[0] not in ("model", "train", "synth", "paths"):
            raise ValidationError(
                f"--set key must be mode or one of model/train/synth/paths"
                f" dotted with a field name, got {key!r}")
        doc.setdefault(parts[0], {})[parts[1]] = parsed
    _check_sections(doc, "--set result")


class Resolved:
    """Typed view of the merged run config plus the dict echoed to disk."""

    def __init__(self, mode, model, train, synth, paths):
        self.mode = mode
        self.model = model
        self.train = train
        self.synth = synth
        self.paths = paths

    def to_doc(self) -> dict:
        doc = {"mode": self.mode, "model": self.model.to_dict(),
               "train": self.train.to_dict(),
               "paths": {k: v for k, v in self.paths.items() if v is not None}}
        if self.synth is not None:
            doc["synth"] = self.synth.to_dict()
        return doc

    def echo(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "config.resolved.json", "w") as f:
            json.dump(self.to_doc(), f, indent=1, sort_keys=True)
            f.write("\n")


def _resolve(args, want_synth: bool = False) -> Resolved:
    from .data import SynthSpec
    from .model import ModelConfig
    from .train import TrainConfig

    doc: dict = {}
    if getattr(args, "config", None):
        doc = _load_config_file(args.config)
    _apply_assignments(doc, getattr(args, "assign", None))

    mode = doc.get("mode", doc.get("model", {}).get("mode", "detection"))
    if getattr(args, "mode", None):
        mode = args.mode

    model_dict = dict(doc.get("model", {}))
    model_dict["mode"] = mode
    for flag, field_name, value in (
            ("no_dilation", "use_dilation", False),
            ("no_fuser", "use_fuser", False),
            ("no_cons", "use_cons_loss", False),
            ("no_aux", "use_aux_loss", False)):
        if getattr(args, flag, False):
            model_dict[field_name] = value
    if getattr(args, "fuser_variant", None):
        model_dict["fuser_variant"] = args.fuser_variant
    if getattr(args, "blocks", None):
        model_dict["blocks"] = args.blocks
    model = ModelConfig.from_dict(model_dict)

    train_dict = dict(doc.get("train", {}))
    if getattr(args, "seed", None) is not None:
        train_dict["seed"] = args.seed
    train = TrainConfig.from_dict(train_dict)

    synth = None
    if want_synth or "synth" in doc:
        synth_dict = dict(doc.get("synth", {}))
        synth_dict["mode"] = mode
        if getattr(args, "seed", None) is not None:
            synth_dict["seed"] = args.seed
        synth = SynthSpec.from_dict(synth_dict)

    paths = {k: doc.get("paths", {}).get(k) for k in _PATH_KEYS}
    for flag, key in (("features_dir", "features_dir"),
                      ("annotations_dir", "annotations_dir"),
                      ("manifest", "manifest"), ("out", "out_dir")):
        value = getattr(args, flag, None)
        if value:
            paths[key] = value
    return Resolved(mode, model, train, synth, paths)


def _need(paths: dict, *keys: str) -> list[str]:
    missing = [k for k in keys if not paths.get(k)]
    if missing:
        flags = {"features_dir": "--features-dir",
                 "annotations_dir": "--annotations-dir",
                 "manifest": "--manifest", "out_dir": "--out"}
        raise ValidationError(
            "missing required paths: "
            + ", ".join(f"{k} (set {flags[k]} or paths.{k})" for k in missing))
    return [paths[k] for k in keys]


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    from .data import synth_generate

    run = _resolve(args, want_synth=True)
    (out_dir,) = _need(run.paths, "out_dir")
    run.echo(out_dir)
    manifest = synth_generate(run.synth, out_dir)
    n_train, n_val = len(manifest["train"]), len(manifest["val"])
    log.info("synth: %d train / %d val videos in %s", n_train, n_val, out_dir)
    print(f"wrote {n_train + n_val} videos ({n_train} train, {n_val} val) "
          f"to {out_dir}")
    return 0


def cmd_train(args) -> int:
    from .data import load_split
    from .model import TembaModel
    from .train import train

    run = _resolve(args)
    feat_dir, ann_dir, manifest, out_dir = _need(
        run.paths, "features_dir", "annotations_dir", "manifest", "out_dir")
    run.echo(out_dir)
    train_items = load_split(feat_dir, ann_dir, manifest, "train")
    val_items = load_split(feat_dir, ann_dir, manifest, "val")
    feat_dim = train_items[0].features.shape[1]
    if feat_dim != run.model.input_dim:
        raise ValidationError(
            f"features are {feat_dim}-dimensional but model.input_dim is "
            f"{run.model.input_dim}; set --set model.input_dim={feat_dim}")
    model = TembaModel(run.model, seed=run.train.seed)
    log.info("train: %d params, %d train / %d val videos, %d epochs",
             model.param_count(), len(train_items), len(val_items),
             run.train.total_epochs)
    result = train(model, train_items, val_items, run.train, out_dir,
                   truncate=args.truncate, log=log.info)
    if result.diverged:
        print(f"training diverged: {result.diverged}", file=sys.stderr)
        print(f"last good checkpoint: {result.last_path}", file=sys.stderr)
        return 2
    print(f"best val metric {result.best_metric:.4f} at epoch "
          f"{result.best_epoch}; checkpoints in {out_dir}")
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import restore_model
    from .data import load_split
    from .train import evaluate

    run = _resolve(args)
    feat_dir, ann_dir, manifest = _need(
        run.paths, "features_dir", "annotations_dir", "manifest")
    model = restore_model(args.ckpt)
    log.info("eval: %s checkpoint, mode %s, split %s", args.ckpt,
             model.config.mode, args.split)
    items = load_split(feat_dir, ann_dir, manifest, args.split)
    report = evaluate(model, items, batch_size=run.train.batch_size or 8,
                      truncate=args.truncate)
    payload = report.to_json()
    if run.paths.get("out_dir"):
        out = Path(run.paths["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        run.echo(out)
        with open(out / "metrics.json", "w") as f:
            json.dump(payload, f, indent=1)
        log.info("eval: wrote %s", out / "metrics.json")
    print(json.dumps(payload, indent=1))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import toy_check

    run = _resolve(args)
    seed = args.seed if args.seed is not None else 0
    log.info("gradcheck: toy model, mode %s, seed %d, tol %g",
             run.mode, seed, args.tol)
    report = toy_check(seed=seed, tol=args.tol, mode=run.mode)
    print(report)
    return 0 if report.passed else 2


def cmd_bench(args) -> int:
    from .bench import format_bench, run_bench

    seed = args.seed if args.seed is not None else 0
    result = run_bench(dim=args.dim, state_dim=args.state_dim,
                       stride=args.stride, runs=args.runs, seed=seed)
    print(format_bench(result))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "bench.json", "w") as f:
            json.dump(result, f, indent=1)
        log.info("bench: wrote %s", out / "bench.json")
    return 0


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="JSON run config (mode/model/train/synth/paths)")
    common.add_argument("--seed", type=int, metavar="N",
                        help="seed for data generation, init, and shuffling")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--set", dest="assign", action="append",
                        metavar="SEC.KEY=VAL",
                        help="override any config field, e.g. train.lr=1e-3 "
                             "(repeatable; flags still win)")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--features-dir", metavar="DIR")
    data.add_argument("--annotations-dir", metavar="DIR")
    data.add_argument("--manifest", metavar="PATH")
    data.add_argument("--truncate", action="store_true",
                      help="clip videos longer than model.pad_len instead of "
                           "rejecting them")

    mode = argparse.ArgumentParser(add_help=False)
    mode.add_argument("--mode", choices=("detection", "summarization"))

    ablate = argparse.ArgumentParser(add_help=False)
    ablate.add_argument("--no-dilation", action="store_true",
                        help="run every block at stride 1")
    ablate.add_argument("--no-fuser", action="store_true",
                        help="head reads the last block directly")
    ablate.add_argument("--no-cons", action="store_true",
                        help="drop the branch-consistency loss term")
    ablate.add_argument("--no-aux", action="store_true",
                        help="drop the per-block auxiliary loss terms")
    ablate.add_argument("--fuser-variant",
                        choices=("sum+proj", "sum+proj+ssm",
                                 "concat+proj", "concat+proj+ssm"))
    ablate.add_argument("--blocks", type=int, metavar="K",
                        help="number of stacked blocks")

    p = _Parser(prog="temba",
                description="dilated selective-scan sequence labeling")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    sp = sub.add_parser("synth", parents=[common, mode],
                        help="generate a synthetic dataset into --out")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", parents=[common, data, mode, ablate],
                        help="train on a dataset, checkpointing into --out")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", parents=[common, data],
                        help="evaluate a checkpoint on a dataset split")
    sp.add_argument("--ckpt", required=True, metavar="PATH",
                    help="checkpoint file (.tmbw)")
    sp.add_argument("--split", choices=("train", "val"), default="val")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", parents=[common, mode],
                        help="finite-difference check on a toy model")
    sp.add_argument("--tol", type=float, default=1e-4,
                    help="max allowed relative error (default 1e-4)")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("bench", parents=[common],
                        help="scan throughput: standard vs dilated, "
                             "compiled vs python kernels")
    sp.add_argument("--dim", type=int, default=256)
    sp.add_argument("--state-dim", type=int, default=16)
    sp.add_argument("--stride", type=int, default=3)
    sp.add_argument("--runs", type=int, default=5)
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    try:
        _setup_logging()
        parser = build_parser()
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            parser.print_help(sys.stderr)
            return 1
        return args.func(args)
    except (ValidationError, ContractViolation) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NumericFault as e:
        print(f"numeric fault: {e}", file=sys.stderr)
        return 2
    except FormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
