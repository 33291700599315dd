"""``trimodal`` command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 I/O or data-format error,
4 checkpoint incompatibility, 5 numerical failure.  Errors are also printed
to stderr as one JSON object.
"""
import argparse
import json
import logging
import os
import sys

import numpy as np

from . import tmf
from .config import PROFILES, RunConfig
from .dataset import synth_generate
from .errors import (CheckpointIncompatible, ConfigError, EmptyDatasetError, FormatError,
                     InvalidArgument, NumericalError, SplitError)
from .model import load_checkpoint, mask_name, save_checkpoint
from .preprocess import load_preprocessed, preprocess_dataset
from .training import (MetricsRow, ablate, evaluate, metrics_to_csv, split_data, train)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_INCOMPATIBLE, EXIT_NUMERIC = 0, 2, 3, 4, 5

log = logging.getLogger("trimodal")


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def thread_budget(environ=os.environ):
    raw = environ.get("TRIMODAL_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise ConfigError(f"TRIMODAL_THREADS must be a positive integer, got {raw!r}")
    return n


def _load_config(args, profile=None):
    if getattr(args, "config", None):
        rc = RunConfig.load(args.config)
        if profile is not None and profile != rc.profile:
            raise ConfigError(f"--profile {profile} conflicts with config profile {rc.profile}")
    else:
        rc = RunConfig.for_profile(profile or "desk")
    return rc.check_consistency()


def _write_config(rc, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        fh.write(rc.dumps())
    with open(os.path.join(out_dir, "config.hash"), "w") as fh:
        fh.write(rc.hash() + "\n")


def _write_text(path, text):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(text)


def _splits(rc, data_dir):
    records, arrays = load_preprocessed(data_dir)
    return split_data(records, arrays, rc.train.val_fraction, rc.train.split_seed)


# -- subcommands ------------------------------------------------------------------------

def cmd_synth(args):
    rc = _load_config(args)
    if args.seed is not None:
        rc.dataset.seed = args.seed
    synth_generate(rc.dataset, args.out)
    _write_config(rc, args.out)
    print(f"wrote {rc.dataset.n_samples} samples to {args.out}")


def cmd_preprocess(args):
    rc = _load_config(args, args.profile)
    manifest, failures = preprocess_dataset(args.input, args.out, rc.preprocess,
                                            workers=thread_budget())
    _write_config(rc, args.out)
    print(f"processed {manifest['processed']} samples into {args.out}")
    if failures:
        print(f"warning: {failures} sample(s) failed; see processing.log", file=sys.stderr)


def cmd_train(args):
    rc = _load_config(args)
    if args.mask:
        rc.train.mask = mask_name(args.mask)
    if args.seed is not None:
        rc.train.seed = args.seed
    train_set, val_set = _splits(rc, args.data)
    _write_config(rc, args.out)
    draws = []
    try:
        result = train(train_set, val_set, rc.model, rc.train, rc.augment, out_dir=args.out,
                       aug_log=draws)
    except NumericalError as exc:
        if exc.checkpoint is not None:
            save_checkpoint(exc.checkpoint, os.path.join(args.out, "checkpoint"))
        raise
    _write_text(os.path.join(args.out, "augment.log"), "".join(d + "\n" for d in draws))
    best = [r for r in result.history if r.epoch == result.best_epoch and r.split == "val"][0]
    print(f"best epoch {result.best_epoch}: val loss {best.loss:.4f} accuracy {best.accuracy:.4f}")


def cmd_eval(args):
    rc = _load_config(args)
    model = load_checkpoint(args.checkpoint, mask=args.mask)
    train_set, val_set = _splits(rc, args.data)
    parts = {"train": [train_set], "val": [val_set], "all": [train_set, val_set]}[args.split]
    data = {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}
    loss, acc = evaluate(model, model.standardize(data), mask=args.mask)
    with open(os.path.join(args.checkpoint, "manifest.json")) as fh:
        step = json.load(fh).get("step", 0)
    row = MetricsRow(mask_name(model.mask), rc.train.seed, step, args.split, loss, acc)
    if args.out:
        _write_config(rc, args.out)
        _write_text(os.path.join(args.out, "metrics.csv"), metrics_to_csv([row]))
    print(json.dumps({"mask": row.config, "split": row.split, "loss": loss, "accuracy": acc}))


def cmd_ablate(args):
    rc = _load_config(args)
    seeds = rc.train.ablation_seeds
    if args.seeds:
        seeds = tuple(int(s) for s in args.seeds.split(","))
    train_set, val_set = _splits(rc, args.data)
    _write_config(rc, args.out)
    result = ablate(train_set, val_set, rc.model, rc.train, rc.augment, seeds=seeds,
                    out_dir=args.out)
    sys.stdout.write(result.to_csv())
    if result.errors:
        for (seed, mask), msg in sorted(result.errors.items()):
            print(f"warning: {mask} seed {seed} failed: {msg}", file=sys.stderr)


def cmd_gradcheck(args):
    from .gradsuite import run_suite
    rc = _load_config(args)
    result = run_suite(range(args.seeds), network=not args.ops_only)
    lines = result.lines()
    if args.out:
        _write_config(rc, args.out)
        _write_text(os.path.join(args.out, "gradcheck.tsv"), "".join(l + "\n" for l in lines))
    failed = [l for l in lines if "\tFAIL\t" in l]
    for l in failed:
        print(l)
    print(f"{len(lines) - len(failed)}/{len(lines)} checks passed in {result.seconds:.1f}s CPU")
    if failed:
        raise CliError(EXIT_NUMERIC, f"{len(failed)} gradient check(s) failed")


def cmd_inspect(args):
    for path in args.paths:
        header = tmf.read_header(path)
        print(json.dumps({"path": path, **header}, sort_keys=True))


# -- plumbing ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="trimodal", description="Tri-modal driving hazard classifier")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="MFCCs and frame stacks from a raw dataset")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--profile", choices=PROFILES)
    s.add_argument("--config")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train one model")
    s.add_argument("--config")
    s.add_argument("--data", required=True, help="preprocessed dataset directory")
    s.add_argument("--out", required=True)
    s.add_argument("--mask", help="modality subset such as A-V-R or V")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--mask")
    s.add_argument("--split", choices=("train", "val", "all"), default="val")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="train every modality subset")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seeds", help="comma-separated seeds (default from config)")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("gradcheck", help="finite-difference check of every op and the network")
    s.add_argument("--config")
    s.add_argument("--data", help="unused; accepted for symmetry")
    s.add_argument("--out")
    s.add_argument("--seeds", type=int, default=20)
    s.add_argument("--ops-only", action="store_true")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("inspect", help="print TMF1 headers")
    s.add_argument("paths", nargs="+")
    s.set_defaults(func=cmd_inspect)
    return p


def _classify(exc):
    if isinstance(exc, CliError):
        return exc.code
    if isinstance(exc, CheckpointIncompatible):
        return EXIT_INCOMPATIBLE
    if isinstance(exc, NumericalError):
        return EXIT_NUMERIC
    if isinstance(exc, (OSError, EmptyDatasetError, FormatError)):
        return EXIT_IO
    if isinstance(exc, (ConfigError, InvalidArgument, SplitError)):
        return EXIT_CONFIG
    return None


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        thread_budget()
        args.func(args)
    except Exception as exc:
        code = _classify(exc)
        if code is None:
            raise
        err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
        print(json.dumps(err), file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
