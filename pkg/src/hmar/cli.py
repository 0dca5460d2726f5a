"""``hmar`` command line: preprocess, train, eval, ablate.

Metrics go to stdout as JSON lines; diagnostics go to stderr. Exit codes:
0 ok, 2 configuration/checkpoint error, 3 data error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import VARIANTS, parse_config
from .data import (
    InteractionRecord, SplitSpec, build_user_sequences, format_interactions, format_manifest, parse_interactions,
    read_manifest, split_leave_one_out,
)
from .errors import CheckpointError, ConfigError, DataError, NumericError
from .estimator import HMARRecommender
from .metrics import aggregate_runs, emit

log = logging.getLogger("hmar")

LOG_FILE = "interactions.tsv"
MANIFEST_FILE = "manifest.txt"
SUMMARY_FILE = "split.json"

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _read_text(path):
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read: {exc.strerror}", source=str(path)) from None
    except UnicodeDecodeError:
        raise DataError("not valid UTF-8", source=str(path)) from None


def load_dataset(data_dir):
    """Records and manifest of a preprocessed directory."""
    manifest = read_manifest(_read_text(Path(data_dir) / MANIFEST_FILE), source=str(Path(data_dir) / MANIFEST_FILE))
    path = Path(data_dir) / LOG_FILE
    records = parse_interactions(_read_text(path), manifest["K"], source=str(path))
    return records, manifest


def run_seed(seed, run):
    """Distinct evaluation seed for each run."""
    return int(np.random.SeedSequence([int(seed), int(run)]).generate_state(1)[0])


# ------------------------------------------------------------ commands

def cmd_preprocess(input_path, manifest_path, out_dir, stream=sys.stdout):
    manifest = read_manifest(_read_text(manifest_path), source=str(manifest_path))
    records = parse_interactions(_read_text(input_path), manifest["K"], source=str(input_path))
    for r in records:
        if r.item_id > manifest["item_count"]:
            raise DataError(f"item {r.item_id} exceeds item_count {manifest['item_count']}", source=str(input_path))
    sequences = build_user_sequences(records)
    normalized = [InteractionRecord(seq.user_id, *row) for seq in sequences.values()
                  for row in zip(seq.items.tolist(), seq.behaviors.tolist(), seq.timestamps.tolist())]
    split = split_leave_one_out(sequences, SplitSpec(target_behavior=manifest["target_behavior"]))
    summary = dict(split.summary(), interactions=len(records), excluded_user_ids=sorted(split.excluded_users))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / LOG_FILE).write_text(format_interactions(normalized), encoding="utf-8")
    (out / MANIFEST_FILE).write_text(format_manifest(manifest), encoding="utf-8")
    (out / SUMMARY_FILE).write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    emit(summary, stream)
    return summary


def _prepare(config):
    records, manifest = load_dataset(config.data_dir)
    if manifest["K"] != config.num_behaviors:
        raise ConfigError(f"config num_behaviors={config.num_behaviors} but data declares K={manifest['K']}")
    target = manifest["target_behavior"] if config.target_behavior == -1 else config.target_behavior
    sequences = build_user_sequences(records)
    split = split_leave_one_out(sequences, SplitSpec(target, config.validation, config.max_len))
    return sequences, split, manifest, target


def cmd_train(config, stream=sys.stdout, label=None):
    """Train per ``config``; writes final and best-validation checkpoints. Returns the fitted estimator."""
    sequences, split, manifest, target = _prepare(config)
    params = dict(config.estimator_params(), num_items=manifest["item_count"], target_behavior=target)
    if not config.validation:
        params["eval_every"] = 0
    est = HMARRecommender(**params)
    known = {u: set(s.items.tolist()) for u, s in sequences.items()}

    def on_epoch(event):
        emit(dict(event, variant=label) if label else event, stream)

    est.fit(split.train, validation=split.valid or None, known_items=known, on_epoch=on_epoch)
    save_checkpoint(config.checkpoint, est.config_, est.params_)
    save_checkpoint(config.best_checkpoint, est.config_, est.best_model_params())
    log.info("saved %s and %s (best epoch %s)", config.checkpoint, config.best_checkpoint, est.best_epoch_)
    return est, split


def evaluate_runs(est, cases, k, negatives, runs, seed=0, stream=sys.stdout, label=None):
    reports = []
    for run in range(runs):
        report = est.evaluate(cases, n_negatives=negatives, k=k, seed=run_seed(seed, run), run=run)
        reports.append(report)
        emit(dict(report.to_json(), variant=label) if label else report.to_json(), stream)
    agg = aggregate_runs(reports)
    emit(dict(agg.to_json(), variant=label) if label else agg.to_json(), stream)
    return agg


def cmd_eval(checkpoint, data_dir, k=10, negatives=99, runs=3, seed=0, exclude_history=True,
             stream=sys.stdout):
    try:
        config, params = load_checkpoint(checkpoint)
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {checkpoint}: {exc.strerror}") from None
    records, manifest = load_dataset(data_dir)
    if manifest["K"] != config.num_behaviors or manifest["item_count"] != config.num_items:
        raise CheckpointError(
            f"checkpoint expects K={config.num_behaviors}, items={config.num_items}; "
            f"data declares K={manifest['K']}, items={manifest['item_count']}")
    split = split_leave_one_out(build_user_sequences(records),
                                SplitSpec(config.target_behavior, False, config.max_len))
    est = HMARRecommender.from_model(config, params, exclude_history=exclude_history)
    return evaluate_runs(est, split.test, k, negatives, runs, seed, stream)


def cmd_ablate(config, variant, stream=sys.stdout):
    config = config.with_variant(variant)
    root, ext = os.path.splitext(config.checkpoint)
    config = replace(config, checkpoint=f"{root}.{variant}{ext or '.ckpt'}")
    est, split = cmd_train(config, stream, label=variant)
    est.use_best()
    return evaluate_runs(est, split.test, config.eval_k, config.eval_negatives, config.eval_runs,
                         config.seed, stream, label=variant)


# ------------------------------------------------------------ entry point

def build_parser():
    parser = argparse.ArgumentParser(prog="hmar", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="normalize a raw log and write a split summary")
    p.add_argument("--input", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--f64", action="store_true", help="train in 64-bit floats")

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out targets")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--negatives", type=int, default=99)
    p.add_argument("--runs", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--all-items", action="store_true",
                   help="draw negatives from every other item, including ones in the history")

    p = sub.add_parser("ablate", help="train and evaluate one ablation variant")
    p.add_argument("--config", required=True)
    p.add_argument("--variant", required=True, choices=sorted(VARIANTS))
    p.add_argument("--seed", type=int)
    return parser


def _load_config(args):
    config = parse_config(args.config)
    if getattr(args, "seed", None) is not None:
        config = replace(config, seed=args.seed)
    if getattr(args, "f64", False):
        config = replace(config, dtype="float64")
    return config


def main(argv=None, stream=None):
    stream = stream or sys.stdout
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="hmar: %(message)s")
    try:
        if args.command == "preprocess":
            cmd_preprocess(args.input, args.manifest, args.out, stream)
        elif args.command == "train":
            cmd_train(_load_config(args), stream)
        elif args.command == "eval":
            if args.k < 1 or args.negatives < 1 or args.runs < 1:
                raise ConfigError("--k, --negatives and --runs must be >= 1")
            cmd_eval(args.checkpoint, args.data, args.k, args.negatives, args.runs, args.seed,
                     not args.all_items, stream)
        elif args.command == "ablate":
            cmd_ablate(_load_config(args), args.variant, stream)
    except (ConfigError, CheckpointError) as exc:
        print(f"hmar: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"hmar: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"hmar: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"hmar: I/O error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
