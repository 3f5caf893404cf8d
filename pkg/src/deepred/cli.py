"""Command-line interface: ``deepred <command> [options] [--key value ...]``."""
import argparse
import csv
import json
import logging
import math
import os
import sys
import time
import warnings

import numpy as np

from . import config as cfgmod
from .eventlog import (load_cache, parse_event_log, random_split, save_cache,
                       split_counts, temporal_split)
from .evaluator import predict_topk, replay_evaluate, static_link_prediction
from .synthetic import planted_context_log, two_block_graph
from .trainer import load_checkpoint, save_checkpoint, train, train_static

SWEEPABLE = ("k", "d", "train_fraction")
logger = logging.getLogger("deepred")


class CLIError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(message)


# ------------------------------------------------------------------- helpers

def load_log(run):
    """Event log named by the config: binary cache, CSV, or ``synthetic:*``."""
    if run.cache and os.path.exists(run.cache):
        return load_cache(run.cache)
    if run.data.startswith("synthetic:"):
        kind = run.data.split(":", 1)[1]
        if kind == "context":
            return planted_context_log(seed=run.seed)
        if kind == "blocks":
            return two_block_graph(seed=run.seed)
        raise CLIError(f"unknown synthetic dataset {kind!r} (use 'context' or 'blocks')")
    if not run.data:
        raise CLIError("no data path configured (set 'data' or 'cache')")
    with open(run.data, "rb") as fh:
        log = parse_event_log(fh, run.log_format())
    if run.cache:
        save_cache(log, run.cache)
    return log


def temporal_views(log, run, train_fraction=None):
    """(observed log, (train, val, test)); a smaller ``train_fraction`` drops
    the oldest events so validation and test stay the same."""
    if train_fraction is None or math.isclose(train_fraction, run.train_fraction):
        return log, temporal_split(log, run.fractions)
    n = len(log)
    n_train, n_val, n_test = split_counts(n, run.fractions)
    n_train = int(math.floor(train_fraction * n + 1e-9))
    if n_train <= 0 or n_train + n_val + n_test > n:
        raise CLIError(f"train_fraction {train_fraction} incompatible with val/test fractions")
    sub = log[n - n_train - n_val - n_test:]
    return sub, (sub[:n_train], sub[n_train:n_train + n_val], sub[n_train + n_val:])


def _prepare_output(run):
    os.makedirs(run.output_dir, exist_ok=True)
    run.write(os.path.join(run.output_dir, "config.resolved"))


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def _emit(payload):
    print(json.dumps(payload))


# ------------------------------------------------------------------ commands

def cmd_ingest(args, run):
    log = load_log(run)
    if args.cache:
        save_cache(log, args.cache)
    summary = log.summary()
    summary["out_of_order_rows"] = log.n_out_of_order
    _emit(summary)
    return summary


def run_training(run, log=None, train_fraction=None):
    log = load_log(run) if log is None else log
    observed, split = temporal_views(log, run, train_fraction)
    with open(os.path.join(run.output_dir, "metrics.jsonl"), "w") as metrics_file:
        model, metrics = train(observed, split, run.model_config(static=False), run.train_config(),
                               metrics_file=metrics_file, checkpoint_dir=run.output_dir)
    return model, metrics, observed, split


def cmd_train(args, run):
    _prepare_output(run)
    model, metrics, _, _ = run_training(run)
    path = os.path.join(run.output_dir, "best.ckpt")
    save_checkpoint(path, model)
    _emit({"checkpoint": path, "epochs": len(metrics),
           "best_val_mrr": max((m.val_mrr for m in metrics), default=float("nan"))})


def cmd_evaluate(args, run):
    _prepare_output(run)
    model, _ = load_checkpoint(args.checkpoint)
    log = load_log(run)
    observed, split = temporal_views(log, run)
    view = split[1] if args.split == "val" else split[2]
    outcome = replay_evaluate(model, observed, view, mode=args.mode or run.eval_mode,
                              refresh=run.refresh, split=args.split)
    result = outcome.to_dict()
    _write_json(os.path.join(run.output_dir, f"results_{args.split}_{outcome.mode}.json"), result)
    if args.rank_dump:
        with open(args.rank_dump, "w") as fh:
            outcome.write_rank_dump(fh)
    _emit(result)
    return result


def cmd_predict(args, run):
    model, _ = load_checkpoint(args.checkpoint)
    log = load_log(run)
    try:
        user = log.user_names.index(args.user)
    except ValueError:
        raise CLIError(f"unknown user {args.user!r}") from None
    items = predict_topk(model, log, user, args.time, args.k, mode=args.mode or run.eval_mode)
    for rank, item in enumerate(items, start=1):
        print(f"{rank}\t{log.item_names[item]}")
    return items


def _dedupe(values):
    out = []
    for v in values:
        if v in out:
            warnings.warn(f"duplicate sweep value {v!r} ignored", stacklevel=2)
            continue
        out.append(v)
    return out


def cmd_sweep(args, run):
    if args.param not in SWEEPABLE:
        raise CLIError(f"parameter {args.param!r} is not sweepable; valid keys: {', '.join(SWEEPABLE)}")
    values = _dedupe([cfgmod.coerce(args.param, v) for v in args.values.split(",") if v.strip()])
    _prepare_output(run)
    log = load_log(run)
    out_path = args.out or os.path.join(run.output_dir, f"sweep_{args.param}.csv")
    rows = []
    for value in values:
        overrides = {} if args.param == "train_fraction" else {args.param: value}
        sub = cfgmod.RunConfig(**{**vars(run), **overrides,
                                  "output_dir": os.path.join(run.output_dir, f"{args.param}_{value}")})
        _prepare_output(sub)
        tf = value if args.param == "train_fraction" else None
        model, _, observed, split = run_training(sub, log, train_fraction=tf)
        outcome = replay_evaluate(model, observed, split[2], mode=run.eval_mode, refresh=run.refresh)
        rows.append((value, outcome.mrr, outcome.recall_at_10))
        logger.info("%s=%s mrr=%.4f", args.param, value, outcome.mrr)
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([args.param, "mrr", "recall_at_10"])
        writer.writerows(rows)
    _emit({"sweep": args.param, "csv": out_path, "rows": len(rows)})
    return rows


def static_views(log, run):
    return random_split(log, run.static_fractions, seed=run.seed)


def cmd_static_train(args, run):
    _prepare_output(run)
    log = load_log(run)
    train_log, _, _ = static_views(log, run)
    model, losses = train_static(train_log, run.model_config(static=True), run.train_config())
    path = os.path.join(run.output_dir, "static.ckpt")
    save_checkpoint(path, model)
    _emit({"checkpoint": path, "epochs": len(losses), "final_loss": losses[-1] if losses else None})


def cmd_static_eval(args, run):
    _prepare_output(run)
    model, _ = load_checkpoint(args.checkpoint or os.path.join(run.output_dir, "static.ckpt"))
    log = load_log(run)
    train_log, _, test_log = static_views(log, run)
    start = time.perf_counter()
    ap = static_link_prediction(model, log, train_log, test_log, seed=run.seed)
    result = {"split": "test", "mode": "static", "average_precision": ap,
              "num_positive": int(len(np.unique(test_log.users * log.n_items + test_log.items))),
              "wall_seconds": time.perf_counter() - start}
    _write_json(os.path.join(run.output_dir, "results_static.json"), result)
    _emit(result)
    return result


# -------------------------------------------------------------------- parser

def build_parser():
    epilog = "Config keys (override any with --key value):\n" + cfgmod.describe_keys()
    parser = _Parser(prog="deepred", description=__doc__, epilog=epilog,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, epilog=epilog,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="flat 'key = value' (or .json) config file")
        return p

    p = add("ingest", "parse a CSV log, print statistics, optionally write the binary cache")
    p.add_argument("data", nargs="?", help="input CSV (overrides the 'data' key)")
    p.add_argument("--cache", dest="cache_out", help="write the DPRDLOG1 cache here")
    p.set_defaults(func=cmd_ingest)

    add("train", "train on the temporal split").set_defaults(func=cmd_train)

    p = add("evaluate", "replay evaluation on the validation or test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("val", "test"), default="test")
    p.add_argument("--mode", choices=("exact", "cached"))
    p.add_argument("--rank-dump", help="write per-event ranks as CSV")
    p.set_defaults(func=cmd_evaluate)

    p = add("predict", "rank items for one user at a given time")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--user", required=True, help="original user id")
    p.add_argument("--time", type=float, required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--mode", choices=("exact", "cached"))
    p.set_defaults(func=cmd_predict)

    p = add("sweep", "train and evaluate once per value of k, d or train_fraction")
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True, help="comma-separated list")
    p.add_argument("--out", help="CSV path (default: <output_dir>/sweep_<param>.csv)")
    p.set_defaults(func=cmd_sweep)

    add("static-train", "train the static-network variant").set_defaults(func=cmd_static_train)
    p = add("static-eval", "link-prediction average precision on the static test edges")
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_static_eval)
    return parser


def _overrides(extra):
    out = {}
    it = iter(extra)
    for token in it:
        if not token.startswith("--"):
            raise CLIError(f"unexpected argument {token!r}")
        key = token[2:].replace("-", "_")
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            value = next(it, None)
            if value is None:
                raise CLIError(f"missing value for --{key}")
        if key not in cfgmod.KEYS:
            raise CLIError(f"unknown config key {key!r}")
        out[key] = value
    return out


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        parser = build_parser()
        args, extra = parser.parse_known_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        overrides = _overrides(extra)
        if args.command == "ingest":
            if args.data:
                overrides["data"] = args.data
            args.cache = args.cache_out
        run = cfgmod.load_config(args.config, overrides)
        args.func(args, run)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 0
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
