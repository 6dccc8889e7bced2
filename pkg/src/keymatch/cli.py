"""Command line interface: synth, train, eval, match.

Configuration precedence: explicit flags override the JSON config file,
which overrides profile defaults.  Exit codes: 0 success, 1 usage error,
2 data or validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import fields

import numpy as np

from .data import (
    load_checkpoint,
    load_pairs,
    pair_graphs,
    save_checkpoint,
    save_pairs,
    SynthConfig,
    synth_pairs,
)
from .errors import DataError, NumericalError
from .matcher import forward, hits_at_1
from .training import TrainConfig, evaluate, train_model

__all__ = ["main"]


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


_CONFIG_FLAGS = {
    "seed": int,
    "feature_mode": str,
    "num_stages": int,
    "layers_per_stack": int,
    "hidden_dim": int,
    "epochs": int,
    "learning_rate": float,
    "batch_size": int,
    "normalization": str,
    "coloring_dim": int,
    "kernel_size": int,
}


def _add_shared_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None, help="master random seed")
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--feature-mode", choices=["iso", "aniso"], default=None,
                        dest="feature_mode", help="edge feature type")
    parser.add_argument("--k", type=int, default=None, dest="num_stages",
                        help="number of consensus refinement stages")
    parser.add_argument("--r", type=int, default=None, dest="layers_per_stack",
                        help="convolution layers per stack")
    parser.add_argument("--hidden", type=int, default=None, dest="hidden_dim",
                        help="hidden width of the graph networks")
    parser.add_argument("--epochs", type=int, default=None, help="training epochs")
    parser.add_argument("--lr", type=float, default=None, dest="learning_rate",
                        help="Adam learning rate")
    parser.add_argument("--batch", type=int, default=None, dest="batch_size",
                        help="mini-batch size (capped at the dataset size)")
    parser.add_argument("--normalization", choices=["softmax", "sinkhorn"],
                        default=None, help="initial correspondence normalization")
    parser.add_argument("--coloring-dim", type=int, default=None, dest="coloring_dim",
                        help="width of the random consensus colorings")
    parser.add_argument("--kernel-size", type=int, default=None, dest="kernel_size",
                        help="spline kernel size per edge feature dimension")
    parser.add_argument("--profile", choices=["paper", "desk"], default="paper",
                        help="base hyperparameter profile")


def _resolve_config(args) -> TrainConfig:
    base = TrainConfig() if args.profile == "paper" else TrainConfig.desk()
    values = {f.name: getattr(base, f.name) for f in fields(TrainConfig)}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            try:
                file_values = json.load(fh)
            except json.JSONDecodeError as exc:
                raise DataError(f"config file: invalid JSON ({exc.msg})") from exc
        unknown = set(file_values) - set(values)
        if unknown:
            raise DataError(f"config file: unknown keys {sorted(unknown)}")
        values.update(file_values)
    for name in _CONFIG_FLAGS:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    return TrainConfig(**values)


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="keymatch", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic pair dataset")
    _add_shared_flags(p_synth)
    p_synth.add_argument("--n", type=int, default=20, help="source keypoints per pair")
    p_synth.add_argument("--jitter", type=float, default=0.02,
                         help="std of target coordinate noise")
    p_synth.add_argument("--outliers", type=int, default=0,
                         help="extra unmatched target keypoints")
    p_synth.add_argument("--count", type=int, required=True, help="number of pairs")
    p_synth.add_argument("--out", required=True, help="output pair file (JSON lines)")

    p_train = sub.add_parser("train", help="train a matcher model")
    _add_shared_flags(p_train)
    p_train.add_argument("--train", required=True, dest="train_path",
                         help="training pair file")
    p_train.add_argument("--val", required=True, dest="val_path",
                         help="validation pair file")
    p_train.add_argument("--out", required=True, help="best-validation checkpoint path")
    p_train.add_argument("--resume", default=None,
                         help="checkpoint to continue training from")
    p_train.add_argument("--log-file", default=None,
                         help="also append epoch logs to this file")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a pair file")
    _add_shared_flags(p_eval)
    p_eval.add_argument("--data", required=True, help="pair file to evaluate")
    p_eval.add_argument("--checkpoint", required=True, help="model checkpoint")

    p_match = sub.add_parser("match", help="match one pair and export the result")
    _add_shared_flags(p_match)
    p_match.add_argument("--pair", required=True, help="pair file")
    p_match.add_argument("--index", type=int, default=0,
                         help="record index within the pair file")
    p_match.add_argument("--checkpoint", required=True, help="model checkpoint")
    p_match.add_argument("--out", default=None, help="write correspondence JSON here")
    p_match.add_argument("--overlay", default=None,
                         help="write a plot-ready CSV of match segments here")
    p_match.add_argument("--full-s", action="store_true",
                         help="include the full correspondence matrix in the JSON")
    return parser


def _cmd_synth(args) -> int:
    cfg = _resolve_config(args)
    synth_cfg = SynthConfig(n=args.n, jitter=args.jitter, outliers=args.outliers,
                            seed=cfg.seed)
    pairs = synth_pairs(synth_cfg, args.count)
    save_pairs(pairs, args.out)
    print(json.dumps({"written": len(pairs), "path": args.out}))
    return 0


def _cmd_train(args) -> int:
    cfg = _resolve_config(args)
    train_pairs = load_pairs(args.train_path)
    val_pairs = load_pairs(args.val_path)
    if not train_pairs:
        raise DataError("no samples")

    model = opt_state = None
    start_epoch = 0
    if args.resume:
        model, opt_state, meta = load_checkpoint(args.resume)
        start_epoch = int(meta.get("extra", {}).get("next_epoch", 0))

    log_fh = open(args.log_file, "a", encoding="utf-8") if args.log_file else None
    best = {"hits": -1.0}

    def on_epoch(model, opt_state, log):
        line = json.dumps(log.to_dict(), sort_keys=True)
        print(line)
        if log_fh:
            log_fh.write(line + "\n")
            log_fh.flush()
        if log.val_hits_at_1 >= best["hits"]:
            best["hits"] = log.val_hits_at_1
            save_checkpoint(model, opt_state, args.out,
                            feature_mode=cfg.feature_mode,
                            extra={"next_epoch": log.epoch + 1,
                                   "val_hits_at_1": log.val_hits_at_1})

    try:
        train_model(train_pairs, val_pairs, cfg, model=model, opt_state=opt_state,
                    start_epoch=start_epoch, on_epoch=on_epoch)
    finally:
        if log_fh:
            log_fh.close()
    print(json.dumps({"checkpoint": args.out, "best_val_hits_at_1": best["hits"]}))
    return 0


def _check_arch_flags(args, meta) -> None:
    stored = meta["model"]
    flag_map = {
        "hidden_dim": stored["hidden_dim"],
        "num_stages": stored["num_stages"],
        "layers_per_stack": stored["layers_per_stack"],
        "coloring_dim": stored["coloring_dim"],
        "kernel_size": stored["kernel_size"],
        "normalization": stored["normalization"],
    }
    for name, stored_value in flag_map.items():
        given = getattr(args, name, None)
        if given is not None and given != stored_value:
            raise DataError(
                f"checkpoint/config mismatch: {name} is {stored_value} "
                f"in the checkpoint but {given} was requested"
            )
    mode = getattr(args, "feature_mode", None)
    if mode is not None:
        full = {"iso": "isotropic", "aniso": "anisotropic"}[mode]
        if stored.get("feature_mode") and full != stored["feature_mode"]:
            raise DataError(
                "checkpoint/config mismatch: feature_mode is "
                f"{stored['feature_mode']} in the checkpoint but {full} was requested"
            )


def _cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    pairs = load_pairs(args.data)
    if not pairs:
        raise DataError("no samples")
    model, _, meta = load_checkpoint(args.checkpoint)
    _check_arch_flags(args, meta)
    feature_mode = meta["model"].get("feature_mode") or cfg.feature_mode
    report = evaluate(pairs, model, feature_mode, seed=cfg.seed, dataset=args.data)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def _cmd_match(args) -> int:
    cfg = _resolve_config(args)
    pairs = load_pairs(args.pair)
    if not pairs:
        raise DataError("no samples")
    if not (0 <= args.index < len(pairs)):
        raise DataError(f"record index {args.index} out of range (file has {len(pairs)})")
    pair = pairs[args.index]
    model, _, meta = load_checkpoint(args.checkpoint)
    _check_arch_flags(args, meta)
    feature_mode = meta["model"].get("feature_mode") or cfg.feature_mode
    g_s, g_t = pair_graphs(pair, feature_mode)

    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, args.index)))
    t0 = time.perf_counter()
    state = forward(g_s, g_t, model, rng)
    elapsed = time.perf_counter() - t0

    s = state.combined.data
    targets = s.argmax(axis=1)
    result = {
        "matches": [
            {"source": int(i), "target": int(t), "confidence": float(s[i, t])}
            for i, t in enumerate(targets)
        ],
        "hits_at_1": hits_at_1(state.combined, pair.pi),
        "inference_seconds": elapsed,
    }
    if args.full_s:
        result["s"] = s.tolist()
    payload = json.dumps(result, sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(payload + "\n")
    print(payload)

    if args.overlay:
        with open(args.overlay, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x1", "y1", "x2", "y2", "confidence"])
            for i, t in enumerate(targets):
                writer.writerow([pair.src[i, 0], pair.src[i, 1],
                                 pair.tgt[t, 0], pair.tgt[t, 1], s[i, t]])
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "match": _cmd_match,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
