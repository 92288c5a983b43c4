"""Command-line entry point.

Subcommands: surgery, train, eval, flops, schedule-dump, layer-scores.
Every run directory receives the fully resolved config so artifacts are
reproducible from the directory alone. Exit codes: 0 success, 2 config
error, 3 data/input error, 4 divergence abort, 5 checkpoint/plan format
error, 1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .config import load_config, resolved_config_json
from .data import eval_batch
from .errors import (ConfigError, ContractError, DivergenceError, FormatError,
                     InputError, PlanError)
from .evaluate import DEFAULT_RECURRENCES, eval_sweep
from .flops import flops_fixed, flops_for_step
from .random import RandomStream
from .schedules import curriculum_mean, lr_at, window_at
from .surgery import (apply_surgery, block_influence_scores,
                      count_fixed_params, count_parameters, make_plan,
                      model_from_checkpoint)
from .train import train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4
EXIT_FORMAT = 5


def _out_root() -> Path:
    return Path(os.environ.get("RECURFIT_OUT_ROOT", "."))


def _parse_tuple(text: str) -> tuple:
    parts = [int(x) for x in text.split(",")]
    if len(parts) != 3:
        raise ConfigError(f"expected p,r,c tuple, got {text!r}")
    return tuple(parts)


def cmd_surgery(args) -> int:
    donor = Checkpoint.load(args.donor)
    plan = make_plan(_parse_tuple(args.plan_tuple), donor.metadata["depth"])
    result = apply_surgery(donor, plan, args.adapter_init,
                           RandomStream(args.seed, "adapter"), args.noise_std)
    out = _out_root() / args.out
    out.parent.mkdir(parents=True, exist_ok=True)
    result.save(out)
    if args.plan_file:
        Path(args.plan_file).write_text(json.dumps(plan.to_dict(), indent=2))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set or [])
    summary = train(cfg, resume_from=args.resume)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_eval(args) -> int:
    model = model_from_checkpoint(Checkpoint.load(args.checkpoint))
    recurrences = ([int(x) for x in args.recurrences.split(",")]
                   if args.recurrences else DEFAULT_RECURRENCES)
    result = eval_sweep(model, args.dataset, recurrences,
                        s0_seed=args.s0_seed, n_items=args.items,
                        data_seed=args.data_seed)
    if args.out:
        result.to_csv(_out_root() / args.out)
    print(result.summary())
    return EXIT_OK


def cmd_flops(args) -> int:
    cfg = load_config(args.config, args.set or [])
    tokens = args.tokens
    if cfg.model_kind == "fixed":
        n = count_fixed_params(cfg.model, cfg.fixed_depth)["body"]
        value = flops_fixed(n, tokens)
        payload = {"model_kind": "fixed", "non_embedding_params": n,
                   "tokens": tokens, "flops": value}
    else:
        report = count_parameters(cfg.model, tuple(cfg.plan_tuple))
        value = flops_for_step(report, args.mean_r, args.window, tokens)
        shared = report.recurrent_block + report.adapter
        payload = {"model_kind": "recurrent",
                   "param_report": report.to_dict(),
                   "mean_r": args.mean_r, "window": args.window,
                   "tokens": tokens,
                   "n1": report.prelude + report.coda
                         + min(args.mean_r, args.window) * shared,
                   "n2": max(args.mean_r - args.window, 0) * shared,
                   "flops": value}
    print(json.dumps(payload, indent=2))
    return EXIT_OK


def cmd_schedule_dump(args) -> int:
    cfg = load_config(args.config, args.set or [])
    steps = args.steps if args.steps is not None else cfg.total_steps
    rows = [(step, curriculum_mean(cfg.curriculum, step),
             window_at(cfg.window, step), f"{lr_at(cfg.lr, step):.10g}")
            for step in range(steps)]
    target = open(_out_root() / args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(target)
        writer.writerow(["step", "mean", "window", "lr"])
        writer.writerows(rows)
    finally:
        if args.out:
            target.close()
    return EXIT_OK


def cmd_layer_scores(args) -> int:
    model = model_from_checkpoint(Checkpoint.load(args.checkpoint))
    inputs, _ = eval_batch(args.data_seed, args.dataset, args.items,
                           min(model.config.context_length, args.context))
    scores = block_influence_scores(model, inputs)
    for i, s in enumerate(scores):
        print(f"layer {i}: {s:.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="recurfit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("surgery", help="cut a recurrent checkpoint from a donor")
    p.add_argument("--donor", required=True)
    p.add_argument("--plan-tuple", required=True, help="p,r,c")
    p.add_argument("--adapter-init", default="identity-pass",
                   choices=["identity-pass", "scaled-random"])
    p.add_argument("--noise-std", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--plan-file")
    p.set_defaults(func=cmd_surgery)

    p = sub.add_parser("train", help="run or resume a training config")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="sweep test-time recurrence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", default="plain")
    p.add_argument("--recurrences", help="comma list, default 1,2,4,8,16,32")
    p.add_argument("--s0-seed", type=int, default=0)
    p.add_argument("--data-seed", type=int, default=1234)
    p.add_argument("--items", type=int, default=16)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("flops", help="training-FLOP accounting for a config")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--mean-r", type=float, default=32.0)
    p.add_argument("--window", type=int, default=8)
    p.add_argument("--tokens", type=int, required=True)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("schedule-dump", help="emit step,mean,window,lr CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--steps", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_schedule_dump)

    p = sub.add_parser("layer-scores", help="block-influence scores of a donor")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", default="plain")
    p.add_argument("--items", type=int, default=4)
    p.add_argument("--context", type=int, default=256)
    p.add_argument("--data-seed", type=int, default=1234)
    p.set_defaults(func=cmd_layer_scores)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, ContractError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (FormatError, PlanError, FileNotFoundError) as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT


if __name__ == "__main__":
    sys.exit(main())
