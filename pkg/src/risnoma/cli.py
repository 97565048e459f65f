"""Command-line entry point: train, eval and sweep.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import InvalidConfig, ParseError, RisNomaError
from .harness import (ExperimentConfig, evaluate_model, parse_config, results_csv, run_sweep,
                      summarize, train_model, write_results)
from .maml import LearnedStepSize, write_log
from .policy import layer_dims_for, load_weights, save_weights

log = logging.getLogger("risnoma")


def sidecar_path(model_path) -> Path:
    return Path(str(model_path) + ".json")


def save_model(weights, step: LearnedStepSize, config: ExperimentConfig, path) -> None:
    save_weights(weights, path)
    meta = {"g": step.g, "gamma_theta": step.gamma, "N": config.N, "M": config.M,
            "K": config.K, "clustering": config.clustering, "access": config.access,
            "seed": config.seed, "episodes": config.episodes}
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                                  encoding="utf-8")


def load_model(path, config: ExperimentConfig):
    dims = layer_dims_for(config.K, config.M, config.hidden)
    weights = load_weights(path, expected_dims=dims)
    meta_path = sidecar_path(path)
    if meta_path.exists():
        step = LearnedStepSize(float(json.loads(meta_path.read_text(encoding="utf-8"))["g"]))
    else:
        log.warning("no %s; using inner_lr as the step size", meta_path.name)
        step = LearnedStepSize.from_gamma(config.inner_lr)
    return weights, step


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="risnoma", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="meta-train a model")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", default="model.bin")

    e = sub.add_parser("eval", help="evaluate a saved model on test scenarios")
    e.add_argument("--model", required=True)
    e.add_argument("--config", required=True)

    s = sub.add_parser("sweep", help="train and evaluate across one variable")
    s.add_argument("--config", required=True)
    s.add_argument("--vary", help="VAR=v1,v2,... (overrides sweep_var/sweep_values)")
    s.add_argument("--out-dir")
    return p


def _config(args, extra, **overrides) -> ExperimentConfig:
    flags = list(extra)
    if getattr(args, "seed", None) is not None:
        flags.append(f"--seed={args.seed}")
    if getattr(args, "vary", None):
        if "=" not in args.vary:
            raise ParseError(f"--vary expects VAR=v1,v2,..., got {args.vary!r}")
        var, values = args.vary.split("=", 1)
        flags += [f"--sweep_var={var}", f"--sweep_values={values}"]
    if getattr(args, "out_dir", None):
        flags.append(f"--out_dir={args.out_dir}")
    flags += [f"--{k}={v}" for k, v in overrides.items()]
    return parse_config(args.config, flags)


def main(argv=None) -> int:
    args, extra = _parser().parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        config = _config(args, extra, mode=args.command)
    except (ParseError, InvalidConfig) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        if args.command == "train":
            weights, step, rows = train_model(config)
            save_model(weights, step, config, args.out)
            write_log(rows, str(args.out) + ".log.csv")
            print(f"saved {args.out} (gamma_theta={step.gamma!r}, episodes={len(rows)})")
        elif args.command == "eval":
            weights, step = load_model(args.model, config)
            row = summarize("model", Path(args.model).name, evaluate_model(weights, step, config))
            sys.stdout.write(results_csv([row]))
        else:
            rows = run_sweep(config, progress=lambda r: log.info(
                "%s=%s mean %.3f Mbit/s", r.sweep_var, r.value, r.mean_rate_mbps))
            csv_path, _ = write_results(rows, config.out_dir)
            sys.stdout.write(results_csv(rows))
            print(f"wrote {csv_path}", file=sys.stderr)
    except (RisNomaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
