"""Command-line front end: train, eval, transfer, check, params, report.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import config as cfgmod
from .config import ConfigError, MIN_OBS, make_config, load_config_file
from .nets import build_network
from .trainer import (evaluate_checkpoint, evaluate_run, load_checkpoint, report,
                      run_training, transfer_checkpoint, transfer_run)
from .verify import check_network_equivariance, network_constraint_violation


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--env", choices=cfgmod.ENVIRONMENTS)
    p.add_argument("--model", choices=cfgmod.MODELS)
    p.add_argument("--variant", choices=cfgmod.VARIANTS)
    p.add_argument("--grid-size", type=int, dest="grid_size")
    p.add_argument("--obs-size", type=int, dest="obs_size")
    p.add_argument("--restrict", choices=("true", "false"))
    p.add_argument("--seed", dest="seeds", help="comma-separated seed list")
    p.add_argument("--episodes", type=int)
    p.add_argument("--train-freq", type=int, dest="train_freq")
    p.add_argument("--eval-episodes", type=int, dest="eval_episodes")
    p.add_argument("--out")
    p.add_argument("--agent", action="append", default=[], metavar="KEY=VALUE",
                   help="agent hyperparameter override, e.g. --agent lr=1e-3")


def _merge_config(args) -> "cfgmod.RunConfig":
    values = load_config_file(args.config) if args.config else {}
    for key in ("env", "model", "variant", "grid_size", "obs_size", "restrict",
                "seeds", "episodes", "train_freq", "eval_episodes", "out"):
        val = getattr(args, key, None)
        if val is not None:
            values[key] = val
    for item in getattr(args, "agent", []):
        if "=" not in item:
            raise ConfigError(f"--agent expects KEY=VALUE, got {item!r}")
        key, val = item.split("=", 1)
        values[f"agent.{key.strip()}"] = val.strip()
    return make_config(values)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eqrl",
                                     description="Symmetry-aware Q-learning on grid games")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train agents and write a run directory")
    _add_config_flags(p)
    p.add_argument("--log-every", type=int, default=0, dest="log_every",
                   help="progress line every N episodes (stderr)")

    p = sub.add_parser("eval", help="greedy evaluation of trained checkpoints")
    p.add_argument("--checkpoint", help="single checkpoint to evaluate")
    p.add_argument("--run", help="run directory; evaluates every checkpoint in it")
    p.add_argument("--transform", default="e",
                   help="comma-separated element labels, e.g. e,r,r2,t")
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--eval-seed", type=int, default=0, dest="eval_seed")
    p.add_argument("--out", help="write eval.csv here")

    p = sub.add_parser("transfer", help="retrain only the head on a transformed board")
    p.add_argument("--checkpoint", help="single checkpoint to transfer")
    p.add_argument("--run", help="run directory; transfers every checkpoint in it")
    p.add_argument("--transform", default="r", help="comma-separated element labels")
    p.add_argument("--retrain-episodes", type=int, default=300, dest="retrain_episodes")
    p.add_argument("--eval-episodes", type=int, default=50, dest="eval_episodes")
    p.add_argument("--out", help="write transfer.csv here")
    p.add_argument("--log-every", type=int, default=0, dest="log_every")

    p = sub.add_parser("check", help="equivariance and kernel-constraint checks")
    p.add_argument("--checkpoint", help="check a trained network instead of a fresh one")
    p.add_argument("--env", choices=cfgmod.ENVIRONMENTS, default="snake")
    p.add_argument("--model", choices=cfgmod.MODELS, default="equivariant")
    p.add_argument("--obs-size", type=int, dest="obs_size")
    p.add_argument("--restrict", choices=("true", "false"))
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-5)

    p = sub.add_parser("params", help="parameter counts for the paired builders")
    p.add_argument("--env", choices=cfgmod.ENVIRONMENTS, default="snake")
    p.add_argument("--obs-size", type=int, dest="obs_size")

    p = sub.add_parser("report", help="aggregate run directories into tables")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", help="write the per-episode CSV here")
    p.add_argument("--sigma", type=float, default=3.0)
    return parser


def _cmd_train(args) -> int:
    cfg = _merge_config(args)
    out = run_training(cfg, log_every=args.log_every)
    print(f"run written to {out}")
    return 0


def _cmd_eval(args) -> int:
    labels = [s.strip() for s in args.transform.split(",") if s.strip()]
    if args.run:
        out_path = os.path.join(args.out, "eval.csv") if args.out else None
        if args.out:
            os.makedirs(args.out, exist_ok=True)
        rows = evaluate_run(args.run, labels, args.episodes, args.eval_seed, out_path)
    elif args.checkpoint:
        rows = []
        for label in labels:
            mean, half, _ = evaluate_checkpoint(args.checkpoint, label,
                                                args.episodes, args.eval_seed)
            rows.append((label, args.eval_seed, mean, half))
    else:
        raise ConfigError("eval needs --checkpoint or --run")
    for label, seed, mean, half in rows:
        print(f"transform={label} seed={seed} episodes={args.episodes} "
              f"mean_reward={mean:.3f} ci95={half:.3f}")
    return 0


def _cmd_transfer(args) -> int:
    labels = [s.strip() for s in args.transform.split(",") if s.strip()]
    if args.run:
        out_path = os.path.join(args.out, "transfer.csv") if args.out else None
        if args.out:
            os.makedirs(args.out, exist_ok=True)
        results = transfer_run(args.run, labels, args.retrain_episodes,
                               args.eval_episodes, out_path, args.log_every)
    elif args.checkpoint:
        results = [transfer_checkpoint(args.checkpoint, label, args.retrain_episodes,
                                       args.eval_episodes, log_every=args.log_every)
                   for label in labels]
    else:
        raise ConfigError("transfer needs --checkpoint or --run")
    for r in results:
        print(f"transform={r['transform']} seed={r['seed']} original={r['original']:.3f} "
              f"before={r['before']:.3f} after={r['after']:.3f} "
              f"retention={r['retention']:.3f} extractor_frozen={r['extractor_frozen']}")
    return 0


def _check_manifest(args) -> dict:
    if args.model != "equivariant":
        raise ConfigError("check needs an equivariant model; vanilla declares no symmetry")
    prefix = "snake" if args.env == "snake" else "pacman"
    # default to the smallest stride-exact size so deviations mean real bugs
    d = args.obs_size or MIN_OBS[(args.env, args.model)]
    man = {"builder": f"{prefix}_{args.model}", "m": cfgmod.ENV_PLANES[args.env],
           "d": d, "n_actions": 4, "head": "linear"}
    if args.env == "gridpacman":
        man["restrict"] = args.restrict != "false"
    return man


def _cmd_check(args) -> int:
    if args.checkpoint:
        net, _ = load_checkpoint(args.checkpoint)
        if not net.symmetry:
            raise ConfigError("checkpoint holds a vanilla network; nothing to check")
    else:
        net = build_network(_check_manifest(args), rng=np.random.default_rng(0))
    rep = check_network_equivariance(net, n_inputs=args.trials, rng=np.random.default_rng(1))
    violation = network_constraint_violation(net)
    print(rep)
    print(f"kernel constraint violation: {violation:.3e}")
    if not net.stride_exact:
        print("note: strides truncate at this input size, so exact equivariance "
              "is not expected", file=sys.stderr)
    ok = rep.ok(args.tolerance) and violation < args.tolerance
    print("OK" if ok else "FAILED")
    return 0 if ok else 3


def _cmd_params(args) -> int:
    prefix = "snake" if args.env == "snake" else "pacman"
    d = args.obs_size or cfgmod.default_obs_size(args.env, cfgmod.ENV_GRID_DEFAULT[args.env])
    m = cfgmod.ENV_PLANES[args.env]
    variants = [("vanilla", {}), ("equivariant", {})]
    if args.env == "gridpacman":
        variants = [("vanilla", {}), ("equivariant restricted", {"restrict": True}),
                    ("equivariant full-group", {"restrict": False})]
    counts = {}
    for label, kw in variants:
        builder = f"{prefix}_{label.split()[0]}"
        man = {"builder": builder, "m": m, "d": d, "n_actions": 4, "head": "linear", **kw}
        counts[label] = build_network(man, rng=np.random.default_rng(0)).param_count()
        print(f"{args.env} {label} (obs {d}): {counts[label]:,} parameters")
    base = counts["vanilla"]
    for label, n in counts.items():
        if label != "vanilla":
            print(f"ratio {label}/vanilla: {n / base:.4f}")
    return 0


def _cmd_report(args) -> int:
    summary, csv_text = report(args.runs, sigma=args.sigma)
    print(summary, end="")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(csv_text)
        print(f"per-episode table written to {args.out}")
    return 0


_COMMANDS = {"train": _cmd_train, "eval": _cmd_eval, "transfer": _cmd_transfer,
             "check": _cmd_check, "params": _cmd_params, "report": _cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
