"""Command-line entry point: ``compose-rl {train,eval,ablate,check-grads,list-envs}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .envs import ENV_REGISTRY
from .harness import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, ConfigError

FLAG_FIELDS = ("seed", "steps", "env", "algo", "variant", "out")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--env")
    p.add_argument("--algo", choices=("sac", "hiro"))
    p.add_argument("--variant")
    p.add_argument("--out")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field by dot path, e.g. sac.batch_size=64")


def _config(args) -> harness.ExperimentConfig:
    overrides = dict(harness.parse_override(s) for s in args.set)
    for name in FLAG_FIELDS:
        v = getattr(args, name, None)
        if v is not None:
            overrides[name] = v
    return harness.load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="compose-rl", description="Train and evaluate composite policies.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", help="train one run")
    _add_run_flags(p)
    p.add_argument("--resume", action="store_true", help="continue from the run directory's checkpoint")
    p = sub.add_parser("eval", help="evaluate a checkpointed run")
    p.add_argument("--out", required=True, help="run directory holding config.json and manifest.json")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p = sub.add_parser("ablate", help="compare full, no_attention and att_brnn_removed")
    _add_run_flags(p)
    p.add_argument("--seeds", type=int, default=3, help="number of seeds (0..N-1)")
    p = sub.add_parser("check-grads", help="finite-difference check of every loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    sub.add_parser("list-envs", help="list registered environments")
    return parser


def cmd_train(args) -> int:
    cfg = _config(args)
    return harness.run_experiment(cfg, resume=args.resume)


def cmd_eval(args) -> int:
    run = Path(args.out)
    try:
        with open(run / "config.json", encoding="utf-8") as fh:
            cfg = harness.ExperimentConfig.from_dict(json.load(fh)).validate()
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {run / 'config.json'}: {exc}") from exc
    trainer = harness.build_trainer(cfg)
    harness.checkpoint_load(run, trainer)
    rows = harness.evaluate(trainer, cfg.env, args.episodes, np.random.default_rng(args.seed), trainer.total_steps)
    summary = harness.summarize(rows)
    print(json.dumps(summary, indent=1, sort_keys=True))
    harness.atomic_write(run / "eval_summary.json", json.dumps(summary, indent=1, sort_keys=True).encode("utf-8"))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    report = harness.ablate(cfg, list(range(args.seeds)))
    for name, v in report["variants"].items():
        print(f"{name:18s} median AUC {v['median_auc']:.4f}")
    return EXIT_OK


def cmd_check_grads(args) -> int:
    from .gradcheck import run_gradient_checks

    ok = True
    for name, rep in run_gradient_checks(args.seed, args.tol):
        ok &= rep.passed
        print(f"{'PASS' if rep.passed else 'FAIL'}  {name:36s} max rel err {rep.max_rel_error:.2e}  ({rep.n_checked} entries)")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_list_envs(args) -> int:
    for name, cls in sorted(ENV_REGISTRY.items()):
        s = cls.spec
        print(f"{name:18s} s_hat={s.s_hat_width} goal={s.goal_width} action={s.action_dim} "
              f"horizon={s.horizon} radius={s.goal_radius}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "check-grads": cmd_check_grads,
            "list-envs": cmd_list_envs}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
