"""Command-line entry point: geogrouse {gen-data,train,eval,sweep,grad-check}.

Exit codes: 0 success, 1 usage/config error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .config import ConfigError, RunConfig
from .evaluation import make_test_sets, offline_eval, sensitivity_sweep, sweep_table_csv
from .episodes import write_sessions
from .numerics import NumericalError, ParamStore
from .policy import VARIANTS, Policy, build_params
from .simulator import Environment, generate_environment, simulate_sessions
from .training import policy_grad_check, round_rng, train_em

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2
GRAD_TOL = 1e-4

log = logging.getLogger("geogrouse")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="geogrouse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="run config (TOML)")
        p.add_argument("--seed", type=int, help="override train.seed")
        p.add_argument("--out", help="override io.output_dir")
        p.add_argument("--variant", choices=VARIANTS, help="override model.variant")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    common(sub.add_parser("gen-data", help="generate the environment and uniform-policy session logs"))
    common(sub.add_parser("train", help="run EM training, write checkpoint and history"))
    p = common(sub.add_parser("eval", help="offline metrics of a checkpoint"))
    p.add_argument("--checkpoint", required=True)
    p = common(sub.add_parser("sweep", help="AOI-level sensitivity sweep"))
    p.add_argument("--levels", help="comma-separated AOI levels (default: eval.levels)")
    p = common(sub.add_parser("grad-check", help="full-stack finite-difference gradient check"))
    p.add_argument("--n-seeds", type=int, default=5)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = config_mod.load(args.config)
    if args.seed is not None:
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
    if args.out is not None:
        cfg.io = dataclasses.replace(cfg.io, output_dir=args.out)
    if args.variant is not None:
        cfg.model = dataclasses.replace(cfg.model, variant=args.variant)
    return cfg


def output_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.io.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def environment_summary(env: Environment) -> dict:
    return {
        "spec": RunConfig(env=env.spec).to_dict()["env"],
        "preference": env.preference.tolist(),
        "bias": env.bias,
        "aoi_sizes": list(env.aoi_sizes),
        "n_gps_cells": int(len(env.cell_group)),
        "cell_group": env.cell_group.tolist(),
        "cell_aoi": env.cell_aoi.tolist(),
        "uniform_click_rate": float(env.click_prob.mean()),
    }


def cmd_gen_data(cfg: RunConfig) -> int:
    out = output_dir(cfg)
    env = generate_environment(cfg.env)
    (out / "environment.json").write_text(json.dumps(environment_summary(env), indent=1) + "\n")
    rng = round_rng(cfg.train.seed, 0, stream=4)
    users = rng.integers(cfg.env.n_users, size=cfg.train.batch_size)
    logged = simulate_sessions(env, users, None, rng)
    write_sessions(logged.to_episodes(), out / "sessions.jsonl")
    tests = make_test_sets(env, cfg.eval.seeds[:1], cfg.eval.n_sessions)
    write_sessions(tests[0].to_episodes(), out / "test_sessions.jsonl")
    print(f"wrote {out / 'environment.json'}, {out / 'sessions.jsonl'}, {out / 'test_sessions.jsonl'}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    out = output_dir(cfg)
    env = generate_environment(cfg.env)
    policy, history = train_em(env, cfg.model, cfg.train)
    policy.store.save(out / "checkpoint.json")
    (out / "history.csv").write_text(history.to_csv())
    cfg.save(out / "config.toml")
    if len(history):
        print(f"final mean return {history.records[-1]['mean_return']:.4f}")
    print(f"wrote {out / 'checkpoint.json'}, {out / 'history.csv'}")
    return EXIT_OK


def load_policy(cfg: RunConfig, env: Environment, checkpoint) -> Policy:
    path = Path(checkpoint)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    try:
        store = ParamStore.load(path)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"unreadable checkpoint {path}: {exc}") from exc
    expected = build_params(cfg.model, env.vocab, np.random.default_rng(0))
    shapes = {n: store[n].shape for n in store}
    if shapes != {n: expected[n].shape for n in expected}:
        raise ConfigError(f"checkpoint {path} does not match model.variant={cfg.model.variant!r} and the env vocabulary")
    return Policy(cfg.model, env.vocab, store)


def cmd_eval(cfg: RunConfig, checkpoint) -> int:
    out = output_dir(cfg)
    env = generate_environment(cfg.env)
    policy = load_policy(cfg, env, checkpoint)
    report = offline_eval(policy, make_test_sets(env, cfg.eval.seeds, cfg.eval.n_sessions), tuple(cfg.eval.ks))
    report.meta["variant"] = cfg.model.variant
    (out / "metrics.json").write_text(report.to_json() + "\n")
    table = report.to_table(f"GeoGrouse-{cfg.model.variant}")
    (out / "metrics.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def run_level(cfg: RunConfig, env: Environment, tests, level: int):
    model = dataclasses.replace(cfg.model, aoi_level=level)
    policy, _ = train_em(env, model, cfg.train)
    return offline_eval(policy, tests, tuple(cfg.eval.ks))


def cmd_sweep(cfg: RunConfig, levels) -> int:
    out = output_dir(cfg)
    env = generate_environment(cfg.env)
    tests = make_test_sets(env, cfg.eval.seeds, cfg.eval.n_sessions)
    rows = sensitivity_sweep(levels, lambda lv: run_level(cfg, env, tests, lv))
    text = sweep_table_csv(rows)
    (out / "sweep.csv").write_text(text)
    print(text, end="")
    return EXIT_OK


def parse_levels(text, cfg: RunConfig) -> list[int]:
    if text is None:
        return list(cfg.eval.levels)
    try:
        levels = [int(x) for x in text.split(",")]
    except ValueError:
        raise ConfigError(f"--levels: expected comma-separated integers, got {text!r}") from None
    if not levels or any(not 1 <= lv <= 5 for lv in levels):
        raise ConfigError(f"--levels: AOI levels must lie in 1..5, got {text!r}")
    return levels


def cmd_grad_check(cfg: RunConfig, n_seeds: int) -> int:
    worst = max(policy_grad_check(cfg.model, cfg.train.seed + s) for s in range(n_seeds))
    print(f"variant {cfg.model.variant}: max relative error {worst:.3e} (tolerance {GRAD_TOL:.0e})")
    return EXIT_OK if worst < GRAD_TOL else EXIT_NUMERIC


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        print(f"# command: {args.command}  seed: {cfg.train.seed}")
        print(cfg.to_toml())
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        if args.command == "sweep":
            return cmd_sweep(cfg, parse_levels(args.levels, cfg))
        return cmd_grad_check(cfg, args.n_seeds)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
