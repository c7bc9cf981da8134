"""Command line entry points: ``train``, ``verify``, ``rollout`` and ``eval``.

Exit codes: 0 success, 1 a verification or training failure, 2 bad input
(unknown config key, missing file, malformed checkpoint, unknown suite).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from .checkpoint import CheckpointError
from .config import ConfigError, dump_yaml, load_config

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2
OUTPUT_ROOT_ENV = "SLAC_OUTPUT_ROOT"

logger = logging.getLogger("slac")


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def default_out_dir(cfg) -> Path:
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    return root / f"{cfg.algorithm}-{cfg.env.name}-seed{cfg.seed}"


# ------------------------------------------------------------------ train
def cmd_train(args) -> int:
    from .trainer import Trainer, TrainingAborted

    try:
        if args.resume:
            trainer = Trainer.resume(args.resume, out_dir=args.out or Path(args.resume).parent)
        else:
            cfg = load_config(args.config, args.override)
            out_dir = Path(args.out) if args.out else default_out_dir(cfg)
            out_dir.mkdir(parents=True, exist_ok=True)
            metrics = out_dir / "metrics.jsonl"
            if metrics.exists():
                metrics.unlink()
            dump_yaml(cfg.resolved(), out_dir / "config.yaml")
            trainer = Trainer(cfg, out_dir=out_dir)
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError) as exc:
        _err(str(exc))
        return EXIT_INPUT
    try:
        trainer.train(max_iterations=args.max_iterations)
    except TrainingAborted as exc:
        _err(str(exc))
        return EXIT_FAIL
    trainer.save(trainer.out_dir / "checkpoint.ckpt")
    evals = [m for m in trainer.metrics if m["event"] == "eval"]
    summary = {"env_steps": trainer.env_steps, "grad_steps": trainer.grad_steps,
               "final_return": evals[-1]["mean_return"] if evals else None, "out_dir": str(trainer.out_dir)}
    print(json.dumps(summary))
    return EXIT_OK


# ----------------------------------------------------------------- verify
def _suite_kwargs(items: list[str]) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"suite argument must look like key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k] = yaml.safe_load(v)
    return out


def cmd_verify(args) -> int:
    from .verify import SUITES, run_suite

    if args.suite not in SUITES:
        _err(f"unknown suite {args.suite!r}; valid suites: {', '.join(SUITES)}")
        return EXIT_INPUT
    try:
        kwargs = _suite_kwargs(args.arg)
        checks, elapsed = run_suite(args.suite, **kwargs)
    except (ConfigError, TypeError) as exc:
        _err(str(exc))
        return EXIT_INPUT
    for c in checks:
        print(c.line())
    ok = all(c.passed for c in checks)
    print(f"suite {args.suite}: {'PASS' if ok else 'FAIL'} ({sum(c.passed for c in checks)}/{len(checks)}, "
          f"{elapsed:.1f}s)")
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------- rollout
def _load(checkpoint_path: str):
    from .trainer import load_agent

    if not Path(checkpoint_path).is_file():
        raise CheckpointError(f"checkpoint not found: {checkpoint_path}")
    return load_agent(checkpoint_path)


def cmd_rollout(args) -> int:
    from .latent_model import dump_rollouts
    from .replay import ReplayBuffer, ReplayError

    try:
        agent, cfg, arrays = _load(args.checkpoint)
        if agent.model is None:
            raise CheckpointError("checkpoint has no latent model (sac run)")
        buf = ReplayBuffer.from_state_arrays(arrays, agent.obs_shape, agent.action_dim)
        win = buf.sample_windows(args.windows, cfg.tau, np.random.default_rng(args.seed))
    except (CheckpointError, ReplayError, KeyError, ValueError) as exc:
        _err(str(exc))
        return EXIT_INPUT
    out = Path(args.out)
    if out.exists():
        out.unlink()
    rng = np.random.default_rng(args.seed + 1)
    modes = ["posterior", "conditional_prior", "prior"] if args.mode == "all" else [args.mode]
    report = {}
    for mode in modes:
        pred = agent.model.generate_rollout(mode, win, rng=rng)
        dump_rollouts(out, mode, pred, win.x)
        err = (pred - win.x) ** 2
        mask = win.valid_mask.reshape(win.valid_mask.shape + (1,) * (err.ndim - 2))
        report[mode] = float((err * mask).sum() / (mask.sum() * np.prod(err.shape[2:])))
    print(json.dumps({"out": str(out), "reconstruction_mse": report}))
    return EXIT_OK


# ------------------------------------------------------------------- eval
def cmd_eval(args) -> int:
    from .envs import make_env
    from .trainer import evaluate

    try:
        agent, cfg, _ = _load(args.checkpoint)
    except (CheckpointError, KeyError, ValueError) as exc:
        _err(str(exc))
        return EXIT_INPUT
    rng = np.random.default_rng(args.seed)
    env = make_env(cfg.env, seed=int(rng.integers(2 ** 63)))
    stochastic = not args.deterministic

    def policy_fn(x, a, mask, r):
        return agent.act(x, a, mask, r, stochastic=stochastic)

    stats = evaluate(policy_fn, env, args.episodes or cfg.eval_episodes, rng, cfg.tau, agent.action_dim)
    print(json.dumps({"mean_return": stats.mean, "std_return": stats.std, "returns": stats.returns}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slac", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="pretrain and train an agent")
    t.add_argument("--config", help="YAML config file (defaults apply to missing keys)")
    t.add_argument("--override", "-o", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted override, e.g. seed=7 or env.name=lqr; repeatable")
    t.add_argument("--out", help=f"run directory (default ${OUTPUT_ROOT_ENV}/<algo>-<env>-seed<n>)")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--max-iterations", type=int, default=None)
    t.set_defaults(fn=cmd_train)

    v = sub.add_parser("verify", help="run a property suite")
    v.add_argument("suite")
    v.add_argument("--arg", action="append", default=[], metavar="KEY=VALUE",
                   help="keyword argument for the suite, e.g. seeds=10 or corrupt=true")
    v.set_defaults(fn=cmd_verify)

    r = sub.add_parser("rollout", help="dump model rollouts on replayed windows as JSON lines")
    r.add_argument("checkpoint")
    r.add_argument("--mode", choices=["posterior", "conditional_prior", "prior", "all"], default="all")
    r.add_argument("--out", required=True)
    r.add_argument("--windows", type=int, default=16)
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(fn=cmd_rollout)

    e = sub.add_parser("eval", help="evaluate a checkpointed policy")
    e.add_argument("checkpoint")
    e.add_argument("--episodes", type=int, default=None)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--deterministic", action="store_true", help="act with tanh(mean) instead of sampling")
    e.set_defaults(fn=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
