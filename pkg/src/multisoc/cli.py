"""Command line entry points: ``train``, ``eval`` and ``replay``.

Exit codes: 0 on success, 1 on runtime failures, 2 on configuration errors
(including missing config files and checkpoint/architecture mismatches).
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

from . import mappo, policy as pol
from .config import ConfigError, TrainConfig, apply_overrides, config_from_flat, dump_config, \
    load_config, parse_lines
from .sim import MetricsReport, write_episode_csv

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("multisoc")


def _parse_sets(items) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _single_thread_if(deterministic: bool) -> None:
    if deterministic:
        os.environ["MULTISOC_THREADS"] = "1"


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    apply_overrides(cfg, _parse_sets(args.set))
    if args.seed is not None:
        apply_overrides(cfg, {"seed": str(args.seed)})
    cfg.validate()
    _single_thread_if(args.deterministic)
    out = Path(args.out)

    def progress(row):
        if row["iteration"] % args.log_every == 0:
            log.info("step %d  reward %.3f  success %.3f  collision %.3f  tau %.3f",
                     row["step"], row["episode_reward"], row["success_rate"],
                     row["collision_rate"], row["tau"])

    result = mappo.train(cfg, out, resume=args.checkpoint, progress=progress)
    print(f"trained {result.final_step} steps; {len(result.checkpoints)} checkpoint(s) in "
          f"{out / 'checkpoints'}")
    return EXIT_OK


def eval_config(meta: dict, config_path=None, sets=None) -> TrainConfig:
    """Checkpoint configuration with an optional scenario file and overrides on top."""
    cfg = config_from_flat(meta["config"]) if meta.get("config") else TrainConfig()
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        apply_overrides(cfg, parse_lines(path.read_text(), str(path)))
    apply_overrides(cfg, sets or {})
    return cfg.validate()


def checkpoint_temperature(meta: dict, cfg: TrainConfig) -> float:
    return pol.temperature(int(meta.get("step", 0)), cfg.temperature_at_beginning,
                           cfg.base_temperature, cfg.min_temperature, cfg.num_env_steps)


def cmd_eval(args) -> int:
    if args.checkpoint is None:
        raise ConfigError("eval needs --checkpoint")
    path = Path(args.checkpoint)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    _, meta = mappo.numcore.load_checkpoint(path)
    cfg = eval_config(meta, args.config, _parse_sets(args.set))
    _single_thread_if(args.deterministic)
    policy, _, meta = mappo.load_policy_checkpoint(path, cfg.arch)
    tau = checkpoint_temperature(meta, cfg)
    seed = args.seed if args.seed is not None else 1000
    controller = mappo.PolicyController(policy, tau, deterministic=args.deterministic)
    report, logs = mappo.evaluate(controller, cfg.scenario, args.episodes, seed)
    print(report.table())
    if args.out:
        out = Path(args.out)
        (out / "episodes").mkdir(parents=True, exist_ok=True)
        dump_config(cfg, out / "config.resolved")
        with open(out / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(MetricsReport.COLUMNS + ("episodes", "robots", "seed"))
            d = report.as_dict()
            w.writerow([repr(d[c]) for c in MetricsReport.COLUMNS] + [d["episodes"], d["robots"], seed])
        for e, lg in enumerate(logs):
            write_episode_csv(lg, out / "episodes" / f"episode_{e:05d}.csv")
    return EXIT_OK


def cmd_replay(args) -> int:
    from .replay import render_episode

    src = Path(args.episode)
    if not src.is_file():
        raise FileNotFoundError(f"episode file not found: {src}")
    out = Path(args.out) if args.out else src.with_suffix(".svg")
    n = render_episode(src, out)
    print(f"rendered {n} entities to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="multisoc", description="Multi-robot crowd navigation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a policy")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.add_argument("--checkpoint", help="resume from this checkpoint")
    t.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible")
    t.add_argument("--set", action="append", metavar="KEY=VALUE")
    t.add_argument("--log-every", type=int, default=25)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint")
    e.add_argument("--config", help="scenario keys applied over the checkpoint's configuration")
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--seed", type=int)
    e.add_argument("--out")
    e.add_argument("--deterministic", action="store_true", help="act with the mean action")
    e.add_argument("--set", action="append", metavar="KEY=VALUE")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("replay", help="render an episode CSV to SVG")
    r.add_argument("episode")
    r.add_argument("--out")
    r.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                        format="%(message)s")
    if getattr(args, "episodes", 1) is not None and getattr(args, "episodes", 1) < 1:
        print("error: --episodes must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, mappo.CheckpointMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failures become exit code 1
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
