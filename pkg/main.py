"""
Root entry point
  python main.py train-es   --config data/configs/flappy.yaml --seed 0 --workers 8
  python main.py train-dqn  --config data/configs/flappy.yaml
  python main.py pretrain   --config data/configs/flappy.yaml --remote-workers 4
  python main.py eval runs/es/seed_0/policy.evsd --env flappy --episodes 10
  python main.py report runs --window 20
  python main.py serve-worker --connect 10.0.0.5:7071
  python main.py transfer runs/es/seed_0/policy.evsd --out warm/
  python main.py serve
"""
from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from app.config import get_settings
from app.models import Algorithm, EnvConfig, EnvName, TransferMode
from app.modules.experiment_config import ConfigError, apply_overrides, load_config, parse_config
from app.modules.harness import (
    DEFAULT_SMOOTHING_WINDOW, X_AXES, ReportError, compare_report, evaluate_checkpoint, load_run_curves, run_experiment,
)
from app.modules.nn_core import CheckpointFormatError, ShapeMismatchError, load_checkpoint
from app.modules.transfer import TransferError, transfer_checkpoint
from app.modules.worker_protocol import GenerationAbortedError, ProtocolError, run_worker

logger = logging.getLogger("evodqn")

EXIT_OK = 0
EXIT_RUN_ERROR = 1
EXIT_CONFIG_ERROR = 2

_TRAIN_COMMANDS = {
    "train-es": Algorithm.ES,
    "train-dqn": Algorithm.DQN,
    "pretrain": Algorithm.ES_THEN_DQN,
}


def _host_port(value: str) -> tuple[str, int]:
    host, sep, port = value.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {value!r}")
    return host, int(port)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evodqn", description="ES / DQN / ES-pretrained DQN benchmark harness")
    parser.add_argument("--debug", action="store_true", help="DEBUG logging")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, algo in _TRAIN_COMMANDS.items():
        p = sub.add_parser(name, help=f"run the {algo.value} pipeline")
        p.add_argument("--config", help="YAML experiment config (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="single run seed (overrides config seeds)")
        p.add_argument("--workers", type=int, help="in-process ES workers")
        p.add_argument("--remote-workers", type=int, help="TCP workers to wait for before generation 0")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--config", help="take the environment from this config")
    p.add_argument("--env", choices=[e.value for e in EnvName], default=EnvName.FLAPPY.value)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trajectory", help="also dump the first episode as JSON lines to this path")

    p = sub.add_parser("report", help="comparison table and plot for a run directory")
    p.add_argument("directory")
    p.add_argument("--window", type=int, help="smoothing window (default: the config smoothing_window, else 20)")
    p.add_argument("--config", help="take the smoothing window from this config")
    p.add_argument("--x-axis", choices=X_AXES, default="wall_clock_s")

    p = sub.add_parser("serve-worker", help="connect to a coordinator and evaluate perturbations")
    p.add_argument("--connect", type=_host_port, help="coordinator HOST:PORT (defaults to WORKER_HOST/WORKER_PORT)")
    p.add_argument("--max-tasks", type=int, help="disconnect after this many tasks")

    p = sub.add_parser("transfer", help="turn an ES checkpoint into DQN online/target checkpoints")
    p.add_argument("checkpoint")
    p.add_argument("--mode", choices=[m.value for m in TransferMode], default=TransferMode.HIDDEN_ONLY.value)
    p.add_argument("--out", required=True)
    p.add_argument("--output-dim", type=int)
    p.add_argument("--seed", type=int, default=0)

    sub.add_parser("serve", help="start the results API")
    return parser


def _train(args: argparse.Namespace) -> int:
    config = load_config(args.config) if args.config else parse_config(None, "<defaults>")
    config = apply_overrides(config, args.seed, args.workers, args.remote_workers, args.out)
    config = config.model_copy(update={"algo": _TRAIN_COMMANDS[args.command]})
    results = run_experiment(config)
    for r in results:
        print(f"{r.algo.value}\tseed={r.seed}\tfinal={r.curve.rows[-1].mean_reward:.4f}\t{r.run_dir}")
    return EXIT_OK


def _eval(args: argparse.Namespace) -> int:
    env_config = load_config(args.config).env if args.config else EnvConfig(name=EnvName(args.env))
    policy = load_checkpoint(args.checkpoint)
    result = evaluate_checkpoint(policy, env_config, args.episodes, args.seed)
    if args.trajectory:
        from app.modules.dqn_trainer import default_eval_seeds
        from app.modules.envs import dump_trajectory, make_env

        dump_trajectory(policy, make_env(env_config), default_eval_seeds(args.seed, 1)[0], args.trajectory)
    print(result.model_dump_json(indent=2))
    return EXIT_OK


def _report(args: argparse.Namespace) -> int:
    window = args.window
    if window is None:
        window = load_config(args.config).smoothing_window if args.config else DEFAULT_SMOOTHING_WINDOW
    curves = load_run_curves(args.directory)
    report = compare_report(curves, args.directory, window, args.x_axis)
    print(report.model_dump_json(indent=2))
    return EXIT_OK


def _serve_worker(args: argparse.Namespace) -> int:
    settings = get_settings()
    host, port = args.connect or (settings.worker_host, settings.worker_port)
    served = run_worker(host, port, args.max_tasks)
    logger.info("Worker exiting after %d tasks", served)
    return EXIT_OK


def _transfer(args: argparse.Namespace) -> int:
    online, target = transfer_checkpoint(args.checkpoint, args.out, TransferMode(args.mode), args.output_dim, args.seed)
    print(f"{online}\n{target}")
    return EXIT_OK


def _serve(args: argparse.Namespace) -> int:
    import uvicorn

    settings = get_settings()
    uvicorn.run(
        "app.app:app",
        host=settings.host,
        port=settings.port,
        reload=settings.debug,
        log_level=settings.log_level,
    )
    return EXIT_OK


_HANDLERS = {
    "train-es": _train,
    "train-dqn": _train,
    "pretrain": _train,
    "eval": _eval,
    "report": _report,
    "serve-worker": _serve_worker,
    "transfer": _transfer,
    "serve": _serve,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    settings = get_settings()
    logging.basicConfig(
        level=logging.DEBUG if (args.debug or settings.debug) else logging.INFO,
        format="%(asctime)s | %(levelname)-8s | %(name)s | %(message)s",
    )
    try:
        return _HANDLERS[args.command](args)
    except ConfigError as e:
        for diagnostic in e.diagnostics:
            logger.error("%s: %s", e.source, diagnostic)
        return EXIT_CONFIG_ERROR
    except (
        CheckpointFormatError, ShapeMismatchError, TransferError, ReportError,
        GenerationAbortedError, ProtocolError, OSError,
    ) as e:
        logger.error("%s failed: %s", args.command, e)
        return EXIT_RUN_ERROR


if __name__ == "__main__":
    sys.exit(main())
