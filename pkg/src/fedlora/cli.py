"""Command-line entry point.

``fedlora run`` executes one experiment; ``fedlora compare`` runs every
aggregation strategy on identical seeds and partitions and writes one merged
CSV. Settings are layered: built-in defaults, then a JSON config file
(``--config``), then command-line flags.

Exit codes: 0 success, 2 configuration error, 3 runtime failure, 4 I/O failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

from .config import CONFIG_KEYS, PARTITIONS, STRATEGIES, ConfigError, ExperimentConfig, flatten, from_flat, to_flat, with_strategy
from .fedsim import Federation, write_traces
from .privacy import DISTRIBUTIONS
from .reporting import summarize, summary_line, write_comparison, write_metrics

EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 2, 3, 4
THREADS_ENV = "FEDLORA_THREADS"

log = logging.getLogger("fedlora")

# flag destination -> config key
_FLAG_KEYS = {
    "strategy": "strategy",
    "clients": "clients",
    "rank": "rank",
    "rounds": "rounds",
    "partition": "partition",
    "noise_scale": "noise.scale",
    "noise_dist": "noise.distribution",
    "seed": "seed",
    "out": "out",
    "threads": "threads",
}


def _flag_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--clients", type=int)
    p.add_argument("--rank", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--partition", choices=PARTITIONS)
    p.add_argument("--noise-scale", type=float, help="enable additive noise with this scale")
    p.add_argument("--noise-dist", choices=DISTRIBUTIONS)
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="JSON file of configuration keys")
    p.add_argument("--out", help="output path prefix")
    p.add_argument("--threads", type=int, help=f"client worker threads (fallback: ${THREADS_ENV})")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def load_config_file(path: str | Path) -> dict[str, Any]:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"{path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config", f"{path} must hold a JSON object")
    return flatten(raw)


def resolve(flags: dict[str, Any], file_values: dict[str, Any] | None = None,
            env: dict[str, str] | None = None) -> ExperimentConfig:
    """Layer defaults < config file < environment fallback < flags."""
    values = dict(file_values or {})
    env = os.environ if env is None else env
    if flags.get("threads") is None and env.get(THREADS_ENV):
        try:
            values["threads"] = int(env[THREADS_ENV])
        except ValueError:
            raise ConfigError("threads", f"${THREADS_ENV} must be an integer, got {env[THREADS_ENV]!r}") from None
    for dest, key in _FLAG_KEYS.items():
        if flags.get(dest) is not None:
            values[key] = flags[dest]
    return from_flat(values)


def parse_config(argv: Sequence[str], config_path: str | Path | None = None,
                 env: dict[str, str] | None = None) -> ExperimentConfig:
    """Resolve an :class:`ExperimentConfig` from flags and an optional file.

    ``config_path`` is used when ``--config`` is not among the flags.
    """
    ns = _flag_parser().parse_args(list(argv))
    path = ns.config or config_path
    file_values = load_config_file(path) if path else {}
    return resolve(vars(ns), file_values, env)


def _execute(config: ExperimentConfig) -> tuple[Any, Federation]:
    fed = Federation(config)
    records = fed.run()
    return summarize(records, to_flat(config)), fed


def run(config: ExperimentConfig) -> int:
    try:
        summary, fed = _execute(config)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:
        print(f"error: run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    try:
        write_metrics(summary, config.out)
        if config.trace:
            write_traces(config.out, fed.traces)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(summary_line(summary, config.strategy))
    return 0


def compare(config: ExperimentConfig) -> int:
    summaries = {}
    try:
        for strategy in STRATEGIES:
            summaries[strategy], _ = _execute(with_strategy(config, strategy))
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:
        print(f"error: run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    try:
        write_comparison(summaries, config.out)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    for strategy, summary in summaries.items():
        print(summary_line(summary, strategy))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedlora",
        description="Federated LoRA aggregation simulator.",
        epilog=f"Config file keys: {', '.join(CONFIG_KEYS)}",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    flags = _flag_parser()
    sub.add_parser("run", parents=[flags], help="run one experiment")
    sub.add_parser("compare", parents=[flags], help="run all strategies on identical seeds")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        file_values = load_config_file(args.config) if args.config else {}
        config = resolve(vars(args), file_values)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run(config) if args.command == "run" else compare(config)


if __name__ == "__main__":
    sys.exit(main())
