"""Benchmark command line: gen, run, compare and demo."""

import argparse
import logging
import sys

import numpy as np
from pydantic import ValidationError

from .bench import compare, demo_step_geometry, generate_dataset, run_experiment, write_dataset
from .config import ExperimentConfig
from .errors import ConfigError, MalformedTrace, NotPositiveDefinite, UnknownSpec

logger = logging.getLogger("descent")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _methods(text: str) -> list[str]:
    return [m.strip() for m in text.split(",") if m.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="descent", description="Constrained-step gradient descent benchmarks")
    parser.add_argument("-v", "--verbose", action="store_true", help="per-iteration debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate the dataset of a config and write it as CSV")
    gen.add_argument("--config", required=True)
    gen.add_argument("--out", help="output directory (overrides out_dir)")
    gen.add_argument("--seed", type=int, help="dataset seed")

    run = sub.add_parser("run", help="run every configured method and write traces")
    run.add_argument("--config", required=True)
    run.add_argument("--out", help="output directory (overrides out_dir)")
    run.add_argument("--seed", type=int, help="master seed")
    run.add_argument("--methods", type=_methods, help="comma-separated metric kinds, e.g. identity,hessian")

    cmp = sub.add_parser("compare", help="summarize trace CSVs")
    cmp.add_argument("traces", nargs="+")
    cmp.add_argument("--threshold", type=float, help="loss threshold (default: 1.05x the best loss)")

    demo = sub.add_parser("demo", help="vanilla vs metric step for one gradient")
    demo.add_argument("--gradient", type=_floats, default=[1.0, 1.0])
    demo.add_argument("--metric", type=_floats, default=[100.0, 0.0, 0.0, 1.0], help="2x2 matrix, row-major")
    demo.add_argument("--eps", type=float, default=0.1)
    return parser


def _load(args) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config)
    overrides = {"out_dir": args.out, "seed": getattr(args, "seed", None), "methods": getattr(args, "methods", None)}
    return config.with_overrides(**overrides)


def cmd_gen(args) -> int:
    config = ExperimentConfig.load(args.config)
    spec = config.dataset
    if args.seed is not None:
        spec = spec.model_copy(update={"seed": args.seed})
    path = write_dataset(generate_dataset(spec), args.out or config.out_dir)
    print(path)
    return EXIT_OK


def cmd_run(args) -> int:
    config = _load(args)
    result = run_experiment(config)
    for method, path in result.trace_paths.items():
        print(f"{method}: {path}")
    print(result.manifest_path)
    if result.all_failed:
        logger.error("every method failed")
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_compare(args) -> int:
    print(compare(args.traces, args.threshold))
    return EXIT_OK


def cmd_demo(args) -> int:
    d = len(args.gradient)
    if len(args.metric) != d * d:
        raise ConfigError(f"--metric needs {d * d} entries for a gradient of length {d}")
    geometry = demo_step_geometry(np.array(args.gradient), np.array(args.metric).reshape(d, d), args.eps)
    sys.stdout.write(geometry.to_csv())
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "run": cmd_run, "compare": cmd_compare, "demo": cmd_demo}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ValidationError, UnknownSpec, MalformedTrace) as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    except NotPositiveDefinite as exc:
        logger.error("metric is not positive-definite: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
