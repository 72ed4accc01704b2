"""Command-line entry point.

    python landau_cli.py train --preset bkw2d-smoke --out runs/smoke
    python landau_cli.py simulate --preset reference-bkw2d --out runs/ref
    python landau_cli.py evaluate runs/ref --preset reference-bkw2d
    python landau_cli.py verify --verbose
    python landau_cli.py rate-study --out runs/rate
    python landau_cli.py serve --port 8000

Exit codes: 0 success, 1 config error, 2 numeric failure, 3 I/O error.
"""
import argparse
import logging
import os
import sys
from typing import Dict, List, Optional

# Add the project root to path so we can import landau as a package
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from landau.config import LANDAU_LOG_LEVEL, LANDAU_RUNS_DIR, LANDAU_THREADS  # noqa: E402
from landau.errors import ArtifactError, ConfigError, LandauError  # noqa: E402
from landau.services import pipeline, verify  # noqa: E402
from landau.services.config_files import load_config  # noqa: E402
from landau.services.utils import configure_threads, utc_now  # noqa: E402

logger = logging.getLogger("landau")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="landau", description="PINN particle solver for the Landau equation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, needs_out: bool = True) -> None:
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--preset", help="named preset the config file is layered on")
        p.add_argument("--seed", type=int, help="override the experiment seed")
        p.add_argument("--threads", type=int, default=LANDAU_THREADS, help="worker threads (env LANDAU_THREADS)")
        p.add_argument("--verbose", "-v", action="store_true", help="debug logging")
        if needs_out:
            p.add_argument("--out", help="run directory (default: a fresh one under LANDAU_RUNS_DIR)")

    common(sub.add_parser("train", help="train the flow and score networks"))
    p = sub.add_parser("simulate", help="produce a trajectory with the configured solver")
    common(p)
    p.add_argument("--train-run", help="training run directory (pinnpm / pinn_score)")
    p = sub.add_parser("evaluate", help="metrics and certificates for a simulate run")
    common(p)
    p.add_argument("run", help="simulate run directory")
    p.add_argument("--train-run", help="training run directory (pinnpm / pinn_score)")
    common(sub.add_parser("rate-study", help="KDE convergence-rate study"))
    p = sub.add_parser("verify", help="run the invariant self-checks")
    p.add_argument("--verbose", "-v", action="store_true", help="print the per-check timing table")
    p.add_argument("--threads", type=int, default=LANDAU_THREADS)
    p.add_argument("--check", action="append", choices=sorted(verify.CHECKS), help="run only this check")
    p = sub.add_parser("serve", help="serve run directories over HTTP")
    p.add_argument("--runs-dir", default=LANDAU_RUNS_DIR)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--verbose", "-v", action="store_true")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, str]:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return overrides


def _out_dir(args: argparse.Namespace, config) -> str:
    if getattr(args, "out", None):
        return args.out
    if config.output_dir:
        return config.output_dir
    stamp = utc_now().strftime("%Y%m%dT%H%M%S")
    return os.path.join(LANDAU_RUNS_DIR, f"{args.command}-{stamp}")


def run(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else LANDAU_LOG_LEVEL,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "serve":
            import uvicorn
            from landau.main import create_app
            uvicorn.run(create_app(args.runs_dir), host=args.host, port=args.port,
                        log_level="debug" if args.verbose else "info")
            return 0

        configure_threads(args.threads)
        if args.command == "verify":
            results = verify.run_checks(args.check)
            if args.verbose:
                print(verify.format_table(results))
            failed = [r.name for r in results if not r.passed]
            if failed:
                print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
                return 2
            print(f"all {len(results)} checks passed")
            return 0

        if not args.config and not args.preset:
            raise ConfigError("give --config and/or --preset")
        config = load_config(args.config, args.preset, _overrides(args))
        out = _out_dir(args, config)
        if args.command == "train":
            print(pipeline.cmd_train(config, out))
        elif args.command == "simulate":
            print(pipeline.cmd_simulate(config, out, args.train_run))
        elif args.command == "evaluate":
            print(pipeline.cmd_evaluate(config, args.run, args.out, args.train_run))
        elif args.command == "rate-study":
            print(pipeline.cmd_rate_study(config, out))
        return 0
    except LandauError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return ConfigError.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return ArtifactError.exit_code


if __name__ == "__main__":
    sys.exit(run())
