"""``tgnet`` command line.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 solver did not
converge (outputs are still written), 5 I/O error or missing upstream artifact.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import pipeline
from .assign import AssignmentError
from .demand import DemandError
from .network import NetworkError
from .pipeline import ConfigError, NotConverged, RunConfig
from .raster import RasterError
from .uot import UOTError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NOT_CONVERGED, EXIT_IO = 0, 2, 3, 4, 5

COMMANDS = ("validate", "demand", "assign", "rasterize", "compare", "extract", "synth",
            "experiment", "run")

log = logging.getLogger("tgnet")


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tgnet",
                                 description="Traffic-weighted road network comparison.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, type=Path, help="run configuration (JSON)")
    ap.add_argument("--role", choices=("ref", "target"),
                    help="network for assign/rasterize (default: both)")
    ap.add_argument("--out", type=Path, help="output directory (overrides the config)")
    ap.add_argument("--seed", type=_u64, help="random seed (overrides the config)")
    ap.add_argument("--force", action="store_true", help="ignore manifests and recompute")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return ap


def apply_thread_cap(env=os.environ) -> int | None:
    """Honour ``TGNET_THREADS``; returns the cap in effect (None when unset)."""
    raw = env.get("TGNET_THREADS")
    if raw in (None, ""):
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"TGNET_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"TGNET_THREADS must be a positive integer, got {raw!r}")
    import numba
    n = min(n, numba.config.NUMBA_NUM_THREADS)
    numba.set_num_threads(n)
    return n


def _setup_logging(out_dir: Path, verbose: bool) -> list[logging.Handler]:
    log.setLevel(logging.INFO)
    handlers: list[logging.Handler] = []
    out_dir.mkdir(parents=True, exist_ok=True)
    fh = logging.FileHandler(out_dir / "run.log", encoding="utf-8")
    fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    handlers.append(fh)
    sh = logging.StreamHandler(sys.stderr)
    sh.setLevel(logging.INFO if verbose else logging.WARNING)
    sh.setFormatter(logging.Formatter("tgnet: %(message)s"))
    handlers.append(sh)
    for h in handlers:
        log.addHandler(h)
    return handlers


def _roles(args) -> tuple[str, ...]:
    return (args.role,) if args.role else ("ref", "target")


def _dispatch(args, cfg: RunConfig) -> None:
    cmd = args.command
    if cmd == "validate":
        print(json.dumps(pipeline.validate(cfg), indent=1, sort_keys=True))
    elif cmd == "demand":
        pipeline.run_demand(cfg, args.force)
    elif cmd == "assign":
        for role in _roles(args):
            pipeline.run_assign(cfg, role, args.force)
    elif cmd == "rasterize":
        for role in _roles(args):
            pipeline.run_rasterize(cfg, role, args.force)
    elif cmd == "compare":
        res = pipeline.run_compare(cfg, args.force)
        if res is not None:
            print(f"tgw = {res.tgw!r} veh*km^2")
    elif cmd == "extract":
        print(pipeline.run_extract(cfg))
    elif cmd == "synth":
        print(pipeline.run_synth(cfg))
    elif cmd == "experiment":
        pipeline.run_experiment(cfg, args.force,
                                lambda r: log.info("%s tgw=%r reduction=%.3f", r["case_id"],
                                                   r["tgw"], r["length_reduction"]))
        print(cfg.output_dir / "experiment" / "experiment.csv")
    elif cmd == "run":
        pipeline.run_demand(cfg, args.force)
        for role in ("ref", "target"):
            pipeline.run_assign(cfg, role, args.force)
            pipeline.run_rasterize(cfg, role, args.force)
        res = pipeline.run_compare(cfg, args.force)
        if res is not None:
            print(f"tgw = {res.tgw!r} veh*km^2")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)  # exits with status 2 on bad usage
    handlers: list[logging.Handler] = []
    try:
        apply_thread_cap()
        cfg = RunConfig.load(args.config, seed=args.seed, output_dir=args.out)
        handlers = _setup_logging(cfg.output_dir, args.verbose)
        log.info("tgnet %s --config %s", args.command, args.config)
        _dispatch(args, cfg)
        return EXIT_OK
    except ConfigError as exc:
        print(f"tgnet: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NotConverged as exc:
        print(f"tgnet: not converged: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except (NetworkError, DemandError, AssignmentError, RasterError, UOTError) as exc:
        print(f"tgnet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"tgnet: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    finally:
        for h in handlers:
            log.removeHandler(h)
            h.close()


if __name__ == "__main__":
    sys.exit(main())
