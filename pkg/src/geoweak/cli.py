"""Command-line entry point: ``geoweak <subcommand> --run-dir DIR [--config FILE]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from geoweak.config import ConfigError, RunConfig, dump_config, load_config
from geoweak.errors import GeoweakError
from geoweak.pipeline import STAGES, Pipeline, setup_logging, teardown_logging

log = logging.getLogger("geoweak.cli")

EXIT_FAILURE = 1
EXIT_CONFIG = 2


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--run-dir", default="run", help="run directory (default: ./run)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="geoweak", description="Weakly supervised school detection pipeline.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in STAGES:
        sp = sub.add_parser(name, parents=[common], help=f"run the {name} stage")
        if name == "tune":
            sp.add_argument("--budget", type=int)
            sp.add_argument("--metric", choices=("f1", "map50"))
            sp.add_argument("--space", help="builtin space name or a YAML/JSON file")
            sp.add_argument("--strategy", choices=("ecp", "random"))
    demo = sub.add_parser("e2e-demo", parents=[common], help="build a synthetic corpus and run every stage offline")
    demo.add_argument("--hpo", action="store_true", help="also run hyperparameter tuning")
    return p


def _overrides(args: argparse.Namespace) -> dict:
    over: dict = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.command == "tune":
        hpo = {k: getattr(args, k) for k in ("budget", "metric", "space", "strategy") if getattr(args, k) is not None}
        over["hpo"] = {"enabled": True, **hpo}
    return over


def run_demo(run_dir: str | Path, cfg: Optional[RunConfig] = None, hpo: bool = False,
             corpus_kwargs: Optional[dict] = None) -> Pipeline:
    """Build the synthetic corpus under ``run_dir/synthetic`` and run every stage."""
    from geoweak.synthetic import build_demo_corpus

    run_dir = Path(run_dir)
    cfg = cfg or RunConfig()
    corpus_dir = run_dir / "synthetic"
    if not (corpus_dir / "golden" / "manifest.jsonl").exists():
        build_demo_corpus(corpus_dir, seed=cfg.seed, **(corpus_kwargs or {}))
    over = {
        "paths": {"points": str(corpus_dir / "points.csv"), "tiles": str(corpus_dir / "tiles"),
                  "scenes": str(corpus_dir / "scenes"), "golden_manifest": str(corpus_dir / "golden" / "manifest.jsonl"),
                  "artifacts": str(run_dir / "artifacts"), "cache": str(run_dir / "cache")},
        "geodata": {"imagery": {"adapter": "local"}, "overpass": {"region": None}},
        "autolabel": {"backend": "synthetic"},
    }
    if hpo:
        over["hpo"] = {"enabled": True}
    cfg = load_config(None, _merge_cfg(cfg, over))
    pipe = Pipeline(cfg, run_dir)
    dump_config(cfg, run_dir / "config.yaml")
    for stage in STAGES:
        pipe.run(stage)
    return pipe


def _merge_cfg(cfg: RunConfig, over: dict) -> dict:
    from geoweak.config import _merge

    return _merge(cfg.to_dict(), over)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args))
    except ConfigError as exc:
        print(f"geoweak: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"geoweak: cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    run_dir = Path(args.run_dir)
    log_path = setup_logging(run_dir, args.verbose)
    base = Path(args.config).resolve().parent if args.config else Path.cwd()
    t0 = time.perf_counter()
    try:
        if args.command == "e2e-demo":
            pipe = run_demo(run_dir, cfg, hpo=args.hpo)
            final = pipe.final_report()
            print(json.dumps({"regime": final.regime, **final.metrics()}, indent=1))
        else:
            pipe = Pipeline(cfg, run_dir, base)
            if not (run_dir / "config.yaml").exists():
                dump_config(cfg, run_dir / "config.yaml")
            rec = pipe.run(args.command)
            print(json.dumps(rec.get("summary", {}), indent=1, default=str))
    except ConfigError as exc:
        print(f"geoweak: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GeoweakError, OSError, ValueError) as exc:
        log.debug("traceback", exc_info=True)
        reason = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        log.info("%s failed: %s", args.command, reason, extra={"event": {"status": "failed"}})
        print(f"geoweak: {args.command} failed: {reason} (log: {log_path})", file=sys.stderr)
        return EXIT_FAILURE
    else:
        log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
        return 0
    finally:
        teardown_logging()


if __name__ == "__main__":
    sys.exit(main())
