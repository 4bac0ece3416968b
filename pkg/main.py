"""invlab: command-line entry point.

    python main.py verify [--quick]
    python main.py roundtrip --config configs/default.yaml [--strategy naive --strategy freeinv]
    python main.py ablate --preset branch-type --config configs/default.yaml [--write-golden]
    python main.py emit --record runs/default/record.joblib --formats csv,json,svg,html

Exit codes: 0 success, 2 invalid input (config, replay, arguments),
3 a failed oracle or invariant, or any other error during a run.
"""
import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import pandas as pd

import harness
from errors import ConfigError, InvariantError, InvLabError
from oracle import run_oracles
from utils.data_processing import dump_config, load_config

logger = logging.getLogger("invlab")

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_INVARIANT = 3

SUMMARY_COLUMNS = ["strategy", "mse_mean", "mse_std", "psnr_mean", "ssim_mean",
                   "mean_mismatch_l2_mean", "nfe_inversion_mean", "triangle_violations_mean"]


def configure_logging(verbose: int = 0, quiet: bool = False) -> None:
    level = os.getenv("INVLAB_LOG_LEVEL", "INFO").upper()
    if verbose:
        level = "DEBUG"
    elif quiet:
        level = "WARNING"
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _print_table(df: pd.DataFrame) -> None:
    with pd.option_context("display.width", 200, "display.max_columns", 20, "display.float_format", "{:.4g}".format):
        print(df.to_string(index=False))


def _parse_formats(text: str) -> List[str]:
    return [f.strip() for f in text.split(",") if f.strip()]


def _select_strategies(cfg, wanted: Optional[List[str]]):
    if not wanted:
        return cfg
    chosen = [s for s in cfg.strategies if s.name in wanted or s.variant in wanted]
    if not chosen:
        raise ConfigError(f"no configured strategy matches {wanted}", field="strategies")
    return replace(cfg, strategies=tuple(chosen))


def _finish_run(record: harness.RunRecord, formats: List[str]) -> int:
    out = Path(record.config.output_dir)
    harness.emit(record, formats, out)
    harness.save_record(record, out / "record.joblib")
    dump_config(record.config, out / "config.echo.yaml")
    _print_table(record.aggregates[SUMMARY_COLUMNS])
    if record.triangle_violations:
        raise InvariantError(f"{record.triangle_violations} triangle-bound violations in run {record.run_id}")
    return EXIT_OK


def cmd_verify(args) -> int:
    reports = run_oracles(quick=args.quick)
    table = pd.DataFrame([{"check": r.name, "discrepancy": r.discrepancy, "threshold": r.threshold,
                           "samples": r.samples, "status": "pass" if r.passed else "FAIL"} for r in reports])
    _print_table(table)
    failed = [r.name for r in reports if not r.passed]
    if failed:
        raise InvariantError(f"oracle checks failed: {', '.join(failed)}")
    return EXIT_OK


def cmd_roundtrip(args) -> int:
    cfg = _select_strategies(load_config(args.config), args.strategy)
    record_dir = str(Path(cfg.output_dir) / "records")
    record = harness.run_experiment(cfg, record_dir=record_dir)
    return _finish_run(record, _parse_formats(args.formats))


def cmd_ablate(args) -> int:
    base = load_config(args.config)
    record = harness.ablate(args.preset, base)
    code = _finish_run(record, _parse_formats(args.formats))
    if args.write_golden:
        harness.write_golden(record)
    elif args.check_golden:
        harness.check_golden(record)
        logger.info("golden %s matches", args.preset)
    return code


def cmd_emit(args) -> int:
    record = harness.load_record(args.record)
    written = harness.emit(record, _parse_formats(args.formats), args.out)
    for p in written:
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="invlab", description="DDIM inversion laboratory")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("-q", "--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run every oracle and property check")
    p.add_argument("--quick", action="store_true", help="fewer samples per check")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("roundtrip", help="run the strategies of a config")
    p.add_argument("--config", required=True)
    p.add_argument("--strategy", action="append", help="strategy name or variant; repeatable")
    p.add_argument("--formats", default="csv,json")
    p.set_defaults(func=cmd_roundtrip)

    p = sub.add_parser("ablate", help="run an ablation preset on a config's problem")
    p.add_argument("--preset", required=True, choices=harness.PRESETS)
    p.add_argument("--config", required=True)
    p.add_argument("--formats", default="csv,json,svg")
    golden = p.add_mutually_exclusive_group()
    golden.add_argument("--write-golden", action="store_true")
    golden.add_argument("--check-golden", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("emit", help="re-emit a saved run record")
    p.add_argument("--record", required=True)
    p.add_argument("--formats", default="csv,json,svg")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_emit)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    try:
        return args.func(args)
    except InvariantError as e:
        logger.error("%s", e)
        return EXIT_INVARIANT
    except (InvLabError, ValueError, OSError) as e:
        logger.error("%s", e)
        return EXIT_INVALID
    except Exception:
        logger.exception("run aborted")
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
