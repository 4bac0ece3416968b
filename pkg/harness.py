"""Seeded experiments, ablation presets and result emission.

An experiment draws M starting latents from the configured mixture (one
substream per instance), runs every strategy on each, and aggregates the
per-instance metrics. Instances run through joblib; results are collected
in submission order so the emitted files never depend on scheduling.
"""
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import joblib
import numpy as np
import pandas as pd
from joblib import Parallel, delayed

import engine
from errors import ConfigError, InvariantError
from predictor import PredictorConfig, sample_mixture
from schedule import NoiseSchedule
from utils.data_processing import (
    HOST_ONLY_FIELDS, METRIC_COLUMNS, STEP_COLUMNS, ExperimentConfig, canonical_json, config_hash,
    load_config, make_predictor, make_schedule, resolve_n_jobs, write_run_record, write_summary, write_tables,
)
from utils import plots
from utils.metrics import MetricsReport, compute_metrics
from utils.rng import Substream, derive_seed

logger = logging.getLogger(__name__)

__version__ = "0.1.0"

__all__ = ["ExperimentConfig", "RunRecord", "load_config", "run_experiment", "ablate", "emit",
           "PRESETS", "preset_strategies", "load_golden", "write_golden", "check_golden", "save_record",
           "load_record"]

FORMATS = ("csv", "json", "svg", "html")
GOLDEN_DIR = Path(__file__).resolve().parent / "goldens"
GOLDEN_RTOL = 1e-12


@dataclass
class RunRecord:
    config: ExperimentConfig
    config_hash: str
    rows: List[Dict[str, Any]]
    step_rows: List[Dict[str, Any]]
    aggregates: pd.DataFrame
    reports: List[MetricsReport] = field(default_factory=list)
    timings: Dict[str, Any] = field(default_factory=dict)
    environment: Dict[str, Any] = field(default_factory=dict)
    preset: str = ""

    @property
    def run_id(self) -> str:
        return self.config_hash[:16]

    @property
    def triangle_violations(self) -> int:
        return int(sum(r["triangle_violations"] for r in self.rows))

    def strategy_names(self) -> List[str]:
        return list(self.aggregates["strategy"])

    def mean(self, strategy: str, metric: str) -> float:
        row = self.aggregates.loc[self.aggregates["strategy"] == strategy]
        if row.empty:
            raise KeyError(f"no strategy {strategy!r} in this record")
        return float(row[f"{metric}_mean"].iloc[0])

    def summary(self) -> Dict[str, Any]:
        """Deterministic JSON summary; timings are kept out of it."""
        strategies = []
        for s in self.config.strategies:
            agg = self.aggregates.loc[self.aggregates["strategy"] == s.name].iloc[0]
            strategies.append({
                "name": s.name,
                "config": s.to_dict(),
                "mean": {c: float(agg[f"{c}_mean"]) for c in METRIC_COLUMNS},
                "std": {c: float(agg[f"{c}_std"]) for c in METRIC_COLUMNS},
            })
        echo = {k: v for k, v in self.config.to_dict().items() if k not in HOST_ONLY_FIELDS}
        return {
            "run_id": self.run_id,
            "config_hash": self.config_hash,
            "preset": self.preset,
            "environment": self.environment,
            "config": echo,
            "instances": self.config.instances,
            "strategies": strategies,
        }


def environment_stamp() -> Dict[str, Any]:
    return {"precision": "float64", "version": __version__, "rng": "philox4x64-10"}


def _slug(name: str) -> str:
    return "".join(ch if ch.isalnum() else "-" for ch in name).strip("-").lower()


def _run_instance(strategy: engine.StrategyConfig, predictor: PredictorConfig, sched: NoiseSchedule,
                  x0: np.ndarray, seed: int, instance: int, record_dir: Optional[str],
                  hash_hex: str, dump_latents: bool):
    t0 = time.perf_counter()
    inv = engine.run_inversion(strategy, predictor, sched, x0, seed=seed)
    t1 = time.perf_counter()
    rec = engine.run_reconstruction(strategy, predictor, sched, inv.latents[-1], inv.replay())
    t2 = time.perf_counter()
    report = compute_metrics(inv, rec, sched, timings={"inversion_s": t1 - t0, "reconstruction_s": t2 - t1})
    if record_dir is not None:
        path = Path(record_dir) / _slug(strategy.name) / f"instance-{instance:04d}.json"
        write_run_record(inv, rec, path, hash_hex, dump_latents)
    return report


def _row(strategy: engine.StrategyConfig, instance: int, report: MetricsReport) -> Dict[str, Any]:
    return {
        "row": "instance",
        "instance": instance,
        "strategy": strategy.name,
        "mse": report.mse,
        "psnr": report.psnr,
        "ssim": report.ssim,
        "final_deviation_l2": float(report.deviation_l2[0]),
        "mean_mismatch_l2": float(np.mean(report.mismatch_l2)),
        "max_mismatch_l2": float(np.max(report.mismatch_l2)),
        "sum_bound": float(np.sum(report.bound)),
        "nfe_inversion": report.nfe_inversion,
        "nfe_reconstruction": report.nfe_reconstruction,
        "triangle_violations": report.triangle_violations,
        "strategy_config": canonical_json(strategy.to_dict()),
    }


def _step_rows(strategy: engine.StrategyConfig, instance: int, report: MetricsReport) -> List[Dict[str, Any]]:
    rows = []
    T = report.num_steps
    for t in range(T + 1):
        step = t < T
        rows.append({
            "strategy": strategy.name,
            "instance": instance,
            "step": t,
            "mismatch_mean_abs": float(report.mismatch_mean_abs[t]) if step else np.nan,
            "mismatch_l2": float(report.mismatch_l2[t]) if step else np.nan,
            "bound": float(report.bound[t]) if step else np.nan,
            "deviation_mean_abs": float(report.deviation_mean_abs[t]),
            "deviation_l2": float(report.deviation_l2[t]),
        })
    return rows


def aggregate(rows: Sequence[Dict[str, Any]]) -> pd.DataFrame:
    """Mean and population std (ddof=0) of every metric, per strategy, in row order."""
    df = pd.DataFrame(list(rows))
    grouped = df.groupby("strategy", sort=False)[METRIC_COLUMNS]
    means = grouped.mean().add_suffix("_mean")
    stds = grouped.std(ddof=0).add_suffix("_std")
    return pd.concat([means, stds], axis=1).reset_index()


def _write_partial(cfg: ExperimentConfig, hash_hex: str, done: List[Dict[str, Any]], error: Exception) -> None:
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        payload = {"status": "failed", "error": f"{type(error).__name__}: {error}",
                   "config_hash": hash_hex, "completed_runs": len(done), "rows": done}
        (out / "partial.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        logger.error("could not write partial.json to %s: %s", out, e)


def run_experiment(cfg: ExperimentConfig, record_dir: Optional[str] = None, preset: str = "") -> RunRecord:
    """Run every strategy on every instance of the config.

    Identical configs give identical records, whatever `n_jobs` is.
    """
    names = [s.name for s in cfg.strategies]
    if len(set(names)) != len(names):
        raise ConfigError(f"strategy names must be unique, got {names}", field="strategies")
    for i, s in enumerate(cfg.strategies):
        try:
            s.validate_for(cfg.grid)
        except ValueError as e:
            raise ConfigError(str(e), field=f"strategies[{i}]") from e

    hash_hex = config_hash(cfg)
    sched = make_schedule(cfg)
    predictor = make_predictor(cfg)
    x0s = [sample_mixture(predictor.mixture, Substream(cfg.seed, "x0", i), 1)[0] for i in range(cfg.instances)]
    jobs = [(s, i) for s in cfg.strategies for i in range(cfg.instances)]
    n_jobs = resolve_n_jobs(cfg)
    logger.info("run %s: %d strategies x %d instances, T=%d, n_jobs=%d",
                hash_hex[:16], len(cfg.strategies), cfg.instances, sched.num_steps, n_jobs)

    started = time.perf_counter()
    reports: List[MetricsReport] = []
    try:
        results = Parallel(n_jobs=n_jobs, return_as="generator")(
            delayed(_run_instance)(s, predictor, sched, x0s[i], derive_seed(cfg.seed, "instance", i, "strategy", s.seed),
                                   i, record_dir, hash_hex, cfg.dump_latents)
            for s, i in jobs
        )
        for report in results:
            reports.append(report)
    except Exception as e:
        logger.error("run %s failed after %d of %d runs: %s", hash_hex[:16], len(reports), len(jobs), e)
        _write_partial(cfg, hash_hex, [_row(s, i, r) for (s, i), r in zip(jobs, reports)], e)
        raise

    rows, step_rows = [], []
    for (s, i), report in zip(jobs, reports):
        rows.append(_row(s, i, report))
        step_rows.extend(_step_rows(s, i, report))
    timings = {
        "total_s": time.perf_counter() - started,
        "per_strategy": {
            s.name: {
                phase: float(np.sum([r.timings[phase] for (js, _), r in zip(jobs, reports) if js is s]))
                for phase in ("inversion_s", "reconstruction_s")
            }
            for s in cfg.strategies
        },
    }
    record = RunRecord(
        config=cfg,
        config_hash=hash_hex,
        rows=rows,
        step_rows=step_rows,
        aggregates=aggregate(rows),
        reports=reports,
        timings=timings,
        environment=environment_stamp(),
        preset=preset,
    )
    if record.triangle_violations:
        logger.warning("run %s: %d triangle-bound violations", record.run_id, record.triangle_violations)
    return record


# --- Ablations ----------------------------------------------------------------

PRESETS = ("mc-count", "branch-type", "transform-type", "inverse-noise")


def preset_strategies(preset: str) -> List[engine.StrategyConfig]:
    S = engine.StrategyConfig
    if preset == "mc-count":
        return [S("mbdi", branches=4)] + [
            S("mc", branches=4, samples=m, replay_selection=True) for m in (1, 2, 4)
        ]
    if preset == "branch-type":
        return [S("naive"), S("mbdi", branches=4),
                S("mbdi", branches=4, branch_source="rotations-of-input"), S("freeinv", pool="rotation")]
    if preset == "transform-type":
        return [S("naive")] + [S("freeinv", pool=p)
                               for p in ("flip", "patch-shuffle", "value-jitter", "rotation", "combination")]
    if preset == "inverse-noise":
        return [S("naive"), S("freeinv", pool="rotation"),
                S("freeinv", pool="rotation", inverse_noise_transform=True)]
    raise ValueError(f"Unknown ablation preset {preset!r}; expected one of {PRESETS}")


def ablate(preset: str, base: ExperimentConfig) -> RunRecord:
    """Run the strategy set of `preset` on the base config's problem."""
    strategies = preset_strategies(preset)
    cfg = replace(base, strategies=tuple(strategies), output_dir=str(Path(base.output_dir) / preset))
    logger.info("ablation %s: %s", preset, ", ".join(s.name for s in strategies))
    return run_experiment(cfg, preset=preset)


# --- Goldens ------------------------------------------------------------------
#
# A golden records each row's mean metrics and its MSE margin against the
# preset's first row. Goldens written here are bit-exact (GOLDEN_RTOL) and
# carry the config hash; a golden may instead carry its own "rtol" band and
# leave the hash out, in which case only the recorded keys are compared.

def golden_payload(record: RunRecord) -> Dict[str, Any]:
    names = record.strategy_names()
    baseline = names[0]
    base_mse = record.mean(baseline, "mse")
    rows = {}
    for name in names:
        mse = record.mean(name, "mse")
        rows[name] = {
            "mse_mean": mse,
            "psnr_mean": record.mean(name, "psnr"),
            "ssim_mean": record.mean(name, "ssim"),
            "mse_ratio_to_baseline": None if not base_mse else mse / base_mse,
        }
    return {"preset": record.preset, "config_hash": record.config_hash, "baseline": baseline,
            "instances": record.config.instances, "rtol": GOLDEN_RTOL, "rows": rows}


def golden_path(preset: Optional[str], golden_dir=GOLDEN_DIR) -> Path:
    return Path(golden_dir) / f"{preset or 'run'}.json"


def load_golden(preset: Optional[str], golden_dir=GOLDEN_DIR) -> Dict[str, Any]:
    path = golden_path(preset, golden_dir)
    if not path.exists():
        raise InvariantError(f"no golden recorded at {path}; record one with --write-golden")
    return json.loads(path.read_text(encoding="utf-8"))


def write_golden(record: RunRecord, golden_dir=GOLDEN_DIR) -> Path:
    path = golden_path(record.preset, golden_dir)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(golden_payload(record), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info("wrote golden %s", path)
    return path


def check_golden(record: RunRecord, golden_dir=GOLDEN_DIR) -> List[str]:
    """Differences between the record and its stored golden; raises if any."""
    expected = load_golden(record.preset, golden_dir)
    actual = golden_payload(record)
    rtol = float(expected.get("rtol", GOLDEN_RTOL))
    problems = []
    for key in ("config_hash", "baseline", "instances"):
        if key in expected and expected[key] != actual[key]:
            problems.append(f"{key} {actual[key]!r} != golden {expected[key]!r}")
    for name, want in expected["rows"].items():
        got = actual["rows"].get(name)
        if got is None:
            problems.append(f"{name}: missing from record")
            continue
        for key, value in want.items():
            if value is None or got[key] is None:
                if value != got[key]:
                    problems.append(f"{name}.{key}: {got[key]} != golden {value}")
            elif not np.isclose(got[key], value, rtol=rtol, atol=0.0):
                problems.append(f"{name}.{key}: {got[key]!r} != golden {value!r} (rtol {rtol:g})")
    if problems:
        raise InvariantError("golden mismatch: " + "; ".join(problems))
    logger.info("golden %s: %d rows within rtol %g", record.preset, len(expected["rows"]), rtol)
    return problems


# --- Emission -----------------------------------------------------------------

def emit(record: RunRecord, formats: Iterable[str], out_dir=None) -> List[Path]:
    """Write the requested formats; an empty set writes nothing."""
    formats = list(dict.fromkeys(formats))
    unknown = [f for f in formats if f not in FORMATS]
    if unknown:
        raise ValueError(f"Unknown output formats {unknown}; expected a subset of {FORMATS}")
    if not formats:
        return []
    out = Path(out_dir or record.config.output_dir)
    written: List[Path] = []
    if "csv" in formats:
        written += write_tables(record, out)
    if "json" in formats:
        written += write_summary(record, out)
        timings = out / "timings.json"
        timings.write_text(json.dumps(record.timings, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        written.append(timings)
    if "svg" in formats or "html" in formats:
        steps = pd.DataFrame(record.step_rows, columns=STEP_COLUMNS)
        if "svg" in formats:
            written += plots.write_svg_curves(steps, out)
        if "html" in formats:
            written.append(plots.write_html_report(record, steps, out))
    for p in written:
        logger.info("wrote %s", p)
    return written


def save_record(record: RunRecord, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    joblib.dump(record, path)
    return path


def load_record(path) -> RunRecord:
    record = joblib.load(Path(path))
    if not isinstance(record, RunRecord):
        raise ValueError(f"{path} does not hold a run record")
    return record
