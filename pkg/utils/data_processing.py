"""Experiment config files, run records and result tables.

Configs are YAML. Parsing is strict: unknown keys fail with a
`ConfigError` naming the dotted field path (and its line when known), and
every default is filled in so `dump_config` echoes the complete experiment.
"""
import hashlib
import json
import logging
import os
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import yaml

import schedule as sch
import transform as tf
from engine import StrategyConfig, Trajectory
from errors import ConfigError
from predictor import PATTERNS, GaussianMixture, PredictorConfig, mean_pattern, symmetrize

logger = logging.getLogger(__name__)

ROOT_DIR = Path(__file__).resolve().parent.parent
CONFIG_DIR = ROOT_DIR / "configs"

SYMMETRY_GROUPS = ("none", "rotations", "d4")
HOST_ONLY_FIELDS = ("output_dir", "n_jobs")

DEFAULT_SCHEDULE = {"builder": "linear", "train_steps": 1000, "beta_start": 0.00085,
                    "beta_end": 0.012, "infer_steps": 50}


@dataclass(frozen=True)
class ComponentDecl:
    """One declared mixture component.

    `pattern` wins over `mean`, which is either a constant fill or an explicit
    grid (stored flattened, row-major).
    """
    pattern: Optional[str] = "corner-blob"
    mean: Union[float, Tuple[float, ...]] = 0.0
    amplitude: float = 1.0
    weight: float = 1.0
    sigma: float = 0.5


@dataclass(frozen=True)
class MixtureDecl:
    components: Tuple[ComponentDecl, ...] = (ComponentDecl(),)
    symmetrize: str = "rotations"


@dataclass(frozen=True)
class PredictorDecl:
    """Perturbation settings; `omega` is one frequency or one per latent dimension (flattened)."""
    gamma: float = 0.05
    omega: Union[float, Tuple[float, ...]] = 1.0
    constant: Optional[float] = None


@dataclass(frozen=True)
class ExperimentConfig:
    schedule: Tuple[Tuple[str, Any], ...] = tuple(DEFAULT_SCHEDULE.items())
    grid: Tuple[int, int, int] = (16, 16, 1)
    mixture: MixtureDecl = MixtureDecl()
    predictor: PredictorDecl = PredictorDecl()
    strategies: Tuple[StrategyConfig, ...] = (StrategyConfig("naive"),)
    instances: int = 50
    seed: int = 0
    output_dir: str = "runs/default"
    dump_latents: bool = False
    n_jobs: int = 1

    @property
    def schedule_params(self) -> Dict[str, Any]:
        return dict(self.schedule)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schedule": self.schedule_params,
            "grid": list(self.grid),
            "mixture": {
                "symmetrize": self.mixture.symmetrize,
                "components": [_component_dict(c, self.grid) for c in self.mixture.components],
            },
            "predictor": _predictor_dict(self.predictor, self.grid),
            "strategies": [s.to_dict() for s in self.strategies],
            "instances": self.instances,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "dump_latents": self.dump_latents,
            "n_jobs": self.n_jobs,
        }


def _component_dict(c: "ComponentDecl", grid) -> Dict[str, Any]:
    out = asdict(c)
    if isinstance(c.mean, tuple):
        out["mean"] = np.asarray(c.mean).reshape(grid).tolist()
    return out


def _predictor_dict(p: "PredictorDecl", grid) -> Dict[str, Any]:
    out = asdict(p)
    if isinstance(p.omega, tuple):
        out["omega"] = np.asarray(p.omega).reshape(grid).tolist()
    return out


def _mean_grid(mean, grid) -> np.ndarray:
    if isinstance(mean, tuple):
        return np.asarray(mean, dtype=np.float64).reshape(grid)
    return np.full(grid, float(mean))


# --- Parsing ------------------------------------------------------------------

def _line_index(text: str) -> Dict[str, int]:
    """Dotted path -> 1-based line of every node in the document."""
    lines: Dict[str, int] = {}

    def walk(node, path):
        if path:
            lines[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            for key, value in node.value:
                walk(value, f"{path}.{key.value}" if path else str(key.value))
        elif isinstance(node, yaml.SequenceNode):
            for i, item in enumerate(node.value):
                walk(item, f"{path}[{i}]")

    root = yaml.compose(text, Loader=yaml.SafeLoader)
    if root is not None:
        walk(root, "")
    return lines


class _Reader:
    def __init__(self, lines: Dict[str, int]):
        self.lines = lines

    def fail(self, path: str, message: str):
        raise ConfigError(message, field=path, line=self.lines.get(path))

    def section(self, data: Any, path: str, allowed) -> Dict[str, Any]:
        if data is None:
            return {}
        if not isinstance(data, dict):
            self.fail(path, "expected a mapping")
        for key in data:
            if key not in allowed:
                child = f"{path}.{key}" if path else str(key)
                self.fail(child, f"unknown field (allowed: {', '.join(sorted(allowed))})")
        return data

    def number(self, data: Dict[str, Any], key: str, path: str, default, kind=float):
        value = data.get(key, default)
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(f"{path}.{key}" if path else key, f"expected a number, got {value!r}")
        if kind is int and float(value) != int(value):
            self.fail(f"{path}.{key}" if path else key, f"expected an integer, got {value!r}")
        return kind(value)


def _parse_schedule(r: _Reader, data) -> Tuple[Tuple[str, Any], ...]:
    if data is None:
        return tuple(DEFAULT_SCHEDULE.items())
    data = r.section(data, "schedule", {"builder", "train_steps", "beta_start", "beta_end", "infer_steps", "s"})
    builder = data.get("builder", "linear")
    if builder not in sch.BUILDERS:
        r.fail("schedule.builder", f"unknown builder {builder!r}; expected one of {sorted(sch.BUILDERS)}")
    if builder == "linear":
        params = {k: data.get(k, DEFAULT_SCHEDULE[k]) for k in ("train_steps", "beta_start", "beta_end", "infer_steps")}
        if "s" in data:
            r.fail("schedule.s", "only the cosine builder takes an offset")
    else:
        params = {"train_steps": data.get("train_steps", 1000), "infer_steps": data.get("infer_steps", 50),
                  "s": data.get("s", 0.008)}
        for key in ("beta_start", "beta_end"):
            if key in data:
                r.fail(f"schedule.{key}", "the cosine builder has no beta range")
    try:
        sch.build_schedule(builder, **params)
    except (TypeError, ValueError) as e:
        r.fail("schedule", str(e))
    return (("builder", builder),) + tuple(params.items())


def _parse_mean(r: "_Reader", item: Dict[str, Any], path: str, grid):
    value = item.get("mean", 0.0)
    if not isinstance(value, list):
        return r.number(item, "mean", path, 0.0)
    try:
        arr = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError):
        r.fail(f"{path}.mean", "explicit means must be nested lists of numbers")
    if arr.shape != tuple(grid):
        r.fail(f"{path}.mean", f"explicit mean has shape {arr.shape}, grid is {tuple(grid)}")
    if not np.all(np.isfinite(arr)):
        r.fail(f"{path}.mean", "explicit mean must be finite")
    return tuple(float(v) for v in arr.ravel())


def _parse_mixture(r: _Reader, data, grid) -> MixtureDecl:
    data = r.section(data, "mixture", {"components", "symmetrize"})
    group = data.get("symmetrize", "rotations")
    if group not in SYMMETRY_GROUPS:
        r.fail("mixture.symmetrize", f"expected one of {SYMMETRY_GROUPS}, got {group!r}")
    if group != "none" and grid[0] != grid[1]:
        r.fail("mixture.symmetrize", f"{group} symmetry needs H == W, got {grid[0]}x{grid[1]}")
    raw = data.get("components")
    if raw is None:
        return MixtureDecl(symmetrize=group)
    if not isinstance(raw, list) or not raw:
        r.fail("mixture.components", "expected a non-empty list")
    comps = []
    for i, item in enumerate(raw):
        path = f"mixture.components[{i}]"
        item = r.section(item, path, {"pattern", "mean", "amplitude", "weight", "sigma"})
        pattern = item.get("pattern", None if "mean" in item else "corner-blob")
        if pattern is not None and pattern not in PATTERNS:
            r.fail(f"{path}.pattern", f"unknown pattern {pattern!r}; expected one of {PATTERNS}")
        comp = ComponentDecl(
            pattern=pattern,
            mean=_parse_mean(r, item, path, grid),
            amplitude=r.number(item, "amplitude", path, 1.0),
            weight=r.number(item, "weight", path, 1.0),
            sigma=r.number(item, "sigma", path, 0.5),
        )
        if comp.weight <= 0:
            r.fail(f"{path}.weight", "must be positive")
        if comp.sigma <= 0:
            r.fail(f"{path}.sigma", "must be positive")
        comps.append(comp)
    return MixtureDecl(components=tuple(comps), symmetrize=group)


def _parse_omega(r: _Reader, data: Dict[str, Any], grid):
    value = data.get("omega", 1.0)
    if not isinstance(value, list):
        return r.number(data, "omega", "predictor", 1.0)
    d = int(np.prod(grid))
    try:
        arr = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError):
        r.fail("predictor.omega", "per-dimension omega must be a list of numbers")
    if arr.shape not in ((d,), tuple(grid)):
        r.fail("predictor.omega", f"per-dimension omega needs {d} values or shape {tuple(grid)}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        r.fail("predictor.omega", "omega must be finite")
    return tuple(float(v) for v in arr.ravel())


def _parse_predictor(r: _Reader, data, grid) -> PredictorDecl:
    data = r.section(data, "predictor", {"gamma", "omega", "constant"})
    decl = PredictorDecl(
        gamma=r.number(data, "gamma", "predictor", 0.05),
        omega=_parse_omega(r, data, grid),
        constant=r.number(data, "constant", "predictor", None),
    )
    if decl.gamma < 0:
        r.fail("predictor.gamma", "must be >= 0")
    return decl


STRATEGY_FIELDS = {f.name for f in fields(StrategyConfig)}


def _parse_strategies(r: _Reader, data, grid) -> Tuple[StrategyConfig, ...]:
    if data is None:
        return (StrategyConfig("naive"),)
    if not isinstance(data, list) or not data:
        r.fail("strategies", "expected a non-empty list")
    out = []
    for i, item in enumerate(data):
        path = f"strategies[{i}]"
        item = r.section(item, path, STRATEGY_FIELDS)
        try:
            strategy = StrategyConfig(**item)
            strategy.validate_for(grid)
        except (TypeError, ValueError) as e:
            r.fail(path, str(e))
        out.append(strategy)
    return tuple(out)


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        lines = _line_index(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ConfigError(f"{source}: invalid YAML: {getattr(e, 'problem', e)}",
                          line=None if mark is None else mark.line + 1) from e
    r = _Reader(lines)
    data = r.section(data, "", {f.name for f in fields(ExperimentConfig)})

    grid = data.get("grid", [16, 16, 1])
    if not (isinstance(grid, list) and len(grid) == 3 and all(isinstance(g, int) and g > 0 for g in grid)):
        r.fail("grid", f"expected [H, W, C] positive integers, got {grid!r}")
    grid = tuple(grid)

    cfg = ExperimentConfig(
        schedule=_parse_schedule(r, data.get("schedule")),
        grid=grid,
        mixture=_parse_mixture(r, data.get("mixture"), grid),
        predictor=_parse_predictor(r, data.get("predictor"), grid),
        strategies=_parse_strategies(r, data.get("strategies"), grid),
        instances=r.number(data, "instances", "", 50, int),
        seed=r.number(data, "seed", "", 0, int),
        output_dir=str(data.get("output_dir", "runs/default")),
        dump_latents=bool(data.get("dump_latents", False)),
        n_jobs=r.number(data, "n_jobs", "", 1, int),
    )
    if cfg.instances < 1:
        r.fail("instances", "need at least one instance")
    if cfg.seed < 0:
        r.fail("seed", "must be non-negative")
    return cfg


def load_config(path) -> ExperimentConfig:
    """Read and validate an experiment config file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    cfg = parse_config(path.read_text(encoding="utf-8"), source=str(path))
    logger.info("loaded config %s (hash %s)", path, config_hash(cfg)[:16])
    return cfg


def dump_config(cfg: ExperimentConfig, path=None) -> str:
    """Fully populated YAML echo of `cfg`; written to `path` when given."""
    text = yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=None)
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: ExperimentConfig) -> str:
    payload = {k: v for k, v in cfg.to_dict().items() if k not in HOST_ONLY_FIELDS}
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def resolve_n_jobs(cfg: ExperimentConfig) -> int:
    """Worker count, overridable with INVLAB_N_JOBS (never changes results)."""
    env = os.getenv("INVLAB_N_JOBS")
    if env is None:
        return cfg.n_jobs
    try:
        n = int(env)
    except ValueError:
        warnings.warn(f"Ignoring INVLAB_N_JOBS={env!r}: not an integer")
        return cfg.n_jobs
    if n != cfg.n_jobs:
        warnings.warn(f"INVLAB_N_JOBS={n} overrides n_jobs={cfg.n_jobs} from the config")
    return n


# --- Building -----------------------------------------------------------------

def make_schedule(cfg: ExperimentConfig) -> sch.NoiseSchedule:
    params = cfg.schedule_params
    return sch.build_schedule(params.pop("builder"), **params)


def symmetry_group(name: str) -> List[tf.TransformSpec]:
    if name == "rotations":
        return [tf.rotation(1)]
    if name == "d4":
        return [tf.rotation(1), tf.TransformSpec("flip-h")]
    return []


def make_mixture(cfg: ExperimentConfig) -> GaussianMixture:
    decl = cfg.mixture
    means = []
    for c in decl.components:
        if c.pattern is not None:
            means.append(mean_pattern(c.pattern, cfg.grid, c.amplitude))
        else:
            means.append(c.amplitude * _mean_grid(c.mean, cfg.grid))
    weights = np.array([c.weight for c in decl.components])
    mix = GaussianMixture(weights=weights / weights.sum(), means=np.stack(means),
                          sigmas=[c.sigma for c in decl.components])
    group = symmetry_group(decl.symmetrize)
    return symmetrize(mix, group) if group else mix


def make_predictor(cfg: ExperimentConfig) -> PredictorConfig:
    decl = cfg.predictor
    mixture = make_mixture(cfg)
    if decl.constant is not None:
        return PredictorConfig(mixture=mixture, constant=np.full(cfg.grid, decl.constant))
    omega = np.asarray(decl.omega).reshape(cfg.grid) if isinstance(decl.omega, tuple) else decl.omega
    return PredictorConfig(mixture=mixture, gamma=decl.gamma, omega=omega)


# --- Records ------------------------------------------------------------------

def checksum(arr: np.ndarray) -> str:
    data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return hashlib.sha256(data).hexdigest()[:16]


def write_run_record(inv: Trajectory, rec: Trajectory, path, config_hash_hex: str = "",
                     dump_latents: bool = False) -> Path:
    """Header plus one record per step; latents go to a sibling .npz when dumped."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    steps = []
    for t in range(inv.num_steps):
        entry = {
            "step": t,
            "inversion_latent": checksum(inv.latents[t + 1]),
            "reconstruction_latent": checksum(rec.latents[t]),
            "inversion_noise": checksum(inv.noises[t]),
            "reconstruction_noise": checksum(rec.noises[t]),
        }
        if inv.schedule is not None:
            entry["transform"] = inv.schedule[t].to_dict()
        if inv.selections is not None and inv.strategy.variant == "mc":
            entry["inversion_selections"] = [int(i) for i in inv.selections[t]]
            entry["reconstruction_selections"] = [int(i) for i in rec.selections[t]]
        steps.append(entry)
    header = {
        "config_hash": config_hash_hex,
        "strategy": inv.strategy.to_dict(),
        "seed": inv.seed,
        "num_steps": inv.num_steps,
        "nfe": {"inversion": inv.nfe, "reconstruction": rec.nfe},
    }
    if inv.schedule is not None:
        header["transform_pool"] = inv.schedule.pool.to_dict()
        header["schedule_digest"] = inv.schedule.digest()
    path.write_text(json.dumps({"header": header, "steps": steps}, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    if dump_latents:
        np.savez_compressed(path.with_suffix(".npz"), inversion=inv.latents, reconstruction=rec.latents,
                            inversion_noises=inv.noises, reconstruction_noises=rec.noises)
    return path


RESULT_COLUMNS = [
    "row", "instance", "strategy", "mse", "psnr", "ssim", "final_deviation_l2",
    "mean_mismatch_l2", "max_mismatch_l2", "sum_bound", "nfe_inversion", "nfe_reconstruction",
    "triangle_violations", "strategy_config",
]
METRIC_COLUMNS = RESULT_COLUMNS[3:13]
STEP_COLUMNS = ["strategy", "instance", "step", "mismatch_mean_abs", "mismatch_l2", "bound",
                "deviation_mean_abs", "deviation_l2"]


def results_frame(rows: List[Dict[str, Any]], aggregates: pd.DataFrame) -> pd.DataFrame:
    """Per-instance rows followed by one mean and one std row per strategy."""
    body = pd.DataFrame(rows, columns=RESULT_COLUMNS)
    extra = []
    for strategy, agg in aggregates.groupby("strategy", sort=False):
        config = body.loc[body["strategy"] == strategy, "strategy_config"].iloc[0]
        for stat in ("mean", "std"):
            row = {"row": stat, "instance": "", "strategy": strategy, "strategy_config": config}
            row.update({c: agg[f"{c}_{stat}"].iloc[0] for c in METRIC_COLUMNS})
            extra.append(row)
    return pd.concat([body, pd.DataFrame(extra, columns=RESULT_COLUMNS)], ignore_index=True)


def write_tables(record, out_dir) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = out_dir / "results.csv"
    results_frame(record.rows, record.aggregates).to_csv(results, index=False, lineterminator="\n")
    steps = out_dir / "steps.csv"
    pd.DataFrame(record.step_rows, columns=STEP_COLUMNS).to_csv(steps, index=False, lineterminator="\n")
    return [results, steps]


def write_summary(record, out_dir) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "summary.json"
    path.write_text(json.dumps(record.summary(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return [path]
