"""DDIM coefficient schedules.

A `NoiseSchedule` holds the T+1 cumulative signal coefficients
``alpha_bar[0..T]`` of the inference grid. Builders sample the training
betas on ``train_steps + 1`` levels and keep every ``stride``-th cumulative
product starting at level 0 (leading-timestep convention), so
``alpha_bar[0] = 1 - beta_0`` and ``alpha_bar[T]`` is the product up to
level ``T * stride``.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Sequence

import numpy as np

logger = logging.getLogger(__name__)

CONVENTION = "leading-even-stride"


@dataclass(frozen=True)
class NoiseSchedule:
    num_steps: int
    alpha_bar: np.ndarray
    provenance: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        values = np.array(self.alpha_bar, dtype=np.float64)
        if self.num_steps < 1:
            raise ValueError(f"num_steps must be positive, got {self.num_steps}")
        if values.shape != (self.num_steps + 1,):
            raise ValueError(
                f"alpha_bar needs {self.num_steps + 1} entries, got {values.shape[0] if values.ndim else 0}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("alpha_bar contains non-finite values")
        if values[0] > 1.0 or values[-1] <= 0.0:
            raise ValueError("alpha_bar must lie in (0, 1]")
        if not np.all(np.diff(values) < 0.0):
            raise ValueError("alpha_bar must be strictly decreasing")
        values.setflags(write=False)
        object.__setattr__(self, "alpha_bar", values)

    def describe(self) -> Dict[str, Any]:
        """Builder name and parameters; what configs serialize."""
        return dict(self.provenance)


def eta(schedule: NoiseSchedule, t: int) -> float:
    """Increment of sqrt((1 - a) / a) between grid points t and t + 1."""
    if not 0 <= t < schedule.num_steps:
        raise ValueError(f"step index {t} outside [0, {schedule.num_steps})")
    a_t = float(schedule.alpha_bar[t])
    a_next = float(schedule.alpha_bar[t + 1])
    return math.sqrt((1.0 - a_next) / a_next) - math.sqrt((1.0 - a_t) / a_t)


def _strided(betas: np.ndarray, train_steps: int, infer_steps: int) -> np.ndarray:
    if infer_steps < 1:
        raise ValueError(f"infer_steps must be at least 1, got {infer_steps}")
    if infer_steps > train_steps:
        raise ValueError(f"infer_steps={infer_steps} exceeds train_steps={train_steps}")
    stride = train_steps // infer_steps
    if train_steps % infer_steps:
        logger.debug("train_steps=%d not divisible by infer_steps=%d; using stride %d",
                     train_steps, infer_steps, stride)
    cumulative = np.cumprod(1.0 - betas)
    return cumulative[np.arange(infer_steps + 1) * stride]


def build_linear_schedule(train_steps: int, beta_start: float, beta_end: float,
                          infer_steps: int) -> NoiseSchedule:
    if train_steps < 1:
        raise ValueError(f"train_steps must be at least 1, got {train_steps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, train_steps + 1, dtype=np.float64)
    alpha_bar = _strided(betas, train_steps, infer_steps)
    provenance = {
        "builder": "linear",
        "train_steps": int(train_steps),
        "beta_start": float(beta_start),
        "beta_end": float(beta_end),
        "infer_steps": int(infer_steps),
        "convention": CONVENTION,
    }
    return NoiseSchedule(num_steps=infer_steps, alpha_bar=alpha_bar, provenance=provenance)


def build_cosine_schedule(train_steps: int, infer_steps: int, s: float = 0.008) -> NoiseSchedule:
    if train_steps < 1:
        raise ValueError(f"train_steps must be at least 1, got {train_steps}")
    if s <= 0.0:
        raise ValueError(f"cosine offset must be positive, got {s}")
    levels = train_steps + 1
    u = np.arange(levels + 1, dtype=np.float64) / levels
    f = np.cos((u + s) / (1.0 + s) * math.pi / 2.0) ** 2
    betas = np.clip(1.0 - f[1:] / f[:-1], 1e-8, 0.999)
    alpha_bar = _strided(betas, train_steps, infer_steps)
    provenance = {
        "builder": "cosine",
        "train_steps": int(train_steps),
        "infer_steps": int(infer_steps),
        "s": float(s),
        "convention": CONVENTION,
    }
    return NoiseSchedule(num_steps=infer_steps, alpha_bar=alpha_bar, provenance=provenance)


BUILDERS = {
    "linear": build_linear_schedule,
    "cosine": build_cosine_schedule,
}


def build_schedule(builder: str, **params) -> NoiseSchedule:
    """Build a schedule from its serialized form (builder name + parameters)."""
    try:
        fn = BUILDERS[builder]
    except KeyError:
        raise ValueError(f"Unknown schedule builder {builder!r}; expected one of {sorted(BUILDERS)}")
    return fn(**params)


def from_alpha_bar(values: Sequence[float], label: str = "explicit") -> NoiseSchedule:
    """Wrap hand-picked coefficients, mostly for tests and oracles."""
    values = np.asarray(values, dtype=np.float64)
    return NoiseSchedule(num_steps=len(values) - 1, alpha_bar=values,
                         provenance={"builder": label})
