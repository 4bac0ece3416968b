"""Analytic noise predictors for isotropic Gaussian mixtures.

`predict_noise` returns the exact conditional expectation E[eps | x_t] of
the forward process started from a `GaussianMixture`, optionally bent by a
fixed sinusoid so that DDIM round trips stop being exact. A constant mode
ignores the mixture entirely and returns the same vector everywhere.
"""
import logging
import math
import warnings
from collections import deque
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp

import transform as tf
from schedule import NoiseSchedule
from utils.rng import Substream

logger = logging.getLogger(__name__)

RESPONSIBILITY_FLOOR = 1e-300
MERGE_TOL = 1e-12
MAX_COMPONENTS = 4096


@dataclass(frozen=True)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray   # (K, H, W, C)
    sigmas: np.ndarray

    def __post_init__(self):
        weights = np.array(self.weights, dtype=np.float64).reshape(-1)
        means = np.array(self.means, dtype=np.float64)
        sigmas = np.array(self.sigmas, dtype=np.float64).reshape(-1)
        if means.ndim != 4:
            raise ValueError(f"means must be a stack of (H, W, C) grids, got shape {means.shape}")
        k = means.shape[0]
        if k < 1 or weights.shape != (k,) or sigmas.shape != (k,):
            raise ValueError(f"need matching component counts, got {weights.shape}, {means.shape}, {sigmas.shape}")
        if not np.all(weights > 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be positive and sum to 1")
        if not np.all(sigmas > 0):
            raise ValueError("component scales must be positive")
        if not (np.all(np.isfinite(means)) and np.all(np.isfinite(sigmas))):
            raise ValueError("mixture parameters must be finite")
        for arr in (weights, means, sigmas):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "sigmas", sigmas)

    @property
    def num_components(self) -> int:
        return self.means.shape[0]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.means.shape[1:])

    @classmethod
    def standard_normal(cls, shape: Sequence[int]) -> "GaussianMixture":
        return cls(weights=[1.0], means=np.zeros((1,) + tuple(shape)), sigmas=[1.0])


@dataclass(frozen=True)
class PredictorConfig:
    mixture: Optional[GaussianMixture] = None
    gamma: float = 0.0
    omega: Union[float, np.ndarray] = 1.0
    constant: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"perturbation amplitude must be >= 0, got {self.gamma}")
        if self.constant is None and self.mixture is None:
            raise ValueError("a mixture is required unless constant mode is on")
        if self.constant is not None:
            c = np.array(self.constant, dtype=np.float64)
            c.setflags(write=False)
            object.__setattr__(self, "constant", c)
        omega = np.array(self.omega, dtype=np.float64)
        omega.setflags(write=False)
        object.__setattr__(self, "omega", omega)

    @property
    def constant_mode(self) -> bool:
        return self.constant is not None

    @property
    def exact(self) -> bool:
        return not self.constant_mode and self.gamma == 0.0


def _check_finite(x: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{op}: input latent contains non-finite values")


def marginal_mixture(mix: GaussianMixture, alpha_bar_t: float) -> GaussianMixture:
    """Distribution of x_t = sqrt(a) x_0 + sqrt(1 - a) eps for x_0 ~ mix."""
    if not 0.0 < alpha_bar_t <= 1.0:
        raise ValueError(f"alpha_bar_t must lie in (0, 1], got {alpha_bar_t}")
    if alpha_bar_t == 1.0:
        return mix
    return GaussianMixture(
        weights=mix.weights,
        means=math.sqrt(alpha_bar_t) * mix.means,
        sigmas=np.sqrt(alpha_bar_t * mix.sigmas ** 2 + (1.0 - alpha_bar_t)),
    )


def _component_terms(mix_t: GaussianMixture, x: np.ndarray):
    if x.shape != mix_t.shape:
        raise ValueError(f"latent shape {x.shape} does not match mixture grid {mix_t.shape}")
    d = x.size
    diffs = mix_t.means.reshape(mix_t.num_components, d) - x.reshape(1, d)
    var = mix_t.sigmas ** 2
    sq = np.einsum("kd,kd->k", diffs, diffs)
    log_terms = np.log(mix_t.weights) - sq / (2.0 * var) - d * np.log(mix_t.sigmas)
    return diffs, var, log_terms


def log_density(mix_t: GaussianMixture, x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x, "log_density")
    _, _, log_terms = _component_terms(mix_t, x)
    return float(logsumexp(log_terms) - 0.5 * x.size * math.log(2.0 * math.pi))


def score(mix_t: GaussianMixture, x: np.ndarray) -> np.ndarray:
    """Gradient of log q_t at x, with log-space responsibilities."""
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x, "score")
    diffs, var, log_terms = _component_terms(mix_t, x)
    resp = np.exp(log_terms - logsumexp(log_terms))
    resp[resp < RESPONSIBILITY_FLOOR] = 0.0
    return ((resp / var) @ diffs).reshape(x.shape)


def predict_noise(cfg: PredictorConfig, sched: NoiseSchedule, x: np.ndarray, t: int) -> np.ndarray:
    """Noise estimate at schedule index t (0 < t <= T)."""
    if not 0 < t <= sched.num_steps:
        raise ValueError(f"noise query index {t} outside (0, {sched.num_steps}]")
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x, "predict_noise")
    if cfg.constant_mode:
        return np.broadcast_to(cfg.constant, x.shape).astype(np.float64, copy=True)
    a = float(sched.alpha_bar[t])
    eps = -math.sqrt(1.0 - a) * score(marginal_mixture(cfg.mixture, a), x)
    if cfg.gamma > 0.0:
        eps = eps + cfg.gamma * np.sin(cfg.omega * x)
    return eps


# --- Mixture construction ---------------------------------------------------

def _orbit(mean: np.ndarray, group: Sequence[tf.TransformSpec]) -> List[np.ndarray]:
    orbit = [mean]
    queue = deque([mean])
    while queue:
        current = queue.popleft()
        for g in group:
            candidate = tf.apply(g, current)
            if not any(np.max(np.abs(candidate - seen)) <= MERGE_TOL for seen in orbit):
                orbit.append(candidate)
                queue.append(candidate)
                if len(orbit) > MAX_COMPONENTS:
                    raise ValueError(f"orbit exceeds {MAX_COMPONENTS} components")
    return orbit


def symmetrize(mix: GaussianMixture, group: Sequence[tf.TransformSpec]) -> GaussianMixture:
    """Close the component means under the group generated by `group`.

    Each original component spreads its weight uniformly over its orbit;
    coinciding means with equal scales are merged.
    """
    for g in group:
        if not g.value_preserving:
            raise ValueError(f"symmetrize needs value-preserving transforms, got {g.kind}")
        tf.check_compatible(g, mix.shape)
    means: List[np.ndarray] = []
    weights: List[float] = []
    sigmas: List[float] = []
    merged = 0
    for w, mu, sigma in zip(mix.weights, mix.means, mix.sigmas):
        orbit = _orbit(mu, group)
        share = w / len(orbit)
        for m in orbit:
            for j, existing in enumerate(means):
                if sigmas[j] == sigma and np.max(np.abs(existing - m)) <= MERGE_TOL:
                    weights[j] += share
                    merged += 1
                    break
            else:
                means.append(m)
                weights.append(share)
                sigmas.append(float(sigma))
    if merged:
        warnings.warn(f"symmetrize merged {merged} coinciding components")
    total = math.fsum(weights)
    logger.debug("symmetrized %d components into %d", mix.num_components, len(means))
    return GaussianMixture(weights=np.array(weights) / total, means=np.stack(means),
                           sigmas=np.array(sigmas))


def sample_mixture(mix: GaussianMixture, stream: Substream, n: int) -> np.ndarray:
    """n ancestral draws from the mixture, shape (n, H, W, C)."""
    cumulative = np.cumsum(mix.weights)
    d = int(np.prod(mix.shape))
    out = np.empty((n,) + mix.shape)
    for i in range(n):
        k = int(np.searchsorted(cumulative, stream.uniform(), side="right"))
        k = min(k, mix.num_components - 1)
        out[i] = mix.means[k] + mix.sigmas[k] * stream.normal(d).reshape(mix.shape)
    return out


PATTERNS = ("corner-blob", "stripe", "checker", "ring", "ramp", "zeros")


def mean_pattern(name: str, shape: Sequence[int], amplitude: float = 1.0) -> np.ndarray:
    """Documented mean generators for (H, W, C) grids."""
    h, w, c = (int(s) for s in shape)
    i, j = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    if name == "corner-blob":
        width = max(h, w) / 8.0
        plane = np.exp(-((i - h / 4.0) ** 2 + (j - w / 4.0) ** 2) / (2.0 * width ** 2))
    elif name == "stripe":
        plane = ((j >= w / 8.0) & (j < 3.0 * w / 8.0)).astype(np.float64)
    elif name == "checker":
        plane = np.where((i + j) % 2 == 0, 1.0, -1.0)
    elif name == "ring":
        ci, cj = (h - 1) / 2.0, (w - 1) / 2.0
        radius = np.sqrt((i - ci) ** 2 + (j - cj) ** 2)
        plane = np.exp(-((radius - min(h, w) / 4.0) ** 2) / 2.0)
    elif name == "ramp":
        plane = np.broadcast_to(np.linspace(-1.0, 1.0, w), (h, w)).copy()
    elif name == "zeros":
        plane = np.zeros((h, w))
    else:
        raise ValueError(f"Unknown mean pattern {name!r}; expected one of {PATTERNS}")
    return amplitude * np.repeat(plane[:, :, None], c, axis=2)
