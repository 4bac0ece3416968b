"""Brute-force and closed-form checkers.

The oracles recompute what they check with their own arithmetic: densities
through `scipy.stats.norm`, the Gaussian round trip as a product of scalar
factors, MC expectations by enumerating every one-hot outcome. `run_oracles`
bundles them with the property checks used by ``invlab verify``.
"""
import itertools
import logging
import math
from dataclasses import dataclass, replace
from typing import List, Sequence

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm
from sklearn.linear_model import LinearRegression

import engine
import predictor as pr
import transform as tf
from errors import ReplayError
from schedule import NoiseSchedule, build_linear_schedule
from utils.metrics import compute_metrics
from utils.rng import Substream, derive_seed

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OracleReport:
    name: str
    discrepancy: float
    threshold: float
    samples: int
    seed: int

    def __post_init__(self):
        if not self.discrepancy >= 0:
            raise ValueError(f"{self.name}: discrepancy must be >= 0, got {self.discrepancy}")

    @property
    def passed(self) -> bool:
        return self.discrepancy <= self.threshold


# --- Score ------------------------------------------------------------------

def _marginal_params(mix: pr.GaussianMixture, a: float):
    means = np.sqrt(a) * mix.means.reshape(mix.num_components, -1)
    scales = np.sqrt(a * mix.sigmas ** 2 + (1.0 - a))
    return means, scales


def _log_density_batch(points: np.ndarray, weights, means, scales) -> np.ndarray:
    # points (B, d); per-component log-likelihoods (B, K)
    per_comp = norm.logpdf(points[:, None, :], loc=means[None, :, :], scale=scales[None, :, None]).sum(axis=2)
    return logsumexp(per_comp + np.log(weights)[None, :], axis=1)


def fd_score_oracle(mix: pr.GaussianMixture, sched: NoiseSchedule, samples: int, h: float,
                    seed: int) -> OracleReport:
    """Compare `predictor.score` against central differences of the log-density."""
    if not 1e-6 <= h <= 1e-3:
        raise ValueError(f"finite-difference step must lie in [1e-6, 1e-3], got {h}")
    if samples < 1:
        raise ValueError(f"samples must be at least 1, got {samples}")
    d = int(np.prod(mix.shape))
    cumulative = np.cumsum(mix.weights)
    worst = 0.0
    for s in range(samples):
        stream = Substream(seed, "fd-oracle", s)
        t = 1 + stream.randbelow(sched.num_steps)
        a = float(sched.alpha_bar[t])
        means, scales = _marginal_params(mix, a)
        k = min(int(np.searchsorted(cumulative, stream.uniform(), side="right")), mix.num_components - 1)
        x = means[k] + scales[k] * stream.normal(d)
        step = h * np.eye(d)
        fd = (_log_density_batch(x + step, mix.weights, means, scales)
              - _log_density_batch(x - step, mix.weights, means, scales)) / (2.0 * h)
        analytic = pr.score(pr.marginal_mixture(mix, a), x.reshape(mix.shape)).reshape(-1)
        rel = np.max(np.abs(analytic - fd)) / (1.0 + np.max(np.abs(analytic)))
        worst = max(worst, float(rel))
    return OracleReport("fd-score", worst, 1e-5, samples, seed)


# --- Gaussian round trip ----------------------------------------------------

def gaussian_roundtrip_oracle(sched: NoiseSchedule, d: int, x0: np.ndarray) -> np.ndarray:
    """Reconstruction of x0 by naive DDIM under the standard-normal predictor.

    With eps(x, t) = sqrt(1 - a_t) x every step scales x by a scalar, so the
    round trip is x0 times a product of factors.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.size != d:
        raise ValueError(f"x0 has {x0.size} entries, expected {d}")
    a = [float(v) for v in sched.alpha_bar]
    rho = [math.sqrt(1.0 / v - 1.0) for v in a]
    forward, backward = [], []
    for t in range(sched.num_steps):
        gap = rho[t + 1] - rho[t]
        slope = math.sqrt(1.0 - a[t + 1])
        forward.append(math.sqrt(a[t + 1] / a[t]) + math.sqrt(a[t + 1]) * gap * slope)
        backward.append(math.sqrt(a[t] / a[t + 1]) - math.sqrt(a[t]) * gap * slope)
    return x0 * (math.prod(forward) * math.prod(backward))


# --- MC expectation ---------------------------------------------------------

def mc_expectation_oracle(branch_noises: Sequence[np.ndarray], m: int = 1) -> np.ndarray:
    """Expectation of the m-draw one-hot average, by enumerating all N**m outcomes."""
    n = len(branch_noises)
    if not 1 <= n <= 4:
        raise ValueError(f"exhaustive enumeration supports 1..4 branches, got {n}")
    noises = [np.asarray(b, dtype=np.float64) for b in branch_noises]
    total = np.zeros_like(noises[0])
    outcomes = 0
    for draw in itertools.product(range(n), repeat=m):
        pick = np.zeros_like(total)
        for i in draw:
            pick = pick + noises[i]
        total = total + pick / m
        outcomes += 1
    return total / outcomes


# --- Regression ---------------------------------------------------------------

def mc_regression_oracle(sched: NoiseSchedule, shape: Sequence[int], samples: int,
                         seed: int) -> OracleReport:
    """Fit eps ~ x_t on simulated forward draws from N(0, I).

    The fitted slope is E[eps | x_t] / x_t and must match both sqrt(1 - a_t)
    and the slope of the analytic predictor.
    """
    d = int(np.prod(shape))
    cfg = pr.PredictorConfig(mixture=pr.GaussianMixture.standard_normal(shape))
    ones = np.ones(tuple(shape))
    worst = 0.0
    n = samples * d
    for t in sorted({1, max(1, sched.num_steps // 2), sched.num_steps}):
        a = float(sched.alpha_bar[t])
        stream = Substream(seed, "regression-oracle", t)
        x0 = stream.normal(n)
        noise = stream.normal(n)
        x_t = math.sqrt(a) * x0 + math.sqrt(1.0 - a) * noise
        fit = LinearRegression(fit_intercept=False).fit(x_t.reshape(-1, 1), noise)
        slope = float(fit.coef_[0])
        analytic = float(pr.predict_noise(cfg, sched, ones, t).mean())
        worst = max(worst, abs(slope - math.sqrt(1.0 - a)), abs(slope - analytic))
    return OracleReport("mc-regression", worst, 6.0 / math.sqrt(n), samples, seed)


# --- Property checks ----------------------------------------------------------

def _random_latents(seed: int, label: str, n: int, shape) -> List[np.ndarray]:
    d = int(np.prod(shape))
    return [Substream(seed, label, i).normal(d).reshape(shape) for i in range(n)]


def oracle_mixtures(shape) -> List[pr.GaussianMixture]:
    """Mixtures the score oracle is run on."""
    three = pr.GaussianMixture(
        weights=[0.5, 0.3, 0.2],
        means=np.stack([pr.mean_pattern("corner-blob", shape), pr.mean_pattern("ramp", shape),
                        -0.5 * pr.mean_pattern("checker", shape)]),
        sigmas=[0.6, 0.8, 1.2],
    )
    blob = pr.GaussianMixture(weights=[1.0], means=pr.mean_pattern("corner-blob", shape)[None], sigmas=[0.5])
    return [pr.GaussianMixture.standard_normal(shape), three,
            pr.symmetrize(blob, [tf.rotation(1)])]


def check_engine_vs_gaussian_oracle(sched: NoiseSchedule, shape, seeds: int, seed: int) -> OracleReport:
    cfg = pr.PredictorConfig(mixture=pr.GaussianMixture.standard_normal(shape))
    naive = engine.StrategyConfig("naive")
    worst = 0.0
    for x0 in _random_latents(seed, "gaussian-roundtrip", seeds, shape):
        _, rec = engine.round_trip(naive, cfg, sched, x0)
        expected = gaussian_roundtrip_oracle(sched, x0.size, x0)
        worst = max(worst, float(np.max(np.abs(rec.latents[0] - expected))))
    return OracleReport("engine-vs-gaussian-oracle", worst, 1e-10, seeds, seed)


def check_mc_expectation(shape, seed: int) -> List[OracleReport]:
    d = int(np.prod(shape))
    base = Substream(seed, "mc-expectation", "base").normal(d).reshape(shape)
    noises = [base + 0.5 * z for z in _random_latents(seed, "mc-expectation", 4, shape)]
    mbdi = np.mean(np.stack(noises), axis=0)
    exact = float(np.max(np.abs(mc_expectation_oracle(noises) - mbdi)))
    stream = Substream(seed, "mc-expectation", "draws")
    counts = np.bincount([stream.randbelow(4) for _ in range(10_000)], minlength=4)
    empirical = sum(c / 10_000 * n for c, n in zip(counts, noises))
    rel = float(np.linalg.norm(empirical - mbdi) / np.linalg.norm(mbdi))
    return [OracleReport("mc-expectation-exhaustive", exact, 1e-12, 4, seed),
            OracleReport("mc-expectation-empirical", rel, 0.02, 10_000, seed)]


def exact_inverse_strategies() -> List[engine.StrategyConfig]:
    return [
        engine.StrategyConfig("naive"),
        engine.StrategyConfig("mbdi", branches=4),
        engine.StrategyConfig("mbdi", branches=4, branch_source="rotations-of-input"),
        engine.StrategyConfig("mc", branches=4, samples=2),
        engine.StrategyConfig("mc", branches=4, samples=1, replay_selection=True),
        engine.StrategyConfig("freeinv", pool="rotation"),
        engine.StrategyConfig("freeinv", pool="combination", inverse_noise_transform=True),
    ]


def check_exact_inverse(sched: NoiseSchedule, shape, seeds: int, seed: int) -> OracleReport:
    worst = 0.0
    for i, x0 in enumerate(_random_latents(seed, "exact-inverse", seeds, shape)):
        c = Substream(seed, "exact-inverse-constant", i).normal(x0.size).reshape(shape)
        cfg = pr.PredictorConfig(constant=c)
        for strategy in exact_inverse_strategies():
            _, rec = engine.round_trip(strategy, cfg, sched, x0, seed=derive_seed(seed, i))
            worst = max(worst, float(np.max(np.abs(rec.latents[0] - x0))))
    return OracleReport("exact-inverse", worst, 1e-10, seeds, seed)


def equivariance_groups(shape):
    h, w = shape[0], shape[1]
    d4 = [tf.rotation(1), tf.TransformSpec("flip-h")]
    p = h // 2
    swap = tf.TransformSpec("patch-shuffle", patch_size=p, perm=(1, 0, 2, 3))
    blob = pr.mean_pattern("corner-blob", shape)
    stripe = pr.mean_pattern("stripe", shape)
    base = pr.GaussianMixture(weights=[0.6, 0.4], means=np.stack([blob, stripe]), sigmas=[0.5, 0.7])
    d4_elements = [tf.rotation(k) for k in range(1, 4)] + [
        tf.TransformSpec("flip-h"), tf.TransformSpec("flip-v")]
    return [
        (pr.symmetrize(base, d4), d4_elements),
        (pr.symmetrize(base, [swap]), [swap]),
    ]


def check_equivariance(sched: NoiseSchedule, shape, points: int, seed: int) -> OracleReport:
    worst = 0.0
    for g_index, (mix, elements) in enumerate(equivariance_groups(shape)):
        cfg = pr.PredictorConfig(mixture=mix)
        for i, x in enumerate(_random_latents(seed, f"equivariance-{g_index}", points, shape)):
            t = 1 + Substream(seed, "equivariance-t", g_index, i).randbelow(sched.num_steps)
            base = pr.predict_noise(cfg, sched, x, t)
            for g in elements:
                moved = pr.predict_noise(cfg, sched, tf.apply(g, x), t)
                worst = max(worst, float(np.max(np.abs(moved - tf.apply(g, base)))))
    return OracleReport("equivariance", worst, 1e-9, points, seed)


def check_triangle_bound(sched: NoiseSchedule, shape, runs: int, seed: int) -> OracleReport:
    blob = pr.GaussianMixture(weights=[1.0], means=pr.mean_pattern("corner-blob", shape)[None], sigmas=[0.5])
    mix = pr.symmetrize(blob, [tf.rotation(1)])
    cfg = pr.PredictorConfig(mixture=mix, gamma=0.05)
    strategies = [
        engine.StrategyConfig("mbdi", branches=4),
        engine.StrategyConfig("mbdi", branches=4, branch_source="rotations-of-input"),
        engine.StrategyConfig("mc", branches=4, samples=2),
        engine.StrategyConfig("mc", branches=4, samples=1, replay_selection=True),
    ]
    violations = 0
    for i, x0 in enumerate(pr.sample_mixture(mix, Substream(seed, "triangle-x0"), runs)):
        for strategy in strategies:
            inv, rec = engine.round_trip(strategy, cfg, sched, x0, seed=derive_seed(seed, i))
            violations += compute_metrics(inv, rec, sched).triangle_violations
    return OracleReport("triangle-bound", float(violations), 0.0, runs, seed)


def _corrupt(schedule: tf.TransformSchedule, stream: Substream) -> tf.TransformSchedule:
    t = stream.randbelow(len(schedule))
    current = schedule[t]
    options = [s for s in (tf.IDENTITY, tf.rotation(1), tf.rotation(2), tf.rotation(3)) if s != current]
    specs = list(schedule.specs)
    specs[t] = options[stream.randbelow(len(options))]
    return replace(schedule, specs=tuple(specs))


def check_replay_fidelity(shape, schedules: int, steps: int, seed: int) -> OracleReport:
    """Fuzz FreeInv replays; count consumed-schedule mismatches and undetected corruptions."""
    sched = build_linear_schedule(1000, 1e-4, 0.02, steps)
    cfg = pr.PredictorConfig(mixture=pr.GaussianMixture.standard_normal(shape), gamma=0.05)
    strategy = engine.StrategyConfig("freeinv", pool="rotation")
    failures = 0
    for i, x0 in enumerate(_random_latents(seed, "replay-fuzz", schedules, shape)):
        run_seed = derive_seed(seed, "replay", i)
        inv, rec = engine.round_trip(strategy, cfg, sched, x0, seed=run_seed)
        if rec.consumed != inv.schedule.specs:
            failures += 1
        meta = inv.replay()
        bad = replace(meta, schedule=_corrupt(meta.schedule, Substream(run_seed, "corrupt")))
        try:
            engine.run_reconstruction(strategy, cfg, sched, inv.latents[-1], bad)
            failures += 1
        except ReplayError:
            pass
    return OracleReport("replay-fidelity", float(failures), 0.0, schedules, seed)


def run_oracles(quick: bool = False, seed: int = 20240) -> List[OracleReport]:
    """Every oracle and property check, as run by ``invlab verify``."""
    shape = (8, 8, 1)
    sched = build_linear_schedule(1000, 1e-4, 0.02, 50)
    points = 20 if quick else 100
    reports = []
    for i, mix in enumerate(oracle_mixtures(shape)):
        report = fd_score_oracle(mix, sched, points, 1e-4, derive_seed(seed, "fd", i))
        reports.append(replace(report, name=f"fd-score[{i}]"))
    reports.append(check_engine_vs_gaussian_oracle(sched, shape, 20, seed))
    reports.extend(check_mc_expectation(shape, seed))
    reports.append(mc_regression_oracle(sched, shape, 500 if quick else 2000, seed))
    reports.append(check_exact_inverse(sched, shape, 10 if quick else 100, seed))
    reports.append(check_equivariance(sched, shape, points, seed))
    reports.append(check_triangle_bound(sched, shape, 2 if quick else 10, seed))
    reports.append(check_replay_fidelity(shape, 100 if quick else 1000, 10, seed))
    for r in reports:
        logger.info("%-28s discrepancy=%.3e threshold=%.1e %s", r.name, r.discrepancy, r.threshold,
                    "ok" if r.passed else "FAILED")
    return reports
