"""Inversion and reconstruction trajectories.

Four strategies share one loop: ``naive`` DDIM, ``mbdi`` (uniform average of
N branch predictions), ``mc`` (m one-hot draws over the branches per step)
and ``freeinv`` (one random transform per step, replayed at the matching
reconstruction step).

Both directions query the predictor at schedule index t + 1 for step t:
inversion at the inversion latent x_t, reconstruction at the reconstruction
latent x*_{t+1}. The noise helpers below take that query index directly.
"""
import logging
import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

import transform as tf
from errors import ReplayError
from predictor import GaussianMixture, PredictorConfig, predict_noise, sample_mixture
from schedule import NoiseSchedule, eta
from utils.rng import Substream

logger = logging.getLogger(__name__)

VARIANTS = ("naive", "mbdi", "mc", "freeinv")
BRANCH_SOURCES = ("independent-samples", "rotations-of-input")


@dataclass(frozen=True)
class StrategyConfig:
    variant: str = "naive"
    branches: int = 1
    branch_source: str = "independent-samples"
    samples: int = 1
    pool: str = "rotation"
    patch_size: int = 4
    inverse_noise_transform: bool = False
    replay_selection: bool = False
    seed: int = 0
    label: str = ""

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"Unknown strategy variant {self.variant!r}; expected one of {VARIANTS}")
        if self.branches < 1:
            raise ValueError(f"branch count must be at least 1, got {self.branches}")
        if self.samples < 1:
            raise ValueError(f"samples per step must be at least 1, got {self.samples}")
        if self.branch_source not in BRANCH_SOURCES:
            raise ValueError(f"Unknown branch source {self.branch_source!r}")
        if self.variant in ("mbdi", "mc") and self.branch_source == "rotations-of-input" \
                and self.branches != 4:
            raise ValueError("rotations-of-input uses the 4 quarter-turn copies; branches must be 4")
        if self.variant == "freeinv" and self.pool not in tf.POOL_NAMES:
            raise ValueError(f"Unknown transform pool {self.pool!r}; expected one of {tf.POOL_NAMES}")

    @property
    def ensemble(self) -> bool:
        return self.variant in ("mbdi", "mc")

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        if self.variant == "naive":
            return "naive"
        if self.variant == "freeinv":
            return f"FreeInv({self.pool}{', inverse-noise' if self.inverse_noise_transform else ''})"
        tag = "MB-R" if self.branch_source == "rotations-of-input" else "MB-I"
        if self.variant == "mbdi":
            return f"{tag}(N={self.branches})"
        replay = ", replay" if self.replay_selection else ""
        return f"MC[{tag}](N={self.branches}, m={self.samples}{replay})"

    def validate_for(self, shape: Sequence[int]) -> None:
        """Raise ValueError when the strategy cannot run on grids of this shape."""
        if self.ensemble and self.branch_source == "rotations-of-input" and shape[0] != shape[1]:
            raise ValueError(f"rotations-of-input needs H == W, got {shape[0]}x{shape[1]}")
        if self.variant == "freeinv":
            tf.named_pool(self.pool, shape, self.patch_size)

    def transform_pool(self, shape: Sequence[int]) -> tf.TransformPool:
        return tf.named_pool(self.pool, shape, self.patch_size)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class ReplayMetadata:
    """What a reconstruction needs from its matching inversion."""
    strategy: StrategyConfig
    seed: int
    num_steps: int
    schedule: Optional[tf.TransformSchedule] = None
    schedule_digest: Optional[str] = None
    branch_terminals: Optional[np.ndarray] = None
    selections: Optional[np.ndarray] = None


@dataclass
class Trajectory:
    direction: str
    strategy: StrategyConfig
    seed: int
    latents: np.ndarray                        # (T+1, H, W, C), indexed by t
    noises: np.ndarray                         # (T, H, W, C), noise used at step t
    branch_latents: Optional[np.ndarray] = None  # (N, T+1, H, W, C), branch 0 is the target
    selections: Optional[np.ndarray] = None    # (T, S) branch index of each summand
    summands: Optional[np.ndarray] = None      # (T, S, H, W, C) predictions averaged at step t
    schedule: Optional[tf.TransformSchedule] = None
    consumed: Tuple[tf.TransformSpec, ...] = ()
    nfe: int = 0

    @property
    def num_steps(self) -> int:
        return self.noises.shape[0]

    def replay(self) -> ReplayMetadata:
        if self.direction != "inversion":
            raise ReplayError("replay metadata comes from an inversion trajectory")
        return ReplayMetadata(
            strategy=self.strategy,
            seed=self.seed,
            num_steps=self.num_steps,
            schedule=self.schedule,
            schedule_digest=self.schedule.digest() if self.schedule is not None else None,
            branch_terminals=None if self.branch_latents is None else self.branch_latents[:, -1].copy(),
            selections=None if self.selections is None else self.selections.copy(),
        )


# --- Single steps -----------------------------------------------------------

def _check_step(x: np.ndarray, noise: np.ndarray, t: int, sched: NoiseSchedule, op: str) -> None:
    if not 0 <= t < sched.num_steps:
        raise ValueError(f"{op}: step index {t} outside [0, {sched.num_steps})")
    if x.shape != noise.shape:
        raise ValueError(f"{op}: noise shape {noise.shape} does not match latent {x.shape}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(noise))):
        raise ValueError(f"{op}: non-finite input")


def invert_step(x_t: np.ndarray, t: int, noise: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """x_{t+1} = sqrt(a_{t+1}) * (x_t / sqrt(a_t) + eta_t * noise)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    _check_step(x_t, noise, t, sched, "invert_step")
    a_t, a_next = float(sched.alpha_bar[t]), float(sched.alpha_bar[t + 1])
    return math.sqrt(a_next) * (x_t / math.sqrt(a_t) + eta(sched, t) * noise)


def reconstruct_step(x_next: np.ndarray, t: int, noise: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(a_t) * (x_{t+1} / sqrt(a_{t+1}) - eta_t * noise)."""
    x_next = np.asarray(x_next, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    _check_step(x_next, noise, t, sched, "reconstruct_step")
    a_t, a_next = float(sched.alpha_bar[t]), float(sched.alpha_bar[t + 1])
    return math.sqrt(a_t) * (x_next / math.sqrt(a_next) - eta(sched, t) * noise)


# --- Noise estimates --------------------------------------------------------

def ensemble_noise_mbdi(branches: Sequence[np.ndarray], q: int, predictor: PredictorConfig,
                        sched: NoiseSchedule) -> np.ndarray:
    noise, _ = _mbdi(branches, q, predictor, sched)
    return noise


def _mbdi(branches, q, predictor, sched):
    if len(branches) < 1:
        raise ValueError("ensemble needs at least one branch")
    preds = np.stack([predict_noise(predictor, sched, b, q) for b in branches])
    return preds.mean(axis=0), preds


def ensemble_noise_mc(branches: Sequence[np.ndarray], q: int, predictor: PredictorConfig,
                      sched: NoiseSchedule, m: int, stream: Optional[Substream] = None,
                      selections: Optional[Sequence[int]] = None) -> np.ndarray:
    """Average of m one-hot draws over the branches.

    Draws come from `stream` unless `selections` fixes them.
    """
    noise, _, _, _ = _mc(branches, q, predictor, sched, m, stream, selections)
    return noise


def _mc(branches, q, predictor, sched, m, stream, selections):
    n = len(branches)
    if n < 1:
        raise ValueError("ensemble needs at least one branch")
    if m < 1:
        raise ValueError(f"samples per step must be at least 1, got {m}")
    if selections is None:
        if stream is None:
            raise ValueError("ensemble_noise_mc needs a stream or fixed selections")
        selections = [stream.randbelow(n) for _ in range(m)]
    selections = np.asarray(selections, dtype=np.int64)
    if selections.shape != (m,) or selections.min() < 0 or selections.max() >= n:
        raise ValueError(f"selections must be {m} branch indices in [0, {n})")
    picked, counts = np.unique(selections, return_counts=True)
    preds = {int(i): predict_noise(predictor, sched, branches[int(i)], q) for i in picked}
    noise = np.zeros_like(preds[int(picked[0])])
    for i, c in zip(picked, counts):
        noise = noise + (c / m) * preds[int(i)]
    summands = np.stack([preds[int(i)] for i in selections])
    return noise, selections, summands, len(picked)


def freeinv_noise(x: np.ndarray, q: int, spec: tf.TransformSpec, predictor: PredictorConfig,
                  sched: NoiseSchedule, inverse_flag: bool = False) -> np.ndarray:
    noise = predict_noise(predictor, sched, tf.apply(spec, x), q)
    if inverse_flag:
        return tf.apply(tf.invert(spec), noise)
    return noise


# --- Trajectories -----------------------------------------------------------

def _initial_branches(strategy: StrategyConfig, predictor: PredictorConfig, x0: np.ndarray,
                      seed: int) -> List[np.ndarray]:
    if not strategy.ensemble or strategy.branches == 1:
        return [x0]
    if strategy.branch_source == "rotations-of-input":
        return [tf.apply(tf.rotation(k), x0) for k in range(4)]
    mixture = predictor.mixture or GaussianMixture.standard_normal(x0.shape)
    if mixture.shape != x0.shape:
        raise ValueError(f"latent shape {x0.shape} does not match mixture grid {mixture.shape}")
    aux = sample_mixture(mixture, Substream(seed, "aux-branches"), strategy.branches - 1)
    return [x0] + list(aux)


def _new_trajectory(direction, strategy, seed, sched, shape, n_branches, width):
    T = sched.num_steps
    traj = Trajectory(
        direction=direction,
        strategy=strategy,
        seed=seed,
        latents=np.zeros((T + 1,) + shape),
        noises=np.zeros((T,) + shape),
    )
    if strategy.ensemble:
        traj.branch_latents = np.zeros((n_branches, T + 1) + shape)
        traj.selections = np.zeros((T, width), dtype=np.int64)
        traj.summands = np.zeros((T, width) + shape)
    return traj


def _step_noise(strategy, predictor, sched, t, latent, branches, spec, stream, selections, traj):
    """Noise for step t queried at index t + 1; records ensemble draws on `traj`."""
    q = t + 1
    if strategy.variant == "naive":
        traj.nfe += 1
        return predict_noise(predictor, sched, latent, q)
    if strategy.variant == "freeinv":
        traj.nfe += 1
        return freeinv_noise(latent, q, spec, predictor, sched, strategy.inverse_noise_transform)
    if strategy.variant == "mbdi":
        noise, preds = _mbdi(branches, q, predictor, sched)
        traj.nfe += len(branches)
        traj.selections[t] = np.arange(len(branches))
        traj.summands[t] = preds
        return noise
    noise, sel, summands, evals = _mc(branches, q, predictor, sched, strategy.samples, stream, selections)
    traj.nfe += evals
    traj.selections[t] = sel
    traj.summands[t] = summands
    return noise


def run_inversion(strategy: StrategyConfig, predictor: PredictorConfig, sched: NoiseSchedule,
                  x0: np.ndarray, seed: Optional[int] = None) -> Trajectory:
    x0 = np.asarray(x0, dtype=np.float64)
    seed = strategy.seed if seed is None else int(seed)
    strategy.validate_for(x0.shape)
    T = sched.num_steps
    branches = _initial_branches(strategy, predictor, x0, seed)
    width = len(branches) if strategy.variant == "mbdi" else strategy.samples
    traj = _new_trajectory("inversion", strategy, seed, sched, x0.shape, len(branches), width)
    if strategy.variant == "freeinv":
        traj.schedule = tf.sample_schedule(strategy.transform_pool(x0.shape), T, seed)
        traj.consumed = traj.schedule.specs
    traj.latents[0] = x0
    if strategy.ensemble:
        traj.branch_latents[:, 0] = np.stack(branches)

    for t in range(T):
        spec = traj.schedule[t] if traj.schedule is not None else None
        stream = Substream(seed, "mc-inversion", t) if strategy.variant == "mc" else None
        noise = _step_noise(strategy, predictor, sched, t, branches[0], branches, spec, stream, None, traj)
        branches = [invert_step(b, t, noise, sched) for b in branches]
        traj.noises[t] = noise
        traj.latents[t + 1] = branches[0]
        if strategy.ensemble:
            traj.branch_latents[:, t + 1] = np.stack(branches)
    logger.debug("inversion %s: %d steps, %d predictor calls", strategy.name, T, traj.nfe)
    return traj


def _check_replay(strategy: StrategyConfig, sched: NoiseSchedule, shape, replay: Optional[ReplayMetadata]):
    T = sched.num_steps
    if replay is None:
        raise ReplayError("reconstruction needs replay metadata from the matching inversion")
    if replay.num_steps != T:
        raise ReplayError(f"replay covers {replay.num_steps} steps, schedule has {T}")
    if replay.strategy != strategy:
        raise ReplayError(f"replay was recorded by {replay.strategy.name}, reconstruction runs {strategy.name}")
    if strategy.variant == "freeinv":
        schedule = replay.schedule
        if schedule is None:
            raise ReplayError("FreeInv reconstruction needs the recorded transform schedule")
        if len(schedule) != T:
            raise ReplayError(f"transform schedule has {len(schedule)} steps, expected {T}")
        if replay.schedule_digest != schedule.digest():
            raise ReplayError("transform schedule does not match its recorded digest")
        if schedule.pool != strategy.transform_pool(shape):
            raise ReplayError(f"transform schedule was drawn from pool {schedule.pool.name!r}, "
                              f"strategy uses {strategy.pool!r}")
        regenerated = tf.sample_schedule(schedule.pool, T, schedule.seed)
        if regenerated.specs != schedule.specs:
            raise ReplayError("transform schedule is not reproducible from its pool and seed")
    if strategy.ensemble:
        n = strategy.branches
        terminals = replay.branch_terminals
        if terminals is None or terminals.shape != (n,) + tuple(shape):
            raise ReplayError(f"ensemble reconstruction needs {n} branch terminal latents")
        if strategy.variant == "mc" and strategy.replay_selection:
            if replay.selections is None or replay.selections.shape != (T, strategy.samples):
                raise ReplayError("selection replay needs the inversion's one-hot draws")


def run_reconstruction(strategy: StrategyConfig, predictor: PredictorConfig, sched: NoiseSchedule,
                       x_T: np.ndarray, replay: Optional[ReplayMetadata]) -> Trajectory:
    x_T = np.asarray(x_T, dtype=np.float64)
    strategy.validate_for(x_T.shape)
    _check_replay(strategy, sched, x_T.shape, replay)
    T = sched.num_steps
    seed = replay.seed
    if strategy.ensemble:
        branches = [x_T] + [b.copy() for b in replay.branch_terminals[1:]]
    else:
        branches = [x_T]
    width = len(branches) if strategy.variant == "mbdi" else strategy.samples
    traj = _new_trajectory("reconstruction", strategy, seed, sched, x_T.shape, len(branches), width)
    traj.schedule = replay.schedule
    consumed: List[Optional[tf.TransformSpec]] = [None] * T
    traj.latents[T] = x_T
    if strategy.ensemble:
        traj.branch_latents[:, T] = np.stack(branches)

    for t in range(T - 1, -1, -1):
        spec = None
        if strategy.variant == "freeinv":
            spec = replay.schedule[t]
            consumed[t] = spec
        stream, selections = None, None
        if strategy.variant == "mc":
            if strategy.replay_selection:
                selections = replay.selections[t]
            else:
                stream = Substream(seed, "mc-reconstruction", t)
        noise = _step_noise(strategy, predictor, sched, t, branches[0], branches, spec, stream, selections, traj)
        branches = [reconstruct_step(b, t, noise, sched) for b in branches]
        traj.noises[t] = noise
        traj.latents[t] = branches[0]
        if strategy.ensemble:
            traj.branch_latents[:, t] = np.stack(branches)
    if strategy.variant == "freeinv":
        traj.consumed = tuple(consumed)
    logger.debug("reconstruction %s: %d steps, %d predictor calls", strategy.name, T, traj.nfe)
    return traj


def round_trip(strategy: StrategyConfig, predictor: PredictorConfig, sched: NoiseSchedule,
               x0: np.ndarray, seed: Optional[int] = None) -> Tuple[Trajectory, Trajectory]:
    inv = run_inversion(strategy, predictor, sched, x0, seed=seed)
    rec = run_reconstruction(strategy, predictor, sched, inv.latents[-1], inv.replay())
    return inv, rec
