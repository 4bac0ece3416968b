import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from schedule import NoiseSchedule, eta

PSNR_CAP_DB = 200.0
PEAK_FLOOR = 1e-6
SSIM_WINDOW = 8
TRIANGLE_RTOL = 1e-12


@dataclass
class MetricsReport:
    """Per-step error curves and final fidelity of one round trip.

    Step arrays have T entries (index t is the step between t and t + 1);
    deviation arrays have T + 1 entries, one per latent index.
    """
    strategy: str
    mismatch_mean_abs: np.ndarray
    mismatch_l2: np.ndarray
    deviation_mean_abs: np.ndarray
    deviation_l2: np.ndarray
    bound: np.ndarray
    mse: float
    psnr: float
    ssim: float
    nfe_inversion: int
    nfe_reconstruction: int
    triangle_holds: Optional[np.ndarray] = None
    triangle_slack: Optional[np.ndarray] = None
    timings: Dict[str, float] = field(default_factory=dict)
    notes: List[str] = field(default_factory=list)

    def __post_init__(self):
        for name in ("mismatch_mean_abs", "mismatch_l2", "deviation_mean_abs", "deviation_l2", "bound"):
            values = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(values)) or np.any(values < 0):
                raise ValueError(f"{name} must be finite and non-negative")
        for name in ("mse", "psnr"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {value}")
        if not math.isfinite(self.ssim):
            raise ValueError(f"ssim must be finite, got {self.ssim}")

    @property
    def num_steps(self) -> int:
        return len(self.mismatch_l2)

    @property
    def triangle_violations(self) -> int:
        if self.triangle_holds is None:
            return 0
        return int(np.count_nonzero(~self.triangle_holds))


def mismatch(noise_inv: np.ndarray, noise_rec: np.ndarray) -> Tuple[float, float]:
    """(mean |a - b|, ||a - b||_2) between the noises of matching steps."""
    a = np.asarray(noise_inv, dtype=np.float64)
    b = np.asarray(noise_rec, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return float(np.mean(np.abs(diff))), float(np.sqrt(np.sum(diff * diff)))


def step_bound(sched: NoiseSchedule, t: int, mismatch_l2: float) -> float:
    """Single-step reconstruction error implied by a noise mismatch."""
    return math.sqrt(float(sched.alpha_bar[t])) * eta(sched, t) * mismatch_l2


def triangle_check(branch_mismatches_l2: Sequence[float], ensemble_mismatch_l2: float) -> Tuple[bool, float]:
    if len(branch_mismatches_l2) < 1:
        raise ValueError("triangle_check needs at least one branch mismatch")
    mean = math.fsum(branch_mismatches_l2) / len(branch_mismatches_l2)
    scale = max(1.0, mean, ensemble_mismatch_l2)
    return ensemble_mismatch_l2 <= mean + TRIANGLE_RTOL * scale, mean - ensemble_mismatch_l2


def _peak(reference: np.ndarray) -> float:
    peak = float(np.max(reference) - np.min(reference))
    if peak < PEAK_FLOOR:
        warnings.warn(f"Reference dynamic range {peak:.3g} is degenerate; flooring PSNR/SSIM peak at {PEAK_FLOOR}")
        peak = PEAK_FLOOR
    return peak


def ssim(reference: np.ndarray, candidate: np.ndarray, peak: float) -> float:
    """Mean SSIM over all 8x8 windows fully inside the grid, then over channels."""
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    scores = []
    for ch in range(reference.shape[2]):
        wx = sliding_window_view(reference[:, :, ch], (SSIM_WINDOW, SSIM_WINDOW))
        wy = sliding_window_view(candidate[:, :, ch], (SSIM_WINDOW, SSIM_WINDOW))
        mx = wx.mean(axis=(-2, -1))
        my = wy.mean(axis=(-2, -1))
        dx = wx - mx[..., None, None]
        dy = wy - my[..., None, None]
        vx = (dx * dx).mean(axis=(-2, -1))
        vy = (dy * dy).mean(axis=(-2, -1))
        cov = (dx * dy).mean(axis=(-2, -1))
        index = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        scores.append(float(index.mean()))
    return float(np.mean(scores))


def fidelity(reference: np.ndarray, candidate: np.ndarray) -> Tuple[float, float, float]:
    """(MSE, PSNR in dB, SSIM) of a reconstruction against its reference grid."""
    reference = np.asarray(reference, dtype=np.float64)
    candidate = np.asarray(candidate, dtype=np.float64)
    if reference.shape != candidate.shape:
        raise ValueError(f"shape mismatch: {reference.shape} vs {candidate.shape}")
    if reference.ndim != 3:
        raise ValueError(f"fidelity expects (H, W, C) grids, got {reference.shape}")
    if reference.shape[0] < SSIM_WINDOW or reference.shape[1] < SSIM_WINDOW:
        raise ValueError(f"SSIM needs H, W >= {SSIM_WINDOW}, got {reference.shape[:2]}")
    peak = _peak(reference)
    mse = float(np.mean((reference - candidate) ** 2))
    psnr = PSNR_CAP_DB if mse == 0.0 else min(PSNR_CAP_DB, 10.0 * math.log10(peak * peak / mse))
    return mse, max(psnr, 0.0), ssim(reference, candidate, peak)


def deviation_curve(traj_inv, traj_rec) -> Tuple[np.ndarray, np.ndarray]:
    """Mean-absolute and L2 gap between reconstruction and inversion latents per index."""
    if traj_inv.latents.shape != traj_rec.latents.shape:
        raise ValueError(f"trajectory shapes differ: {traj_inv.latents.shape} vs {traj_rec.latents.shape}")
    diff = traj_rec.latents - traj_inv.latents
    axes = tuple(range(1, diff.ndim))
    return np.mean(np.abs(diff), axis=axes), np.sqrt(np.sum(diff * diff, axis=axes))


def compute_metrics(traj_inv, traj_rec, sched: NoiseSchedule, reference: Optional[np.ndarray] = None,
                    timings: Optional[Dict[str, float]] = None) -> MetricsReport:
    """Build the MetricsReport of one inversion/reconstruction pair.

    `reference` defaults to the inversion's starting latent.
    """
    T = sched.num_steps
    if traj_inv.num_steps != T or traj_rec.num_steps != T:
        raise ValueError(f"trajectories do not match the {T}-step schedule")
    reference = traj_inv.latents[0] if reference is None else reference

    mm_abs, mm_l2, bound = np.zeros(T), np.zeros(T), np.zeros(T)
    for t in range(T):
        mm_abs[t], mm_l2[t] = mismatch(traj_inv.noises[t], traj_rec.noises[t])
        bound[t] = step_bound(sched, t, mm_l2[t])

    holds, slack = None, None
    if traj_inv.summands is not None and traj_rec.summands is not None:
        holds = np.zeros(T, dtype=bool)
        slack = np.zeros(T)
        for t in range(T):
            pairs = [mismatch(a, b)[1] for a, b in zip(traj_inv.summands[t], traj_rec.summands[t])]
            holds[t], slack[t] = triangle_check(pairs, mm_l2[t])

    dev_abs, dev_l2 = deviation_curve(traj_inv, traj_rec)
    mse, psnr, ssim_value = fidelity(reference, traj_rec.latents[0])
    return MetricsReport(
        strategy=traj_inv.strategy.name,
        mismatch_mean_abs=mm_abs,
        mismatch_l2=mm_l2,
        deviation_mean_abs=dev_abs,
        deviation_l2=dev_l2,
        bound=bound,
        mse=mse,
        psnr=psnr,
        ssim=ssim_value,
        nfe_inversion=traj_inv.nfe,
        nfe_reconstruction=traj_rec.nfe,
        triangle_holds=holds,
        triangle_slack=slack,
        timings=dict(timings or {}),
        notes=["PSNR/SSIM peak = dynamic range of the reference grid"],
    )
