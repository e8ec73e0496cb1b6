"""Noise schedules, DDIM/DDPM sampling steps, and guidance combination.

Schedules index steps t = 1..T with cumulative products alpha_bar[0..T]
(alpha_bar[0] = 1).  The inversion recursion and the DDIM sampling step are
exact algebraic inverses when they share the same noise prediction:

    invert:  z_t     = A(t) * z_{t-1} - B(t) * eps
    sample:  z_{t-1} = (z_t + B(t) * eps) / A(t)

with A(t) = sqrt(ab_t / ab_{t-1}) and B(t) = A(t) * sqrt(1 - ab_{t-1})
- sqrt(1 - ab_t); under an increasing-beta schedule B(t) < 0, so inversion
adds noise as it contracts the state.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import Condition
from .network import CondBatch, require_objective
from .numerics import RngStream


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray  # length T+1, alpha_bars[0] == 1

    @property
    def T(self) -> int:
        return self.betas.shape[0]

    def check_step(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"step index {t} outside 1..{self.T}")

    def A(self, t: int, t_prev: int | None = None) -> float:
        """Inversion contraction factor between consecutive (or strided) steps."""
        t_prev = t - 1 if t_prev is None else t_prev
        return float(np.sqrt(self.alpha_bars[t] / self.alpha_bars[t_prev]))

    def B(self, t: int, t_prev: int | None = None) -> float:
        t_prev = t - 1 if t_prev is None else t_prev
        a = self.A(t, t_prev)
        return float(a * np.sqrt(1.0 - self.alpha_bars[t_prev])
                     - np.sqrt(1.0 - self.alpha_bars[t]))

    def posterior_sigma(self, t: int, t_prev: int | None = None) -> float:
        """DDPM posterior std: sigma_t^2 = (1-ab_{t-1}) / (1-ab_t) * beta-equivalent.

        For strided steps the beta-equivalent is 1 - ab_t / ab_{t-1}; the
        final step (t_prev = 0) gives exactly 0.
        """
        t_prev = t - 1 if t_prev is None else t_prev
        ab_t = self.alpha_bars[t]
        ab_prev = self.alpha_bars[t_prev]
        var = (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev)
        return float(np.sqrt(max(var, 0.0)))

    def model_time(self, t: int) -> float:
        """Normalized time fed to the network for a state at step index t."""
        return t / self.T

    def step_pairs(self, steps=None) -> list[tuple[int, int]]:
        """(t, t_prev) pairs from high to low; ``steps`` selects a strided subset."""
        if steps is None:
            idx = list(range(1, self.T + 1))
        else:
            idx = sorted(int(s) for s in steps)
            if not idx or idx[0] < 1 or idx[-1] > self.T or len(set(idx)) != len(idx):
                raise ValueError("steps must be distinct indices within 1..T")
        lows = [0] + idx[:-1]
        return list(zip(reversed(idx), reversed(lows)))


def linear_beta_schedule(T: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError("need 0 < beta_min <= beta_max < 1")
    betas = np.linspace(beta_min, beta_max, T) if T > 1 else np.array([beta_max], dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def forward_marginal(x0, t: int, eps, sched: NoiseSchedule) -> np.ndarray:
    """q(x_t | x_0) realized with the given noise: sqrt(ab_t) x0 + sqrt(1-ab_t) eps."""
    if not 0 <= t <= sched.T:
        raise ValueError(f"step index {t} outside 0..{sched.T}")
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    ab = sched.alpha_bars[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def cfg_combine(eps_uncond, eps_cond, w: float) -> np.ndarray:
    """Classifier-free guidance: uncond + w * (cond - uncond)."""
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError("guidance branches must have the same shape")
    return eps_uncond + w * (eps_cond - eps_uncond)


def guided_predict(model, x, t, cond, w: float = 1.0) -> np.ndarray:
    """Model prediction under guidance; w = 1 uses the conditional branch alone."""
    if isinstance(cond, Condition):
        is_null = cond.mode == "null"
    else:
        is_null = cond.is_null
    if w == 1.0 or is_null:
        return model.predict(x, t, cond)
    e_cond = model.predict(x, t, cond)
    e_uncond = model.predict(x, t, cond.as_null())
    return cfg_combine(e_uncond, e_cond, w)


def ddim_sample_step(model, z_t, t: int, cond, sched: NoiseSchedule,
                     w: float = 1.0, t_prev: int | None = None) -> np.ndarray:
    """Deterministic DDIM step from z_t to z_{t_prev} (default t-1, eta = 0)."""
    sched.check_step(t)
    t_prev = t - 1 if t_prev is None else t_prev
    z_t = np.asarray(z_t, dtype=np.float64)
    eps = guided_predict(model, z_t, sched.model_time(t), cond, w)
    ab_t = sched.alpha_bars[t]
    ab_prev = sched.alpha_bars[t_prev]
    x0_hat = (z_t - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
    return np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps


def ddpm_posterior_mean(model, x_t, t: int, cond, sched: NoiseSchedule,
                        w: float = 1.0, t_prev: int | None = None
                        ) -> tuple[np.ndarray, float]:
    """Posterior mean of x_{t_prev} given x_t plus the matching sigma.

    Written in the predicted-x0 form, which is algebraically identical to
    the classic DDPM ancestral mean; the final step (t_prev = 0) reduces to
    the x0 prediction with sigma exactly 0.
    """
    sched.check_step(t)
    t_prev = t - 1 if t_prev is None else t_prev
    x_t = np.asarray(x_t, dtype=np.float64)
    eps = guided_predict(model, x_t, sched.model_time(t), cond, w)
    ab_t = sched.alpha_bars[t]
    ab_prev = sched.alpha_bars[t_prev]
    sigma = sched.posterior_sigma(t, t_prev)
    x0_hat = (x_t - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
    mean = np.sqrt(ab_prev) * x0_hat + np.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * eps
    return mean, sigma


def ddpm_sample_step(model, x_t, t: int, cond, sched: NoiseSchedule,
                     noise=None, rng: RngStream | None = None,
                     w: float = 1.0, t_prev: int | None = None) -> np.ndarray:
    """Stochastic ancestral step: posterior mean plus sigma_t times a noise map.

    The caller provides either an explicit noise map or an rng; at the final
    step sigma is exactly 0 and the noise is unused.
    """
    mean, sigma = ddpm_posterior_mean(model, x_t, t, cond, sched, w, t_prev)
    if sigma == 0.0:
        return mean
    if noise is None:
        if rng is None:
            raise ValueError("ddpm_sample_step needs an explicit noise map or an rng")
        noise = rng.normal(np.asarray(x_t).shape)
    return mean + sigma * np.asarray(noise, dtype=np.float64)


@dataclass
class Trajectory:
    """Ordered states with time stamps; states[k] is the state at times[k]."""

    states: np.ndarray  # (n_steps+1, ..., d)
    times: np.ndarray   # (n_steps+1,)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.times = np.asarray(self.times, dtype=np.float64)
        if self.states.shape[0] != self.times.shape[0]:
            raise ValueError("states and times must have matching lengths")

    def __len__(self) -> int:
        return self.states.shape[0]


def ddim_sample(model, z_T, sched: NoiseSchedule, cond, w: float = 1.0,
                steps=None) -> tuple[np.ndarray, Trajectory]:
    """Full deterministic denoising loop from step T (or the subset's top) to 0."""
    require_objective(model, "epsilon_prediction")
    x = np.asarray(z_T, dtype=np.float64)
    states = [x]
    times = [sched.model_time(sched.step_pairs(steps)[0][0])]
    for t, t_prev in sched.step_pairs(steps):
        x = ddim_sample_step(model, x, t, cond, sched, w, t_prev)
        states.append(x)
        times.append(sched.model_time(t_prev))
    return x, Trajectory(np.stack(states), np.array(times))


def ddpm_sample(model, x_T, sched: NoiseSchedule, cond, rng: RngStream | None = None,
                noise_maps=None, w: float = 1.0, steps=None) -> tuple[np.ndarray, Trajectory]:
    """Stochastic denoising loop; noise comes from explicit maps or the rng."""
    require_objective(model, "epsilon_prediction")
    pairs = sched.step_pairs(steps)
    if noise_maps is not None and len(noise_maps) != len(pairs):
        raise ValueError(f"expected {len(pairs)} noise maps, got {len(noise_maps)}")
    x = np.asarray(x_T, dtype=np.float64)
    states = [x]
    times = [sched.model_time(pairs[0][0])]
    for i, (t, t_prev) in enumerate(pairs):
        noise = None if noise_maps is None else noise_maps[i]
        x = ddpm_sample_step(model, x, t, cond, sched, noise=noise, rng=rng, w=w, t_prev=t_prev)
        states.append(x)
        times.append(sched.model_time(t_prev))
    return x, Trajectory(np.stack(states), np.array(times))


def write_trajectory_csv(path, traj: Trajectory) -> None:
    """Trajectory export: rows step,t,x0,...,x{d-1} (single-point trajectories)."""
    states = traj.states
    if states.ndim != 2:
        raise ValueError("CSV export expects a single-point trajectory (steps, d)")
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "t"] + [f"x{i}" for i in range(states.shape[1])])
        for k in range(states.shape[0]):
            w.writerow([k, repr(float(traj.times[k]))] + [repr(float(v)) for v in states[k]])
