"""Inversion algorithms and the tight-conditioning policy that wraps them.

Four routes from a data point back to a latent:

* ``ddim_invert`` reverses the deterministic sampling recursion step by
  step, evaluating the model at the state it actually has in hand.
* ``renoise_invert`` refines each step's implicit equation
  z_t = A z_{t-1} - B eps(z_t, t) by fixed-point iteration.
* ``editfriendly_invert`` builds per-step noise maps from independently
  drawn forward marginals so a stochastic replay lands back on the input.
* ``flow_invert`` runs the reverse-Euler ODE of the flow model.

``tighten`` swaps any condition for the input point itself at a chosen
scale; ``edit_by_condition_swap`` re-runs the matching sampler under a new
condition, optionally keeping the tight branch active.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import Condition
from .diffusion import (NoiseSchedule, Trajectory, ddim_sample, ddpm_posterior_mean,
                        ddpm_sample_step, forward_marginal, guided_predict,
                        write_trajectory_csv)
from .flow import FlowGrid, euler_invert, euler_sample
from .network import require_objective
from .numerics import RngStream, require_finite

TIME_ARGS = ("current", "target")


@dataclass
class InversionResult:
    """Terminal latent plus the full path and the settings that produced it."""

    z_terminal: np.ndarray
    trajectory: Trajectory
    method: str
    condition: Condition
    guidance: float = 1.0
    residuals: np.ndarray | None = None  # (n_steps, K) fixed-point step sizes

    def sampler_family(self) -> str:
        return {"ddim": "ddim", "renoise": "ddim", "flow": "flow"}[self.method]


@dataclass
class NoiseMapSet:
    """Noise maps z_t for t = T..1 plus everything needed to replay them.

    ``maps[i]`` belongs to the i-th replay step counting down from T; the
    final map is a zero placeholder because sigma_1 = 0.  ``states[t]`` is
    the sampled forward marginal x_t (``states[0]`` is the source point,
    kept so reconstruction can assign it directly at the degenerate final
    step).
    """

    x_T: np.ndarray
    maps: np.ndarray
    x0: np.ndarray
    states: np.ndarray
    condition: Condition
    guidance: float = 1.0


def _invert_core(model, x0, sched: NoiseSchedule, cond, w: float, K: int,
                 averaging: bool, steps, time_arg: str, method: str) -> InversionResult:
    require_objective(model, "epsilon_prediction")
    if time_arg not in TIME_ARGS:
        raise ValueError(f"time_arg must be one of {TIME_ARGS}")
    if K < 0:
        raise ValueError("K must be >= 0")
    z = require_finite(np.asarray(x0, dtype=np.float64), "inversion input")
    pairs = list(reversed(sched.step_pairs(steps)))  # ascending: (t, t_prev)
    states = [z]
    times = [sched.model_time(pairs[0][1])]
    residuals = np.zeros((len(pairs), K)) if K > 0 else None
    for i, (t, t_prev) in enumerate(pairs):
        a = sched.A(t, t_prev)
        b = sched.B(t, t_prev)
        t_state = sched.model_time(t_prev if time_arg == "current" else t)
        eps = guided_predict(model, z, t_state, cond, w)
        z_next = a * z - b * eps
        if K > 0:
            t_target = sched.model_time(t)
            prev = z_next           # z^(0), the plain estimate
            second_last = z_next
            for k in range(K):
                eps = guided_predict(model, prev, t_target, cond, w)
                cur = a * z - b * eps
                residuals[i, k] = float(np.mean(
                    np.linalg.norm(np.atleast_2d(cur - prev), axis=-1)))
                second_last = prev
                prev = cur
            z_next = 0.5 * (prev + second_last) if averaging else prev
        z = z_next
        states.append(z)
        times.append(sched.model_time(t))
    return InversionResult(z_terminal=z, trajectory=Trajectory(np.stack(states), np.array(times)),
                           method=method, condition=cond if isinstance(cond, Condition) else None,
                           guidance=w, residuals=residuals)


def ddim_invert(model, x0, sched: NoiseSchedule, cond, w: float = 1.0,
                steps=None, time_arg: str = "current") -> InversionResult:
    """Reverse the DDIM recursion: z_t = A_t z_{t-1} - B_t eps, from the data up."""
    return _invert_core(model, x0, sched, cond, w, K=0, averaging=False,
                        steps=steps, time_arg=time_arg, method="ddim")


def renoise_invert(model, x0, sched: NoiseSchedule, cond, w: float = 1.0,
                   K: int = 4, averaging: bool = False, steps=None,
                   time_arg: str = "current") -> InversionResult:
    """Fixed-point refinement of each inversion step; K = 0 is plain inversion."""
    return _invert_core(model, x0, sched, cond, w, K=K, averaging=averaging and K > 0,
                        steps=steps, time_arg=time_arg, method="renoise")


def editfriendly_invert(model, x0, sched: NoiseSchedule, cond,
                        rng: RngStream, w: float = 1.0) -> NoiseMapSet:
    """Construct DDPM noise maps whose replay reproduces x0.

    Each x_t is an independent draw from the forward marginal; the map for
    step t is whatever noise makes the ancestral step land exactly on the
    drawn x_{t-1}.  sigma_1 = 0 makes the last map unsolvable, so it is
    stored as zero and reconstruction assigns the source point directly.
    """
    require_objective(model, "epsilon_prediction")
    x0 = require_finite(np.asarray(x0, dtype=np.float64), "inversion input")
    T = sched.T
    if T < 2:
        raise ValueError("edit-friendly inversion needs at least 2 steps")
    states = np.empty((T + 1,) + x0.shape)
    states[0] = x0
    for t in range(1, T + 1):
        states[t] = forward_marginal(x0, t, rng.normal(x0.shape), sched)
    maps = np.zeros((T,) + x0.shape)
    for i, (t, t_prev) in enumerate(sched.step_pairs()):
        mean, sigma = ddpm_posterior_mean(model, states[t], t, cond, sched, w, t_prev)
        if t_prev == 0:
            break  # sigma is exactly 0; the zero placeholder stays
        if sigma <= 0.0:
            raise ValueError(f"degenerate posterior sigma at interior step {t}")
        maps[i] = (states[t_prev] - mean) / sigma
    return NoiseMapSet(x_T=states[T], maps=maps, x0=x0, states=states,
                       condition=cond if isinstance(cond, Condition) else None, guidance=w)


def replay_noise_maps(model, nms: NoiseMapSet, sched: NoiseSchedule,
                      cond=None, w: float | None = None,
                      exact_final: bool = True) -> tuple[np.ndarray, Trajectory]:
    """Run the stochastic sampler with stored noise maps.

    With ``exact_final`` the degenerate last step assigns the stored source
    point (reconstruction semantics); editing passes False and takes the
    deterministic posterior mean instead.
    """
    cond = nms.condition if cond is None else cond
    w = nms.guidance if w is None else w
    pairs = sched.step_pairs()
    if len(pairs) != nms.maps.shape[0]:
        raise ValueError("noise map count does not match the schedule")
    x = np.asarray(nms.x_T, dtype=np.float64)
    states = [x]
    times = [sched.model_time(pairs[0][0])]
    for i, (t, t_prev) in enumerate(pairs):
        if t_prev == 0 and exact_final:
            x = nms.x0
        else:
            x = ddpm_sample_step(model, x, t, cond, sched, noise=nms.maps[i],
                                 w=w, t_prev=t_prev)
        states.append(x)
        times.append(sched.model_time(t_prev))
    return x, Trajectory(np.stack(states), np.array(times))


def flow_invert(model, x0, grid: FlowGrid, cond, w: float = 1.0) -> InversionResult:
    """Reverse-Euler ODE inversion of the flow model, wrapped like the others."""
    z, traj = euler_invert(model, x0, grid, cond, w)
    return InversionResult(z_terminal=z, trajectory=traj, method="flow",
                           condition=cond if isinstance(cond, Condition) else None,
                           guidance=w)


def tighten(base_cond: Condition | None, x0, s: float) -> Condition:
    """Replace any condition with the point itself at scale s.

    The anchor is stored raw; the network standardizes it at the embedding
    boundary.  ``base_cond`` is accepted for call-site symmetry and logging
    only.
    """
    if s < 0:
        raise ValueError("tight scale must be >= 0")
    del base_cond
    return Condition.tight(np.asarray(x0, dtype=np.float64), float(s))


def compose_edit_condition(source: Condition | None, target: Condition,
                           tight_during_edit: bool = True) -> Condition:
    """Condition used while denoising an edit.

    If the inversion ran with a tight branch and the target is class-only,
    the target keeps that branch (anchor and scale) so the source point
    still steers the trajectory; switch ``tight_during_edit`` off to drop it.
    """
    if (not tight_during_edit or source is None or source.anchor is None
            or source.scale == 0.0 or target.anchor is not None):
        return target
    return Condition(class_row=target.class_row, anchor=source.anchor, scale=source.scale)


def edit_by_condition_swap(model, inverted, target_cond: Condition, sampler: str,
                           w: float = 1.0, *, sched: NoiseSchedule | None = None,
                           grid: FlowGrid | None = None,
                           tight_during_edit: bool = True) -> np.ndarray:
    """Re-run the matching sampler from an inverted latent under a new condition."""
    if isinstance(inverted, NoiseMapSet):
        if sampler != "ddpm":
            raise ValueError(f"noise-map inversions replay with the ddpm sampler, not {sampler!r}")
        if sched is None:
            raise ValueError("ddpm editing needs the noise schedule")
        cond = compose_edit_condition(inverted.condition, target_cond, tight_during_edit)
        x, _ = replay_noise_maps(model, inverted, sched, cond=cond, w=w, exact_final=False)
        return x
    if not isinstance(inverted, InversionResult):
        raise TypeError("expected an InversionResult or NoiseMapSet")
    if sampler != inverted.sampler_family():
        raise ValueError(
            f"{inverted.method!r} inversions pair with the {inverted.sampler_family()!r} "
            f"sampler, not {sampler!r}")
    cond = compose_edit_condition(inverted.condition, target_cond, tight_during_edit)
    if sampler == "ddim":
        if sched is None:
            raise ValueError("ddim editing needs the noise schedule")
        x, _ = ddim_sample(model, inverted.z_terminal, sched, cond, w)
        return x
    if grid is None:
        raise ValueError("flow editing needs the integration grid")
    x, _ = euler_sample(model, inverted.z_terminal, grid, cond, w)
    return x


def write_inversion_artifacts(result: InversionResult, out_prefix, seed: int) -> None:
    """Single-point export: trajectory CSV plus a JSON sidecar of the settings."""
    out_prefix = Path(out_prefix)
    write_trajectory_csv(out_prefix.with_suffix(".csv"), result.trajectory)
    sidecar = {
        "method": result.method,
        "condition": None if result.condition is None else result.condition.to_dict(),
        "guidance": result.guidance,
        "seed": seed,
        "residuals": None if result.residuals is None else result.residuals.tolist(),
    }
    out_prefix.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True, indent=2))
