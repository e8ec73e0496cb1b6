"""Metrics over reconstructions, latent clouds, and edited point sets."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import GmmSpec, assign_clusters
from .diffusion import Trajectory
from .numerics import LOG_TWO_PI, standard_normal_nll

# Distance (in component stds) beyond which a point counts as out-of-distribution.
OOD_STD_MULTIPLIER = 10.0


def recon_l2(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def pairwise_l2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return np.linalg.norm(a - b, axis=-1)


@dataclass(frozen=True)
class CloudStats:
    mean_norm: float
    trace: float
    fro_dev: float   # ||Sigma_hat - I||_F
    mean_nll: float


def latent_cloud_stats(latents: np.ndarray) -> CloudStats:
    """Mean norm, unbiased-covariance trace and deviation from I, mean prior NLL."""
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 2 or latents.shape[0] < 2:
        raise ValueError("need at least 2 latents of shape (n, d)")
    d = latents.shape[1]
    cov = np.cov(latents.T, ddof=1).reshape(d, d)
    nll = 0.5 * d * LOG_TWO_PI + 0.5 * np.sum(latents**2, axis=1)
    return CloudStats(
        mean_norm=float(np.mean(np.linalg.norm(latents, axis=1))),
        trace=float(np.trace(cov)),
        fro_dev=float(np.linalg.norm(cov - np.eye(d))),
        mean_nll=float(np.mean(nll)),
    )


def edit_success_rate(edited: np.ndarray, target_class: int, spec: GmmSpec,
                      radius_multiplier: float = 3.0) -> float:
    """Fraction of points landing in the target component's basin and radius."""
    edited = np.atleast_2d(np.asarray(edited, dtype=np.float64))
    if edited.shape[0] == 0:
        raise ValueError("edited point list must be non-empty")
    if radius_multiplier <= 0:
        raise ValueError("radius_multiplier must be positive")
    center = spec.center_of(target_class)
    within = np.linalg.norm(edited - center, axis=1) <= radius_multiplier * spec.component_std
    assigned = assign_clusters(edited, spec) == target_class
    return float(np.mean(within & assigned))


def trajectory_offsets(inv: Trajectory, den: Trajectory) -> np.ndarray:
    """Per-time L2 offsets between an inversion path and a denoising path.

    The two trajectories must visit the same time stamps (in either
    direction); offsets are returned in increasing time order.
    """
    if len(inv) != len(den):
        raise ValueError("trajectories must have equal lengths")
    inv_order = np.argsort(inv.times, kind="stable")
    den_order = np.argsort(den.times, kind="stable")
    if not np.array_equal(inv.times[inv_order], den.times[den_order]):
        raise ValueError("trajectory time grids are not aligned")
    return np.linalg.norm(inv.states[inv_order] - den.states[den_order], axis=-1)


def ood_flags(points: np.ndarray, spec: GmmSpec) -> np.ndarray:
    """True where a point sits farther than 10 stds from every component center."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    dists = np.linalg.norm(points[:, None, :] - spec.centers[None, :, :], axis=-1)
    return dists.min(axis=1) > OOD_STD_MULTIPLIER * spec.component_std


@dataclass
class MetricsReport:
    """Per-point records plus aggregates recomputable from them."""

    method: str
    condition_mode: str
    scale: float
    seed: int
    l2: np.ndarray
    latent_nll: np.ndarray
    ood: np.ndarray
    latents: np.ndarray | None = None
    edit_success: float | None = None
    offsets_max: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def mean_l2(self) -> float:
        return float(np.mean(self.l2))

    @property
    def median_l2(self) -> float:
        return float(np.median(self.l2))

    @property
    def mean_latent_nll(self) -> float:
        return float(np.mean(self.latent_nll))

    def cloud_stats(self) -> CloudStats | None:
        return None if self.latents is None else latent_cloud_stats(self.latents)

    def to_dict(self) -> dict:
        cloud = self.cloud_stats()
        return {
            "method": self.method,
            "condition_mode": self.condition_mode,
            "scale": self.scale,
            "seed": self.seed,
            "mean_l2": self.mean_l2,
            "median_l2": self.median_l2,
            "mean_latent_nll": self.mean_latent_nll,
            "latent_mean_norm": None if cloud is None else cloud.mean_norm,
            "latent_trace": None if cloud is None else cloud.trace,
            "latent_fro_dev": None if cloud is None else cloud.fro_dev,
            "edit_success": self.edit_success,
            "offsets_max": self.offsets_max,
            "n_ood": int(np.sum(self.ood)),
            "per_point": {
                "l2": self.l2.tolist(),
                "latent_nll": self.latent_nll.tolist(),
                "ood": self.ood.astype(int).tolist(),
            },
            "extra": self.extra,
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2))


def make_report(method: str, condition_mode: str, scale: float, seed: int,
                sources: np.ndarray, recons: np.ndarray, latents: np.ndarray,
                spec: GmmSpec, **kwargs) -> MetricsReport:
    latents = np.atleast_2d(np.asarray(latents, dtype=np.float64))
    return MetricsReport(
        method=method, condition_mode=condition_mode, scale=scale, seed=seed,
        l2=pairwise_l2(np.atleast_2d(sources), np.atleast_2d(recons)),
        latent_nll=np.array([standard_normal_nll(z) for z in latents]),
        ood=ood_flags(sources, spec),
        latents=latents,
        **kwargs,
    )


SUMMARY_COLUMNS = ("method", "condition_mode", "scale", "seed", "mean_l2", "median_l2",
                   "mean_latent_nll", "latent_trace", "edit_success", "n_ood")


def write_summary_csv(reports: list[MetricsReport], path) -> None:
    """One row per (method, condition mode, scale, seed)."""
    import csv

    with Path(path).open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SUMMARY_COLUMNS)
        for r in reports:
            cloud = r.cloud_stats()
            w.writerow([
                r.method, r.condition_mode, repr(float(r.scale)), r.seed,
                repr(r.mean_l2), repr(r.median_l2), repr(r.mean_latent_nll),
                "" if cloud is None else repr(cloud.trace),
                "" if r.edit_success is None else repr(float(r.edit_success)),
                int(np.sum(r.ood)),
            ])
