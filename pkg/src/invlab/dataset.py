"""Toy Gaussian-mixture data, cluster assignment, and conditioning signals.

The default distribution is five unit-variance Gaussians centered on a
horizontal line at y=10 (x = -10, -5, 0, 5, 10), sampled with uniform
component weights.  Conditions come in three flavors: null, a class index
pointing at one mixture component, and a "tight" condition that carries a
point anchor plus a strength scale.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import RngStream, as_vector, require_finite


@dataclass(frozen=True)
class GmmSpec:
    """Isotropic Gaussian mixture: one center per class, shared std."""

    centers: np.ndarray
    component_std: float = 1.0
    class_ids: tuple[int, ...] = ()

    def __post_init__(self):
        centers = np.asarray(self.centers, dtype=np.float64)
        if centers.ndim != 2 or centers.shape[0] < 1:
            raise ValueError("centers must be a non-empty (k, d) array")
        require_finite(centers, "centers")
        if self.component_std <= 0:
            raise ValueError("component_std must be positive")
        for i in range(centers.shape[0]):
            for j in range(i + 1, centers.shape[0]):
                if np.array_equal(centers[i], centers[j]):
                    raise ValueError("centers must be pairwise distinct")
        ids = tuple(self.class_ids) if self.class_ids else tuple(range(1, centers.shape[0] + 1))
        if len(ids) != centers.shape[0]:
            raise ValueError("class_ids must align with centers")
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "class_ids", ids)

    @property
    def n_components(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def center_of(self, class_id: int) -> np.ndarray:
        return self.centers[self.class_ids.index(class_id)]

    def mixture_mean(self) -> np.ndarray:
        return self.centers.mean(axis=0)

    def mixture_std(self) -> np.ndarray:
        """Per-coordinate std of the mixture (uniform weights), in closed form."""
        second = (self.centers**2).mean(axis=0) + self.component_std**2
        return np.sqrt(second - self.mixture_mean() ** 2)

    def to_dict(self) -> dict:
        return {
            "centers": self.centers.tolist(),
            "component_std": self.component_std,
            "class_ids": list(self.class_ids),
        }

    @staticmethod
    def from_dict(d: dict) -> "GmmSpec":
        return GmmSpec(
            centers=np.asarray(d["centers"], dtype=np.float64),
            component_std=float(d["component_std"]),
            class_ids=tuple(int(c) for c in d["class_ids"]),
        )


def default_gmm_spec(dim: int = 2) -> GmmSpec:
    """Five unit Gaussians at (5c, 10) for c in {-2,-1,0,1,2}; extra dims are 0."""
    if dim < 2:
        raise ValueError("the default mixture needs dim >= 2")
    centers = np.zeros((5, dim))
    centers[:, 0] = [5.0 * c for c in (-2, -1, 0, 1, 2)]
    centers[:, 1] = 10.0
    return GmmSpec(centers=centers, component_std=1.0)


@dataclass(frozen=True, eq=False)
class Condition:
    """Conditioning signal fed to the network.

    ``class_row`` indexes the embedding table (0 is the null row, 1..k the
    classes).  A non-zero ``scale`` with an ``anchor`` activates the tight
    branch; editing composes a class row with a retained tight branch.
    """

    class_row: int = 0
    anchor: np.ndarray | None = None
    scale: float = 0.0

    def __post_init__(self):
        if self.class_row < 0:
            raise ValueError("class_row must be >= 0")
        if self.anchor is not None:
            object.__setattr__(self, "anchor", as_vector(self.anchor))
        if not np.isfinite(self.scale) or self.scale < 0:
            raise ValueError("tight scale must be finite and >= 0")
        if self.scale > 0 and self.anchor is None:
            raise ValueError("a non-zero scale requires an anchor")

    @staticmethod
    def null() -> "Condition":
        return Condition()

    @staticmethod
    def for_class(class_id: int) -> "Condition":
        if class_id < 1:
            raise ValueError("class ids start at 1")
        return Condition(class_row=class_id)

    @staticmethod
    def tight(anchor, scale: float) -> "Condition":
        return Condition(class_row=0, anchor=as_vector(anchor), scale=float(scale))

    @staticmethod
    def class_tight(class_id: int, anchor, scale: float) -> "Condition":
        if class_id < 1:
            raise ValueError("class ids start at 1")
        return Condition(class_row=class_id, anchor=as_vector(anchor), scale=float(scale))

    @property
    def mode(self) -> str:
        has_tight = self.anchor is not None and self.scale > 0
        if self.class_row == 0:
            return "tight" if has_tight else "null"
        return "class+tight" if has_tight else "class"

    def as_null(self) -> "Condition":
        return Condition.null()

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "class_row": self.class_row,
            "anchor": None if self.anchor is None else self.anchor.tolist(),
            "scale": self.scale,
        }


def make_condition(mode: str, label: int | None = None, anchor=None,
                   scale: float | None = None) -> Condition:
    """Build a condition from loosely-typed config fields."""
    if mode == "null":
        return Condition.null()
    if mode == "class":
        if label is None:
            raise ValueError("mode 'class' requires a label")
        return Condition.for_class(int(label))
    if mode == "tight":
        if anchor is None or scale is None:
            raise ValueError("mode 'tight' requires an anchor and a scale")
        return Condition.tight(anchor, scale)
    raise ValueError(f"unknown condition mode {mode!r}")


@dataclass(frozen=True, eq=False)
class LabeledPoint:
    x: np.ndarray
    class_id: int


def sample_posterior(spec: GmmSpec, rng: RngStream, n: int) -> list[LabeledPoint]:
    """Draw n labeled points: uniform component choice + isotropic noise."""
    x, labels = sample_posterior_arrays(spec, rng, n)
    return [LabeledPoint(x[i], int(labels[i])) for i in range(n)]


def sample_posterior_arrays(spec: GmmSpec, rng: RngStream, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Array version of :func:`sample_posterior`: (points (n,d), class ids (n,))."""
    if n < 1:
        raise ValueError("n must be >= 1")
    comp = rng.integers(n, spec.n_components)
    noise = rng.normal((n, spec.dim))
    x = spec.centers[comp] + spec.component_std * noise
    labels = np.asarray(spec.class_ids, dtype=np.int64)[comp]
    return x, labels


def assign_cluster(x, spec: GmmSpec) -> int:
    """Class id of the nearest center (Euclidean); ties go to the lowest index."""
    return int(assign_clusters(np.asarray(x, dtype=np.float64)[None, :], spec)[0])


def assign_clusters(x: np.ndarray, spec: GmmSpec) -> np.ndarray:
    diffs = x[:, None, :] - spec.centers[None, :, :]
    d2 = np.einsum("nkd,nkd->nk", diffs, diffs)
    idx = np.argmin(d2, axis=1)  # argmin returns the first minimum: lowest index on ties
    return np.asarray(spec.class_ids, dtype=np.int64)[idx]


def write_points_csv(path, x: np.ndarray, class_ids: np.ndarray) -> None:
    """Dataset export: header x0,...,x{d-1},class_id, one row per point."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"x{i}" for i in range(x.shape[1])] + ["class_id"])
        for row, cid in zip(x, class_ids):
            w.writerow([repr(float(v)) for v in row] + [int(cid)])


def read_points_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with Path(path).open(newline="") as f:
        rows = list(csv.reader(f))
    header, body = rows[0], rows[1:]
    if header[-1] != "class_id":
        raise ValueError("not a points CSV: missing class_id column")
    x = np.array([[float(v) for v in r[:-1]] for r in body], dtype=np.float64)
    labels = np.array([int(r[-1]) for r in body], dtype=np.int64)
    return x, labels
