"""Sliced Wasserstein distance between equal-size empirical samples.

Each slice contributes the squared 2-Wasserstein distance of the projected
samples, i.e. the mean squared difference of the sorted projections. The
gradient is taken with respect to the first sample set, holding the sorted
pairing fixed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import DimensionError, ValidationError
from .nn import as_tensor2


@dataclass(frozen=True)
class ProjectionSet:
    directions: np.ndarray  # (L, f), unit rows
    seed: Optional[int] = None

    @property
    def num_projections(self) -> int:
        return self.directions.shape[0]

    @property
    def dim(self) -> int:
        return self.directions.shape[1]


def make_projections(num_projections: int, dim: int, seed=None) -> ProjectionSet:
    """Directions uniform on the unit sphere (normalised Gaussian vectors).

    ``seed`` may be an int or a ``np.random.Generator``.
    """
    if num_projections < 1 or dim < 1:
        raise ValidationError("num_projections and dim must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    theta = rng.standard_normal((num_projections, dim))
    norms = np.linalg.norm(theta, axis=1, keepdims=True)
    # a zero draw has probability 0 but would break normalisation
    norms[norms == 0] = 1.0
    theta = theta / norms
    return ProjectionSet(theta, seed if isinstance(seed, (int, np.integer)) else None)


def wasserstein_1d(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape[0] != b.shape[0]:
        raise ValidationError(f"sample sizes differ: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] == 0:
        raise ValidationError("empty samples")
    d = np.sort(a, kind="stable") - np.sort(b, kind="stable")
    return float(np.mean(d * d))


def _check_pair(za, zb, projections: ProjectionSet) -> Tuple[np.ndarray, np.ndarray]:
    za = as_tensor2(za, "za")
    zb = as_tensor2(zb, "zb")
    if za.shape[1] != zb.shape[1] or za.shape[1] != projections.dim:
        raise DimensionError(
            f"za {za.shape}, zb {zb.shape} and projections of dim {projections.dim} disagree"
        )
    if za.shape[0] != zb.shape[0]:
        raise DimensionError(f"row counts differ: {za.shape[0]} vs {zb.shape[0]}")
    if za.shape[0] == 0:
        raise ValidationError("empty samples")
    return za, zb


def sliced_wd_and_grad(za, zb, projections: ProjectionSet) -> Tuple[float, np.ndarray]:
    za, zb = _check_pair(za, zb, projections)
    n = za.shape[0]
    theta = projections.directions
    L = theta.shape[0]
    pa = za @ theta.T  # (n, L)
    pb = zb @ theta.T
    ia = np.argsort(pa, axis=0, kind="stable")
    ib = np.argsort(pb, axis=0, kind="stable")
    cols = np.arange(L)[None, :]
    diff = pa[ia, cols] - pb[ib, cols]  # sorted-pair differences per slice
    value = float(np.mean(diff * diff))
    # scatter the sorted-order derivative back to original row order
    gproj = np.empty_like(pa)
    gproj[ia, cols] = (2.0 / (n * L)) * diff
    return value, gproj @ theta


def sliced_wd(za, zb, projections: ProjectionSet) -> float:
    za, zb = _check_pair(za, zb, projections)
    theta = projections.directions
    pa = np.sort(za @ theta.T, axis=0, kind="stable")
    pb = np.sort(zb @ theta.T, axis=0, kind="stable")
    d = pa - pb
    return float(np.mean(d * d))


def sliced_wd_grad(za, zb, projections: ProjectionSet) -> np.ndarray:
    return sliced_wd_and_grad(za, zb, projections)[1]


def equalize(za: np.ndarray, zb: np.ndarray, rng: np.random.Generator):
    """Subsample the larger set (without replacement) to the smaller set's size.

    Returns ``(za_sub, zb_sub, idx_a, idx_b)``; the index arrays are sorted so
    row order is preserved.
    """
    na, nb = za.shape[0], zb.shape[0]
    idx_a = np.arange(na)
    idx_b = np.arange(nb)
    if na > nb:
        idx_a = np.sort(rng.choice(na, size=nb, replace=False))
    elif nb > na:
        idx_b = np.sort(rng.choice(nb, size=na, replace=False))
    return za[idx_a], zb[idx_b], idx_a, idx_b


def conditional_swd_and_grad(za, ya, zb, yb, projections: ProjectionSet,
                             seed=0) -> Tuple[float, np.ndarray]:
    """Sum over the classes of ``ya`` of the class-restricted sliced distance.

    Class subsets of unequal size are equalised by subsampling the larger one
    with a generator seeded from ``seed``; the gradient is w.r.t. ``za``.
    """
    za = as_tensor2(za, "za")
    zb = as_tensor2(zb, "zb")
    ya = np.asarray(ya).ravel()
    yb = np.asarray(yb).ravel()
    if ya.shape[0] != za.shape[0] or yb.shape[0] != zb.shape[0]:
        raise DimensionError("label vectors must match row counts")
    classes = np.unique(ya)
    missing = sorted(set(classes.tolist()) - set(np.unique(yb).tolist()))
    if missing:
        raise ValidationError(f"classes {missing} present in ya but absent from yb")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    total = 0.0
    grad = np.zeros_like(za)
    for c in classes:
        rows_a = np.flatnonzero(ya == c)
        rows_b = np.flatnonzero(yb == c)
        sa, sb, ia, _ = equalize(za[rows_a], zb[rows_b], rng)
        value, g = sliced_wd_and_grad(sa, sb, projections)
        total += value
        grad[rows_a[ia]] += g
    return total, grad


def conditional_swd(za, ya, zb, yb, projections: ProjectionSet, seed=0) -> float:
    return conditional_swd_and_grad(za, ya, zb, yb, projections, seed)[0]
