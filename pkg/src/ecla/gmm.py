"""Labeled diagonal-covariance Gaussian mixture over the embedding space.

One component per class. Components are never permuted, so a component's
class label is fixed for its whole lifetime; this is what lets samples drawn
from the mixture carry labels.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from .errors import DimensionError, ValidationError
from .nn import as_tensor2

VAR_FLOOR = 1e-6
UNLABELED = -1


@dataclass(frozen=True, eq=False)
class GmmModel:
    weights: np.ndarray    # (k,)
    means: np.ndarray      # (k, f)
    variances: np.ndarray  # (k, f)
    labels: np.ndarray     # (k,) class label of each component
    var_floor: float = VAR_FLOOR

    def __post_init__(self):
        k, f = self.means.shape
        if self.weights.shape != (k,) or self.variances.shape != (k, f) or self.labels.shape != (k,):
            raise DimensionError("inconsistent GMM parameter shapes")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValidationError(f"weights sum to {self.weights.sum()}, expected 1")
        if np.any(self.variances < self.var_floor):
            raise ValidationError("variance below var_floor")
        for arr in (self.weights, self.means, self.variances, self.labels):
            arr.setflags(write=False)

    @property
    def num_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def component_of(self, label: int) -> int:
        hits = np.flatnonzero(self.labels == label)
        if hits.size == 0:
            raise ValidationError(f"no component with class label {label}")
        return int(hits[0])

    def save(self, path) -> None:
        np.savez(path, format_version=np.int64(1), weights=self.weights, means=self.means,
                 variances=self.variances, labels=self.labels,
                 var_floor=np.float64(self.var_floor))

    @classmethod
    def load(cls, path) -> "GmmModel":
        with np.load(path) as data:
            if int(data["format_version"]) != 1:
                raise ValidationError(f"unsupported GMM checkpoint version {int(data['format_version'])}")
            return cls(data["weights"].copy(), data["means"].copy(), data["variances"].copy(),
                       data["labels"].copy(), float(data["var_floor"]))


def _make(weights, means, variances, labels, var_floor) -> GmmModel:
    weights = np.asarray(weights, dtype=np.float64)
    weights = weights / weights.sum()
    return GmmModel(weights, np.asarray(means, dtype=np.float64),
                    np.maximum(np.asarray(variances, dtype=np.float64), var_floor),
                    np.asarray(labels, dtype=np.int64), var_floor)


def fit_labeled(z, y, classes=None, var_floor: float = VAR_FLOOR) -> GmmModel:
    """Per-class sample mean, variance and frequency.

    ``classes`` fixes the component order (defaults to the sorted labels of
    ``y``); each listed class needs at least two samples.
    """
    z = as_tensor2(z, "z")
    y = np.asarray(y).ravel()
    if y.shape[0] != z.shape[0]:
        raise DimensionError(f"{z.shape[0]} embeddings but {y.shape[0]} labels")
    classes = np.unique(y) if classes is None else np.asarray(classes)
    counts = np.array([(y == c).sum() for c in classes])
    short = classes[counts < 2]
    if short.size:
        raise ValidationError(f"classes with fewer than 2 samples: {short.tolist()}")
    means = np.stack([z[y == c].mean(axis=0) for c in classes])
    variances = np.stack([z[y == c].var(axis=0) for c in classes])
    return _make(counts / counts.sum(), means, variances, classes, var_floor)


def component_log_densities(gmm: GmmModel, z) -> np.ndarray:
    """(n, k) matrix of log N(z_i | mean_j, diag(var_j))."""
    z = as_tensor2(z, "z")
    if z.shape[1] != gmm.dim:
        raise DimensionError(f"z has {z.shape[1]} columns, GMM dim is {gmm.dim}")
    inv = 1.0 / gmm.variances
    # sum_f (z - mu)^2 / var expanded to avoid an (n, k, f) temporary
    quad = (z * z) @ inv.T - 2.0 * z @ (gmm.means * inv).T + np.sum(gmm.means ** 2 * inv, axis=1)
    log_norm = -0.5 * (gmm.dim * np.log(2 * np.pi) + np.sum(np.log(gmm.variances), axis=1))
    return log_norm - 0.5 * quad


def responsibilities(gmm: GmmModel, z) -> Tuple[np.ndarray, np.ndarray]:
    """Posterior component probabilities and per-point log mixture density."""
    joint = component_log_densities(gmm, z) + np.log(gmm.weights)
    log_px = logsumexp(joint, axis=1)
    return np.exp(joint - log_px[:, None]), log_px


def log_likelihood(gmm: GmmModel, z) -> float:
    """Mean log density of the rows of ``z`` under the mixture."""
    z = as_tensor2(z, "z")
    if z.shape[0] == 0:
        raise ValidationError("empty sample")
    return float(responsibilities(gmm, z)[1].mean())


def _m_step(gmm: GmmModel, z: np.ndarray, resp: np.ndarray) -> Tuple[GmmModel, List[int]]:
    mass = resp.sum(axis=0)
    empty = [j for j in range(gmm.num_components) if mass[j] <= 1e-12]
    means = gmm.means.copy()
    variances = gmm.variances.copy()
    for j in range(gmm.num_components):
        if j in empty:
            continue
        r = resp[:, j]
        mu = r @ z / mass[j]
        means[j] = mu
        variances[j] = r @ (z - mu) ** 2 / mass[j]
    weights = mass / mass.sum()
    if empty:
        # keep the empty component's previous share; renormalise the rest
        weights[empty] = gmm.weights[empty]
        rest = [j for j in range(gmm.num_components) if j not in empty]
        weights[rest] *= (1.0 - gmm.weights[empty].sum()) / max(weights[rest].sum(), 1e-300)
    return _make(weights, means, variances, gmm.labels, gmm.var_floor), empty


def em_refine(gmm: GmmModel, z, iters: int, return_history: bool = False):
    """Unsupervised diagonal EM warm-started from ``gmm``.

    Component identity (and hence class labels) is preserved. A component that
    receives no responsibility keeps its parameters and a ``RuntimeWarning``
    is issued. With ``return_history`` the mean log-likelihood before each
    iteration and after the last one is returned as well.
    """
    z = as_tensor2(z, "z")
    if z.shape[0] == 0:
        raise ValidationError("empty sample")
    history = []
    for _ in range(iters):
        resp, log_px = responsibilities(gmm, z)
        history.append(float(log_px.mean()))
        gmm, empty = _m_step(gmm, z, resp)
        if empty:
            warnings.warn(f"EM components {empty} received no responsibility; kept previous parameters",
                          RuntimeWarning, stacklevel=2)
    if return_history:
        history.append(log_likelihood(gmm, z))
        return gmm, history
    return gmm


def update_after_task(gmm: GmmModel, z_current, y_current, z_replay, y_replay,
                      passes: int = 1) -> GmmModel:
    """Semi-supervised refit over current-task and replay embeddings.

    ``y_current`` uses ``UNLABELED`` (-1) for points without a label. Labeled
    points (few-shot labels and replay labels) are hard-assigned to their
    class's component; unlabeled points get soft responsibilities under the
    running estimate. Each pass is one E-step on the unlabeled points
    followed by an M-step over the union.
    """
    f = gmm.dim
    z_current = as_tensor2(z_current, "z_current") if np.size(z_current) else np.zeros((0, f))
    z_replay = as_tensor2(z_replay, "z_replay") if np.size(z_replay) else np.zeros((0, f))
    y_current = np.asarray(y_current, dtype=np.int64).ravel()
    y_replay = np.asarray(y_replay, dtype=np.int64).ravel()
    if z_current.shape[0] != y_current.shape[0] or z_replay.shape[0] != y_replay.shape[0]:
        raise DimensionError("labels must match embedding row counts")
    if z_current.shape[1] != f or z_replay.shape[1] != f:
        raise DimensionError(f"embeddings must have {f} columns")
    z = np.concatenate([z_current, z_replay])
    y = np.concatenate([y_current, y_replay])
    labeled = y != UNLABELED
    unknown = set(np.unique(y[labeled]).tolist()) - set(gmm.labels.tolist())
    if unknown:
        raise ValidationError(f"labels {sorted(unknown)} have no GMM component")
    hard = np.zeros((z.shape[0], gmm.num_components))
    comp_of = {int(c): j for j, c in enumerate(gmm.labels)}
    rows = np.flatnonzero(labeled)
    hard[rows, [comp_of[int(c)] for c in y[labeled]]] = 1.0
    unl = np.flatnonzero(~labeled)
    for _ in range(max(passes, 1)):
        resp = hard.copy()
        if unl.size:
            resp[unl] = responsibilities(gmm, z[unl])[0]
        mass = resp.sum(axis=0)
        short = gmm.labels[mass < 2.0]
        if short.size:
            raise ValidationError(f"classes with fewer than 2 samples: {short.tolist()}")
        gmm, _ = _m_step(gmm, z, resp)
    return gmm


def sample(gmm: GmmModel, n: int, rng: np.random.Generator,
           counts: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` labeled latent points.

    Components are chosen by weight unless ``counts`` (per component, summing
    to ``n``) fixes the allocation. Rows are returned in a shuffled order.
    """
    if counts is None:
        comp = rng.choice(gmm.num_components, size=n, p=gmm.weights)
    else:
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (gmm.num_components,) or counts.sum() != n:
            raise ValidationError("counts must give one entry per component and sum to n")
        comp = rng.permutation(np.repeat(np.arange(gmm.num_components), counts))
    noise = rng.standard_normal((n, gmm.dim))
    z = gmm.means[comp] + noise * np.sqrt(gmm.variances[comp])
    return z, gmm.labels[comp].copy()
