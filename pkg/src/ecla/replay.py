"""Generative replay: labeled latent draws from the mixture, decoded to pseudo-inputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ValidationError
from .gmm import GmmModel, sample
from .model import ConceptModel


@dataclass(frozen=True)
class PseudoDataset:
    x_er: np.ndarray  # (n, d) decoded pseudo-inputs
    y_er: np.ndarray  # (n,)
    z_er: np.ndarray  # (n, f) latent samples x_er was decoded from

    def __post_init__(self):
        if not (self.x_er.shape[0] == self.y_er.shape[0] == self.z_er.shape[0]):
            raise DimensionError("pseudo-dataset fields disagree on row count")

    def __len__(self) -> int:
        return self.y_er.shape[0]


def balance_counts(n_er: int, k: int) -> np.ndarray:
    """Stratified allocation: ``n_er // k`` each, remainder to the lowest indices."""
    if k < 1 or n_er < k:
        raise ValidationError(f"need n_er >= k >= 1, got n_er={n_er}, k={k}")
    base, rem = divmod(n_er, k)
    counts = np.full(k, base, dtype=np.int64)
    counts[:rem] += 1
    return counts


def generate(gmm: GmmModel, model: ConceptModel, n_er: int, rng: np.random.Generator,
             balanced: bool = True) -> PseudoDataset:
    if gmm.dim != model.embed_dim:
        raise ValidationError(f"GMM dim {gmm.dim} != model embedding dim {model.embed_dim}")
    counts = balance_counts(n_er, gmm.num_components) if balanced else None
    if not balanced and n_er < gmm.num_components:
        raise ValidationError(f"need n_er >= k, got n_er={n_er}")
    z, y = sample(gmm, n_er, rng, counts)
    return PseudoDataset(model.decode(z), y, z)
