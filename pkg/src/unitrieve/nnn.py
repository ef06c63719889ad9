"""Test-time nearest-neighbor score normalization.

Each gallery image gets a bias equal to ``alpha`` times the mean similarity
to its ``kappa`` most similar reference queries. Debiased scores subtract
that per-image constant from every query's score against the image, which
pushes down hub images that sit close to many queries at once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embedding import similarity_matrix
from .errors import EmptyGallery, KappaTooLarge, LengthMismatch

DEFAULT_ALPHA = 0.75
DEFAULT_KAPPA = 16


@dataclass(frozen=True)
class NnnConfig:
    alpha: float = DEFAULT_ALPHA
    kappa: int = DEFAULT_KAPPA

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.kappa < 1:
            raise ValueError("kappa must be at least 1")


def compute_bias(gallery, reference_queries, cfg: NnnConfig) -> np.ndarray:
    gallery = np.asarray(gallery, dtype=np.float64)
    refs = np.asarray(reference_queries, dtype=np.float64)
    if gallery.ndim != 2 or gallery.shape[0] == 0:
        raise EmptyGallery("gallery is empty")
    if refs.ndim != 2 or cfg.kappa > refs.shape[0]:
        raise KappaTooLarge(f"kappa={cfg.kappa} exceeds {refs.shape[0] if refs.ndim == 2 else 0} reference queries")
    sims = similarity_matrix(gallery, refs)
    # Sorting fixes the summation order, so the result ignores query order.
    top = -np.sort(-sims, axis=1)[:, : cfg.kappa]
    return cfg.alpha * (top.sum(axis=1) / cfg.kappa)


def normalize_scores(raw, bias) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if raw.ndim != 2 or bias.shape != (raw.shape[1],):
        raise LengthMismatch(f"bias of shape {bias.shape} does not match {raw.shape[1]} gallery columns")
    return raw - bias[None, :]
