"""Steering background cluster centers with base-class projection vectors.

The projection vectors are summarised by k-means into guidance vectors, each
guidance vector is mapped to one cluster center, and mapped centers take a
momentum step toward the (normalised) sum of their guidance vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .cluster import ClusterBank, offline_kmeans
from .config import STREAM_GUIDANCE, derive_seed
from .errors import InvalidArgumentError, NumericalDegeneracyError, StructuralError
from .losses import ProjectionBank


@dataclass(frozen=True)
class GuidanceBank:
    vectors: np.ndarray  # D x (K-1)

    @property
    def count(self) -> int:
        return self.vectors.shape[1]


def distill_guidance(pbank: ProjectionBank, n_guidance: int, seed=0) -> GuidanceBank:
    """k-means centroids of the projection vectors."""
    if n_guidance < 1:
        raise InvalidArgumentError("need at least one guidance vector")
    if pbank.n_classes < n_guidance:
        raise InvalidArgumentError(
            f"{pbank.n_classes} projection vectors cannot yield {n_guidance} guidance vectors"
        )
    result = offline_kmeans(pbank.weights, n_guidance, seed=seed)
    return GuidanceBank(result.centers)


def mapping_scores(g: GuidanceBank, cbank: ClusterBank) -> np.ndarray:
    if g.vectors.shape[0] != cbank.dim:
        raise StructuralError("guidance and cluster centers differ in dimension")
    scores = g.vectors.T @ cbank.centers
    if np.isnan(scores).any():
        raise StructuralError("NaN similarity between guidance vectors and centers")
    return scores


def solve_mapping(g: GuidanceBank, cbank: ClusterBank, mode="argmax") -> np.ndarray:
    """Binary (K-1) x K matrix maximising ``Tr(M^T G^T P)`` with one-hot rows.

    With only the row constraint the optimum is a per-row argmax (ties to the
    lowest center index).  ``mode="injective"`` additionally forbids two
    guidance vectors from sharing a center and solves the resulting linear
    assignment problem.
    """
    scores = mapping_scores(g, cbank)
    rows = np.arange(scores.shape[0])
    if mode == "argmax":
        cols = np.argmax(scores, axis=1)
    elif mode == "injective":
        if scores.shape[0] > scores.shape[1]:
            raise InvalidArgumentError("injective mapping needs no more guidance vectors than centers")
        rows, cols = linear_sum_assignment(scores, maximize=True)
    else:
        raise InvalidArgumentError(f"unknown mapping mode {mode!r}")
    m = np.zeros(scores.shape, dtype=np.int8)
    m[rows, cols] = 1
    return m


def mapping_trace(m, g: GuidanceBank, cbank: ClusterBank) -> float:
    """``Tr(M^T G^T P)``, summed row by row over the selected scores."""
    m = np.asarray(m)
    scores = mapping_scores(g, cbank)
    if m.shape != scores.shape:
        raise StructuralError(f"mapping shape {m.shape} does not fit {scores.shape}")
    total = 0.0
    for i in range(m.shape[0]):
        total += float(scores[i] @ m[i].astype(np.float64))
    return total


def guided_update(cbank: ClusterBank, g: GuidanceBank, m, renormalize=False) -> ClusterBank:
    """``p <- mu * p + (1 - mu) * g_hat/|g_hat|`` for every center with guidance.

    ``g_hat`` is the sum of the guidance vectors mapped to the center.  With
    ``renormalize=True`` the first term uses ``p/|p|`` instead of ``p``.
    Centers without guidance are returned untouched.
    """
    m = np.asarray(m)
    if m.shape != (g.count, cbank.k) or g.vectors.shape[0] != cbank.dim:
        raise StructuralError(f"mapping shape {m.shape} does not fit ({g.count}, {cbank.k})")
    mu = cbank.mu
    centers = cbank.centers.copy()
    g_hat_all = g.vectors @ m.astype(np.float64)
    for k in np.flatnonzero(m.sum(axis=0) > 0):
        g_hat = g_hat_all[:, k]
        norm = np.linalg.norm(g_hat)
        if norm == 0.0:
            raise NumericalDegeneracyError(f"guidance vectors assigned to center {k} sum to zero")
        p = cbank.centers[:, k]
        if renormalize:
            p_norm = np.linalg.norm(p)
            if p_norm == 0.0:
                raise NumericalDegeneracyError(f"center {k} has zero norm")
            p = p / p_norm
        centers[:, k] = mu * p + (1.0 - mu) * (g_hat / norm)
    return ClusterBank(centers, mu)


def guidance_step(cbank: ClusterBank, pbank: ProjectionBank, config, iteration=0) -> ClusterBank:
    """Distill, map and apply guidance once; a no-op when guidance is disabled.

    When there are fewer projection vectors than ``K - 1`` every projection
    vector becomes its own guidance vector.
    """
    if not config.ocg_enabled or iteration % config.guidance_stride:
        return cbank
    n_guidance = min(cbank.k - 1, pbank.n_classes)
    g = distill_guidance(pbank, n_guidance, seed=derive_seed(config.seed, STREAM_GUIDANCE, iteration))
    m = solve_mapping(g, cbank, mode=config.mapping)
    return guided_update(cbank, g, m, renormalize=config.guided_renormalize)
