"""Softmax objectives on pixel embeddings and their analytic gradients.

Cluster centers are treated as constants here: they move only through the
momentum updates, so the background mining loss never returns a gradient
for them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cluster import BACKGROUND, ClusterBank, EmbeddingBatch, assignment_indices
from .errors import InvalidArgumentError, StructuralError


@dataclass(frozen=True)
class ProjectionBank:
    """Linear classifier ``W`` (D x C), one projection vector per class."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[1] < 1:
            raise StructuralError(f"projection weights must be D x C with C >= 1, got {w.shape}")
        object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    @property
    def n_classes(self) -> int:
        return self.weights.shape[1]


@dataclass
class LossReport:
    base_loss: float
    bm_loss: float
    total: float
    alpha: float
    grad_embeddings: np.ndarray
    grad_projections: np.ndarray


def softmax_xent(logits, target):
    """Negative log-softmax at ``target`` and its gradient w.r.t. the logits."""
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max()
    lse = np.log(np.exp(shifted).sum())
    probs = np.exp(shifted - lse)
    value = lse - shifted[target]
    dz = probs.copy()
    dz[target] -= 1.0
    return float(value), dz


def _batched_xent(z, targets):
    """Column-wise version of :func:`softmax_xent` for a ``classes x N`` logit matrix."""
    shifted = z - z.max(axis=0, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=0))
    cols = np.arange(z.shape[1])
    values = lse - shifted[targets, cols]
    dz = np.exp(shifted - lse)
    dz[targets, cols] -= 1.0
    return values, dz


def bm_loss(i, bank: ClusterBank, target: int):
    """Background mining loss of one embedding toward its assigned center."""
    if not 0 <= target < bank.k:
        raise InvalidArgumentError(f"cluster index {target} outside [0, {bank.k})")
    i = np.asarray(i, dtype=np.float64)
    value, dz = softmax_xent(bank.centers.T @ i, target)
    return value, bank.centers @ dz


def base_loss(j, bank: ProjectionBank, c: int):
    """Cross-entropy of one embedding against the projection vectors.

    Returns ``(value, grad_j, grad_W)``.
    """
    if not 0 <= c < bank.n_classes:
        raise InvalidArgumentError(f"class id {c} outside [0, {bank.n_classes})")
    j = np.asarray(j, dtype=np.float64)
    value, dz = softmax_xent(bank.weights.T @ j, c)
    return value, bank.weights @ dz, np.outer(j, dz)


def total_loss(batch: EmbeddingBatch, cbank, pbank: ProjectionBank, a, alpha=0.1) -> LossReport:
    """Summed base cross-entropy plus ``alpha`` times the summed mining loss.

    ``a`` is the K x N_bg assignment of the batch's background pixels, in
    column order.  Pass ``cbank=None, a=None`` for batches without background
    pixels (or when background is supervised as an ordinary class).
    """
    data = batch.data
    if data.shape[0] != pbank.dim:
        raise StructuralError("embedding dim does not match the projection bank")
    base = batch.labels != BACKGROUND
    bg = ~base
    n_bg = int(bg.sum())
    grad_e = np.zeros_like(data)
    grad_w = np.zeros_like(pbank.weights)

    base_total = 0.0
    if base.any():
        labels = batch.labels[base]
        if labels.max() >= pbank.n_classes or labels.min() < 0:
            raise InvalidArgumentError("base label outside the projection bank")
        j = data[:, base]
        values, dz = _batched_xent(pbank.weights.T @ j, labels)
        base_total = float(values.sum())
        grad_e[:, base] = pbank.weights @ dz
        grad_w = j @ dz.T

    bm_total = 0.0
    if n_bg:
        if a is None or cbank is None:
            raise StructuralError("background pixels present but no cluster assignment given")
        a = np.asarray(a)
        if a.shape != (cbank.k, n_bg):
            raise StructuralError(f"assignment shape {a.shape} != ({cbank.k}, {n_bg})")
        if cbank.dim != data.shape[0]:
            raise StructuralError("embedding dim does not match the cluster bank")
        i = data[:, bg]
        values, dz = _batched_xent(cbank.centers.T @ i, assignment_indices(a))
        bm_total = float(values.sum())
        grad_e[:, bg] = alpha * (cbank.centers @ dz)
    elif a is not None and np.asarray(a).shape[1] != 0:
        raise StructuralError("assignment given for a batch without background pixels")

    return LossReport(
        base_loss=base_total,
        bm_loss=bm_total,
        total=base_total + alpha * bm_total,
        alpha=alpha,
        grad_embeddings=grad_e,
        grad_projections=grad_w,
    )
