"""Dense clustering engine for background pixel embeddings.

Matrices follow the column convention used throughout the package:
embeddings are ``D x N`` (one column per pixel) and cluster centers are
``D x K``.  All arithmetic is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInputError, InvalidArgumentError, NumericalDegeneracyError, StructuralError

BACKGROUND = -1
NO_NOVEL = -1


@dataclass
class EmbeddingBatch:
    """Per-pixel embeddings with their training labels.

    ``labels[n]`` is a base-class index in ``[0, C)`` or ``BACKGROUND``.
    ``hidden_novel[n]`` is the novel-class index of a pixel that training sees
    as background, ``NO_NOVEL`` otherwise.  It exists for evaluation only.
    """

    data: np.ndarray
    labels: np.ndarray
    hidden_novel: np.ndarray = field(default=None)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise StructuralError(f"embedding data must be D x N, got shape {self.data.shape}")
        n = self.data.shape[1]
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.hidden_novel is None:
            self.hidden_novel = np.full(n, NO_NOVEL, dtype=np.int64)
        self.hidden_novel = np.asarray(self.hidden_novel, dtype=np.int64).reshape(-1)
        if self.labels.shape[0] != n or self.hidden_novel.shape[0] != n:
            raise StructuralError("labels and hidden_novel must have one entry per column")
        if np.any((self.hidden_novel != NO_NOVEL) & (self.labels != BACKGROUND)):
            raise StructuralError("hidden novel ids are only allowed on background pixels")

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    @property
    def n(self) -> int:
        return self.data.shape[1]

    @property
    def background_mask(self) -> np.ndarray:
        return self.labels == BACKGROUND

    def background(self) -> "EmbeddingBatch":
        mask = self.background_mask
        return EmbeddingBatch(self.data[:, mask], self.labels[mask], self.hidden_novel[mask])


@dataclass(frozen=True)
class ClusterBank:
    centers: np.ndarray
    mu: float = 0.999

    def __post_init__(self):
        centers = np.asarray(self.centers, dtype=np.float64)
        if centers.ndim != 2:
            raise StructuralError("cluster centers must be a D x K matrix")
        if centers.shape[1] < 2:
            raise InvalidArgumentError("a cluster bank needs at least two centers")
        if not 0.0 < self.mu < 1.0:
            raise InvalidArgumentError(f"momentum must lie in (0, 1), got {self.mu}")
        object.__setattr__(self, "centers", centers)

    @property
    def dim(self) -> int:
        return self.centers.shape[0]

    @property
    def k(self) -> int:
        return self.centers.shape[1]


@dataclass(frozen=True)
class AggregateResult:
    sums: np.ndarray
    counts: np.ndarray


def init_bank(dim, k, mu=0.999, seed=0) -> ClusterBank:
    """Centers drawn uniformly on the unit sphere."""
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((dim, k))
    centers /= np.linalg.norm(centers, axis=0, keepdims=True)
    return ClusterBank(centers, mu)


def _embedding_matrix(bg) -> np.ndarray:
    data = bg.data if isinstance(bg, EmbeddingBatch) else np.asarray(bg, dtype=np.float64)
    if data.ndim != 2:
        raise StructuralError(f"embeddings must be D x N, got shape {data.shape}")
    return data


def similarity(bank: ClusterBank, bg) -> np.ndarray:
    """Raw inner products ``P^T I`` between centers and background embeddings (K x N)."""
    data = _embedding_matrix(bg)
    if data.shape[0] != bank.dim:
        raise StructuralError(f"embedding dim {data.shape[0]} != center dim {bank.dim}")
    if data.shape[1] == 0:
        raise EmptyInputError("no background pixels to compare against the cluster bank")
    return bank.centers.T @ data


def assign(sim) -> np.ndarray:
    """One-hot argmax per column; ties go to the lowest row index."""
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.size == 0:
        raise EmptyInputError("similarity matrix is empty")
    if np.isnan(sim).any():
        raise StructuralError("NaN in similarity matrix")
    # np.argmax returns the first maximal index
    winners = np.argmax(sim, axis=0)
    out = np.zeros(sim.shape, dtype=np.int8)
    out[winners, np.arange(sim.shape[1])] = 1
    return out


def assignment_indices(a) -> np.ndarray:
    return np.argmax(np.asarray(a), axis=0)


def aggregate(bg, a) -> AggregateResult:
    """Per-center sums of assigned embeddings (``I A^T``) and assignment counts."""
    data = _embedding_matrix(bg)
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[1] != data.shape[1]:
        raise StructuralError(f"assignment shape {a.shape} does not match {data.shape[1]} pixels")
    idx = assignment_indices(a)
    k = a.shape[0]
    sums_t = np.zeros((k, data.shape[0]))
    # unbuffered, accumulates pixels left to right
    np.add.at(sums_t, idx, data.T)
    sums = np.ascontiguousarray(sums_t.T)
    counts = np.bincount(idx, minlength=k).astype(np.int64)
    return AggregateResult(sums, counts)


def ema_update(bank: ClusterBank, agg: AggregateResult) -> ClusterBank:
    """Momentum update of every center that received at least one pixel.

    ``p <- mu * p/|p| + (1 - mu) * p_hat/|p_hat|``.  Centers with a zero count
    are copied through untouched.
    """
    if agg.sums.shape != bank.centers.shape or agg.counts.shape[0] != bank.k:
        raise StructuralError("aggregate does not match the cluster bank")
    centers = bank.centers.copy()
    mu = bank.mu
    for k in np.flatnonzero(agg.counts > 0):
        p = bank.centers[:, k]
        p_hat = agg.sums[:, k]
        p_norm = np.linalg.norm(p)
        hat_norm = np.linalg.norm(p_hat)
        if p_norm == 0.0 or hat_norm == 0.0:
            raise NumericalDegeneracyError(f"zero-norm vector in the update of center {k}")
        centers[:, k] = mu * (p / p_norm) + (1.0 - mu) * (p_hat / hat_norm)
    return ClusterBank(centers, mu)


@dataclass
class KMeansResult:
    centers: np.ndarray  # D x k
    labels: np.ndarray
    inertia: float
    inertia_history: list
    n_iter: int

    def __iter__(self):
        # unpacks as (centers, labels)
        return iter((self.centers, self.labels))


def _sq_distances(x, centers):
    diff = x[:, :, None] - centers[:, None, :]
    return np.einsum("dnk,dnk->nk", diff, diff)


def _kmeans_pp(x, k, rng):
    n = x.shape[1]
    chosen = [int(rng.integers(n))]
    closest = _sq_distances(x, x[:, chosen])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if not np.isfinite(total):
            raise NumericalDegeneracyError("squared distances overflow")
        if total <= 0.0:
            nxt = int(rng.integers(n))
        else:
            nxt = int(rng.choice(n, p=closest / total))
        chosen.append(nxt)
        closest = np.minimum(closest, _sq_distances(x, x[:, [nxt]])[:, 0])
    return x[:, chosen].copy()


def _lloyd(x, centers, max_iter, tol):
    k = centers.shape[1]
    history = []
    labels = None
    for _ in range(max_iter):
        new_labels = np.argmin(_sq_distances(x, centers), axis=1)
        resid = x - centers[:, new_labels]
        inertia = float(np.einsum("dn,dn->", resid, resid))
        history.append(inertia)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        if len(history) > 1:
            prev = history[-2]
            if prev == 0.0 or abs(prev - inertia) / prev < tol:
                break
        for j in range(k):
            members = labels == j
            if members.any():
                centers[:, j] = x[:, members].mean(axis=1)
    return KMeansResult(centers, new_labels, history[-1], history, len(history))


def offline_kmeans(bg, k, seed=0, max_iter=100, tol=1e-8, n_init=10) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeding on the columns of ``bg``.

    Stops when labels stop changing, when the relative inertia change drops
    below ``tol``, or after ``max_iter`` assignment steps.  A center that loses
    all its points keeps its previous position.  The seeding is repeated
    ``n_init`` times and the run with the lowest final inertia is returned
    (the first one on ties).
    """
    x = _embedding_matrix(bg)
    n = x.shape[1]
    if k < 1:
        raise InvalidArgumentError("k must be positive")
    if k > n:
        raise InvalidArgumentError(f"cannot form {k} clusters from {n} points")
    if n_init < 1:
        raise InvalidArgumentError("n_init must be positive")
    if not np.all(np.isfinite(x)):
        raise StructuralError("k-means input contains non-finite values")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        result = _lloyd(x, _kmeans_pp(x, k, rng), max_iter, tol)
        if best is None or result.inertia < best.inertia:
            best = result
    return best
