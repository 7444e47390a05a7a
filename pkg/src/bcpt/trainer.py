"""Pre-training loop for the per-pixel embedder.

Each iteration runs, in order: guidance on the cluster bank, the forward
pass, cluster assignment of background pixels, the summed objective with its
backward pass, an SGD-with-momentum step on the embedder and projection
vectors, and finally the momentum update of the cluster centers from this
batch's assignments.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .cluster import (
    BACKGROUND,
    ClusterBank,
    EmbeddingBatch,
    aggregate,
    assign,
    ema_update,
    init_bank,
    offline_kmeans,
    similarity,
)
from .config import STREAM_BATCHES, STREAM_INIT, STREAM_OFFLINE, TrainConfig, derive_seed
from .embedder import EmbedderParams, backward, forward, init_params
from .errors import InvalidArgumentError, NumericalDegeneracyError, StructuralError, TrainingDivergedError
from .guidance import guidance_step
from .io import read_container, write_container
from .losses import ProjectionBank, total_loss

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"BCPTCKPT"


@dataclass
class TrainState:
    config: TrainConfig
    params: EmbedderParams
    projections: ProjectionBank
    clusters: ClusterBank | None
    velocity: list
    rng: np.random.Generator
    n_base: int
    iteration: int = 0
    total_steps: int = 0
    offline_labels: np.ndarray | None = None
    log: list = field(default_factory=list)
    # (total, base, bm, n_pixels) of the most recent step
    last_step: tuple | None = None

    @property
    def feature_dim(self) -> int:
        return self.params.in_dim

    def base_projections(self) -> ProjectionBank:
        return ProjectionBank(self.projections.weights[:, : self.n_base])

    def clone(self) -> "TrainState":
        return copy.deepcopy(self)


def init_state(config: TrainConfig, feature_dim: int, n_base: int, total_steps: int = 0) -> TrainState:
    cfg = config
    params = init_params(
        [feature_dim, cfg.hidden_dim, cfg.embed_dim], seed=derive_seed(cfg.seed, STREAM_INIT, 0)
    )
    n_out = n_base if cfg.uses_clusters else n_base + 1
    w_rng = np.random.default_rng(derive_seed(cfg.seed, STREAM_INIT, 1))
    projections = ProjectionBank(0.1 * w_rng.standard_normal((cfg.embed_dim, n_out)))
    clusters = None
    if cfg.scheme != "standard":
        clusters = init_bank(cfg.embed_dim, cfg.k, cfg.mu, seed=derive_seed(cfg.seed, STREAM_INIT, 2))
    velocity = [np.zeros_like(a) for a in params.arrays()] + [np.zeros_like(projections.weights)]
    rng = np.random.default_rng(derive_seed(cfg.seed, STREAM_BATCHES))
    return TrainState(cfg, params, projections, clusters, velocity, rng, n_base, 0, total_steps)


def supervision_labels(train_labels, n_base: int, uses_clusters: bool) -> np.ndarray:
    """Map scene labels to projection columns; background becomes column ``n_base``
    when it is supervised as an ordinary class."""
    labels = np.asarray(train_labels, dtype=np.int64).reshape(-1)
    if uses_clusters:
        return labels
    return np.where(labels == BACKGROUND, n_base, labels)


def loss_and_grads(params, projections, clusters, x, labels, a, alpha, scale=1.0):
    """Scaled objective and gradients for a fixed background assignment ``a``.

    Returns ``(value, param_grads, projection_grad, report, embeddings)``.
    """
    emb, cache = forward(params, x)
    report = total_loss(EmbeddingBatch(emb, labels), clusters, projections, a, alpha)
    grads = backward(params, cache, scale * report.grad_embeddings)
    return scale * report.total, grads, scale * report.grad_projections, report, emb


def _sample_pixels(scenes, n_pixels, rng, pseudo_labels=None):
    x = np.concatenate([s.features.reshape(s.features.shape[0], -1) for s in scenes], axis=1)
    lab = np.concatenate([s.train_labels.reshape(-1) for s in scenes])
    pseudo = None
    if pseudo_labels is not None:
        pseudo = np.concatenate([np.asarray(p).reshape(-1) for p in pseudo_labels])
    total = x.shape[1]
    idx = np.sort(rng.choice(total, size=min(n_pixels, total), replace=False))
    return x[:, idx], lab[idx], None if pseudo is None else pseudo[idx]


def learning_rate(cfg: TrainConfig, iteration: int, total_steps: int) -> float:
    if cfg.lr_schedule == "cosine" and total_steps > 0:
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(iteration, total_steps) / total_steps))
    return cfg.lr


def train_step(state: TrainState, scenes, pseudo_labels=None) -> TrainState:
    """One optimisation step on a pixel sample drawn from ``scenes``.

    ``pseudo_labels`` (offline scheme only) holds one flat cluster-id map per
    scene; non-background entries are ignored.
    """
    cfg = state.config
    state = state.clone()
    clusters = state.clusters

    if cfg.scheme == "bcpt" and cfg.ocg_enabled:
        if not np.all(np.isfinite(state.projections.weights)):
            raise TrainingDivergedError(state.iteration, "non-finite projection vectors")
        try:
            clusters = guidance_step(clusters, state.base_projections(), cfg, state.iteration)
        except NumericalDegeneracyError as exc:
            raise TrainingDivergedError(state.iteration, f"guidance failed ({exc})") from exc

    if cfg.scheme == "offline" and pseudo_labels is None:
        raise StructuralError("the offline scheme needs per-scene pseudo-labels")
    x, raw_labels, pseudo = _sample_pixels(scenes, cfg.batch_pixels, state.rng, pseudo_labels)
    if x.shape[0] != state.feature_dim:
        raise StructuralError(f"scene features have dim {x.shape[0]}, embedder expects {state.feature_dim}")
    labels = supervision_labels(raw_labels, state.n_base, cfg.uses_clusters)
    bg = labels == BACKGROUND

    emb, cache = forward(state.params, x)
    a = None
    if cfg.uses_clusters and bg.any():
        if cfg.scheme == "bcpt":
            a = assign(similarity(clusters, emb[:, bg]))
        else:
            ids = pseudo[bg]
            a = np.zeros((clusters.k, ids.shape[0]), dtype=np.int8)
            a[ids, np.arange(ids.shape[0])] = 1

    report = total_loss(
        EmbeddingBatch(emb, labels), clusters if a is not None else None, state.projections, a, cfg.alpha
    )
    if not np.isfinite(report.total) or not np.all(np.isfinite(report.grad_embeddings)):
        raise TrainingDivergedError(state.iteration)

    scale = 1.0 / x.shape[1] if cfg.normalize_loss else 1.0
    grads = backward(state.params, cache, scale * report.grad_embeddings)
    grads.append(scale * report.grad_projections)

    lr = learning_rate(cfg, state.iteration, state.total_steps)
    arrays = state.params.arrays() + [state.projections.weights]
    new_arrays = []
    for i, (p, g) in enumerate(zip(arrays, grads)):
        v = cfg.momentum * state.velocity[i] + g
        state.velocity[i] = v
        new_arrays.append(p - lr * v)
    state.params = EmbedderParams.from_arrays(new_arrays[:-1])
    state.projections = ProjectionBank(new_arrays[-1])
    if not all(np.all(np.isfinite(p)) for p in new_arrays):
        raise TrainingDivergedError(state.iteration, "non-finite parameters")

    if cfg.scheme == "bcpt" and a is not None:
        try:
            clusters = ema_update(clusters, aggregate(emb[:, bg], a))
        except NumericalDegeneracyError as exc:
            raise TrainingDivergedError(state.iteration, f"cluster update failed ({exc})") from exc
    state.clusters = clusters
    state.iteration += 1
    state.last_step = (report.total, report.base_loss, report.bm_loss, x.shape[1])
    return state


def scene_embeddings(state: TrainState, scene) -> np.ndarray:
    feats = scene.features.reshape(scene.features.shape[0], -1)
    return forward(state.params, feats)[0]


def embed(params: EmbedderParams, scene) -> EmbeddingBatch:
    """Embed every pixel of a scene, carrying its training labels and hidden novel ids."""
    feats = scene.features.reshape(scene.features.shape[0], -1)
    out, _ = forward(params, feats)
    hidden = scene.hidden_novel.reshape(-1)
    hidden = np.where(hidden >= 0, hidden - scene.n_base, hidden)
    return EmbeddingBatch(out, scene.train_labels.reshape(-1), hidden)


def refresh_pseudo_labels(state: TrainState, scenes, epoch: int) -> TrainState:
    """Offline strawman: k-means over all background embeddings of the training set."""
    cfg = state.config
    embs = [scene_embeddings(state, s) for s in scenes]
    masks = [s.train_labels.reshape(-1) == BACKGROUND for s in scenes]
    bg = np.concatenate([e[:, m] for e, m in zip(embs, masks)], axis=1)
    km = offline_kmeans(bg, cfg.k, seed=derive_seed(cfg.seed, STREAM_OFFLINE, epoch))
    centers = km.centers.copy()
    norms = np.linalg.norm(centers, axis=0)
    centers[:, norms > 0] /= norms[norms > 0]
    labels = np.full((len(scenes), masks[0].shape[0]), -1, dtype=np.int64)
    start = 0
    for i, m in enumerate(masks):
        count = int(m.sum())
        labels[i, m] = km.labels[start : start + count]
        start += count
    state = state.clone()
    state.clusters = ClusterBank(centers, cfg.mu)
    state.offline_labels = labels
    return state


def steps_per_epoch(n_scenes: int, cfg: TrainConfig) -> int:
    return math.ceil(n_scenes / cfg.scenes_per_batch)


def pretrain(fold, config: TrainConfig, state: TrainState | None = None, on_epoch=None) -> TrainState:
    """Run ``config.epochs`` epochs over the fold's training scenes.

    Resuming from ``state`` continues at the next epoch boundary.  Every epoch
    appends a record to ``state.log`` and, if given, calls ``on_epoch(record)``.
    """
    scenes = fold.train_scenes
    if not scenes:
        raise InvalidArgumentError("fold has no training scenes")
    spe = steps_per_epoch(len(scenes), config)
    if state is None:
        state = init_state(config, scenes[0].features.shape[0], len(fold.base_class_ids), config.epochs * spe)
    start_epoch = state.iteration // spe
    for epoch in range(start_epoch, config.epochs):
        if config.scheme == "offline":
            state = refresh_pseudo_labels(state, scenes, epoch)
        order = state.rng.permutation(len(scenes))
        totals = np.zeros(3)
        pixels = 0
        for b in range(spe):
            idx = order[b * config.scenes_per_batch : (b + 1) * config.scenes_per_batch]
            pseudo = None
            if config.scheme == "offline":
                pseudo = [state.offline_labels[i] for i in idx]
            state = train_step(state, [scenes[i] for i in idx], pseudo)
            totals += state.last_step[:3]
            pixels += state.last_step[3]
        record = {
            "epoch": epoch,
            "iteration": state.iteration,
            "loss": totals[0] / pixels,
            "base_loss": totals[1] / pixels,
            "bm_loss": totals[2] / pixels,
        }
        state.log.append(record)
        log.debug("epoch %d: loss %.6f", epoch, record["loss"])
        if on_epoch is not None:
            on_epoch(record)
    return state


def _rng_header(rng: np.random.Generator):
    st = rng.bit_generator.state
    text = json.dumps(st, sort_keys=True)
    return st, hashlib.sha256(text.encode()).hexdigest()


def save_checkpoint(state: TrainState, path) -> None:
    rng_state, digest = _rng_header(state.rng)
    header = {
        "kind": "checkpoint",
        "config": state.config.to_dict(),
        "iteration": state.iteration,
        "total_steps": state.total_steps,
        "n_base": state.n_base,
        "n_layers": len(state.params.weights),
        "rng_state": rng_state,
        "rng_digest": digest,
        "log": state.log,
    }
    blocks = [(f"params/{i}", "f8", a) for i, a in enumerate(state.params.arrays())]
    blocks.append(("projections", "f8", state.projections.weights))
    if state.clusters is not None:
        blocks.append(("clusters", "f8", state.clusters.centers))
    blocks += [(f"velocity/{i}", "f8", v) for i, v in enumerate(state.velocity)]
    if state.offline_labels is not None:
        blocks.append(("offline_labels", "i4", state.offline_labels))
    write_container(path, CHECKPOINT_MAGIC, header, blocks)


def load_checkpoint(path) -> TrainState:
    header, arrays = read_container(path, CHECKPOINT_MAGIC)
    if header.get("kind") != "checkpoint":
        raise StructuralError(f"{path} does not hold a checkpoint")
    cfg = TrainConfig.from_dict(header["config"])
    n_params = 2 * header["n_layers"]
    params = EmbedderParams.from_arrays([arrays[f"params/{i}"] for i in range(n_params)])
    clusters = ClusterBank(arrays["clusters"], cfg.mu) if "clusters" in arrays else None
    velocity = [arrays[f"velocity/{i}"] for i in range(n_params + 1)]
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng_state"]
    offline = arrays.get("offline_labels")
    return TrainState(
        cfg,
        params,
        ProjectionBank(arrays["projections"]),
        clusters,
        velocity,
        rng,
        header["n_base"],
        header["iteration"],
        header["total_steps"],
        None if offline is None else offline.astype(np.int64),
        header["log"],
    )


def checkpoint_digest(state: TrainState) -> str:
    h = hashlib.sha256()
    for a in state.params.arrays() + [state.projections.weights] + state.velocity:
        h.update(np.ascontiguousarray(a).tobytes())
    if state.clusters is not None:
        h.update(state.clusters.centers.tobytes())
    h.update(_rng_header(state.rng)[1].encode())
    return h.hexdigest()


def with_config(state: TrainState, **changes) -> TrainState:
    state = state.clone()
    state.config = replace(state.config, **changes)
    return state
