"""Synthetic segmentation scenes with hidden novel classes.

Every class owns a fixed signature vector in feature space and a pixel's
features are its signature plus Gaussian noise.  Foreground signatures (base
and novel) lean toward ``+e0`` while the background modes lean toward
``-e0`` with a smaller norm, so foregrounds resemble each other more than
they resemble background.  Training label maps mark novel-class pixels as
background; the true label maps keep them.

Class ids are global: ``0 .. n_base-1`` are base classes and
``n_base .. n_base+n_novel-1`` novel classes.  ``-1`` marks background in
every label map.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from .cluster import BACKGROUND, NO_NOVEL
from .config import STREAM_DATA, derive_seed
from .errors import InvalidArgumentError, StructuralError
from .io import read_container, write_container

FOLD_MAGIC = b"BCPTFOLD"
FG_LEAN = 0.5  # e0 component of a unit foreground signature
BG_NORM = 0.6


@dataclass(frozen=True)
class SceneConfig:
    height: int = 32
    width: int = 32
    feature_dim: int = 16
    n_base: int = 3
    n_novel: int = 2
    n_bg_modes: int = 2
    blob_count_range: tuple = (3, 5)
    blob_radius_range: tuple = (3, 8)
    noise_sigma: float = 0.3
    cosine_threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "blob_count_range", tuple(self.blob_count_range))
        object.__setattr__(self, "blob_radius_range", tuple(self.blob_radius_range))
        if min(self.height, self.width, self.feature_dim, self.n_base) < 1:
            raise InvalidArgumentError("dimensions and n_base must be >= 1")
        if self.n_novel < 0 or self.n_bg_modes < 1:
            raise InvalidArgumentError("n_novel must be >= 0 and n_bg_modes >= 1")
        if self.height * self.width > 16384:
            raise InvalidArgumentError("scenes are limited to 16384 pixels")
        if self.noise_sigma < 0:
            raise InvalidArgumentError("noise_sigma must be non-negative")
        lo, hi = self.blob_count_range
        if not 1 <= lo <= hi:
            raise InvalidArgumentError("blob_count_range must satisfy 1 <= lo <= hi")
        rlo, rhi = self.blob_radius_range
        if not 1 <= rlo <= rhi:
            raise InvalidArgumentError("blob_radius_range must satisfy 1 <= lo <= hi")

    @property
    def n_classes(self) -> int:
        return self.n_base + self.n_novel

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blob_count_range"] = list(self.blob_count_range)
        d["blob_radius_range"] = list(self.blob_radius_range)
        return d


@dataclass
class Scene:
    features: np.ndarray  # feature_dim x H x W
    train_labels: np.ndarray  # H x W
    true_labels: np.ndarray  # H x W
    n_base: int = field(default=0)

    @property
    def shape(self):
        return self.true_labels.shape

    @property
    def hidden_novel(self) -> np.ndarray:
        """Novel ids that training sees as background, ``-1`` elsewhere."""
        return np.where(self.true_labels >= self.n_base, self.true_labels, NO_NOVEL)

    def classes_present(self):
        return sorted(int(c) for c in np.unique(self.true_labels) if c != BACKGROUND)


@dataclass
class Fold:
    config: SceneConfig
    seed: int
    signatures: np.ndarray  # (n_classes + n_bg_modes) x feature_dim
    train_scenes: list
    eval_scenes: list
    base_class_ids: list
    novel_class_ids: list


def _capacity_check(cfg: SceneConfig):
    # foreground directions live in the (feature_dim - 1)-dim complement of e0
    if cfg.n_classes + cfg.n_bg_modes > max(cfg.feature_dim - 1, 1):
        raise InvalidArgumentError(
            f"{cfg.n_classes} classes + {cfg.n_bg_modes} background modes exceed the "
            f"signature capacity of a {cfg.feature_dim}-dim feature space"
        )


def _cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


@lru_cache(maxsize=32)
def _signatures_cached(cfg: SceneConfig) -> np.ndarray:
    _capacity_check(cfg)
    rng = np.random.default_rng(derive_seed(cfg.seed, STREAM_DATA, 0))
    f = cfg.feature_dim
    n_total = cfg.n_classes + cfg.n_bg_modes
    sigs = []
    attempts = 0
    while len(sigs) < n_total:
        attempts += 1
        if attempts > 20000:
            raise InvalidArgumentError("could not place signatures below the cosine threshold")
        u = np.zeros(f)
        u[1:] = rng.standard_normal(f - 1) if f > 1 else 0.0
        nu = np.linalg.norm(u)
        if nu == 0.0:
            u[0] = 1.0
        else:
            u /= nu
        is_fg = len(sigs) < cfg.n_classes
        e0 = np.zeros(f)
        e0[0] = 1.0
        if f == 1:
            s = e0 if is_fg else -BG_NORM * e0
        elif is_fg:
            s = FG_LEAN * e0 + np.sqrt(1 - FG_LEAN**2) * u
        else:
            s = BG_NORM * (-FG_LEAN * e0 + np.sqrt(1 - FG_LEAN**2) * u)
        if all(_cos(s, t) < cfg.cosine_threshold for t in sigs):
            sigs.append(s)
    return np.array(sigs)


def class_signatures(cfg: SceneConfig) -> np.ndarray:
    """Rows ``0..n_classes-1`` are class signatures, the rest background modes."""
    return _signatures_cached(cfg).copy()


def _blob_mask(rng, h, w, rlo, rhi):
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    ry, rx = rng.uniform(rlo, rhi), rng.uniform(rlo, rhi)
    yy, xx = np.mgrid[0:h, 0:w]
    if rng.random() < 0.5:
        mask = ((yy + 0.5 - cy) / ry) ** 2 + ((xx + 0.5 - cx) / rx) ** 2 <= 1.0
    else:
        mask = (np.abs(yy + 0.5 - cy) <= ry) & (np.abs(xx + 0.5 - cx) <= rx)
    return mask


def _background_modes(rng, cfg):
    h, w = cfg.height, cfg.width
    n_sites = max(cfg.n_bg_modes, 2)
    sites = rng.uniform(0, 1, size=(n_sites, 2)) * [h, w]
    modes = np.arange(n_sites) % cfg.n_bg_modes
    rng.shuffle(modes)
    yy, xx = np.mgrid[0:h, 0:w]
    d = (yy[..., None] + 0.5 - sites[:, 0]) ** 2 + (xx[..., None] + 0.5 - sites[:, 1]) ** 2
    return modes[np.argmin(d, axis=-1)]


def generate_scene(cfg: SceneConfig, rng, force_class=None) -> Scene:
    """One random scene; ``force_class`` guarantees a visible region of that class."""
    sigs = _signatures_cached(cfg)
    h, w = cfg.height, cfg.width
    lo, hi = cfg.blob_count_range
    rlo, rhi = cfg.blob_radius_range
    bg_mode = _background_modes(rng, cfg)

    while True:
        labels = np.full((h, w), BACKGROUND, dtype=np.int64)
        n_blobs = int(rng.integers(lo, hi + 1))
        classes = rng.integers(0, cfg.n_classes, size=n_blobs)
        if force_class is not None:
            classes[-1] = force_class  # painted last so it stays visible
        ok = True
        for c in classes:
            mask = _blob_mask(rng, h, w, rlo, rhi)
            if not mask.any():
                ok = False
                break
            labels[mask] = c
        if ok and (force_class is None or (labels == force_class).any()):
            break

    sig_index = np.where(labels == BACKGROUND, cfg.n_classes + bg_mode, labels)
    features = sigs[sig_index].transpose(2, 0, 1).copy()
    if cfg.noise_sigma > 0:
        features += cfg.noise_sigma * rng.standard_normal(features.shape)
    train = np.where(labels >= cfg.n_base, BACKGROUND, labels)
    return Scene(features, train, labels, n_base=cfg.n_base)


def make_fold(cfg: SceneConfig, n_train: int, n_eval: int, seed=None) -> Fold:
    """Training scenes with novel classes relabelled as background plus evaluation scenes.

    Evaluation scene ``i`` is guaranteed a region of novel class ``i mod n_novel``.
    """
    if n_train < 1 or n_eval < 1:
        raise InvalidArgumentError("a fold needs at least one training and one evaluation scene")
    seed = cfg.seed if seed is None else seed
    sigs = class_signatures(cfg)
    base_ids = list(range(cfg.n_base))
    novel_ids = list(range(cfg.n_base, cfg.n_classes))
    train = [
        generate_scene(cfg, np.random.default_rng(derive_seed(seed, STREAM_DATA, 1, i)))
        for i in range(n_train)
    ]
    evals = []
    for i in range(n_eval):
        forced = novel_ids[i % len(novel_ids)] if novel_ids else None
        evals.append(
            generate_scene(cfg, np.random.default_rng(derive_seed(seed, STREAM_DATA, 2, i)), forced)
        )
    return Fold(cfg, seed, sigs, train, evals, base_ids, novel_ids)


def save_fold(fold: Fold, path) -> None:
    header = {
        "kind": "fold",
        "config": fold.config.to_dict(),
        "seed": fold.seed,
        "base_class_ids": fold.base_class_ids,
        "novel_class_ids": fold.novel_class_ids,
        "n_train": len(fold.train_scenes),
        "n_eval": len(fold.eval_scenes),
    }
    blocks = [("signatures", "f8", fold.signatures)]
    for split, scenes in (("train", fold.train_scenes), ("eval", fold.eval_scenes)):
        for i, s in enumerate(scenes):
            blocks.append((f"{split}/{i}/features", "f8", s.features))
            blocks.append((f"{split}/{i}/train_labels", "i4", s.train_labels))
            blocks.append((f"{split}/{i}/true_labels", "i4", s.true_labels))
    write_container(path, FOLD_MAGIC, header, blocks)


def load_fold(path) -> Fold:
    header, arrays = read_container(path, FOLD_MAGIC)
    if header.get("kind") != "fold":
        raise StructuralError(f"{path} does not hold a fold")
    cfg = SceneConfig(**header["config"])

    def scenes(split, n):
        return [
            Scene(
                arrays[f"{split}/{i}/features"],
                arrays[f"{split}/{i}/train_labels"].astype(np.int64),
                arrays[f"{split}/{i}/true_labels"].astype(np.int64),
                n_base=cfg.n_base,
            )
            for i in range(n)
        ]

    return Fold(
        cfg,
        header["seed"],
        arrays["signatures"],
        scenes("train", header["n_train"]),
        scenes("eval", header["n_eval"]),
        header["base_class_ids"],
        header["novel_class_ids"],
    )


def fold_digest(fold: Fold) -> str:
    h = hashlib.sha256()
    for s in fold.train_scenes + fold.eval_scenes:
        h.update(np.ascontiguousarray(s.features).tobytes())
        h.update(np.ascontiguousarray(s.true_labels).tobytes())
    return h.hexdigest()
