"""Multi-run harnesses: the component ablation and the cluster-count sweep."""

from __future__ import annotations

import time
from dataclasses import replace

from .config import TrainConfig
from .trainer import pretrain

# name -> config overrides for the three ablation rows
ABLATION_VARIANTS = {
    "standard": {"scheme": "standard"},
    "bmc": {"scheme": "bcpt", "bmc_enabled": True, "ocg_enabled": False},
    "bmc+ocg": {"scheme": "bcpt", "bmc_enabled": True, "ocg_enabled": True},
}


def train_variants(fold, base: TrainConfig, variants=None, seeds=(0,)):
    """Train every ``(variant, seed)`` combination; returns ``[(name, state)]``
    ordered by seed, then by variant."""
    variants = ABLATION_VARIANTS if variants is None else variants
    runs = []
    for seed in seeds:
        for name, overrides in variants.items():
            cfg = replace(base, seed=int(seed), **overrides)
            runs.append((name, pretrain(fold, cfg)))
    return runs


def k_sweep(fold, base: TrainConfig, ks=(2, 3, 6), seeds=(0,)):
    """Train the full method once per ``(k, seed)``.

    Returns ``[(name, state, seconds)]`` with names ``"k=<k>"``.
    """
    runs = []
    for k in ks:
        for seed in seeds:
            cfg = replace(base, scheme="bcpt", k=int(k), seed=int(seed))
            start = time.perf_counter()
            state = pretrain(fold, cfg)
            runs.append((f"k={k}", state, time.perf_counter() - start))
    return runs
