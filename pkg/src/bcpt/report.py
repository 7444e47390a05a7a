"""Side-by-side evaluation of pre-trained embedders on held-out novel classes."""

from __future__ import annotations

import csv
import io
import json

import numpy as np

from .cluster import BACKGROUND, offline_kmeans
from .config import STREAM_EVAL, derive_seed
from .errors import InvalidArgumentError, StructuralError
from .metrics import cluster_quality, iou_metrics, prototype_segment
from .trainer import scene_embeddings

REPORT_SCHEMA_ID = "bcpt-report/1"
DEFAULT_TAUS = (0.5, 0.6, 0.7, 0.8)
METRICS = ("nmi", "purity", "fb_iou", "novel_miou")

REPORT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["schema", "tau", "taus", "columns", "rows", "means"],
    "properties": {
        "schema": {"const": REPORT_SCHEMA_ID},
        "tau": {"type": "number"},
        "taus": {"type": "array", "items": {"type": "number"}},
        "columns": {"type": "array", "items": {"type": "string"}},
        "rows": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "scheme", "k", "seed", *METRICS],
                "properties": {
                    "name": {"type": "string"},
                    "scheme": {"type": "string"},
                    "k": {"type": "integer"},
                    "seed": {"type": "integer"},
                },
                "additionalProperties": {"type": ["number", "string", "integer", "boolean"]},
            },
        },
        "means": {
            "type": "array",
            "items": {"type": "object", "required": ["name", "n_seeds", *METRICS]},
        },
    },
}


def _pairs(fold, cls, rng, n_pairs):
    scenes = [i for i, s in enumerate(fold.eval_scenes) if (s.true_labels == cls).any()]
    if not scenes:
        return []
    if len(scenes) == 1:
        return [(scenes[0], scenes[0])]
    candidates = [(a, b) for a in scenes for b in scenes if a != b]
    pick = rng.choice(len(candidates), size=min(n_pairs, len(candidates)), replace=False)
    return [candidates[i] for i in sorted(pick)]


def evaluate_state(state, fold, seed=0, taus=DEFAULT_TAUS, n_pairs=8) -> dict:
    """Novel-class metrics of one embedder on the fold's evaluation scenes.

    ``fb_iou@tau``/``novel_miou@tau`` come from prototype segmentation of each
    novel class on support/query scene pairs; ``nmi``/``purity`` compare a
    k-means partition of all background-labelled pixel embeddings (k = number
    of novel classes + 1) against the hidden novel/actual-background split.
    """
    if not fold.eval_scenes:
        raise InvalidArgumentError("evaluation fold is empty")
    if not fold.novel_class_ids:
        raise InvalidArgumentError("evaluation fold has no novel classes")
    if state.feature_dim != fold.eval_scenes[0].features.shape[0]:
        raise StructuralError("checkpoint input dim does not match the fold features")
    embs = [scene_embeddings(state, s) for s in fold.eval_scenes]

    out = {}
    for tau in taus:
        fb, miou = [], []
        for cls in fold.novel_class_ids:
            rng = np.random.default_rng(derive_seed(seed, STREAM_EVAL, cls))
            cls_fb, cls_iou = [], []
            for si, qi in _pairs(fold, cls, rng, n_pairs):
                support_mask = fold.eval_scenes[si].true_labels.reshape(-1) == cls
                pred = prototype_segment(embs[si], support_mask, embs[qi], tau)
                truth = np.where(fold.eval_scenes[qi].true_labels.reshape(-1) == cls, cls, BACKGROUND)
                res = iou_metrics(np.where(pred, cls, BACKGROUND), truth, [cls])
                cls_fb.append(res.fb_iou)
                cls_iou.append(res.per_class_iou.get(cls, 0.0))
            fb.append(np.mean(cls_fb))
            miou.append(np.mean(cls_iou))
        out[f"fb_iou@{tau:g}"] = float(np.mean(fb))
        out[f"novel_miou@{tau:g}"] = float(np.mean(miou))

    masks = [s.train_labels.reshape(-1) == BACKGROUND for s in fold.eval_scenes]
    bg = np.concatenate([e[:, m] for e, m in zip(embs, masks)], axis=1)
    hidden = np.concatenate([s.true_labels.reshape(-1)[m] for s, m in zip(fold.eval_scenes, masks)])
    k = len(fold.novel_class_ids) + 1
    km = offline_kmeans(bg, k, seed=derive_seed(seed, STREAM_EVAL, 10_000))
    q = cluster_quality(km.labels, hidden)
    out["nmi"] = q.nmi
    out["purity"] = q.purity
    return out


def report_columns(taus, tau):
    cols = ["name", "scheme", "k", "seed", "nmi", "purity", "fb_iou", "novel_miou"]
    for t in taus:
        cols += [f"fb_iou@{t:g}", f"novel_miou@{t:g}"]
    return cols


def compare_report(checkpoints, fold, seed=0, tau=0.7, taus=DEFAULT_TAUS, n_pairs=8) -> dict:
    """Evaluate ``(name, state)`` pairs and tabulate them with per-name means.

    Rows sharing a name (e.g. one scheme trained with several seeds) are
    averaged into the ``means`` table.  Any failure aborts the whole report.
    """
    checkpoints = list(checkpoints)
    if not checkpoints:
        raise InvalidArgumentError("no checkpoints to compare")
    if not fold.eval_scenes:
        raise InvalidArgumentError("evaluation fold is empty")
    dims = {st.params.out_dim for _, st in checkpoints}
    if len(dims) != 1:
        raise StructuralError(f"checkpoints disagree on embedding dim: {sorted(dims)}")
    taus = tuple(sorted(set(taus) | {tau}))
    rows = []
    for name, st in checkpoints:
        metrics = evaluate_state(st, fold, seed=seed, taus=taus, n_pairs=n_pairs)
        row = {
            "name": name,
            "scheme": st.config.scheme,
            "k": st.config.k,
            "seed": st.config.seed,
            "nmi": metrics["nmi"],
            "purity": metrics["purity"],
            "fb_iou": metrics[f"fb_iou@{tau:g}"],
            "novel_miou": metrics[f"novel_miou@{tau:g}"],
        }
        for t in taus:
            row[f"fb_iou@{t:g}"] = metrics[f"fb_iou@{t:g}"]
            row[f"novel_miou@{t:g}"] = metrics[f"novel_miou@{t:g}"]
        rows.append(row)

    means = []
    for name in dict.fromkeys(r["name"] for r in rows):
        group = [r for r in rows if r["name"] == name]
        entry = {"name": name, "n_seeds": len(group)}
        for m in METRICS:
            entry[m] = float(np.mean([r[m] for r in group]))
        means.append(entry)
    return {
        "schema": REPORT_SCHEMA_ID,
        "tau": tau,
        "taus": list(taus),
        "columns": report_columns(taus, tau),
        "rows": rows,
        "means": means,
    }


def validate_report(report: dict) -> None:
    import jsonschema

    jsonschema.validate(report, REPORT_SCHEMA)


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def report_csv(report: dict) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=report["columns"], lineterminator="\n")
    writer.writeheader()
    for row in report["rows"]:
        writer.writerow({c: (f"{row[c]:.10g}" if isinstance(row[c], float) else row[c]) for c in report["columns"]})
    return buf.getvalue()
