"""Command-line front end: ``bcpt gen-data | pretrain | eval | compare``.

Exit codes: 0 success, 2 usage or configuration error (including missing
input files), 3 numerical divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .errors import BCPTError, InvalidArgumentError, StructuralError, TrainingDivergedError
from .experiment import ABLATION_VARIANTS, k_sweep, train_variants
from .report import DEFAULT_TAUS, compare_report, report_csv, report_json, validate_report
from .synth import SceneConfig, load_fold, make_fold, save_fold
from .trainer import load_checkpoint, pretrain, save_checkpoint

log = logging.getLogger("bcpt")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

FOLD_FILE = "fold.bin"
CHECKPOINT_FILE = "checkpoint.bin"
MANIFEST_FILE = "manifest.json"

# boolean config fields whose flag name is not simply --<field>
_BOOL_FLAGS = {"bmc_enabled": "--no-bmc", "ocg_enabled": "--no-ocg", "normalize_loss": "--no-normalize-loss"}


class UsageError(Exception):
    pass


class InputMissing(Exception):
    pass


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _inputs_digest(paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(_sha256_file(p).encode())
    return h.hexdigest()


def _add_config_flags(p: argparse.ArgumentParser):
    """One flag per ``TrainConfig`` field; defaults stay ``None`` so that only
    explicitly given flags override a ``--config`` document."""
    g = p.add_argument_group("training config")
    for f in dataclasses.fields(TrainConfig):
        if f.type in ("bool", bool):
            flag = _BOOL_FLAGS.get(f.name, "--" + f.name.replace("_", "-"))
            const = not f.default if flag.startswith("--no-") else True
            g.add_argument(flag, dest=f.name, action="store_const", const=const, default=None)
            continue
        kind = {"int": int, "float": float, "str": str}[f.type if isinstance(f.type, str) else f.type.__name__]
        kwargs = {"type": kind, "default": None, "dest": f.name}
        if f.name == "scheme":
            kwargs["choices"] = ("standard", "bcpt", "offline")
        elif f.name == "mapping":
            kwargs["choices"] = ("argmax", "injective")
        elif f.name == "lr_schedule":
            kwargs["choices"] = ("constant", "cosine")
        g.add_argument("--" + f.name.replace("_", "-"), **kwargs)
    g.add_argument("--config", type=Path, help="JSON document with the full training config")


def _train_config(args) -> TrainConfig:
    doc = {}
    if args.config is not None:
        if not args.config.exists():
            raise InputMissing(f"config file {args.config} not found")
        try:
            doc = json.loads(args.config.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {args.config}: {exc}") from exc
        if not isinstance(doc, dict):
            raise UsageError(f"config file {args.config} must hold a JSON object")
    for f in dataclasses.fields(TrainConfig):
        v = getattr(args, f.name)
        if v is not None:
            doc[f.name] = v
    return TrainConfig.from_dict(doc)


def _fold_path(path: Path) -> Path:
    path = Path(path)
    if path.is_dir():
        path = path / FOLD_FILE
    if not path.exists():
        raise InputMissing(f"fold {path} not found")
    return path


def _checkpoint_path(path: Path) -> Path:
    path = Path(path)
    if path.is_dir():
        path = path / CHECKPOINT_FILE
    if not path.exists():
        raise InputMissing(f"checkpoint {path} not found")
    return path


def _parse_ints(text, what):
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"{what} must be a comma-separated list of integers") from exc
    if not values:
        raise UsageError(f"{what} is empty")
    return values


def _write_manifest(out: Path, command, config, seed, inputs, outputs, started):
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "input_digest": _inputs_digest(inputs),
        "inputs": [str(p) for p in inputs],
        "outputs": {name: {"path": name, "sha256": _sha256_file(out / name)} for name in outputs},
        "duration_s": round(time.perf_counter() - started, 6),
    }
    (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _prepare_out(out: Path) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args) -> int:
    started = time.perf_counter()
    cfg = SceneConfig(
        height=args.height,
        width=args.width,
        feature_dim=args.feature_dim,
        n_base=args.n_base,
        n_novel=args.n_novel,
        n_bg_modes=args.n_bg_modes,
        noise_sigma=args.noise_sigma,
        seed=args.seed,
    )
    fold = make_fold(cfg, args.n_train, args.n_eval, seed=args.seed)
    out = _prepare_out(args.out)
    save_fold(fold, out / FOLD_FILE)
    _write_manifest(out, "gen-data", cfg.to_dict() | {"n_train": args.n_train, "n_eval": args.n_eval},
                    args.seed, [], [FOLD_FILE], started)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    started = time.perf_counter()
    cfg = _train_config(args)
    fold_path = _fold_path(args.fold)
    fold = load_fold(fold_path)
    out = _prepare_out(args.out)
    log_path = out / "log.jsonl"
    with open(log_path, "w") as fh:

        def on_epoch(record):
            fh.write(json.dumps(record, sort_keys=True) + "\n")

        state = pretrain(fold, cfg, on_epoch=on_epoch)
    save_checkpoint(state, out / CHECKPOINT_FILE)
    _write_manifest(out, "pretrain", cfg.to_dict(), cfg.seed, [fold_path], [CHECKPOINT_FILE, "log.jsonl"], started)
    return EXIT_OK


def _emit_report(report, out: Path):
    validate_report(report)
    (out / "report.json").write_text(report_json(report))
    (out / "report.csv").write_text(report_csv(report))


def _names(paths, names):
    if names:
        if len(names) != len(paths):
            raise UsageError("give one --name per --checkpoint")
        return list(names)
    out = []
    for p in paths:
        base = Path(p).parent.name if Path(p).name == CHECKPOINT_FILE else Path(p).stem
        out.append(base or str(p))
    counts = {n: out.count(n) for n in out}
    seen = {}
    for i, n in enumerate(out):
        if counts[n] > 1:
            seen[n] = seen.get(n, 0) + 1
            out[i] = f"{n}#{seen[n]}"
    return out


def cmd_eval(args) -> int:
    started = time.perf_counter()
    fold_path = _fold_path(args.fold)
    paths = [_checkpoint_path(p) for p in args.checkpoint]
    names = _names(paths, args.name)
    fold = load_fold(fold_path)
    checkpoints = [(n, load_checkpoint(p)) for n, p in zip(names, paths)]
    eval_seed = 0 if args.seed is None else args.seed
    report = compare_report(checkpoints, fold, seed=eval_seed, tau=args.tau, taus=DEFAULT_TAUS, n_pairs=args.pairs)
    out = _prepare_out(args.out)
    _emit_report(report, out)
    _write_manifest(out, args.command, {"tau": args.tau, "pairs": args.pairs, "names": names}, eval_seed,
                    [fold_path, *paths], ["report.json", "report.csv"], started)
    return EXIT_OK


def cmd_compare(args) -> int:
    if args.sweep_k is None and not args.ablation:
        if not args.checkpoint:
            raise UsageError("compare needs --checkpoint paths, --sweep-k or --ablation")
        return cmd_eval(args)
    if args.checkpoint:
        raise UsageError("--checkpoint cannot be combined with --sweep-k or --ablation")
    started = time.perf_counter()
    base = _train_config(args)
    seeds = _parse_ints(args.seeds, "--seeds") if args.seeds else [base.seed]
    fold_path = _fold_path(args.fold)
    fold = load_fold(fold_path)
    timings = {}
    if args.sweep_k is not None:
        ks = _parse_ints(args.sweep_k, "--sweep-k")
        if min(ks) < 2:
            raise UsageError("--sweep-k values must be >= 2")
        runs = k_sweep(fold, base, ks, seeds)
        for name, _, secs in runs:
            timings[name] = round(timings.get(name, 0.0) + secs, 6)
        checkpoints = [(name, st) for name, st, _ in runs]
    else:
        checkpoints = train_variants(fold, base, ABLATION_VARIANTS, seeds)
    report = compare_report(checkpoints, fold, seed=args.seed if args.seed is not None else 0,
                            tau=args.tau, taus=DEFAULT_TAUS, n_pairs=args.pairs)
    out = _prepare_out(args.out)
    _emit_report(report, out)
    config = base.to_dict() | {"seeds": seeds, "tau": args.tau, "train_seconds": timings}
    _write_manifest(out, "compare", config, base.seed, [fold_path], ["report.json", "report.csv"], started)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bcpt", description="Background clustering pre-training on synthetic scenes.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic fold")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-base", type=int, default=3)
    g.add_argument("--n-novel", type=int, default=2)
    g.add_argument("--n-bg-modes", type=int, default=2)
    g.add_argument("--n-train", type=int, default=20)
    g.add_argument("--n-eval", type=int, default=6)
    g.add_argument("--height", type=int, default=32)
    g.add_argument("--width", type=int, default=32)
    g.add_argument("--feature-dim", type=int, default=16)
    g.add_argument("--noise-sigma", type=float, default=0.3)
    g.add_argument("--out", type=Path, required=True)
    g.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="pre-train an embedder on a fold")
    p.add_argument("--fold", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_pretrain)

    for name, func, help_text in (
        ("eval", cmd_eval, "evaluate checkpoints on the fold's novel classes"),
        ("compare", cmd_compare, "side-by-side report, optionally training an ablation or K sweep"),
    ):
        e = sub.add_parser(name, help=help_text)
        e.add_argument("--fold", type=Path, required=True)
        e.add_argument("--checkpoint", type=Path, action="append", default=[] if name == "compare" else None,
                       required=name == "eval")
        e.add_argument("--name", action="append", help="row name per checkpoint")
        e.add_argument("--tau", type=float, default=0.7)
        e.add_argument("--pairs", type=int, default=8, help="support/query pairs per novel class")
        e.add_argument("--out", type=Path, required=True)
        if name == "eval":
            e.add_argument("--seed", type=int, default=0, help="seed for support/query sampling")
        else:
            e.add_argument("--sweep-k", help="comma-separated cluster counts, e.g. 2,3,6")
            e.add_argument("--ablation", action="store_true", help="train the standard, bmc and bmc+ocg rows")
            e.add_argument("--seeds", help="comma-separated training seeds for --sweep-k/--ablation")
            _add_config_flags(e)
        e.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if getattr(args, "tau", None) is not None and not 0.0 <= args.tau <= 1.0:
        print("bcpt: error: --tau must lie in [0, 1]", file=sys.stderr)
        return EXIT_USAGE
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            return args.func(args)
    except TrainingDivergedError as exc:
        print(f"bcpt: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, InputMissing, InvalidArgumentError) as exc:
        print(f"bcpt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, StructuralError) as exc:
        print(f"bcpt: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except BCPTError as exc:
        print(f"bcpt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
