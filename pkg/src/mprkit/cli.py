"""Command-line entry point: phantom, reformat, train, cv, report."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import MprkitError, __version__

log = logging.getLogger("mprkit")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("MPRKIT_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"MPRKIT_SEED must be an integer, got {env!r}") from None


def _json_safe(obj):
    """NaN (undefined AUC or sensitivity) becomes null so the output stays strict JSON."""
    if isinstance(obj, float) and obj != obj:
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def _write_run_json(out: Path, command: str, config: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "version": __version__, **config}
    (out / "run.json").write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


def cmd_phantom(args) -> int:
    from .phantom import PhantomSpec, generate_cohort

    seed = _seed(args)
    # default chord keeps the 48 mm / 128-voxel ratio
    chord = args.chord if args.chord is not None else 0.375 * args.size
    base = PhantomSpec(dims=(args.size,) * 3, chord_mm=chord)
    out = Path(args.out)
    m = generate_cohort(args.patients, args.lesions, (args.grade_min, args.grade_max), seed, out,
                        base_spec=base, revasc_flip=args.flip)
    _write_run_json(out, "phantom", {"patients": args.patients, "lesions": args.lesions, "seed": seed,
                                     "grade_range": [args.grade_min, args.grade_max], "flip": args.flip,
                                     "size": args.size, "chord_mm": chord})
    print(f"wrote {m.n_lesions} lesions for {len(m.patients)} patients to {out / 'manifest.json'}")
    return EXIT_OK


def cmd_reformat(args) -> int:
    from .dataset import assemble_dataset, write_cache
    from .labels import read_manifest
    from .shaping import PaddingStrategy

    manifest = read_manifest(args.manifest)
    padding = PaddingStrategy.from_name(args.padding, args.target_len)
    ds = assemble_dataset(manifest, args.views, padding, args.pathway, jobs=args.jobs)
    out = Path(args.out)
    write_cache(ds, out)
    _write_run_json(out, "reformat", {"manifest": str(Path(args.manifest).resolve()), "views": args.views,
                                      "padding": padding.kind, "target_len": padding.target_len,
                                      "pathway": args.pathway})
    print(f"cached {len(ds)} tensors of shape {'x'.join(map(str, ds.tensors.shape[1:]))} in {out}")
    return EXIT_OK


def _train_cfg(args, seed):
    from .nn import TrainConfig

    return TrainConfig(learning_rate=args.lr, batch_size=args.batch_size, epochs=args.epochs, seed=seed)


def cmd_train(args) -> int:
    from .crossval import lesion_scores, make_splits
    from .dataset import read_cache
    from .metrics import compute_metrics
    from .nn import build_25d_model, predict_proba, save_checkpoint, train

    seed = _seed(args)
    ds = read_cache(args.cache)
    if ds.config.get("pathway", "2.5d") != "2.5d":
        raise MprkitError("train needs a 2.5d cache")
    plan = make_splits(sorted(set(ds.patient_ids)), args.k, args.reps, seed)
    split = next((s for s in plan if s.repetition == args.rep and s.fold == args.fold), None)
    if split is None:
        raise UsageError(f"no split rep={args.rep} fold={args.fold}")
    pids = ds.patient_ids
    tr = ds.subset(np.flatnonzero(np.isin(pids, split.train_patients)))
    te = ds.subset(np.flatnonzero(np.isin(pids, split.test_patients)))
    cfg = _train_cfg(args, split.init_seed)
    cfg.target = args.target
    model = build_25d_model(tuple(ds.tensors.shape[1:]), seed=split.init_seed, dtype=np.float32)
    model, history = train(model, tr.tensors, tr.labels(args.target), cfg)
    probs = predict_proba(model, te.tensors)
    results = {}
    for tta in (True, False):
        _, y, s = lesion_scores(te, probs, args.target, tta)
        results["tta" if tta else "single"] = compute_metrics(y, s)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "model.ckpt")
    (out / "metrics.json").write_text(json.dumps(_json_safe({"history": history, **results}), indent=2) + "\n")
    _write_run_json(out, "train", {"cache": str(Path(args.cache).resolve()), "master_seed": seed,
                                   "split": {"rep": args.rep, "fold": args.fold, "k": args.k, "reps": args.reps,
                                             "init_seed": split.init_seed}, "train_config": asdict(cfg)})
    print(json.dumps(_json_safe(results), indent=2))
    return EXIT_OK


def cmd_cv(args) -> int:
    from .crossval import cross_validate, make_splits, plan_to_json, write_report
    from .dataset import read_cache

    seed = _seed(args)
    ds = read_cache(args.cache)
    plan = make_splits(sorted(set(ds.patient_ids)), args.k, args.reps, seed)
    cfg = _train_cfg(args, seed)
    jobs = args.jobs or os.cpu_count() or 1
    report = cross_validate(ds, plan, cfg, tta=args.tta, jobs=jobs)
    out = Path(args.out)
    paths = write_report(report, out)
    (out / "plan.json").write_text(json.dumps(plan_to_json(plan), indent=1) + "\n")
    train_cfg = {k: v for k, v in asdict(cfg).items() if k not in ("target", "seed")}
    _write_run_json(out, "cv", {"cache": str(Path(args.cache).resolve()), "master_seed": seed, "k": args.k,
                                "reps": args.reps, "tta": args.tta, "jobs": jobs, "train_config": train_cfg})
    from .report import summary_table

    print(summary_table(report))
    print("wrote " + ", ".join(str(p) for p in paths.values()))
    return EXIT_OK


def cmd_report(args) -> int:
    from .crossval import read_report
    from .report import render_report, summary_table

    report = read_report(args.results)
    out = Path(args.out or args.results)
    paths = render_report(report, out)
    print(summary_table(report))
    print("wrote " + ", ".join(str(p) for p in paths.values()))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mprkit", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("phantom", help="generate a synthetic cohort")
    s.add_argument("--patients", type=int, required=True)
    s.add_argument("--lesions", type=int, required=True, help="total lesion count")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--grade-min", type=float, default=0.0)
    s.add_argument("--grade-max", type=float, default=0.9)
    s.add_argument("--flip", type=float, default=0.05, help="revascularisation label-flip probability")
    s.add_argument("--size", type=int, default=128, help="volume edge length in voxels (>= 64 recommended)")
    s.add_argument("--chord", type=float, help="centerline chord length in mm")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("reformat", help="manifest -> shaped tensor cache")
    s.add_argument("--manifest", required=True)
    s.add_argument("--views", type=int, default=18)
    s.add_argument("--padding", choices=("zero", "stretch", "intermediate"), default="intermediate")
    s.add_argument("--target-len", type=int, help="override the padding target length")
    s.add_argument("--pathway", choices=("2.5d", "cubes"), default="2.5d")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_reformat)

    def add_train_flags(s):
        s.add_argument("--cache", required=True)
        s.add_argument("--k", type=int, default=5)
        s.add_argument("--reps", type=int, default=5)
        s.add_argument("--epochs", type=int, default=2)
        s.add_argument("--batch-size", type=int, default=32)
        s.add_argument("--lr", type=float, default=1e-3)
        s.add_argument("--seed", type=int)
        s.add_argument("--out", required=True)

    s = sub.add_parser("train", help="train and evaluate one split")
    add_train_flags(s)
    s.add_argument("--target", choices=("significant", "revascularised"), default="significant")
    s.add_argument("--rep", type=int, default=0)
    s.add_argument("--fold", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("cv", help="repeated patient-wise cross-validation, both targets")
    add_train_flags(s)
    s.add_argument("--tta", action=argparse.BooleanOptionalAction, default=True,
                   help="report view-averaged rows alongside single-view rows")
    s.add_argument("--jobs", type=int, help="worker processes (default: all cores)")
    s.set_defaults(func=cmd_cv)

    s = sub.add_parser("report", help="summary table and figures from cv CSVs")
    s.add_argument("--results", required=True, help="directory holding cv output")
    s.add_argument("--out", help="figure directory (default: --results)")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (MprkitError, OSError) as exc:
        print(f"mprkit: error: {exc}", file=sys.stderr)
        return EXIT_DATA


run = main

if __name__ == "__main__":
    sys.exit(main())
