"""Repeated patient-wise k-fold splits and the cross-validation driver."""

from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import MprkitError
from .dataset import SampleSet
from .labels import TARGETS
from .metrics import METRICS, compute_metrics
from .nn import TrainConfig, build_25d_model, predict_proba, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Split:
    repetition: int
    fold: int
    train_patients: tuple[str, ...]
    test_patients: tuple[str, ...]
    init_seed: int


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def make_splits(patient_ids, k: int = 5, reps: int = 5, master_seed: int = 0) -> list[Split]:
    """``reps`` independent shuffles of the patients, each cut into ``k`` contiguous folds."""
    patients = sorted(set(str(p) for p in patient_ids))
    if len(patients) < k:
        raise MprkitError("too few patients")
    plan = []
    for r in range(reps):
        order = np.random.default_rng(derive_seed(master_seed, r)).permutation(len(patients))
        shuffled = [patients[i] for i in order]
        for f, chunk in enumerate(np.array_split(np.arange(len(patients)), k)):
            test = tuple(sorted(shuffled[i] for i in chunk))
            train_p = tuple(sorted(set(patients) - set(test)))
            plan.append(Split(r, f, train_p, test, derive_seed(master_seed, r, f)))
    return plan


# scorer(train_set, test_set, target, seed) -> per-sample probabilities for test_set
Scorer = Callable[[SampleSet, SampleSet, str, int], np.ndarray]


class CnnScorer:
    """Train a fresh 2.5D model on ``train_set`` and score every test sample.

    A class rather than a closure so worker processes can unpickle it.
    """

    def __init__(self, cfg: TrainConfig, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype

    def __call__(self, train_set, test_set, target, seed):
        model = build_25d_model(tuple(train_set.tensors.shape[1:]), seed=seed, dtype=self.dtype)
        cfg = replace(self.cfg, seed=seed, target=target)
        model, hist = train(model, train_set.tensors, train_set.labels(target), cfg)
        log.info("target %s seed %d losses %s", target, seed, [round(h, 4) for h in hist])
        return predict_proba(model, test_set.tensors)


def oracle_scorer(train_set, test_set, target, seed):
    return test_set.labels(target)


def lesion_scores(test_set: SampleSet, probs, target: str, tta: bool):
    """Collapse per-view probabilities to one score per lesion (mean over views, or view 0)."""
    by_lesion: dict[str, list] = {}
    for s, p in zip(test_set.samples, probs):
        entry = by_lesion.setdefault(s.lesion_id, [getattr(s, target), {}])
        entry[1][s.view_k] = p
    ids = list(by_lesion)
    labels = np.array([by_lesion[i][0] for i in ids], dtype=bool)
    if tta:
        scores = np.array([np.mean([v[k] for k in sorted(v)]) for _, v in (by_lesion[i] for i in ids)])
    else:
        scores = np.array([by_lesion[i][1][min(by_lesion[i][1])] for i in ids])
    return ids, labels, scores


_SHARED: dict = {}


def _init_worker(dataset, scorer):
    _SHARED["dataset"] = dataset
    _SHARED["scorer"] = scorer


def _run_split(args):
    split, target, tta_modes = args
    ds: SampleSet = _SHARED["dataset"]
    scorer: Scorer = _SHARED["scorer"]
    pids = ds.patient_ids
    tr = np.flatnonzero(np.isin(pids, split.train_patients))
    te = np.flatnonzero(np.isin(pids, split.test_patients))
    if set(pids[tr]) & set(pids[te]):
        raise MprkitError("patient leakage between train and test")
    train_set, test_set = ds.subset(tr), ds.subset(te)
    probs = np.asarray(scorer(train_set, test_set, target, split.init_seed), dtype=np.float64)
    rows, preds = [], []
    for tta in tta_modes:
        ids, labels, scores = lesion_scores(test_set, probs, target, tta)
        m = compute_metrics(labels, scores)
        rows.append({"target": target, "tta": int(tta), "split_rep": split.repetition,
                     "split_fold": split.fold, **m})
        preds += [{"target": target, "tta": int(tta), "split_rep": split.repetition, "split_fold": split.fold,
                   "lesion_id": i, "label": int(y), "score": float(s)} for i, y, s in zip(ids, labels, scores)]
    return rows, preds


@dataclass
class ReportTable:
    rows: list[dict]
    predictions: list[dict]

    def summary(self) -> list[dict]:
        """Mean and sample std over splits per (target, tta, metric); NaN entries skipped."""
        out = []
        keys = sorted({(r["target"], r["tta"]) for r in self.rows}, key=lambda k: (TARGETS.index(k[0]), -k[1]))
        for target, tta in keys:
            sel = [r for r in self.rows if r["target"] == target and r["tta"] == tta]
            for metric in METRICS:
                vals = np.array([r[metric] for r in sel], dtype=np.float64)
                vals = vals[np.isfinite(vals)]
                mean = float(vals.mean()) if vals.size else math.nan
                std = float(vals.std(ddof=1)) if vals.size > 1 else (0.0 if vals.size else math.nan)
                out.append({"target": target, "tta": tta, "metric": metric, "mean": mean, "std": std,
                            "n": int(vals.size)})
        return out

    def mean(self, target: str, metric: str, tta: bool = True) -> float:
        for r in self.summary():
            if r["target"] == target and r["tta"] == int(tta) and r["metric"] == metric:
                return r["mean"]
        raise KeyError((target, metric, tta))


def cross_validate(dataset: SampleSet, plan: list[Split], train_cfg: TrainConfig | None = None,
                   tta: bool = True, *, targets=TARGETS, scorer: Scorer | None = None,
                   jobs: int = 1) -> ReportTable:
    """Train/test every split for every target; lesion-level metrics per split.

    With ``tta`` both the view-averaged and the single-view (k=0) scores are
    reported, from the same trained model; otherwise single-view only.
    """
    scorer = scorer or CnnScorer(train_cfg or TrainConfig(epochs=2))
    tta_modes = (True, False) if tta else (False,)
    tasks = [(split, target, tta_modes) for split in plan for target in targets]
    if jobs > 1:
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(dataset, scorer)) as pool:
            results = list(pool.map(_run_split, tasks))
    else:
        _init_worker(dataset, scorer)
        results = []
        for i, t in enumerate(tasks):
            results.append(_run_split(t))
            log.info("split %d/%d done", i + 1, len(tasks))
    rows = [r for res in results for r in res[0]]
    preds = [p for res in results for p in res[1]]
    for r in rows:
        if math.isnan(r["auc"]):
            warnings.warn(f"single-class test fold (target {r['target']}, rep {r['split_rep']}, "
                          f"fold {r['split_fold']}): AUC excluded", RuntimeWarning, stacklevel=2)
    order = {t: i for i, t in enumerate(TARGETS)}
    rows.sort(key=lambda r: (order[r["target"]], -r["tta"], r["split_rep"], r["split_fold"]))
    return ReportTable(rows, preds)


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def to_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


SPLIT_COLUMNS = ["target", "tta", "split_rep", "split_fold", *METRICS]
SUMMARY_COLUMNS = ["target", "tta", "metric", "mean", "std"]
PRED_COLUMNS = ["target", "tta", "split_rep", "split_fold", "lesion_id", "label", "score"]


def write_report(report: ReportTable, out_dir) -> dict[str, Path]:
    """``splits_<target>.csv`` per target, ``summary.csv`` and ``predictions.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for target in sorted({r["target"] for r in report.rows}, key=TARGETS.index):
        p = out_dir / f"splits_{target}.csv"
        p.write_text(to_csv([r for r in report.rows if r["target"] == target], SPLIT_COLUMNS))
        paths[f"splits_{target}"] = p
    paths["summary"] = out_dir / "summary.csv"
    paths["summary"].write_text(to_csv(report.summary(), SUMMARY_COLUMNS))
    paths["predictions"] = out_dir / "predictions.csv"
    paths["predictions"].write_text(to_csv(report.predictions, PRED_COLUMNS))
    return paths


def read_report(out_dir) -> ReportTable:
    out_dir = Path(out_dir)
    rows = []
    for p in sorted(out_dir.glob("splits_*.csv")):
        with open(p, newline="") as fh:
            for r in csv.DictReader(fh):
                rows.append({"target": r["target"], "tta": int(r["tta"]), "split_rep": int(r["split_rep"]),
                             "split_fold": int(r["split_fold"]), **{m: float(r[m]) for m in METRICS}})
    preds = []
    pp = out_dir / "predictions.csv"
    if pp.exists():
        with open(pp, newline="") as fh:
            for r in csv.DictReader(fh):
                preds.append({"target": r["target"], "tta": int(r["tta"]), "split_rep": int(r["split_rep"]),
                              "split_fold": int(r["split_fold"]), "lesion_id": r["lesion_id"],
                              "label": int(r["label"]), "score": float(r["score"])})
    if not rows:
        raise MprkitError(f"no split CSVs under {out_dir}")
    return ReportTable(rows, preds)


def plan_to_json(plan: list[Split]) -> list[dict]:
    return [{**asdict(s), "train_patients": list(s.train_patients), "test_patients": list(s.test_patients)}
            for s in plan]
