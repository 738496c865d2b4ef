"""Classification metrics, ROC analysis and the cross-validation harness.

Scores are "abnormal" when ``score >= threshold``; ties therefore count as
positive predictions everywhere in this module.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .shapegen import corrupt_mask, dsc  # noqa: F401  (dsc re-exported as a metric)


@dataclass(frozen=True)
class PredictionRecord:
    case_id: str
    y: int
    score: float
    fold: int = -1
    seed: int = -1


@dataclass(frozen=True)
class RocCurve:
    """Points ``(threshold, tpr, fpr)`` by descending threshold, from (0, 0) to (1, 1)."""

    points: tuple
    auc: float

    def to_csv(self) -> str:
        lines = ["threshold,tpr,fpr"] + [f"{t!r},{tpr!r},{fpr!r}" for t, tpr, fpr in self.points]
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class OperatingPoint:
    threshold: float
    sensitivity: float
    specificity: float
    reachable: bool = True


def _arrays(preds):
    preds = list(preds)
    if not preds:
        raise ValueError("no predictions")
    y = np.array([p.y for p in preds], dtype=int)
    s = np.array([p.score for p in preds], dtype=np.float64)
    return y, s


def confusion_at_threshold(preds, t: float) -> tuple[int, int, int, int]:
    """``(TP, FP, TN, FN)`` predicting abnormal iff ``score >= t``."""
    y, s = _arrays(preds)
    hit = s >= t
    tp = int(np.sum(hit & (y == 1)))
    fp = int(np.sum(hit & (y == 0)))
    return tp, fp, int(np.sum(y == 0)) - fp, int(np.sum(y == 1)) - tp


def sensitivity_specificity(preds, t: float) -> tuple[float, float]:
    tp, fp, tn, fn = confusion_at_threshold(preds, t)
    sens = tp / (tp + fn) if tp + fn else float("nan")
    spec = tn / (tn + fp) if tn + fp else float("nan")
    return sens, spec


def roc_curve(preds) -> RocCurve:
    """Sweep every distinct score as a threshold; tied scores move together."""
    y, s = _arrays(preds)
    n_pos, n_neg = int(np.sum(y == 1)), int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both classes")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    points = [(math.inf, 0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < len(s):
        j = i
        while j < len(s) and s[j] == s[i]:
            j += 1
        tp += int(np.sum(y[i:j] == 1))
        fp += int(np.sum(y[i:j] == 0))
        points.append((float(s[i]), tp / n_pos, fp / n_neg))
        i = j
    auc = 0.0
    for (_, t0, f0), (_, t1, f1) in zip(points, points[1:]):
        auc += (f1 - f0) * (t0 + t1) / 2.0
    return RocCurve(tuple(points), auc)


def operating_point(curve: RocCurve, min_sensitivity: float | None = None,
                    min_specificity: float | None = None) -> OperatingPoint:
    """Best point under one constraint, maximizing the other rate.

    Ties go to the higher threshold.  An unattainable constraint returns a
    point with ``reachable=False``.
    """
    if (min_sensitivity is None) == (min_specificity is None):
        raise ValueError("give exactly one of min_sensitivity / min_specificity")
    best = None
    for t, tpr, fpr in curve.points:  # descending thresholds: first max wins ties
        sens, spec = tpr, 1.0 - fpr
        if min_sensitivity is not None:
            ok, other = sens >= min_sensitivity, spec
        else:
            ok, other = spec >= min_specificity, sens
        if ok and (best is None or other > best[0]):
            best = (other, OperatingPoint(t, sens, spec))
    if best is None:
        return OperatingPoint(math.nan, math.nan, math.nan, reachable=False)
    return best[1]


# -- cross-validation ----------------------------------------------------------

@dataclass
class EvalReport:
    """Per-seed pooled metrics for one (pipeline, test condition) pair."""

    pipeline: str
    condition: str
    threshold: float
    seeds: list = field(default_factory=list)
    per_seed: list = field(default_factory=list)

    def _values(self, key):
        return np.array([r[key] for r in self.per_seed], dtype=np.float64)

    def mean(self, key):
        return float(np.mean(self._values(key)))

    def std(self, key):
        v = self._values(key)
        return float(np.std(v, ddof=1)) if len(v) >= 2 else 0.0

    @property
    def auc_mean(self):
        return self.mean("auc")

    def summary(self) -> dict:
        keys = ("auc", "sensitivity", "specificity")
        return {k: {"mean": self.mean(k), "std": self.std(k)} for k in keys}

    def to_dict(self) -> dict:
        return {"pipeline": self.pipeline, "condition": self.condition,
                "threshold": self.threshold, "seeds": list(self.seeds),
                "summary": self.summary(), "per_seed": self.per_seed}


@dataclass
class CrossValidationResult:
    reports: dict                       # condition -> EvalReport
    predictions: list                   # PredictionRecord with condition tag
    conditions: dict

    def report(self, condition: str = "clean") -> EvalReport:
        return self.reports[condition]

    def to_text(self) -> str:
        """Deterministic UTF-8 JSON document (sorted keys, repr floats)."""
        doc = {"conditions": {k: _condition_doc(v) for k, v in self.conditions.items()},
               "reports": {k: r.to_dict() for k, r in self.reports.items()}}
        return json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n"

    def predictions_csv(self, condition: str = "clean") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["case_id", "fold", "seed", "label", "score"])
        for cond, p in self.predictions:
            if cond == condition:
                w.writerow([p.case_id, p.fold, p.seed, p.y, repr(p.score)])
        return buf.getvalue()


def _condition_doc(spec):
    if spec is None:
        return None
    return {str(k): v for k, v in sorted(spec.items())}


def read_predictions(text: str) -> list[PredictionRecord]:
    rows = csv.DictReader(line for line in io.StringIO(text) if not line.startswith("#"))
    out = []
    for r in rows:
        out.append(PredictionRecord(r["case_id"], int(r["label"]), float(r["score"]),
                                    int(r.get("fold") or -1), int(r.get("seed") or -1)))
    return out


def corrupt_cases(cases, spec: dict | None, seed: int = 0) -> list:
    """Apply ``corrupt_mask`` with a per-label DSC target (``None`` leaves a class untouched)."""
    if not spec:
        return list(cases)
    from .shapegen import CaseRecord
    out = []
    for c in cases:
        target = spec.get(c.label)
        if target is None:
            out.append(c)
            continue
        grid = corrupt_mask(c.grid, target, seed=c.seed + seed)
        out.append(CaseRecord(c.case_id, c.label, grid, c.seed, corruption_dsc=target))
    return out


def _run_cell(args):
    pipeline, train_cases, test_sets, seed, fold = args
    scorer = pipeline.fit(train_cases, seed)
    return fold, seed, {cond: scorer(cases) for cond, cases in test_sets.items()}


def cross_validate(cases, folds, pipeline, seeds, conditions: dict | None = None,
                   jobs: int = 1) -> CrossValidationResult:
    """Train on all folds but one, score the held-out fold, for every seed.

    ``pipeline`` provides ``name``, ``threshold`` and ``fit(train_cases, seed)``
    returning a callable that maps a list of cases to scores.  ``conditions``
    maps a name to a per-label corruption target applied to *test* cases
    only; ``"clean"`` (no corruption) is always evaluated.  Predictions of all
    folds are pooled per seed before computing metrics.
    """
    seeds = list(seeds)
    if not seeds:
        raise ValueError("at least one seed is required")
    conditions = {"clean": None, **(conditions or {})}
    by_id = {c.case_id: c for c in cases}
    corrupted = {name: {c.case_id: c for c in corrupt_cases(cases, spec)}
                 for name, spec in conditions.items()}
    cells = []
    for seed in seeds:
        for fold in range(folds.fold_count):
            test_ids = folds.members(fold)
            train = [c for c in cases if folds.fold_of(c.case_id) != fold]
            tests = {name: [corrupted[name][cid] for cid in test_ids] for name in conditions}
            cells.append((pipeline, train, tests, seed, fold))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_cell, cells))
    else:
        results = []
        for cell in cells:
            try:
                results.append(_run_cell(cell))
            except Exception as exc:
                raise RuntimeError(f"{pipeline.name}: fold {cell[4]} seed {cell[3]} failed: {exc}") from exc
    predictions = []
    reports = {name: EvalReport(pipeline.name, name, pipeline.threshold, seeds) for name in conditions}
    for name in conditions:
        for seed in seeds:
            pooled = []
            for fold, s, scores in results:
                if s != seed:
                    continue
                test_ids = folds.members(fold)
                pooled += [PredictionRecord(cid, by_id[cid].label, float(v), fold, seed)
                           for cid, v in zip(test_ids, scores[name])]
            predictions += [(name, p) for p in pooled]
            curve = roc_curve(pooled)
            sens, spec = sensitivity_specificity(pooled, pipeline.threshold)
            reports[name].per_seed.append({"seed": seed, "auc": curve.auc,
                                           "sensitivity": sens, "specificity": spec})
    return CrossValidationResult(reports, predictions, conditions)
