"""
Demographic cross-testing: train on one subgroup, test on its complement.

Case labels read ``a2b`` = train on subgroup ``a``, test on subgroup ``b``,
with f/m (gender), n/w (ethnicity) and y/o (age).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import models as _models
from .data import Dataset
from .errors import DegenerateSubsetError, RejectedInputError
from .metrics import MetricSet, evaluate, median_of_runs, to_csv, to_text
from .models import Hyperparams

CROSSTEST_COLUMNS = ("Cross-test", "Model")
MODEL_LABELS = {"base": "Base", "adv": "ADV", "adv_per": "ADV_per"}


@dataclass(frozen=True)
class CrossTestCase:
    attribute: str
    train_value: int
    label: str

    @property
    def test_value(self):
        return 1 - self.train_value

    def split(self, ds: Dataset):
        """``(train, test)`` subgroups; together they partition ``ds``."""
        z = ds.attribute(self.attribute)
        train_idx = np.flatnonzero(z == self.train_value)
        test_idx = np.flatnonzero(z != self.train_value)
        for name, idx in (("train", train_idx), ("test", test_idx)):
            if idx.size == 0:
                raise DegenerateSubsetError(f"{self.label}: {name} subgroup is empty")
            y = ds.labels[idx]
            if y.min() == y.max():
                raise DegenerateSubsetError(f"{self.label}: {name} subgroup has only label {int(y[0])}")
        return ds.subset(train_idx), ds.subset(test_idx)


# attribute value 1 is old / male / white
CASES = (
    CrossTestCase("gender", 0, "f2m"),
    CrossTestCase("gender", 1, "m2f"),
    CrossTestCase("ethnicity", 0, "n2w"),
    CrossTestCase("ethnicity", 1, "w2n"),
    CrossTestCase("age", 1, "o2y"),
    CrossTestCase("age", 0, "y2o"),
)
CASE_LABELS = tuple(c.label for c in CASES)


def get_case(label) -> CrossTestCase:
    for c in CASES:
        if c.label == label:
            return c
    raise RejectedInputError(f"unknown cross-test {label!r}; expected one of {CASE_LABELS}")


@dataclass
class CrossTestResult:
    case: CrossTestCase
    metrics: dict  # model kind -> MetricSet

    def auc_delta(self, kind="adv", reference="base"):
        return self.metrics[kind].auc - self.metrics[reference].auc


def evaluate_pair(
    train: Dataset, test: Dataset, hp: Hyperparams = Hyperparams(), seed=0, kinds=("base", "adv"), calibrate="cv"
) -> dict:
    """Fit each model kind on ``train`` with its own threshold; score on ``test``."""
    out = {}
    for kind in kinds:
        model = _models.fit_calibrated(kind, train, hp, seed, calibrate=calibrate)
        out[kind] = evaluate(model.predict_proba(test.features), test.labels, model.threshold)
    return out


def run_crosstest(
    case: CrossTestCase, dataset: Dataset, hp: Hyperparams = Hyperparams(), seed=0, kinds=("base", "adv"),
    calibrate="cv",
) -> CrossTestResult:
    """Train every kind on the case's TRAIN subgroup and test on the complement.

    ``dataset`` is the combined pool (TRAIN and TEST together).
    """
    if isinstance(case, str):
        case = get_case(case)
    train, test = case.split(dataset)
    case_seed = int(np.random.SeedSequence([int(seed), 401, CASE_LABELS.index(case.label)]).generate_state(1)[0])
    return CrossTestResult(case, evaluate_pair(train, test, hp, case_seed, kinds, calibrate))


def run_all(dataset: Dataset, hp: Hyperparams = Hyperparams(), seed=0, kinds=("base", "adv"), calibrate="cv"):
    # split every case before any training so a degenerate subgroup fails fast
    for case in CASES:
        case.split(dataset)
    return [run_crosstest(case, dataset, hp, seed, kinds, calibrate) for case in CASES]


def generalizability_gap(results, kind="adv", reference="base"):
    """Signed AUC deltas ``kind - reference`` per case and their largest magnitude."""
    deltas = {r.case.label: r.auc_delta(kind, reference) for r in results}
    return deltas, max((abs(d) for d in deltas.values()), default=0.0)


def _rows(results):
    rows = []
    for r in results:
        for kind, m in r.metrics.items():
            rows.append(((r.case.label, MODEL_LABELS[kind]), m))
    return rows


def crosstest_csv(results) -> str:
    return to_csv(_rows(results), CROSSTEST_COLUMNS, with_threshold=False)


def crosstest_text(results, title="Demographic cross-tests") -> str:
    return to_text(_rows(results), CROSSTEST_COLUMNS, with_threshold=False, title=title)


def median_results(per_seed):
    """Per-case, per-kind median over seeds; ``per_seed`` is a list of result lists."""
    out = []
    for i, case in enumerate(CASES):
        runs = [results[i] for results in per_seed]
        metrics = {k: median_of_runs([r.metrics[k] for r in runs]) for k in runs[0].metrics}
        out.append(CrossTestResult(case, metrics))
    return out


__all__ = [
    "CASES",
    "CASE_LABELS",
    "CrossTestCase",
    "CrossTestResult",
    "MetricSet",
    "crosstest_csv",
    "crosstest_text",
    "evaluate_pair",
    "generalizability_gap",
    "get_case",
    "median_results",
    "run_all",
    "run_crosstest",
]
