"""
Tabular patient data: schema, CSV ingestion, preprocessing and a synthetic
generator with planted protected-attribute leakage.

A :class:`Dataset` keeps the raw demographic columns (age in years, recorded
sex, ethnicity code) next to the 30 clinical features and the PCR label; the
binary protected attributes are derived on demand by
:func:`binarize_protected`.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._io import atomic_write_text
from .errors import DegenerateSubsetError, RejectedInputError

log = logging.getLogger(__name__)

BLOOD_FEATURES = (
    "haemoglobin",
    "haematocrit",
    "mean_cell_volume",
    "white_cell_count",
    "neutrophil_count",
    "lymphocyte_count",
    "monocyte_count",
    "eosinophil_count",
    "basophil_count",
    "platelets",
    "prothrombin_time",
    "inr",
    "aptt",
    "sodium",
    "potassium",
    "creatinine",
    "urea",
    "egfr",
    "crp",
    "albumin",
    "alkaline_phosphatase",
    "alt",
    "bilirubin",
)
VITAL_FEATURES = (
    "heart_rate",
    "respiratory_rate",
    "oxygen_saturation",
    "systolic_blood_pressure",
    "diastolic_blood_pressure",
    "temperature",
    "oxygen_flow_rate",
)
FEATURES = BLOOD_FEATURES + VITAL_FEATURES
DEMOGRAPHIC_COLUMNS = ("age_years", "gender", "ethnicity_code")
LABEL_COLUMN = "pcr_result"
CSV_COLUMNS = FEATURES + DEMOGRAPHIC_COLUMNS + (LABEL_COLUMN,)

ATTRIBUTES = ("age", "gender", "ethnicity")
AGE_CUTOFF = 64.0
MIN_AGE = 18.0
# NHS ethnic category codes A-C are the White groups
WHITE_CODES = frozenset({"A", "B", "C"})
NON_WHITE_CODES = ("D", "E", "F", "G", "H", "J", "K", "L", "M", "N", "P", "R", "S", "Z")

STD_FLOOR = 1e-8

# share of PCR-positive presentations at the three external hospitals
EXTERNAL_PREVALENCE = {"UHB": 0.0148, "BH": 0.1113, "PUH": 0.052}
# cohort fractions of old, male and white patients, used as positive-class priors
MAJORITY_PRIORS = (0.53, 0.54, 0.68)


@dataclass
class Dataset:
    """Rows of clinical features with raw demographics and the PCR label.

    ``features`` is ``(n, 30)`` with NaN for missing cells; ``gender`` is
    1 for male and 0 for female; ``ethnicity_code`` holds NHS category codes
    or free-text ethnicity as recorded.
    """

    features: np.ndarray
    labels: np.ndarray
    age_years: np.ndarray
    gender: np.ndarray
    ethnicity_code: np.ndarray
    feature_names: tuple = FEATURES

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.age_years = np.asarray(self.age_years, dtype=np.float64)
        self.gender = np.asarray(self.gender, dtype=np.int64)
        self.ethnicity_code = np.asarray(self.ethnicity_code, dtype=object)
        n = self.features.shape[0]
        if self.features.ndim != 2 or self.features.shape[1] != len(self.feature_names):
            raise RejectedInputError(f"features must be (n, {len(self.feature_names)}), got {self.features.shape}")
        for name in ("labels", "age_years", "gender", "ethnicity_code"):
            if getattr(self, name).shape != (n,):
                raise RejectedInputError(f"{name} must have length {n}")

    def __len__(self):
        return self.features.shape[0]

    @property
    def protected(self) -> np.ndarray:
        """``(n, 3)`` binary matrix with columns age, gender, ethnicity."""
        return binarize_protected(self.age_years, self.ethnicity_code, self.gender)

    def attribute(self, name) -> np.ndarray:
        if name == "label":
            return self.labels
        return self.protected[:, _attr_index(name)]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(
            self,
            features=self.features[idx],
            labels=self.labels[idx],
            age_years=self.age_years[idx],
            gender=self.gender[idx],
            ethnicity_code=self.ethnicity_code[idx],
        )

    @property
    def prevalence(self) -> float:
        return float(self.labels.mean())


def _attr_index(name):
    try:
        return ATTRIBUTES.index(name)
    except ValueError:
        raise RejectedInputError(f"unknown protected attribute {name!r}; expected one of {ATTRIBUTES}") from None


def concat(*datasets) -> Dataset:
    return Dataset(
        features=np.concatenate([d.features for d in datasets]),
        labels=np.concatenate([d.labels for d in datasets]),
        age_years=np.concatenate([d.age_years for d in datasets]),
        gender=np.concatenate([d.gender for d in datasets]),
        ethnicity_code=np.concatenate([d.ethnicity_code for d in datasets]),
    )


# ---------------------------------------------------------------------------
# CSV


def _parse_gender(cell, row, col):
    v = cell.strip().lower()
    if v in ("1", "m", "male"):
        return 1
    if v in ("0", "f", "female"):
        return 0
    raise RejectedInputError(f"row {row}, column {col!r}: unrecognised gender {cell!r}")


def _parse_float(cell, row, col):
    cell = cell.strip()
    if cell == "":
        return np.nan
    try:
        return float(cell)
    except ValueError:
        raise RejectedInputError(f"row {row}, column {col!r}: cannot parse number {cell!r}") from None


def load_csv(path) -> Dataset:
    """Read a patient CSV; column order is free, names must match the schema.

    Empty numeric cells become NaN. Rows aged under 18 are dropped with a
    log entry.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise RejectedInputError(f"{path}: empty file") from None
        seen = set()
        for col in header:
            if col in seen:
                raise RejectedInputError(f"{path}: duplicate column {col!r}")
            seen.add(col)
            if col not in CSV_COLUMNS:
                raise RejectedInputError(f"{path}: unknown column {col!r}")
        missing = [c for c in CSV_COLUMNS if c not in seen]
        if missing:
            raise RejectedInputError(f"{path}: missing columns {missing}")
        pos = {c: header.index(c) for c in CSV_COLUMNS}

        feats, labels, ages, genders, eths = [], [], [], [], []
        for rownum, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise RejectedInputError(f"{path}: row {rownum} has {len(row)} cells, expected {len(header)}")
            feats.append([_parse_float(row[pos[c]], rownum, c) for c in FEATURES])
            label = _parse_float(row[pos[LABEL_COLUMN]], rownum, LABEL_COLUMN)
            if label not in (0.0, 1.0):
                raise RejectedInputError(f"{path}: row {rownum}: {LABEL_COLUMN} must be 0 or 1, got {label}")
            labels.append(int(label))
            ages.append(_parse_float(row[pos["age_years"]], rownum, "age_years"))
            genders.append(_parse_gender(row[pos["gender"]], rownum, "gender"))
            eths.append(row[pos["ethnicity_code"]].strip())

    ds = Dataset(
        features=np.array(feats, dtype=np.float64).reshape(-1, len(FEATURES)),
        labels=np.array(labels, dtype=np.int64),
        age_years=np.array(ages, dtype=np.float64),
        gender=np.array(genders, dtype=np.int64),
        ethnicity_code=np.array(eths, dtype=object),
    )
    return exclude_minors(ds)


def exclude_minors(ds: Dataset) -> Dataset:
    too_young = ds.age_years < MIN_AGE
    if too_young.any():
        log.info("excluding %d rows with age < %g", int(too_young.sum()), MIN_AGE)
        return ds.subset(np.flatnonzero(~too_young))
    return ds


def _fmt(x):
    return "" if np.isnan(x) else repr(float(x))


def dataset_to_csv(ds: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for i in range(len(ds)):
        w.writerow(
            [_fmt(v) for v in ds.features[i]]
            + [_fmt(ds.age_years[i]), "M" if ds.gender[i] == 1 else "F", ds.ethnicity_code[i], int(ds.labels[i])]
        )
    return buf.getvalue()


def write_csv(ds: Dataset, path) -> None:
    atomic_write_text(path, dataset_to_csv(ds))


# ---------------------------------------------------------------------------
# preprocessing


def binarize_protected(age_years, ethnicity_code, gender):
    """Map raw demographics to binary (old, male, white) columns.

    Age at or above the cutoff of 64 years counts as old. Ethnicity is white
    for NHS codes A-C (or text starting with "white"); every other value,
    including not-stated, is non-white.
    """
    age = np.asarray(age_years, dtype=np.float64)
    if np.any(age < MIN_AGE):
        raise RejectedInputError(f"ages below {MIN_AGE:g} must be excluded before binarisation")
    codes = np.atleast_1d(np.asarray(ethnicity_code, dtype=object))
    white = np.array([_is_white(c) for c in codes], dtype=np.int64)
    old = (np.atleast_1d(age) >= AGE_CUTOFF).astype(np.int64)
    sex = np.atleast_1d(np.asarray(gender, dtype=np.int64))
    if not np.all((sex == 0) | (sex == 1)):
        raise RejectedInputError("gender must be 0 or 1")
    return np.column_stack([old, sex, white])


def _is_white(code) -> bool:
    c = str(code).strip().upper()
    return c in WHITE_CODES or c.startswith("WHITE")


@dataclass
class PreprocessStats:
    mean: np.ndarray
    std: np.ndarray
    impute: np.ndarray
    age_cutoff: float = AGE_CUTOFF

    def as_tensors(self):
        return {"preprocess.mean": self.mean, "preprocess.std": self.std, "preprocess.impute": self.impute}

    @classmethod
    def from_tensors(cls, tensors, age_cutoff=AGE_CUTOFF):
        return cls(tensors["preprocess.mean"], tensors["preprocess.std"], tensors["preprocess.impute"], age_cutoff)


def fit_stats(train) -> PreprocessStats:
    """Median imputation values, then mean/std of the imputed TRAIN features.

    ``train`` is a :class:`Dataset` or a raw feature matrix.
    """
    x = train.features if isinstance(train, Dataset) else np.asarray(train, dtype=np.float64)
    if x.shape[0] == 0:
        raise RejectedInputError("cannot fit preprocessing statistics on zero rows")
    impute = np.nanmedian(x, axis=0)
    impute = np.where(np.isnan(impute), 0.0, impute)
    filled = np.where(np.isnan(x), impute, x)
    std = filled.std(axis=0)
    return PreprocessStats(mean=filled.mean(axis=0), std=np.maximum(std, STD_FLOOR), impute=impute)


def standardize(features, stats: PreprocessStats) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    filled = np.where(np.isnan(x), stats.impute, x)
    return (filled - stats.mean) / np.maximum(stats.std, STD_FLOOR)


def subsample_balance(ds: Dataset, target_prevalence=0.5, seed=0) -> Dataset:
    """Keep every positive and draw negatives without replacement to hit the prevalence."""
    if not 0.0 < target_prevalence < 1.0:
        raise RejectedInputError(f"target prevalence must lie in (0, 1), got {target_prevalence}")
    pos = np.flatnonzero(ds.labels == 1)
    neg = np.flatnonzero(ds.labels == 0)
    need = int(round(len(pos) * (1.0 - target_prevalence) / target_prevalence))
    if len(pos) == 0 or need > len(neg):
        raise RejectedInputError(
            f"prevalence {target_prevalence} unreachable with {len(pos)} positives and {len(neg)} negatives"
        )
    rng = np.random.default_rng(seed)
    kept = rng.choice(neg, size=need, replace=False)
    return ds.subset(np.sort(np.concatenate([pos, kept])))


def filter_subgroup(ds: Dataset, attribute, value) -> Dataset:
    if value not in (0, 1):
        raise RejectedInputError(f"subgroup value must be 0 or 1, got {value!r}")
    idx = np.flatnonzero(ds.attribute(attribute) == value)
    if idx.size == 0:
        raise DegenerateSubsetError(f"no rows with {attribute} = {value}")
    return ds.subset(idx)


def stratified_split(ds: Dataset, test_fraction=0.2, seed=0):
    """Label-stratified TRAIN/TEST split; returns ``(train, test)``."""
    rng = np.random.default_rng(seed)
    test_idx = []
    for cls in (0, 1):
        idx = np.flatnonzero(ds.labels == cls)
        idx = rng.permutation(idx)
        test_idx.append(idx[: int(round(test_fraction * idx.size))])
    test_mask = np.zeros(len(ds), dtype=bool)
    test_mask[np.concatenate(test_idx)] = True
    return ds.subset(np.flatnonzero(~test_mask)), ds.subset(np.flatnonzero(test_mask))


# ---------------------------------------------------------------------------
# synthetic generator

# nominal (location, scale) per feature, roughly the adult reference ranges
_NOMINAL = {
    "haemoglobin": (135.0, 18.0),
    "haematocrit": (0.40, 0.05),
    "mean_cell_volume": (90.0, 6.0),
    "white_cell_count": (8.0, 3.0),
    "neutrophil_count": (5.5, 2.5),
    "lymphocyte_count": (1.6, 0.7),
    "monocyte_count": (0.6, 0.25),
    "eosinophil_count": (0.15, 0.12),
    "basophil_count": (0.04, 0.03),
    "platelets": (250.0, 80.0),
    "prothrombin_time": (12.0, 1.5),
    "inr": (1.05, 0.15),
    "aptt": (30.0, 4.0),
    "sodium": (138.0, 4.0),
    "potassium": (4.2, 0.5),
    "creatinine": (85.0, 25.0),
    "urea": (6.5, 3.0),
    "egfr": (75.0, 20.0),
    "crp": (30.0, 40.0),
    "albumin": (38.0, 5.0),
    "alkaline_phosphatase": (90.0, 35.0),
    "alt": (25.0, 15.0),
    "bilirubin": (10.0, 6.0),
    "heart_rate": (88.0, 18.0),
    "respiratory_rate": (19.0, 4.0),
    "oxygen_saturation": (96.0, 2.5),
    "systolic_blood_pressure": (135.0, 22.0),
    "diastolic_blood_pressure": (76.0, 13.0),
    "temperature": (36.9, 0.7),
    "oxygen_flow_rate": (1.0, 2.0),
}

# (feature, direction) pairs shifted by the PCR label
DEFAULT_SIGNAL = (
    ("crp", 1),
    ("lymphocyte_count", -1),
    ("eosinophil_count", -1),
    ("albumin", -1),
    ("white_cell_count", -1),
    ("temperature", 1),
    ("oxygen_saturation", -1),
    ("respiratory_rate", 1),
)
# (feature, direction) pairs shifted by each protected attribute
DEFAULT_LEAKAGE = {
    "age": (("egfr", -1), ("urea", 1), ("creatinine", 1), ("systolic_blood_pressure", 1)),
    "gender": (("haemoglobin", 1), ("haematocrit", 1), ("alt", 1), ("platelets", -1)),
    "ethnicity": (("neutrophil_count", 1), ("mean_cell_volume", -1), ("alkaline_phosphatase", -1), ("monocyte_count", 1)),
}


@dataclass
class SyntheticSpec:
    """Parameters of the Gaussian mean-shift generator.

    Every feature starts as an independent standard normal. A positive label
    adds ``label_signal * direction`` to each signal feature; an attribute
    value of 1 adds ``leakage_strength[attr] * direction`` to that attribute's
    features. Features are then mapped to clinical units with nominal
    location/scale. Exactly ``round(prevalence * n_rows)`` rows are positive.
    """

    n_rows: int = 10000
    prevalence: float = 0.5
    attr_priors: tuple = MAJORITY_PRIORS
    leakage_strength: tuple = (1.0, 1.0, 1.0)
    label_signal: float = 0.65
    seed: int = 0
    missing_rate: float = 0.0
    signal_features: tuple = DEFAULT_SIGNAL
    leakage_features: dict = field(default_factory=lambda: dict(DEFAULT_LEAKAGE))

    def __post_init__(self):
        if self.n_rows < 1:
            raise RejectedInputError("n_rows must be positive")
        if not 0.0 < self.prevalence < 1.0:
            raise RejectedInputError(f"prevalence must lie in (0, 1), got {self.prevalence}")
        if len(self.attr_priors) != 3 or not all(0.0 < p < 1.0 for p in self.attr_priors):
            raise RejectedInputError(f"attr_priors must be three fractions in (0, 1), got {self.attr_priors}")
        if np.isscalar(self.leakage_strength):
            self.leakage_strength = (float(self.leakage_strength),) * 3
        if len(self.leakage_strength) != 3 or any(s < 0 for s in self.leakage_strength):
            raise RejectedInputError("leakage_strength must be three non-negative reals")
        if self.label_signal < 0:
            raise RejectedInputError("label_signal must be non-negative")
        if not 0.0 <= self.missing_rate < 1.0:
            raise RejectedInputError("missing_rate must lie in [0, 1)")
        for name, _ in list(self.signal_features) + [f for v in self.leakage_features.values() for f in v]:
            if name not in FEATURES:
                raise RejectedInputError(f"unknown feature {name!r} in synthetic spec")


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    n = spec.n_rows
    n_pos = int(round(spec.prevalence * n))
    labels = np.zeros(n, dtype=np.int64)
    labels[rng.permutation(n)[:n_pos]] = 1

    attrs = (rng.random((n, 3)) < np.asarray(spec.attr_priors)).astype(np.int64)
    z = rng.standard_normal((n, len(FEATURES)))
    col = {name: j for j, name in enumerate(FEATURES)}
    for name, direction in spec.signal_features:
        z[:, col[name]] += spec.label_signal * direction * labels
    for a, attr in enumerate(ATTRIBUTES):
        for name, direction in spec.leakage_features.get(attr, ()):
            z[:, col[name]] += spec.leakage_strength[a] * direction * attrs[:, a]

    loc = np.array([_NOMINAL[f][0] for f in FEATURES])
    scale = np.array([_NOMINAL[f][1] for f in FEATURES])
    features = loc + scale * z
    if spec.missing_rate > 0:
        features[rng.random(features.shape) < spec.missing_rate] = np.nan

    old, male, white = attrs[:, 0], attrs[:, 1], attrs[:, 2]
    age = np.where(old == 1, rng.integers(64, 96, size=n), rng.integers(18, 64, size=n)).astype(np.float64)
    eth = np.where(white == 1, rng.choice(sorted(WHITE_CODES), size=n), rng.choice(NON_WHITE_CODES, size=n))
    return Dataset(features=features, labels=labels, age_years=age, gender=male, ethnicity_code=eth.astype(object))
