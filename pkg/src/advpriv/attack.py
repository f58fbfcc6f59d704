"""
Property-inference attacks on raw features and encoder representations.

An attacker is a Base-architecture classifier trained to predict one
protected attribute. Attackers are trained only on raw features or on the
Base encoder; defended encoders (ADV, ADV_per) are attacked with the
Base-encoder attacker and its threshold, so the attacker never sees the
defence it is evaluated against.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import models as _models
from .data import ATTRIBUTES, Dataset
from .errors import DegenerateLabelError, ProtocolError, RejectedInputError
from .metrics import METRIC_COLUMNS, MetricSet, evaluate, to_csv, to_text
from .models import Batch, Hyperparams, TrainedModel

SOURCE_KINDS = ("raw_features", "base_encoder", "adv_encoder", "adv_per_encoder")
DEFENDED_SOURCES = ("adv_encoder", "adv_per_encoder")
# model kind each encoder source must come from
SOURCE_MODEL_KIND = {"base_encoder": "base", "adv_encoder": "adv", "adv_per_encoder": "adv_per"}

ATTACK_LEAD_COLUMN = "Predicted Attribute"
BASELINE_COLUMNS = ("Protected attribute", "TRAIN", "TEST")


@dataclass
class RepresentationSource:
    """Where attacker inputs come from: raw features or a trained encoder.

    Encoder sources take either an in-memory ``model`` or a ``model_file``,
    which is loaded on first use.
    """

    kind: str
    model_file: str | None = None
    model: TrainedModel | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in SOURCE_KINDS:
            raise RejectedInputError(f"unknown representation source {self.kind!r}; expected one of {SOURCE_KINDS}")
        if self.kind == "raw_features":
            if self.model is not None or self.model_file is not None:
                raise RejectedInputError("raw_features takes no model")
        elif self.model is None and self.model_file is None:
            raise RejectedInputError(f"{self.kind} needs a model or a model file")

    def resolve(self) -> TrainedModel | None:
        if self.kind == "raw_features":
            return None
        if self.model is None:
            self.model = _models.load_model(self.model_file)
        want = SOURCE_MODEL_KIND[self.kind]
        if self.model.kind != want:
            raise RejectedInputError(f"{self.kind} needs a {want} model, got {self.model.kind}")
        return self.model

    def represent(self, features) -> np.ndarray:
        model = self.resolve()
        if model is None:
            return np.asarray(features, dtype=np.float64)
        return model.encode(features)


@dataclass
class Attacker:
    model: TrainedModel
    attribute: str
    trained_on: str
    threshold: float

    @property
    def input_dim(self):
        return self.model.stack.in_dim


@dataclass
class AttackReport:
    attribute: str
    source: RepresentationSource
    metrics: MetricSet
    majority_baseline: float


def _attr_values(ds: Dataset, attribute):
    if attribute not in ATTRIBUTES:
        raise RejectedInputError(f"unknown protected attribute {attribute!r}; expected one of {ATTRIBUTES}")
    return ds.attribute(attribute)


def majority_baseline(ds, attribute=None) -> float:
    """Accuracy of always predicting the most frequent value.

    ``ds`` is a :class:`Dataset` (with ``attribute``) or a binary vector.
    """
    z = np.asarray(_attr_values(ds, attribute) if isinstance(ds, Dataset) else ds)
    if z.size == 0:
        raise RejectedInputError("majority baseline of an empty dataset")
    if not np.all((z == 0) | (z == 1)):
        raise RejectedInputError("majority baseline needs a binary attribute")
    p = float(np.mean(z))
    return max(p, 1.0 - p)


def train_attacker(
    train: Dataset, attribute, source: RepresentationSource, hp: Hyperparams = Hyperparams(), seed=0,
    calibrate="cv",
) -> Attacker:
    """Fit a Base-architecture attacker on ``source`` representations of ``train``."""
    if source.kind in DEFENDED_SOURCES:
        raise ProtocolError(
            f"attackers are trained on raw features or the Base encoder, not on {source.kind}; "
            "defended encoders are attacked with the base_encoder attacker"
        )
    z = _attr_values(train, attribute)
    if z.size == 0 or z.min() == z.max():
        raise DegenerateLabelError(f"{attribute} is constant in the training rows")
    reps = source.represent(train.features)
    model = _models.fit_calibrated("base", Batch(reps, z), hp, seed, calibrate=calibrate)
    model.target = attribute
    return Attacker(model=model, attribute=attribute, trained_on=source.kind, threshold=float(model.threshold))


def eval_attack(attacker: Attacker, test: Dataset, source: RepresentationSource, threshold=None) -> AttackReport:
    """Score ``attacker`` on ``source`` representations of ``test``.

    Raw and Base-encoder sources must be attacked by an attacker trained on
    that same source; defended encoders only by the Base-encoder attacker.
    The attacker's own threshold is used; passing a different one is an error.
    """
    mandated = "base_encoder" if source.kind in DEFENDED_SOURCES else source.kind
    if attacker.trained_on != mandated:
        raise ProtocolError(
            f"{source.kind} must be attacked by a {mandated} attacker, got one trained on {attacker.trained_on}"
        )
    if threshold is not None and float(threshold) != attacker.threshold:
        raise ProtocolError(
            f"threshold {threshold} does not match the one calibrated with the attacker ({attacker.threshold})"
        )
    reps = source.represent(test.features)
    if reps.shape[1] != attacker.input_dim:
        raise RejectedInputError(f"attacker expects {attacker.input_dim}-dim inputs, source gives {reps.shape[1]}")
    z = _attr_values(test, attacker.attribute)
    metrics = evaluate(attacker.model.predict_proba(reps), z, attacker.threshold)
    return AttackReport(attacker.attribute, source, metrics, majority_baseline(z))


def leakage_verdict(report: AttackReport) -> str:
    """``"private"`` unless the attacker is strictly more accurate than the majority baseline."""
    return "private" if report.metrics.accuracy <= report.majority_baseline else "leaking"


# ---------------------------------------------------------------------------
# full pipeline

STAGES = ("raw_features", "base_encoder", "adv_encoder", "adv_per_encoder")
STAGE_TITLES = {
    "raw_features": "Attack on raw features",
    "base_encoder": "Attack on the Base encoder",
    "adv_encoder": "Base-encoder attacker on the ADV encoder",
    "adv_per_encoder": "Base-encoder attacker on the ADV_per encoder",
}


@dataclass
class AttackResults:
    """Reports per stage and the majority baselines of TRAIN and TEST."""

    reports: dict
    baselines: list
    attackers: dict = field(default_factory=dict, repr=False)

    def stage_rows(self, stage):
        return [((r.attribute.capitalize(),), r.metrics) for r in self.reports[stage]]

    def stage_csv(self, stage) -> str:
        return to_csv(self.stage_rows(stage), (ATTACK_LEAD_COLUMN,), with_threshold=False)

    def stage_text(self, stage) -> str:
        return to_text(self.stage_rows(stage), (ATTACK_LEAD_COLUMN,), with_threshold=False, title=STAGE_TITLES[stage])

    def baselines_csv(self) -> str:
        lines = [",".join(BASELINE_COLUMNS)]
        lines += [f"{a.capitalize()},{tr:.4f},{te:.4f}" for a, tr, te in self.baselines]
        return "\n".join(lines) + "\n"

    def baselines_text(self) -> str:
        w = max(len(BASELINE_COLUMNS[0]), *(len(a) for a, _, _ in self.baselines))
        lines = ["Majority-class baselines", f"{BASELINE_COLUMNS[0].ljust(w)}  TRAIN   TEST"]
        lines.append(f"{'-' * w}  ------  ------")
        lines += [f"{a.capitalize().ljust(w)}  {tr:.4f}  {te:.4f}" for a, tr, te in self.baselines]
        return "\n".join(lines) + "\n"

    def auc(self, stage, attribute) -> float:
        for r in self.reports[stage]:
            if r.attribute == attribute:
                return r.metrics.auc
        raise KeyError((stage, attribute))


def run_attack_pipeline(
    train: Dataset, test: Dataset, base: TrainedModel, adv: TrainedModel | None = None,
    adv_per: TrainedModel | None = None, hp: Hyperparams = Hyperparams(), seed=0, attributes=ATTRIBUTES,
    calibrate="cv",
) -> AttackResults:
    """Three-stage attack: raw features, Base encoder, then the defended encoders.

    The same Base-encoder attacker (and threshold) is reused on the ADV and
    ADV_per encoders. Stages whose model is ``None`` are skipped.
    """
    sources = {"raw_features": RepresentationSource("raw_features"), "base_encoder": RepresentationSource("base_encoder", model=base)}
    if adv is not None:
        sources["adv_encoder"] = RepresentationSource("adv_encoder", model=adv)
    if adv_per is not None:
        sources["adv_per_encoder"] = RepresentationSource("adv_per_encoder", model=adv_per)
    for s in sources.values():
        s.resolve()

    reports = {stage: [] for stage in sources}
    attackers = {}
    for i, attr in enumerate(attributes):
        attr_seed = int(np.random.SeedSequence([int(seed), 307, i]).generate_state(1)[0])
        for trained_on in ("raw_features", "base_encoder"):
            atk = train_attacker(train, attr, sources[trained_on], hp, attr_seed, calibrate)
            attackers[(trained_on, attr)] = atk
        reports["raw_features"].append(eval_attack(attackers[("raw_features", attr)], test, sources["raw_features"]))
        for stage in ("base_encoder", "adv_encoder", "adv_per_encoder"):
            if stage in sources:
                reports[stage].append(eval_attack(attackers[("base_encoder", attr)], test, sources[stage]))
    baselines = [(a, majority_baseline(train, a), majority_baseline(test, a)) for a in attributes]
    return AttackResults(reports=reports, baselines=baselines, attackers=attackers)


__all__ = [
    "ATTACK_LEAD_COLUMN",
    "AttackReport",
    "AttackResults",
    "Attacker",
    "METRIC_COLUMNS",
    "RepresentationSource",
    "eval_attack",
    "leakage_verdict",
    "majority_baseline",
    "run_attack_pipeline",
    "train_attacker",
]
