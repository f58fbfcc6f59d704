import numpy as np
import pytest

from advpriv import attack as A
from advpriv import models as Mo
from advpriv.data import SyntheticSpec, generate_synthetic, stratified_split
from advpriv.errors import DegenerateLabelError, ProtocolError, RejectedInputError
from advpriv.metrics import MetricSet

HP = Mo.Hyperparams(hidden=32, epochs=4, cv_folds=3)


def split(n=1200, seed=0, **kw):
    return stratified_split(generate_synthetic(SyntheticSpec(n_rows=n, seed=seed, **kw)), 0.25, seed=seed)


@pytest.fixture(scope="module")
def base_model():
    tr, _ = split()
    return Mo.fit_calibrated("base", tr, HP, seed=0, calibrate="train")


def test_planted_attribute_is_recovered():
    tr, te = split(leakage_strength=(4.0, 0.0, 0.0))
    raw = A.RepresentationSource("raw_features")
    atk = A.train_attacker(tr, "age", raw, HP, seed=0, calibrate="train")
    assert A.eval_attack(atk, te, raw).metrics.auc >= 0.95


def test_independent_attribute_is_at_chance():
    tr, te = split(n=3000, leakage_strength=0.0)
    raw = A.RepresentationSource("raw_features")
    atk = A.train_attacker(tr, "gender", raw, HP, seed=1, calibrate="train")
    assert abs(A.eval_attack(atk, te, raw).metrics.auc - 0.5) < 0.05


def test_encoder_attacker_reads_full_width(base_model):
    tr, te = split()
    src = A.RepresentationSource("base_encoder", model=base_model)
    atk = A.train_attacker(tr, "ethnicity", src, HP, seed=0, calibrate="train")
    assert atk.input_dim == 32 and src.represent(te.features).shape == (len(te), 32)
    rep = A.eval_attack(atk, te, src)
    assert rep.attribute == "ethnicity" and 0.0 <= rep.metrics.auc <= 1.0


def test_defended_encoders_cannot_train_attackers(base_model):
    tr, _ = split(200)
    adv = Mo.fit_calibrated("adv", tr, HP, seed=0, calibrate="train")
    with pytest.raises(ProtocolError):
        A.train_attacker(tr, "age", A.RepresentationSource("adv_encoder", model=adv), HP)


def test_defended_encoder_must_be_attacked_by_base_attacker(base_model):
    tr, te = split()
    raw = A.RepresentationSource("raw_features")
    raw_atk = A.train_attacker(tr, "age", raw, HP, calibrate="train")
    adv = Mo.fit_calibrated("adv", tr, HP, seed=0, calibrate="train")
    with pytest.raises(ProtocolError):
        A.eval_attack(raw_atk, te, A.RepresentationSource("adv_encoder", model=adv))
    with pytest.raises(ProtocolError):
        A.eval_attack(raw_atk, te, A.RepresentationSource("base_encoder", model=base_model))


def test_threshold_override_is_rejected():
    tr, te = split()
    raw = A.RepresentationSource("raw_features")
    atk = A.train_attacker(tr, "age", raw, HP, calibrate="train")
    assert A.eval_attack(atk, te, raw, threshold=atk.threshold).metrics.threshold == atk.threshold
    with pytest.raises(ProtocolError):
        A.eval_attack(atk, te, raw, threshold=atk.threshold + 0.01)


def test_source_validation(base_model):
    with pytest.raises(RejectedInputError):
        A.RepresentationSource("pixels")
    with pytest.raises(RejectedInputError):
        A.RepresentationSource("adv_encoder")
    with pytest.raises(RejectedInputError):
        A.RepresentationSource("adv_encoder", model=base_model).resolve()


def test_constant_attribute_is_degenerate():
    tr, _ = split(200)
    tr.gender[:] = 1
    with pytest.raises(DegenerateLabelError):
        A.train_attacker(tr, "gender", A.RepresentationSource("raw_features"), HP)


def test_majority_baseline_examples():
    assert A.majority_baseline(np.array([1, 1, 1, 0])) == 0.75
    assert A.majority_baseline(np.array([0, 0, 1])) == pytest.approx(2 / 3)
    ds = generate_synthetic(SyntheticSpec(n_rows=20000, seed=1))
    assert abs(A.majority_baseline(ds, "ethnicity") - 0.68) < 0.02
    with pytest.raises(RejectedInputError):
        A.majority_baseline(np.array([]))


@pytest.mark.parametrize("acc,verdict", [(0.68, "private"), (0.6, "private"), (0.6801, "leaking")])
def test_verdict_boundaries(acc, verdict):
    m = MetricSet(0.5, 0.5, 0.5, acc, 0.5, 0.5, 0.5, 0.5)
    report = A.AttackReport("ethnicity", A.RepresentationSource("raw_features"), m, 0.68)
    assert A.leakage_verdict(report) == verdict


def test_pipeline_tables(base_model):
    tr, te = split()
    res = A.run_attack_pipeline(tr, te, base_model, hp=HP, seed=0, attributes=("age", "gender"), calibrate="train")
    assert set(res.reports) == {"raw_features", "base_encoder"}
    head = res.stage_csv("raw_features").splitlines()
    assert head[0] == "Predicted Attribute,Recall,Precision,F1-Score,Accuracy,Specificity,PPV,NPV,AUC"
    assert [r.split(",")[0] for r in head[1:]] == ["Age", "Gender"]
    assert res.baselines_csv().splitlines()[0] == "Protected attribute,TRAIN,TEST"
    # one Base-encoder attacker per attribute, shared across stages
    assert res.attackers[("base_encoder", "age")].trained_on == "base_encoder"
