import numpy as np
import pytest

from advpriv import models as Mo
from advpriv.adversarial import FgsmConfig
from advpriv.errors import ConfigError, ProtocolError, RejectedInputError
from advpriv.nn import dense_stack

HP = Mo.Hyperparams(hidden=16, disc_hidden=16, epochs=3, epochs_per=3, cv_folds=3)


def separable(n=400, d=6, seed=0, n_attr=3):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    y = (x[:, 0] + 0.5 * x[:, 1] > 0).astype(float)
    z = rng.integers(0, 2, size=(n, n_attr)).astype(float)
    return Mo.Batch(x, y, z)


def test_separable_data_is_learned():
    tr, te = separable(800), separable(400, seed=1)
    m = Mo.train_base(tr, Mo.Hyperparams(epochs=8), seed=0)
    acc = np.mean((m.predict_proba(te.features) >= 0.5) == te.labels)
    assert acc >= 0.95


def test_zero_epochs_returns_initialisation():
    b = separable(50)
    m = Mo.train_base(b, HP, seed=3, epochs=0)
    init = Mo.build_main_stack(6, HP, 3)
    assert np.array_equal(m.stack.flat_values, init.flat_values) and m.history == []


def test_training_is_deterministic():
    b = separable(120)
    a, c = Mo.train_adv(b, HP, seed=5), Mo.train_adv(b, HP, seed=5)
    assert np.array_equal(a.stack.flat_values, c.stack.flat_values)
    assert [h.loss for h in a.history] == [h.loss for h in c.history]


def test_zero_lambda_adv_follows_base_trajectory():
    b = separable(160)
    base = Mo.train_base(b, HP, seed=2)
    adv = Mo.train_adv(b, HP, lam=0.0, seed=2)
    assert np.array_equal(adv.stack.flat_values, base.stack.flat_values)


def test_discriminators_are_at_chance_for_independent_attributes():
    hp = Mo.Hyperparams(hidden=32, disc_hidden=32, epochs=4)
    model, discs = Mo.train_adv(separable(1500), hp, seed=1, return_discriminators=True)
    held = separable(2000, seed=9)
    h = model.encode(held.features)
    for i, d in enumerate(discs):
        acc = np.mean((d.predict_proba(h) >= 0.5) == held.protected[:, i])
        assert abs(acc - 0.5) < 0.05
    assert len(model.history[-1].disc_acc) == 3


def test_adv_needs_protected_attributes():
    b = separable(40)
    with pytest.raises(RejectedInputError):
        Mo.train_adv(Mo.Batch(b.features, b.labels), HP)


@pytest.mark.parametrize("fgsm", [FgsmConfig(epsilon=0.0), FgsmConfig(epsilon=0.2, alpha=1.0)])
def test_degenerate_fgsm_equals_base(fgsm):
    b = separable(96)
    base = Mo.train_base(b, HP, seed=4, epochs=2)
    per = Mo.train_adv_per(b, HP, fgsm, seed=4, epochs=2)
    assert np.array_equal(per.stack.flat_values, base.stack.flat_values)


def test_encoder_dimension_and_head_decomposition():
    b = separable(64)
    m = Mo.train_base(b, Mo.Hyperparams(epochs=1), seed=0)
    h = m.encode(b.features)
    assert h.shape == (64, 150) and m.encoder_dim == 150
    assert np.max(np.abs(m.head(h) - m.predict_proba(b.features))) < 1e-12


def test_all_kinds_share_one_architecture():
    b = separable(48)
    counts = {Mo.fit(k, b, HP, seed=0).n_params() for k in Mo.MODEL_KINDS}
    assert len(counts) == 1


def test_threshold_boundary_counts_as_positive(monkeypatch):
    m = Mo.with_threshold(Mo.train_base(separable(32), HP, epochs=0), 0.1551)
    monkeypatch.setattr(m, "predict_proba", lambda x: np.array([0.10, 0.20, 0.1551]))
    _, hard = m.predict(np.zeros((3, 6)))
    assert hard.tolist() == [0, 1, 1]


def test_predict_without_threshold_is_protocol_error():
    m = Mo.train_base(separable(32), HP, epochs=0)
    with pytest.raises(ProtocolError):
        m.predict(np.zeros((1, 6)))


def test_wrong_feature_count_rejected():
    m = Mo.train_base(separable(32), HP, epochs=0)
    with pytest.raises(RejectedInputError):
        m.predict_proba(np.zeros((2, 5)))


def test_cv_calibration_returns_usable_threshold():
    b = separable(300)
    m = Mo.fit_calibrated("base", b, HP, seed=0)
    p = m.predict_proba(b.features)
    assert 0.0 < m.threshold < 1.0 and np.any(p >= m.threshold)


def test_unknown_calibration_mode():
    with pytest.raises(ConfigError):
        Mo.fit_calibrated("base", separable(40), HP, calibrate="holdout")


def test_save_load_round_trip(tmp_path):
    b = separable(80)
    m = Mo.fit_calibrated("adv_per", b, HP, seed=1, calibrate="train")
    m.save(tmp_path / "m.model")
    back = Mo.load_model(tmp_path / "m.model")
    assert back.kind == "adv_per" and back.threshold == m.threshold and back.fgsm == m.fgsm
    assert np.array_equal(back.predict_proba(b.features), m.predict_proba(b.features))
    assert [h.loss for h in back.history] == [h.loss for h in m.history]
    back.save(tmp_path / "again.model")
    assert (tmp_path / "m.model").read_bytes() == (tmp_path / "again.model").read_bytes()


@pytest.mark.parametrize("kw", [{"lr": 0.0}, {"lam": -1.0}, {"dropout": 1.0}, {"cv_folds": 1}, {"recall_band": (0.9, 0.8)}])
def test_hyperparam_validation(kw):
    with pytest.raises(ConfigError):
        Mo.Hyperparams(**kw)


def test_default_stack_uses_requested_width():
    s = dense_stack(30, 150)
    assert s.encoder_dim == 150
