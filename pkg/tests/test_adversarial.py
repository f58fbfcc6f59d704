import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from advpriv.adversarial import (
    FgsmConfig,
    GrlConfig,
    _intercepted_params,
    fgsm_eta,
    fgsm_objective,
    fgsm_training_step,
    grl_backward,
    grl_forward,
)
from advpriv.errors import RejectedInputError
from advpriv.nn import Adam, bce_loss, dense_stack, finite_difference_grad, optimizer_step

finite = st.floats(-1e6, 1e6, allow_nan=False)


def test_grl_forward_examples():
    x = np.array([1.5, -2.0])
    assert np.array_equal(grl_forward(x), [1.5, -2.0])
    assert np.array_equal(grl_forward(np.zeros((3, 2))), np.zeros((3, 2)))


def test_grl_backward_examples():
    assert np.array_equal(grl_backward(np.array([0.3, -0.1]), 2.0), [-0.6, 0.2])
    assert not grl_backward(np.array([5.0, -3.0]), 0.0).any()


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=finite))
def test_grl_unit_lambda_is_an_involution(g):
    assert np.array_equal(grl_backward(grl_backward(g, 1.0), 1.0), g)


# magnitudes kept clear of the subnormal range, where rounding is not relative
normal = st.floats(-1e3, 1e3).filter(lambda v: v == 0 or abs(v) > 1e-200)


@given(arrays(np.float64, st.integers(1, 10), elements=normal), st.one_of(st.just(0.0), st.floats(1e-3, 10)))
def test_grl_round_trip_scales_by_lambda_squared(g, lam):
    twice = grl_backward(grl_backward(g, lam), lam)
    assert np.allclose(twice, lam * lam * g, rtol=1e-15, atol=0)


def test_grl_config_rejects_negative_lambda():
    with pytest.raises(RejectedInputError):
        GrlConfig(lam=-1.0)


def test_fgsm_eta_examples():
    assert np.array_equal(fgsm_eta(np.array([0.3, -0.2, 0.0]), 0.1), [0.1, -0.1, 0.0])
    assert not fgsm_eta(np.array([3.0, -1.0]), 0.0).any()
    with pytest.raises(RejectedInputError):
        fgsm_eta(np.array([1.0]), -0.1)


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=finite), st.floats(0, 2))
def test_fgsm_eta_entries_in_budget(g, eps):
    eta = fgsm_eta(g, eps)
    assert np.all(np.isin(eta, [-eps, 0.0, eps]))
    assert np.max(np.abs(eta)) <= eps


def test_fgsm_objective_arithmetic():
    assert abs(fgsm_objective(0.8, 1.2, 0.5) - 1.0) < 1e-15


@pytest.mark.parametrize("kw", [{"epsilon": -0.1}, {"alpha": 1.5}, {"target": "other"}])
def test_fgsm_config_validation(kw):
    with pytest.raises(RejectedInputError):
        FgsmConfig(**kw)


def test_intercept_must_address_hidden_layer():
    s = dense_stack(4, 5)
    assert FgsmConfig().resolve_intercept(s) == s.encoder_end
    with pytest.raises(RejectedInputError):
        FgsmConfig(intercept_layer=len(s.layers)).resolve_intercept(s)
    with pytest.raises(RejectedInputError):
        FgsmConfig(intercept_layer=0).resolve_intercept(s)


def _setup(seed=0, n=16):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 5))
    y = (x[:, 0] > 0).astype(float)
    s = dense_stack(5, 8, seed=seed)
    return s, Adam.for_stacks([s]), x, y


def _plain_step(s, opt, x, y):
    out = s.forward(x)[-1]
    loss, g = bce_loss(out, y.reshape(-1, 1))
    s.backward(g)
    optimizer_step([s], opt)
    return loss


def test_zero_epsilon_equals_plain_step():
    a, oa, x, y = _setup()
    b, ob, _, _ = _setup()
    res = fgsm_training_step(a, x, y, FgsmConfig(epsilon=0.0), oa)
    loss = _plain_step(b, ob, x, y)
    assert abs(res.adversarial_loss - res.clean_loss) < 1e-10 and res.clean_loss == loss
    assert np.array_equal(a.flat_values, b.flat_values)


def test_unit_alpha_equals_plain_step():
    a, oa, x, y = _setup(1)
    b, ob, _, _ = _setup(1)
    for _ in range(3):
        fgsm_training_step(a, x, y, FgsmConfig(epsilon=0.3, alpha=1.0), oa)
        _plain_step(b, ob, x, y)
    assert np.array_equal(a.flat_values, b.flat_values)
    assert a.rng.bit_generator.state == b.rng.bit_generator.state


def test_restore_returns_pre_attack_parameters():
    s, opt, x, y = _setup(2)
    k = FgsmConfig().resolve_intercept(s)
    before = {p.name: p.values.copy() for p in _intercepted_params(s, k)}
    res = fgsm_training_step(s, x, y, FgsmConfig(epsilon=0.1), opt)
    assert before.keys() == res.restored.keys() and before
    for name, vals in before.items():
        assert np.array_equal(vals, res.restored[name])


def test_perturbation_respects_budget_and_shape():
    s, opt, x, y = _setup(3)
    res = fgsm_training_step(s, x, y, FgsmConfig(epsilon=0.07), opt)
    assert res.eta.shape == (x.shape[0], s.encoder_dim)
    assert np.max(np.abs(res.eta)) <= 0.07


def test_gradient_matches_weighted_objective():
    """Accumulated gradient equals the finite-difference gradient of alpha*J(h) + (1-alpha)*J(h + eta), eta fixed."""
    rng = np.random.default_rng(4)
    x = rng.normal(size=(12, 5))
    y = (x[:, 0] > 0).astype(float).reshape(-1, 1)
    s = dense_stack(5, 6, dropout=0.0, seed=4)
    cfg = FgsmConfig(epsilon=0.2, alpha=0.3, target="true")
    params = s.flat_values.copy()
    captured = {}

    class Capture:
        def step(self):
            captured["grad"] = s.flat_grad.copy()
            s.flat_grad[...] = 0.0

    eta = fgsm_training_step(s, x, y, cfg, Capture()).eta
    s.flat_values[...] = params
    k = s.encoder_end

    def objective():
        acts = s.forward(x, update_stats=False)
        clean = bce_loss(acts[-1], y)[0]
        adv = bce_loss(s.forward(acts[k] + eta, start=k, update_stats=False)[-1], y)[0]
        return fgsm_objective(clean, adv, cfg.alpha)

    numeric = finite_difference_grad(objective, s.flat_values, step=1e-5)
    rel = np.abs(captured["grad"] - numeric) / np.maximum(np.abs(numeric), 1e-6)
    assert np.mean(rel < 1e-4) > 0.99
