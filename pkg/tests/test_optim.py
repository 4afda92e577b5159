import math

import numpy as np
import pytest

from src import autodiff as ad
from src.errors import OptimError
from src.optim import AdamW, AdamWState, adamw_step, cosine_lr


def test_first_step_moves_by_lr():
    state = AdamWState(lr=0.1)
    params = {"w": np.array([1.0])}
    adamw_step(state, params, {"w": np.array([1.0])})
    assert params["w"][0] == pytest.approx(0.9, abs=1e-9)
    assert state.step == 1


def test_decay_is_decoupled_from_gradient():
    state = AdamWState(lr=0.1, weight_decay=0.01)
    params = {"w": np.array([2.0, -4.0])}
    expected = params["w"] - 0.1 * 0.01 * params["w"]
    adamw_step(state, params, {"w": np.zeros(2)})
    assert np.allclose(params["w"], expected, rtol=1e-15, atol=0.0)


def test_quadratic_converges():
    state = AdamWState(lr=0.1)
    params = {"w": np.array([0.0])}
    for _ in range(500):
        adamw_step(state, params, {"w": 2.0 * (params["w"] - 3.0)})
    assert abs(params["w"][0] - 3.0) < 1e-3


def test_non_finite_gradient_names_parameter():
    state = AdamWState(lr=0.1)
    params = {"w": np.ones(2), "shape.0.bias": np.ones(2)}
    with pytest.raises(OptimError) as info:
        adamw_step(state, params, {"w": np.ones(2), "shape.0.bias": np.array([1.0, math.nan])})
    assert "shape.0.bias" in info.value.message
    assert np.array_equal(params["w"], np.ones(2))


def test_state_validation():
    with pytest.raises(OptimError):
        AdamWState(lr=0.0)
    with pytest.raises(OptimError):
        AdamWState(lr=0.1, beta1=1.0)


def test_cosine_schedule():
    assert cosine_lr(1e-3, 0, 100) == pytest.approx(1e-3)
    assert cosine_lr(1e-3, 50, 100) == pytest.approx(5e-4)
    assert cosine_lr(1e-3, 100, 100) == pytest.approx(0.0, abs=1e-18)
    assert cosine_lr(1e-3, 100, 100, floor=0.1) == pytest.approx(1e-4)


def _groups(rng):
    net = ad.parameter(rng.normal(size=(3, 2)), name="net")
    code = ad.parameter(rng.normal(size=4), name="code")
    return net, code, {
        "network": {"params": {"net": net}, "lr": 1e-2, "weight_decay": 1e-2},
        "latent": {"params": {"code": code}, "lr": 1e-1, "weight_decay": 0.0},
    }


def _fill_grads(net, code, step):
    net.grad = np.full(net.shape, 0.5 + step)
    code.grad = np.linspace(-1.0, 1.0, 4) * (step + 1)


def test_groups_use_their_own_rates():
    net, code, groups = _groups(np.random.default_rng(0))
    before = code.data.copy()
    opt = AdamW(groups)
    _fill_grads(net, code, 0)
    opt.step()
    assert np.allclose(np.abs(code.data - before)[[0, 3]], 0.1, atol=1e-6)
    assert opt.step_count == 1
    opt.zero_grad()
    assert net.grad is None and code.grad is None


def test_state_export_resumes_identically():
    net_a, code_a, groups_a = _groups(np.random.default_rng(1))
    opt_a = AdamW(groups_a)
    for step in range(4):
        _fill_grads(net_a, code_a, step)
        opt_a.step()

    net_b, code_b, groups_b = _groups(np.random.default_rng(1))
    opt_b = AdamW(groups_b)
    for step in range(2):
        _fill_grads(net_b, code_b, step)
        opt_b.step()
    saved = {k: v.copy() for k, v in opt_b.state_arrays().items()}
    opt_c = AdamW(groups_b)
    opt_c.load_state_arrays(saved)
    for step in range(2, 4):
        _fill_grads(net_b, code_b, step)
        opt_c.step()

    assert np.array_equal(net_a.data, net_b.data)
    assert np.array_equal(code_a.data, code_b.data)
    assert opt_c.step_count == 4


def test_state_import_checks_shapes():
    net, code, groups = _groups(np.random.default_rng(2))
    opt = AdamW(groups)
    _fill_grads(net, code, 0)
    opt.step()
    arrays = opt.state_arrays()
    arrays["latent/m/code"] = np.zeros(5)
    with pytest.raises(OptimError):
        AdamW(groups).load_state_arrays(arrays)
    with pytest.raises(OptimError):
        AdamW(groups).load_state_arrays({})


def test_zero_decay_is_plain_adam():
    rng = np.random.default_rng(3)
    grads = rng.normal(size=(100, 4))
    state = AdamWState(lr=0.05, weight_decay=0.0)
    params = {"w": np.ones(4)}
    w, m, v = np.ones(4), np.zeros(4), np.zeros(4)
    for t, g in enumerate(grads, start=1):
        adamw_step(state, params, {"w": g})
        m = 0.9 * m + (1.0 - 0.9) * g
        v = 0.999 * v + (1.0 - 0.999) * g * g
        w = w - 0.05 * (m / (1.0 - 0.9 ** t)) / (np.sqrt(v / (1.0 - 0.999 ** t)) + 1e-8)
    assert np.array_equal(params["w"], w)
