"""Gradient correctness, the optimizer recurrence, and learning-rate schedules."""

from __future__ import annotations

import numpy as np
import pytest

from skewsim.errors import ConfigError, ShapeError
from skewsim.nn.gradcheck import grad_check
from skewsim.nn.model import Model, ModelSpec
from skewsim.nn.optim import LrSchedule, OptState, lr_at, sgd_momentum_step
from skewsim.nn.params import ParamVector


def _batch(dim, classes, n=4, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, dim))
    y = rng.integers(0, classes, size=n)
    return x, y


def test_grad_check_linear_model_is_tight():
    model = Model(ModelSpec("logreg", input_dim=8, num_classes=4), np.float64)
    x, y = _batch(8, 4)
    assert grad_check(model, x, y) < 1e-7


@pytest.mark.parametrize("arch,dim", [("logreg", 16), ("mlp", 16), ("smallconv", 36)])
@pytest.mark.parametrize("norm", ["none", "batch", "group"])
def test_grad_check_all_architectures(arch, dim, norm):
    spec = ModelSpec(arch, input_dim=dim, num_classes=4, norm=norm, group_size=2, hidden=12)
    model = Model(spec, np.float64, init_seed=1)
    x, y = _batch(dim, 4, n=5, seed=2)
    assert grad_check(model, x, y, weight_decay=0.001) < 1e-4


def test_grad_check_detects_planted_fault():
    model = Model(ModelSpec("mlp", input_dim=8, num_classes=3, hidden=10), np.float64)
    x, y = _batch(8, 3)

    def doubled(model, x, y, weight_decay):
        grad = model.loss_and_grad(x, y, weight_decay=weight_decay)[0]
        grad.view("fc2.W")[...] *= 2.0
        return grad

    assert grad_check(model, x, y, grad_fn=doubled) > 0.4


def test_grad_check_refuses_float32():
    model = Model(ModelSpec("logreg", input_dim=4, num_classes=2), np.float32)
    with pytest.raises(ShapeError):
        grad_check(model, *_batch(4, 2))


def test_zero_input_logistic_gradient_formula():
    model = Model(ModelSpec("logreg", input_dim=5, num_classes=3), np.float64)
    model.params.data[...] = 0.0
    x = np.zeros((3, 5))
    y = np.array([0, 0, 1])
    grad, _, _ = model.loss_and_grad(x, y)
    onehot_mean = np.array([2 / 3, 1 / 3, 0.0])
    assert np.allclose(grad.view("out.b"), 1.0 / 3.0 - onehot_mean, atol=1e-12)
    assert np.all(grad.view("out.W") == 0.0)


def test_weight_decay_applies_to_weights_only():
    model = Model(ModelSpec("logreg", input_dim=5, num_classes=3), np.float64, init_seed=4)
    x = np.zeros((3, 5))  # kills the data term on W
    y = np.array([0, 1, 2])
    plain, _, _ = model.loss_and_grad(x, y, weight_decay=0.0)
    decayed, _, _ = model.loss_and_grad(x, y, weight_decay=0.1)
    assert np.allclose(decayed.view("out.W"), 0.1 * np.asarray(model.params.view("out.W")))
    assert np.array_equal(decayed.view("out.b"), plain.view("out.b"))


def _vec(values):
    pv = ParamVector.allocate([("opt", "u", (len(values),))], np.float64)
    pv.data[...] = values
    return pv


def test_momentum_step_direct_arithmetic():
    opt = OptState(u=_vec([1.0]), momentum=0.9, eta=0.1)
    u = sgd_momentum_step(opt, _vec([2.0]))
    assert np.allclose(u.data, [0.7])


def test_momentum_zero_is_plain_sgd():
    opt = OptState(u=_vec([123.0]), momentum=0.0, eta=0.05)
    u = sgd_momentum_step(opt, _vec([2.0]))
    assert np.allclose(u.data, [-0.1])


def test_momentum_geometric_decay():
    opt = OptState(u=_vec([1.0]), momentum=0.9, eta=0.1)
    for _ in range(3):
        sgd_momentum_step(opt, _vec([0.0]))
    assert np.allclose(opt.u.data, [0.729])


def test_momentum_closed_form_under_constant_gradient():
    m, eta, g = 0.9, 0.01, 3.0
    opt = OptState(u=_vec([0.0]), momentum=m, eta=eta)
    for t in range(1, 8):
        sgd_momentum_step(opt, _vec([g]))
        expected = -eta * g * (1.0 - m**t) / (1.0 - m)
        assert abs(opt.u.data[0] - expected) < 1e-12


def test_step_schedule_applies_all_passed_drops():
    sched = LrSchedule("step", 0.002, step_drops=((64, 10.0), (96, 10.0)))
    assert lr_at(sched, 70, 0) == pytest.approx(0.0002)
    assert lr_at(sched, 96, 0) == pytest.approx(2e-5)
    assert lr_at(sched, 0, 0) == 0.002


def test_poly_schedule_halfway_point():
    sched = LrSchedule("poly", 0.00125, poly_power=1.0, poly_max_iter=100)
    assert lr_at(sched, 0, 50) == pytest.approx(0.000625)
    assert lr_at(sched, 0, 0) == 0.00125
    with pytest.raises(ConfigError):
        lr_at(sched, 0, 100)


def test_schedule_validation():
    with pytest.raises(ConfigError):
        LrSchedule("step", 0.01, step_drops=((10, 10.0), (10, 2.0)))
    with pytest.raises(ConfigError):
        LrSchedule("step", 0.0)
    with pytest.raises(ConfigError):
        LrSchedule("cosine", 0.01)
