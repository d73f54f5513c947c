import logging

import numpy as np
import pytest

from sfpano.optim import SGD, AdamW, collect_grads, poly_lr
from sfpano.tensor import Tensor

from oracles import adam_first_step, poly


def _params(*values):
    return {f"p{i}": Tensor(np.array(v, dtype=np.float64), requires_grad=True) for i, v in enumerate(values)}


def test_poly_schedule_endpoints_and_midpoint():
    assert poly_lr(6e-5, 0, 1200) == 6e-5
    assert poly_lr(6e-5, 1200, 1200) == 0.0
    assert poly_lr(1.0, 600, 1200, 0.9) == pytest.approx(0.53589, abs=1e-5)
    assert poly_lr(1.0, 600, 1200, 0.9) == pytest.approx(poly(1.0, 600, 1200, 0.9), abs=1e-15)
    with pytest.raises(ValueError):
        poly_lr(1.0, 1201, 1200)


def test_zero_gradient_without_decay_is_stationary():
    params = _params([1.0, -2.0])
    AdamW(weight_decay=0.0).step(params, {"p0": np.zeros(2)}, 1e-3)
    np.testing.assert_array_equal(params["p0"].data, [1.0, -2.0])


def test_zero_gradient_decay_only():
    params = _params([3.0])
    AdamW(weight_decay=1e-4).step(params, {"p0": np.zeros(1)}, 1.0)
    assert params["p0"].data[0] == pytest.approx(3.0 * (1 - 1e-4), abs=1e-15)


def test_first_adam_step_matches_closed_form():
    params = _params([0.7])
    AdamW(weight_decay=1e-4).step(params, {"p0": np.array([0.5])}, 1e-3)
    assert params["p0"].data[0] == pytest.approx(adam_first_step(0.7, 0.5, 1e-3, 1e-4), abs=1e-15)
    # first step moves by almost exactly lr in the direction of -sign(g)
    assert 0.7 * (1 - 1e-7) - params["p0"].data[0] == pytest.approx(1e-3, rel=1e-6)


def test_non_finite_gradient_skips_step(caplog):
    params = _params([1.0])
    opt = AdamW()
    with caplog.at_level(logging.WARNING):
        assert not opt.step(params, {"p0": np.array([np.nan])}, 1e-3)
    assert params["p0"].data[0] == 1.0
    assert opt.state.step == 0 and opt.state.skipped == 1
    assert "non-finite" in caplog.text


def test_moments_match_parameter_shapes_and_counter_increases():
    params = _params(np.ones((2, 3)), np.ones(4))
    opt = AdamW()
    for k in range(3):
        opt.step(params, {"p0": np.ones((2, 3)), "p1": np.ones(4)}, 1e-3)
        assert opt.state.step == k + 1
    assert opt.state.m["p0"].shape == (2, 3) and opt.state.v["p1"].shape == (4,)


def test_sgd_step():
    params = _params([1.0, 2.0])
    SGD().step(params, {"p0": np.array([1.0, -1.0])}, 0.5)
    np.testing.assert_allclose(params["p0"].data, [0.5, 2.5])


def test_collect_grads_fills_zeros():
    params = _params([1.0], [2.0])
    params["p0"].grad = np.array([3.0])
    g = collect_grads(params)
    assert g["p0"][0] == 3.0 and g["p1"][0] == 0.0
