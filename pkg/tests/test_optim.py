"""Adam optimizer: update rule, convergence, determinism, group isolation."""

import numpy as np
import pytest

from driftalign.optim import Adam, AdamState, adam_step


def test_zero_gradient_leaves_params_unchanged():
    params = np.array([1.0, -2.0, 3.0])
    state = AdamState(params, lr=0.1)
    adam_step(state, np.zeros(3))
    assert np.array_equal(params, [1.0, -2.0, 3.0])


def test_first_step_closed_form():
    # At t=1 the bias-corrected update is exactly lr * g / (|g| + eps).
    rng = np.random.default_rng(0)
    g = rng.normal(size=8)
    params = rng.normal(size=8)
    before = params.copy()
    state = AdamState(params, lr=0.05)
    adam_step(state, g)
    expected = before - 0.05 * g / (np.abs(g) + 1e-8)
    assert np.allclose(params, expected, rtol=1e-12, atol=0)
    # for |g| >> eps the move is ~ +/- lr
    big = np.abs(g) > 1e-4
    assert np.allclose(np.abs(params - before)[big], 0.05, rtol=1e-3)


def test_quadratic_convergence():
    params = np.array([1.0])
    state = AdamState(params, lr=0.1)
    for _ in range(200):
        adam_step(state, 2.0 * params)
    assert abs(params[0]) < 0.01


def test_non_finite_gradient_names_block():
    state = AdamState(np.zeros(3), lr=0.1)
    with pytest.raises(ValueError, match="camera"):
        adam_step(state, np.array([1.0, np.nan, 0.0]), block="camera")


def test_shape_mismatch_rejected():
    state = AdamState(np.zeros(3), lr=0.1)
    with pytest.raises(ValueError):
        adam_step(state, np.zeros(4))


def test_deterministic_trajectories():
    rng = np.random.default_rng(1)
    grads = rng.normal(size=(50, 6))

    def run():
        params = np.ones(6)
        state = AdamState(params, lr=0.01)
        for g in grads:
            adam_step(state, g)
        return params

    assert np.array_equal(run(), run())


def test_groups_do_not_perturb_each_other():
    a = np.ones(4)
    b = np.ones(4)
    opt = Adam()
    opt.add_group("camera", a, lr=0.1)
    opt.add_group("field", b, lr=0.001)
    opt.step({"camera": np.ones(4)})
    assert np.array_equal(b, np.ones(4))
    assert not np.array_equal(a, np.ones(4))
    # distinct learning rates
    opt.step({"field": np.ones(4)})
    assert abs((1.0 - b[0]) - 0.001) < 1e-9


def test_duplicate_group_rejected():
    opt = Adam()
    opt.add_group("x", np.zeros(1), lr=0.1)
    with pytest.raises(ValueError):
        opt.add_group("x", np.zeros(1), lr=0.1)
