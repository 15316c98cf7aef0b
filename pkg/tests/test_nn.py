import numpy as np
import pytest

from sidkit.errors import ShapeError
from sidkit.nn import (
    AdamState,
    GradCheckReport,
    Layer,
    MlpParams,
    adam_step,
    cosine_sim_backward,
    cosine_sim_forward,
    grad_check,
    identity_mlp,
    mlp_apply,
    mlp_backward,
    mlp_forward,
    mlp_init,
)


def test_identity_layer_passthrough():
    params = identity_mlp(2)
    out = mlp_apply(params, np.array([[1.0, 2.0]]))
    assert np.array_equal(out, np.array([[1.0, 2.0]]))


def test_relu_layer_hand_computation():
    params = MlpParams([Layer(np.array([[2.0, 0.0], [0.0, 3.0]]), np.array([1.0, 1.0]), "relu")])
    out = mlp_apply(params, np.array([[-1.0, 1.0]]))
    assert np.array_equal(out, np.array([[0.0, 4.0]]))


def test_three_layer_shapes_and_determinism():
    rng = np.random.default_rng(7)
    params = mlp_init([5, 8, 8, 3], ["relu", "tanh", "identity"], rng)
    x = rng.normal(size=(8, 5))
    out1 = mlp_apply(params, x)
    out2 = mlp_apply(params, x)
    assert out1.shape == (8, 3)
    assert np.array_equal(out1, out2)


def test_dimension_mismatch_names_both_dims():
    params = identity_mlp(3)
    with pytest.raises(ShapeError, match="2.*3|3.*2"):
        mlp_apply(params, np.zeros((1, 2)))


def test_single_layer_affinity():
    rng = np.random.default_rng(3)
    params = mlp_init([4, 4], "identity", rng)
    params.layers[0].bias[:] = rng.normal(size=4)
    x = rng.normal(size=(1, 4))
    y = rng.normal(size=(1, 4))
    alpha, beta = 0.7, -1.3
    lhs = mlp_apply(params, alpha * x + beta * y)
    f0 = mlp_apply(params, np.zeros((1, 4)))
    rhs = alpha * mlp_apply(params, x) + beta * mlp_apply(params, y) + (1 - alpha - beta) * f0
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_mlp_backward_matches_finite_differences():
    rng = np.random.default_rng(11)
    params = mlp_init([4, 6, 3], ["tanh", "identity"], rng)
    x = rng.normal(size=(5, 4))
    target = rng.normal(size=(5, 3))
    flat = dict(params.param_items("mlp"))

    def loss_fn(_pd):
        out, tape = mlp_forward(params, x)
        diff = out - target
        loss = float((diff * diff).sum())
        layer_grads, _ = mlp_backward(params, tape, 2.0 * diff)
        grads = {}
        for i, (dw, db) in enumerate(layer_grads):
            grads[f"mlp.w{i}"] = dw
            grads[f"mlp.b{i}"] = db
        return loss, grads

    report = grad_check(loss_fn, flat, epsilon=1e-5, tolerance=1e-6)
    assert report.passed, f"max rel error {report.max_rel_error} at {report.worst_key}"


def test_grad_check_quadratic_loss():
    rng = np.random.default_rng(2)
    w = rng.normal(size=(4, 3))
    x = rng.normal(size=3)
    y = rng.normal(size=4)
    params = {"w": w}

    def loss_fn(pd):
        r = pd["w"] @ x - y
        return float(r @ r), {"w": 2.0 * np.outer(r, x)}

    report = grad_check(loss_fn, params, epsilon=1e-5, tolerance=1e-6)
    assert report.passed, report.max_rel_error
    assert report.max_rel_error < 1e-6


def test_grad_check_constant_loss():
    params = {"p": np.ones(5)}

    def loss_fn(_pd):
        return 3.5, {"p": np.zeros(5)}

    report = grad_check(loss_fn, params, epsilon=1e-5, tolerance=1e-6)
    assert report.max_abs_analytic == 0.0
    assert report.max_abs_fd < 1e-9
    assert report.passed


def test_cosine_sim_gradients():
    rng = np.random.default_rng(5)
    h0 = rng.normal(size=(4, 3))
    c0 = rng.normal(size=(6, 3))
    coeff = rng.normal(size=(4, 6))
    params = {"h": h0.copy(), "c": c0.copy()}

    def loss_fn(pd):
        sims, tape = cosine_sim_forward(pd["h"], pd["c"])
        dh, dc = cosine_sim_backward(tape, coeff)
        return float((coeff * sims).sum()), {"h": dh, "c": dc}

    report = grad_check(loss_fn, params, epsilon=1e-6, tolerance=1e-6)
    assert report.passed, f"{report.max_rel_error} at {report.worst_key}{report.worst_index}"


def test_cosine_sim_zero_row_is_inert():
    h = np.array([[0.0, 0.0], [1.0, 0.0]])
    c = np.array([[1.0, 0.0], [0.0, 2.0]])
    sims, tape = cosine_sim_forward(h, c)
    assert np.array_equal(sims[0], np.zeros(2))
    dh, dc = cosine_sim_backward(tape, np.ones((2, 2)))
    assert np.array_equal(dh[0], np.zeros(2))
    assert np.all(np.isfinite(dc))


def test_adam_zero_gradient_keeps_params():
    params = {"p": np.array([1.0, -2.0])}
    grads = {"p": np.zeros(2)}
    state = AdamState.init(params)
    adam_step(params, grads, state, lr=0.1)
    assert np.array_equal(params["p"], np.array([1.0, -2.0]))
    assert state.step == 1


def test_adam_first_step_moves_by_lr():
    params = {"p": np.array([1.0])}
    grads = {"p": np.array([1.0])}
    state = AdamState.init(params)
    adam_step(params, grads, state, lr=0.1)
    assert abs(params["p"][0] - 0.9) < 1e-6


def test_adam_trajectory_determinism():
    def run():
        rng = np.random.default_rng(42)
        params = {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=4)}
        state = AdamState.init(params)
        for _ in range(10):
            grads = {k: rng.normal(size=v.shape) for k, v in params.items()}
            adam_step(params, grads, state, lr=1e-2)
        return params

    p1, p2 = run(), run()
    assert np.array_equal(p1["a"], p2["a"])
    assert np.array_equal(p1["b"], p2["b"])


def test_adam_shape_mismatch():
    params = {"p": np.zeros(3)}
    grads = {"p": np.zeros(4)}
    with pytest.raises(ShapeError):
        adam_step(params, grads, AdamState.init(params))
