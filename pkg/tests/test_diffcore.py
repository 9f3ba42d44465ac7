import json
import math

import numpy as np
import pytest

from seqpack.diffcore import (
    MlpSpec,
    ParamSet,
    init_mlp,
    load_params,
    make_optimizer,
    make_rng,
    mlp_backward,
    mlp_forward,
    optimizer_step,
    restore_rng,
    rng_state_payload,
    save_params,
    set_freeze_mask,
)


def _build_net(widths, seed=0):
    params = ParamSet()
    spec = MlpSpec(tuple(widths))
    init_mlp(params, spec, "net", make_rng(seed))
    return spec, params


def _reference_forward(spec, params, x):
    # independently coded pass: plain python loops over layers
    h = np.asarray(x, dtype=np.float64)
    for i in range(spec.n_layers):
        w = params.value(f"net.W{i}")
        b = params.value(f"net.b{i}")
        h = h @ w + b
        if i < spec.n_layers - 1:
            h = np.tanh(h)
    return h


def test_zero_weights_output_is_bias():
    spec, params = _build_net([3, 4])
    params.set_value("net.W0", np.zeros((3, 4)))
    params.set_value("net.b0", np.array([1.0, -2.0, 0.5, 3.0]))
    for x in (np.zeros(3), np.ones(3), np.array([5.0, -7.0, 0.1])):
        out, _ = mlp_forward(spec, params, x, "net")
        np.testing.assert_array_equal(out, [1.0, -2.0, 0.5, 3.0])


def test_identity_single_layer():
    spec, params = _build_net([4, 4])
    params.set_value("net.W0", np.eye(4))
    params.set_value("net.b0", np.zeros(4))
    x = np.array([0.3, -1.2, 4.0, 0.0])
    out, _ = mlp_forward(spec, params, x, "net")
    np.testing.assert_array_equal(out, x)


def test_forward_matches_independent_reevaluation():
    rng = make_rng(42)
    for trial in range(5):
        spec, params = _build_net([5, 8, 7, 3], seed=trial)
        x = rng.standard_normal(5)
        out, _ = mlp_forward(spec, params, x, "net")
        np.testing.assert_array_equal(out, _reference_forward(spec, params, x))


def test_forward_dimension_mismatch_names_layer():
    spec, params = _build_net([3, 4])
    with pytest.raises(ValueError, match="net.*layer 0"):
        mlp_forward(spec, params, np.zeros(5), "net")


def test_backward_zero_upstream_leaves_grads():
    spec, params = _build_net([3, 5, 2])
    params.add_grad("net.W0", np.full((3, 5), 1.5))
    _, cache = mlp_forward(spec, params, np.ones(3), "net")
    mlp_backward(cache, np.zeros(2), params)
    np.testing.assert_array_equal(params.grad("net.W0"), np.full((3, 5), 1.5))
    np.testing.assert_array_equal(params.grad("net.b1"), np.zeros(2))


def test_backward_linear_analytic():
    # y = W x + b: dW = x g^T (with W stored (in, out)), db = g, dx = W g
    spec, params = _build_net([3, 2])
    rng = make_rng(7)
    w = rng.standard_normal((3, 2))
    params.set_value("net.W0", w)
    params.set_value("net.b0", np.zeros(2))
    x = rng.standard_normal(3)
    g = rng.standard_normal(2)
    _, cache = mlp_forward(spec, params, x, "net")
    dx = mlp_backward(cache, g, params)
    np.testing.assert_allclose(params.grad("net.W0"), np.outer(x, g), rtol=1e-15)
    np.testing.assert_allclose(params.grad("net.b0"), g, rtol=1e-15)
    np.testing.assert_allclose(dx, w @ g, rtol=1e-15)


def test_backward_accumulates_rather_than_overwrites():
    spec, params = _build_net([2, 2])
    x = np.array([1.0, 2.0])
    g = np.array([1.0, -1.0])
    _, cache = mlp_forward(spec, params, x, "net")
    mlp_backward(cache, g, params)
    first = params.grad("net.W0").copy()
    _, cache = mlp_forward(spec, params, x, "net")
    mlp_backward(cache, g, params)
    np.testing.assert_allclose(params.grad("net.W0"), 2.0 * first, rtol=1e-15)


def test_backward_missing_cache_rejected():
    spec, params = _build_net([2, 2])
    with pytest.raises(ValueError, match="cache"):
        mlp_backward(None, np.zeros(2), params)


def _finite_difference_check(widths, seed, rel_tol=1e-6, step=1e-5):
    spec, params = _build_net(widths, seed=seed)
    rng = make_rng(seed + 1000)
    x = rng.standard_normal(widths[0])
    target = rng.standard_normal(widths[-1])

    def loss_value():
        out, _ = mlp_forward(spec, params, x, "net")
        return float(np.sum((out - target) ** 2))

    out, cache = mlp_forward(spec, params, x, "net")
    mlp_backward(cache, 2.0 * (out - target), params)
    for name in params.names():
        analytic = params.grad(name)
        value = params.value(name)
        flat = value.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            up = loss_value()
            flat[k] = orig - step
            down = loss_value()
            flat[k] = orig
            numeric = (up - down) / (2 * step)
            a = analytic.reshape(-1)[k]
            denom = max(abs(a), abs(numeric), 1e-8)
            assert abs(a - numeric) / denom < rel_tol, (
                f"{name}[{k}]: analytic {a} vs numeric {numeric}"
            )


def test_gradients_match_finite_differences():
    _finite_difference_check([4, 8, 3], seed=1)
    _finite_difference_check([6, 16, 16, 4], seed=2)


def test_optimizer_all_frozen_bit_identical():
    spec, params = _build_net([3, 4, 2])
    set_freeze_mask(params, ["*"])
    before = {n: params.value(n).copy() for n in params.names()}
    opt = make_optimizer(params)
    for _ in range(5):
        for n in params.names():
            params.add_grad(n, np.ones_like(params.value(n)))
        assert optimizer_step(params, opt)
    for n in params.names():
        assert np.array_equal(params.value(n), before[n])


def test_optimizer_zero_gradient_no_change():
    params = ParamSet()
    params.register("w", np.array(2.5))
    opt = make_optimizer(params)
    assert optimizer_step(params, opt)
    assert params.value("w") == 2.5


def test_optimizer_first_step_matches_hand_formula():
    # one Adam step with g=1, lr=0.1: update = lr * mhat / (sqrt(vhat) + eps)
    # with mhat = vhat = 1 exactly after bias correction
    params = ParamSet()
    params.register("w", np.array(1.0))
    opt = make_optimizer(params, learning_rate=0.1)
    params.add_grad("w", np.array(1.0))
    assert optimizer_step(params, opt)
    expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8)
    assert math.isclose(float(params.value("w")), expected, rel_tol=0, abs_tol=1e-15)


def test_optimizer_rejects_nonfinite_and_clears():
    params = ParamSet()
    params.register("w", np.array(1.0))
    opt = make_optimizer(params)
    params.add_grad("w", np.array(np.nan))
    assert not optimizer_step(params, opt)
    assert params.value("w") == 1.0
    assert opt.step_count == 0
    np.testing.assert_array_equal(params.grad("w"), 0.0)


def test_freeze_mask_semantics():
    spec, params = _build_net([3, 4, 2])
    set_freeze_mask(params, [])
    assert all(params.trainable(n) for n in params.names())
    set_freeze_mask(params, ["net.W0", "net.b0"])
    assert not params.trainable("net.W0")
    assert params.trainable("net.W1")
    # mask resets: a second call with a different mask re-enables W0
    set_freeze_mask(params, ["net.W1"])
    assert params.trainable("net.W0")
    assert not params.trainable("net.W1")


def test_freeze_mask_zero_match_rejected():
    _, params = _build_net([3, 4, 2])
    with pytest.raises(ValueError, match="no parameters"):
        set_freeze_mask(params, ["decoder.*"])


def test_checkpoint_round_trip_bit_exact(tmp_path):
    spec, params = _build_net([5, 9, 4], seed=3)
    path = tmp_path / "ckpt.json"
    save_params(params, path, spec={"widths": list(spec.widths)})
    spec2, params2 = _build_net([5, 9, 4], seed=99)
    meta = load_params(params2, path)
    for n in params.names():
        assert np.array_equal(params.value(n), params2.value(n))
    assert meta["spec"] == {"widths": [5, 9, 4]}


def test_checkpoint_shape_mismatch_names_tensor(tmp_path):
    _, params = _build_net([5, 9, 4])
    path = tmp_path / "ckpt.json"
    save_params(params, path)
    _, wrong = _build_net([5, 8, 4])
    with pytest.raises(ValueError, match="net."):
        load_params(wrong, path)


def test_checkpoint_corrupt_rejected(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json", encoding="utf-8")
    _, params = _build_net([2, 2])
    with pytest.raises(ValueError, match="corrupt"):
        load_params(params, path)


def test_checkpoint_resume_reproduces_loss_trajectory(tmp_path):
    # train a tiny quadratic fit, checkpoint at step 10, resume, and compare
    # against an uninterrupted run
    def make(seed):
        spec, params = _build_net([2, 8, 1], seed=seed)
        return spec, params

    def run_steps(spec, params, opt, rng, steps):
        losses = []
        for _ in range(steps):
            x = rng.standard_normal((16, 2))
            target = (x**2).sum(axis=1, keepdims=True)
            out, cache = mlp_forward(spec, params, x, "net")
            resid = out - target
            losses.append(float((resid**2).mean()))
            mlp_backward(cache, 2.0 * resid / len(x), params)
            optimizer_step(params, opt)
        return losses

    spec, params = make(5)
    opt = make_optimizer(params)
    rng = make_rng(123)
    base = run_steps(spec, params, opt, rng, 10)
    path = tmp_path / "mid.json"
    save_params(params, path, optimizer=opt, rng_state=rng_state_payload(rng))
    tail_a = run_steps(spec, params, opt, rng, 10)

    spec_b, params_b = make(77)  # different init, fully overwritten by load
    opt_b = make_optimizer(params_b)
    meta = load_params(params_b, path, optimizer=opt_b)
    rng_b = restore_rng(meta["rng_state"])
    tail_b = run_steps(spec_b, params_b, opt_b, rng_b, 10)
    assert tail_a == tail_b


def test_rng_state_round_trip():
    rng = make_rng(9)
    rng.standard_normal(17)
    payload = rng_state_payload(rng)
    clone = restore_rng(json.loads(json.dumps(payload)))
    np.testing.assert_array_equal(rng.standard_normal(8), clone.standard_normal(8))


def test_determinism_same_seed_same_trajectory():
    def trajectory():
        spec, params = _build_net([3, 6, 2], seed=11)
        opt = make_optimizer(params)
        rng = make_rng(22)
        for _ in range(5):
            x = rng.standard_normal((8, 3))
            out, cache = mlp_forward(spec, params, x, "net")
            mlp_backward(cache, out / len(x), params)
            optimizer_step(params, opt)
        return {n: params.value(n).copy() for n in params.names()}

    a, b = trajectory(), trajectory()
    for n in a:
        assert np.array_equal(a[n], b[n])


def test_mlp_spec_validation():
    with pytest.raises(ValueError):
        MlpSpec((4,))
    with pytest.raises(ValueError):
        MlpSpec((4, 0))
    with pytest.raises(ValueError):
        MlpSpec((4, 2), hidden_activation="relu6")
