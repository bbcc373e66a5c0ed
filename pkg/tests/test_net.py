import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from widthlab.activations import get_activation
from widthlab.net import (
    CalibrationError,
    NumericOverflow,
    StaleStateError,
    backward,
    calibrate_ipllr_lr,
    forward,
    gradients,
    init_network,
    initial_bias,
    initial_weight,
    load_checkpoint,
    loss_eval,
    save_checkpoint,
    sgd_step,
    tilde_backward,
    tilde_forward,
)
from widthlab.params import make_spec
from widthlab.probes import KinkWarning, fit_scaling_exponent, gradient_check

UNIT = (1.0, 1.0, 1.0, 1.0)


# ------------------------------------------------------------------ init


def test_init_law_centered_and_shifted():
    m = 2048
    net = init_network(make_spec("MuP", 3), m, 8, seed=3)
    w = net.weights[1]
    assert abs(w.mean()) <= 3 / m
    assert abs(w.std() - math.sqrt(2)) <= 3 / m
    shifted = init_network(make_spec("IPNonCentered", 3, activation="tanh"), m, 8, seed=3)
    w = shifted.weights[1]
    assert abs(w.mean() - 1.0) <= 3 / m
    assert abs(w.std() - 1.0) <= 3 / m


def test_first_layer_law_without_rescale():
    spec = make_spec("IPLLR", 3, activation="tanh")  # unit init std
    xi = np.array([0.5, -1.0, 0.25, 0.0, 1.5, -0.5, 0.1, 0.2])
    h = np.concatenate(
        [forward(init_network(spec, 4096, 8, s, first_layer_rescale=False), xi).h[0][0] for s in range(4)]
    )
    target = xi @ xi + 1
    assert abs(h.mean()) < 4 * math.sqrt(target / h.size)
    assert h.var() == pytest.approx(target, rel=0.04)


def test_first_layer_rescale_divides_std():
    spec = make_spec("MuP", 3)
    a = init_network(spec, 16, 24, 0, first_layer_rescale=False)
    b = init_network(spec, 16, 24, 0)
    np.testing.assert_allclose(b.weights[0], a.weights[0] / 5.0, rtol=1e-15)
    np.testing.assert_allclose(b.biases[0], a.biases[0] / 5.0, rtol=1e-15)
    np.testing.assert_array_equal(b.weights[1], a.weights[1])


@pytest.mark.parametrize("name", ["MuP", "IPLLR", "IPBias", "IPNonCentered"])
def test_width_nested_stream(name):
    spec = make_spec(name, 3)
    small = init_network(spec, 64, 5, seed=11)
    big = init_network(spec, 1024, 5, seed=11)
    np.testing.assert_array_equal(small.weights[0], big.weights[0][:64])
    for layer in (2, 3):
        np.testing.assert_array_equal(small.weights[layer - 1], big.weights[layer - 1][:64, :64])
    np.testing.assert_array_equal(small.weights[3], big.weights[3][:64])
    for b_s, b_b in zip(small.biases, big.biases):
        if b_s is not None:
            np.testing.assert_array_equal(b_s, b_b[: b_s.size])


def test_init_is_reproducible_from_stream():
    spec = make_spec("IPBias", 3)
    net = init_network(spec, 32, 4, seed=5, K=3)
    for layer in range(1, 5):
        np.testing.assert_array_equal(net.weights[layer - 1], initial_weight(net, layer))
        b = initial_bias(net, layer)
        if b is None:
            assert net.biases[layer - 1] is None
        else:
            np.testing.assert_array_equal(net.biases[layer - 1], b)
    other = init_network(spec, 32, 4, seed=6, K=3)
    assert not np.array_equal(net.weights[1], other.weights[1])


def test_bias_modes():
    assert [b is not None for b in init_network(make_spec("IPLLR", 3), 8, 2).biases] == [True, False, False, False]
    assert all(b is not None for b in init_network(make_spec("IPBias", 3), 8, 2).biases)
    assert all(b is not None for b in init_network(make_spec("NTK", 3), 8, 2).biases)


# --------------------------------------------------------------- forward


def test_forward_activation_identity(task):
    net = init_network(make_spec("MuP", 4, activation="gelu"), 64, task.d, 0)
    tr = forward(net, task.inputs[:5])
    for h, x in zip(tr.h, tr.x):
        np.testing.assert_array_equal(x, net.activation(h))
    assert tr.f.shape == (5, 1)
    assert tr.output.shape == (5,)


def test_forward_manual_layers(task):
    net = init_network(make_spec("IPBias", 3), 32, task.d, 2)
    xi = task.inputs[3]
    h1 = net.weights[0] @ xi + net.biases[0]
    h2 = net.weights[1] @ np.maximum(h1, 0) / 32 + net.biases[1]
    tr = forward(net, xi)
    np.testing.assert_allclose(tr.h[0][0], h1, rtol=1e-13)
    np.testing.assert_allclose(tr.h[1][0], h2, rtol=1e-13, atol=1e-15)


def test_zero_input_zero_bias():
    net = init_network(make_spec("IPLLR", 3), 64, 6, 0)
    net.biases[0][:] = 0.0
    tr = forward(net, np.zeros(6))
    assert not np.any(tr.h[0])
    assert tr.output[0] == 0.0


def test_overflow_names_layer():
    net = init_network(make_spec("MuP", 3), 16, 4, 0)
    net.weights[1] *= 1e300
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(NumericOverflow) as exc:
        forward(net, 1e300 * np.ones(4))
    assert exc.value.layer == 2


@pytest.mark.slow
@pytest.mark.parametrize("name,expected", [("NaiveIP", lambda l: -(l - 1) / 2), ("MuP", lambda l: 0.0)])
def test_init_rms_scaling(name, expected, task):
    spec = make_spec(name, 3)
    widths = [64, 256, 1024, 4096]
    rms = np.zeros((len(widths), 3))
    for i, m in enumerate(widths):
        for s in range(3):
            tr = forward(init_network(spec, m, task.d, s), task.inputs[-1])
            rms[i] += [np.sqrt(np.mean(h**2)) / 3 for h in tr.h]
    for layer in (1, 2, 3):
        fit = fit_scaling_exponent(widths, rms[:, layer - 1])
        assert fit.slope == pytest.approx(expected(layer), abs=0.1)


# -------------------------------------------------------------- backward


def test_backward_chain_identity(task):
    net = init_network(make_spec("NTK", 3, activation="elu"), 48, task.d, 1)
    tr = forward(net, task.inputs[:3])
    bw = backward(net, tr, task.labels[:3])
    for dh, dx, h in zip(bw.dh, bw.dx, tr.h):
        np.testing.assert_array_equal(dh, dx * net.activation.deriv(h))


def test_gradcheck_tanh_tight(task):
    net = init_network(make_spec("MuP", 3, activation="tanh"), 32, task.d, 0)
    res = gradient_check(net, (task.inputs[:1], task.labels[:1]), eps=1e-5, n_params=200)
    assert res.n_checked >= 200
    assert res.max_rel_error < 1e-6


def test_gradcheck_relu_away_from_kinks(task):
    net = init_network(make_spec("MuP", 3), 32, task.d, 0)
    tr = forward(net, task.inputs[:1])
    assert min(np.min(np.abs(h)) for h in tr.h) > 1e-4
    res = gradient_check(net, (task.inputs[:1], task.labels[:1]), eps=1e-5, n_params=300, seed=2)
    assert res.max_rel_error < 1e-5


def test_gradcheck_cross_entropy_multiclass():
    from widthlab.data import synthetic_task

    ds = synthetic_task(6, 20, 1, kind="two-class")
    net = init_network(make_spec("NTK", 3, activation="gelu"), 24, 6, 0, K=2)
    res = gradient_check(net, (ds.inputs[:4], ds.labels[:4]), eps=1e-5, n_params=250, loss="cross-entropy")
    assert res.max_rel_error < 1e-6


def test_kink_warning():
    net = init_network(make_spec("MuP", 3), 8, 2, 0)
    net.biases[0][0] = -net.weights[0][0] @ np.ones(2)  # first unit exactly at the kink
    with pytest.warns(KinkWarning):
        gradient_check(net, (np.ones((1, 2)), np.zeros(1)), n_params=5)


def test_loss_eval_examples():
    assert loss_eval("squared", 0.0, 0.0) == (0.0, 0.0)
    v, g = loss_eval("squared", 1.0, 3.0)
    assert (v, g) == (2.0, 2.0)
    v, g = loss_eval("cross-entropy", 3, np.zeros(10))
    assert v == pytest.approx(math.log(10), rel=1e-15)
    expect = np.full(10, 0.1)
    expect[3] -= 1
    np.testing.assert_allclose(g, expect, rtol=1e-14)
    with pytest.raises(ValueError):
        loss_eval("cross-entropy", 10, np.zeros(10))
    with pytest.raises(ValueError):
        loss_eval("cross-entropy", 1.5, np.zeros(10))


@given(f=st.floats(-30, 30), k=st.integers(0, 4), shift=st.floats(-1e-6, 1e-6))
@settings(max_examples=60)
def test_losses_continuous(f, k, shift):
    logits = np.linspace(-1, 1, 5) * f
    a, ga = loss_eval("cross-entropy", k, logits)
    b, gb = loss_eval("cross-entropy", k, logits + shift * np.arange(5))
    assert abs(a - b) <= 1e-5
    assert np.max(np.abs(ga - gb)) <= 1e-5


def test_chi0_naive_ip_near_limit(task):
    net = init_network(make_spec("NaiveIP", 3), 4096, task.d, 0)
    y0 = float(task.labels[0])
    chi = backward(net, forward(net, task.inputs[0]), np.array([y0])).chi[0, 0]
    assert chi == pytest.approx(-y0, abs=1e-3)


# ------------------------------------------------------------------- sgd


def test_output_layer_update_formula(task):
    spec = make_spec("NTK", 3)
    net = init_network(spec, 64, task.d, 0)
    before = net.weights[3].copy()
    xi, y = task.inputs[0], task.labels[0]
    tr = forward(net, xi)
    f = tr.output[0]
    sgd_step(net, (xi, y), 0.3)
    expected = -0.3 * 1.0 * (f - y) * 64**-0.5 * tr.x[-1][0]  # c=0 for NTK
    np.testing.assert_allclose(net.weights[3][:, 0] - before[:, 0], expected, rtol=1e-12)
    assert net.t == 1


def test_batch_gradient_is_mean(task):
    spec = make_spec("MuP", 3, activation="tanh")
    a = init_network(spec, 32, task.d, 0)
    b = init_network(spec, 32, task.d, 0)
    X, Y = task.inputs[:4], task.labels[:4]
    sgd_step(a, (X, Y), 0.1)
    acc = [np.zeros_like(w) for w in b.weights]
    for i in range(4):
        tr = forward(b, X[i])
        gw, _ = gradients(b, tr, backward(b, tr, Y[i : i + 1]))
        for j, g in enumerate(gw):
            acc[j] += g / 4
    lr = 0.1 * 32.0  # c = -1 for every layer
    for layer in range(4):
        np.testing.assert_allclose(a.weights[layer], b.weights[layer] - lr * acc[layer], rtol=1e-11, atol=1e-14)


def test_lr_override_length_checked(task):
    net = init_network(make_spec("MuP", 3), 16, task.d, 0)
    with pytest.raises(ValueError):
        sgd_step(net, (task.inputs[0], task.labels[0]), 0.1, lr_overrides=[0.1, 0.1])


def test_batch_forms_agree(task):
    spec = make_spec("MuP", 3)
    nets = [init_network(spec, 16, task.d, 0) for _ in range(2)]
    sgd_step(nets[0], (task.inputs[:3], task.labels[:3]), 0.1)
    sgd_step(nets[1], list(zip(task.inputs[:3], task.labels[:3])), 0.1)
    for w0, w1 in zip(nets[0].weights, nets[1].weights):
        np.testing.assert_array_equal(w0, w1)


def test_reparameterization_bit_identical(task):
    # Scaling raw weights by m**-b and keeping (a, c) is the abc form of the
    # spec with (a + b, c - 2b); with m a power of four every factor is exact.
    m = 256
    base = make_spec("MuP", 3, bias_mode="first-layer-only")
    b = (Fraction(0), Fraction(1, 2), Fraction(1, 2), Fraction(1, 2))
    abc = init_network(base, m, task.d, 4)
    for layer in range(2, 5):
        abc.weights[layer - 1] *= m ** -float(b[layer - 1])
    ac = init_network(base.reparameterize(b), m, task.d, 4)
    for t in range(5):
        for layer in range(1, 5):
            np.testing.assert_array_equal(abc.effective_weight(layer), ac.effective_weight(layer))
        batch = (task.inputs[t], task.labels[t])
        sgd_step(abc, batch, 0.05)
        sgd_step(ac, batch, 0.05)


def test_hp_surgery(task):
    for name in ("HP", "HPZ"):
        net = init_network(make_spec(name, 3), 64, task.d, 0)
        plain = init_network(make_spec("MuP", 3, bias_mode="first-layer-only"), 64, task.d, 0)
        w0 = [w.copy() for w in net.weights]
        batch = (task.inputs[0], task.labels[0])
        sgd_step(net, batch, 0.5)
        sgd_step(plain, batch, 0.5)
        keep = 64**-0.5 if name == "HP" else 0.0
        for layer in (2, 3):
            np.testing.assert_allclose(
                net.weights[layer - 1], plain.weights[layer - 1] - (1 - keep) * w0[layer - 1], rtol=1e-12, atol=1e-14
            )
        np.testing.assert_array_equal(net.weights[0], plain.weights[0])
        np.testing.assert_array_equal(net.weights[3], plain.weights[3])
        snapshot = [w.copy() for w in net.weights]
        sgd_step(net, (task.inputs[1], task.labels[1]), 0.0)  # no second surgery
        for a, b in zip(snapshot, net.weights):
            np.testing.assert_array_equal(a, b)


@pytest.mark.slow
def test_ipllr_first_update_order_one(task):
    spec = make_spec("IPLLR", 3)
    b0 = (task.inputs[0], task.labels[0])
    b1 = (task.inputs[1], task.labels[1])
    widths = [256, 512, 1024, 2048, 4096]
    norms = np.zeros((len(widths), 3))
    for i, m in enumerate(widths):
        for s in range(6):
            net = init_network(spec, m, task.d, s)
            etas = calibrate_ipllr_lr(net, spec, b0, b1, 1.0)
            w0 = [net.effective_weight(layer).copy() for layer in (1, 2, 3)]
            sgd_step(net, b0, 1.0, lr_overrides=etas)
            tr = forward(net, task.inputs[1])
            prev = [task.inputs[1]] + [x[0] for x in tr.x]
            for layer in (1, 2, 3):
                v = (net.effective_weight(layer) - w0[layer - 1]) @ prev[layer - 1]
                norms[i, layer - 1] += v @ v / m / 6
    for layer in (1, 2, 3):
        assert abs(fit_scaling_exponent(widths, norms[:, layer - 1]).slope) < 0.15


@pytest.mark.slow
def test_naive_ip_stays_trivial_for_fifty_steps(task):
    spec = make_spec("NaiveIP", 3)
    out = {}
    for m in (256, 4096):
        net = init_network(spec, m, task.d, 0)
        for t in range(50):
            sgd_step(net, (task.inputs[t], task.labels[t]), 1.0)
        out[m] = abs(forward(net, task.inputs[-1]).output[0])
    # output of the plain parameterization shrinks at least like m**-L/2 x 10
    assert out[4096] < 10 * out[256] * (4096 / 256) ** -1.5


# ----------------------------------------------------------------- tilde


def test_tilde_relu_unit_ladder(task):
    m = 4096
    net = init_network(make_spec("IPLLR", 3, delta=UNIT), m, task.d, 0, first_layer_rescale=False)
    xi = task.inputs[0]
    s0 = xi @ xi + 1
    tf = tilde_forward(net, xi)
    tb = tilde_backward(net, xi, tf)
    tol = 5 / math.sqrt(m)
    for layer in (1, 2, 3):
        assert np.mean(tf.x[layer - 1] ** 2) == pytest.approx(s0 / 2**layer, rel=tol)
        assert np.mean(tb.dx[layer - 1] ** 2) == pytest.approx(1 / 2 ** (3 - layer), rel=tol)
        np.testing.assert_array_equal(tb.dh[layer - 1], tb.dx[layer - 1] * (tf.h[layer - 1] > 0))
    assert np.mean(tb.dh[2] ** 2) == pytest.approx(0.5, rel=tol)


def test_tilde_relu_norm_preservation(task):
    m = 4096
    net = init_network(make_spec("MuP", 4), m, task.d, 1, first_layer_rescale=False)
    xi = task.inputs[2]
    tf = tilde_forward(net, xi)
    v1 = 2 * (xi @ xi + 1)  # first-layer std is sqrt(2) too
    for h in tf.h:
        assert np.mean(h**2) == pytest.approx(v1, rel=5 / math.sqrt(m))


@pytest.mark.slow
def test_tilde_norms_match_ladder_on_seed_average(task):
    from widthlab.oracle import variance_ladder

    m, seeds = 4096, 12
    spec = make_spec("MuP", 3)
    xi = task.inputs[0]
    acc = np.zeros((4, 3))
    for seed in range(seeds):
        net = init_network(spec, m, task.d, seed)
        tf = tilde_forward(net, xi)
        tb = tilde_backward(net, xi, tf)
        acc += [[np.mean(v[k] ** 2) for k in range(3)] for v in (tf.h, tf.x, tb.dx, tb.dh)]
    delta = list(spec.delta)
    delta[0] = net.init_std(1)
    lad = variance_ladder(3, xi @ xi + 1, delta, "relu")
    theory = np.array([lad.v_h, lad.v_x, lad.v_dx, lad.v_dh])
    np.testing.assert_allclose(acc / seeds, theory, rtol=5 / math.sqrt(m))


def test_tilde_is_spec_independent(task):
    xs = task.inputs[:3]
    ref = None
    for name in ("NTK", "MuP", "NaiveIP", "IPLLR"):
        net = init_network(make_spec(name, 3, bias_mode="first-layer-only"), 128, task.d, 9)
        tf = tilde_forward(net, xs)
        if ref is None:
            ref = tf
        else:
            np.testing.assert_array_equal(tf.f, ref.f)


def test_tilde_stale():
    net = init_network(make_spec("MuP", 3), 8, 2, 0)
    sgd_step(net, (np.ones(2), 0.5), 0.1)
    with pytest.raises(StaleStateError):
        tilde_forward(net, np.ones(2))
    with pytest.raises(StaleStateError):
        tilde_backward(net, np.ones(2))


@pytest.mark.slow
def test_tilde_output_variance_over_seeds(task):
    m = 2048
    spec = make_spec("MuP", 3, delta=UNIT)
    xi = task.inputs[0]
    f = [tilde_forward(init_network(spec, m, task.d, s, first_layer_rescale=False), xi).f[0, 0] for s in range(200)]
    target = (xi @ xi + 1) / 8
    assert np.var(f, ddof=1) == pytest.approx(target, rel=0.2)


# ----------------------------------------------------------- calibration


def _calib_net(task, m=512, seed=0):
    spec = make_spec("IPLLR", 3)
    return spec, init_network(spec, m, task.d, seed)


def test_calibration_hits_target(task):
    spec, net = _calib_net(task)
    b0, b1 = (task.inputs[:4], task.labels[:4]), (task.inputs[4:8], task.labels[4:8])
    etas = calibrate_ipllr_lr(net, spec, b0, b1, 1.0)
    assert etas[0] == etas[-1] == 1.0
    probe = net.copy()
    sgd_step(probe, b0, 1.0, lr_overrides=etas)
    tr = forward(probe, b1[0])
    for layer in (2, 3):
        if etas[layer - 1] < 500:
            assert 0.9 <= np.mean(np.abs(tr.h[layer - 1])) <= 1.1


def test_update_linear_in_layer_rate(task):
    spec, net = _calib_net(task, m=128)
    batch = (task.inputs[0], task.labels[0])
    deltas = []
    for e in (3.0, 6.0):
        n = net.copy()
        sgd_step(n, batch, 1.0, lr_overrides=[1.0, e, 1.0, 1.0])
        deltas.append(n.weights[1] - net.weights[1])
    # differences of updated weights carry the rounding of the weights themselves
    np.testing.assert_allclose(deltas[1], 2 * deltas[0], rtol=1e-12, atol=4e-16 * np.abs(net.weights[1]).max())


def test_calibration_cap(task):
    spec, net = _calib_net(task, m=64)
    f0 = forward(net, task.inputs[0]).output[0]
    # a target almost equal to the output leaves a tiny loss derivative
    b0 = (task.inputs[0], f0 + 1e-9)
    etas = calibrate_ipllr_lr(net, spec, b0, (task.inputs[1], task.labels[1]), 1.0)
    assert etas[1] == 500.0


def test_calibration_degenerate_batch(task):
    spec, net = _calib_net(task, m=32)
    net.weights[0][:] = 0.0
    net.biases[0][:] = -1.0  # every first-layer unit inactive
    with pytest.raises(CalibrationError) as exc:
        calibrate_ipllr_lr(net, spec, (task.inputs[0], task.labels[0]), (task.inputs[1], task.labels[1]), 1.0)
    assert exc.value.layer == 2


def test_calibration_requires_fresh_ipllr(task):
    net = init_network(make_spec("MuP", 3), 16, task.d, 0)
    with pytest.raises(ValueError):
        calibrate_ipllr_lr(net, net.spec, (task.inputs[0], 0.1), (task.inputs[1], 0.1), 1.0)


# ------------------------------------------------------------ checkpoint


@pytest.mark.parametrize("name,K", [("IPBias", 1), ("IPLLR", 3), ("MuP", 10)])
def test_checkpoint_round_trip(tmp_path, task, name, K):
    spec = make_spec(name, 3)
    net = init_network(spec, 24, task.d, 7, K=K)
    if K == 1:
        sgd_step(net, (task.inputs[0], task.labels[0]), 0.01)
    path = tmp_path / "ck.bin"
    save_checkpoint(net, path)
    back = load_checkpoint(path, spec, seed=7)
    assert (back.m, back.d, back.t, back.K) == (net.m, net.d, net.t, K)
    for a, b in zip(net.weights, back.weights):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(net.biases, back.biases):
        assert (a is None) == (b is None)
        if a is not None:
            np.testing.assert_array_equal(a, b)
    raw = path.read_bytes()
    assert raw[:4] == b"WLAB"


def test_checkpoint_errors(tmp_path):
    spec = make_spec("MuP", 3)
    net = init_network(spec, 8, 2, 0)
    path = tmp_path / "ck.bin"
    save_checkpoint(net, path)
    raw = path.read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.bin", spec)
    (tmp_path / "short.bin").write_bytes(raw[:-5])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "short.bin", spec)
    with pytest.raises(ValueError):
        load_checkpoint(path, make_spec("MuP", 4))


def test_activation_override():
    net = init_network(make_spec("MuP", 3), 8, 2, 0, activation="relu2")
    assert net.activation == get_activation("relu2")
