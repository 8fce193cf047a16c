import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from romfac import diffcore as dc
from romfac.diffcore import FeedforwardNet, GradientTape


def numeric(fn, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = fn(x)
        x[idx] = old - h
        down = fn(x)
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


@pytest.mark.parametrize(
    "op",
    [
        lambda t: dc.sum_(dc.tanh(t)),
        lambda t: dc.sum_(dc.exp(dc.mul(t, 0.5))),
        lambda t: dc.sum_(dc.square(t)),
        lambda t: dc.mean(dc.mul(t, t)),
        lambda t: dc.sum_(dc.log(dc.softmax(t))),
        lambda t: dc.sum_(dc.mul(dc.softmax(t), np.arange(4.0))),
        lambda t: dc.sum_(dc.sub(dc.concat([t, dc.square(t)]), 1.0)),
        lambda t: dc.sum_(dc.take_rows(t, np.array([1, 3, 0]))),
        lambda t: dc.sum_(dc.relu(dc.add(t, 0.05))),
    ],
)
def test_op_gradients_match_differences(op, rng):
    x = rng.normal(size=(3, 4))
    tape = GradientTape()
    leaf = tape.input(x)
    grad = tape.backward(op(leaf))[leaf]
    np.testing.assert_allclose(grad, numeric(lambda v: op(dc.Tensor(v)).item(), x.copy()), rtol=1e-6, atol=1e-8)


def test_matmul_and_broadcast_add_gradients(rng):
    a = rng.normal(size=(5, 3))
    w = rng.normal(size=(3, 2))
    b = rng.normal(size=2)
    tape = GradientTape()
    ta, tw, tb = tape.input(a), tape.param(w), tape.param(b)
    loss = dc.sum_(dc.square(dc.add(dc.matmul(ta, tw), tb)))
    grads = tape.backward(loss)
    out = a @ w + b
    np.testing.assert_allclose(grads[tw], a.T @ (2 * out))
    np.testing.assert_allclose(grads[tb], (2 * out).sum(axis=0))
    np.testing.assert_allclose(grads[ta], (2 * out) @ w.T)


def test_cross_entropy_of_softmax_gradient_is_p_minus_onehot(rng):
    for _ in range(20):
        logits = rng.normal(size=6) * 3
        label = int(rng.integers(6))
        tape = GradientTape()
        z = tape.input(logits)
        grad = tape.backward(dc.cross_entropy(dc.softmax(z), label))[z]
        p = np.exp(logits - logits.max())
        p /= p.sum()
        assert np.abs(grad - (p - np.eye(6)[label])).max() <= 1e-10


def test_softmax_is_stable_for_large_logits():
    p = dc.softmax(np.array([1000.0, 1000.0, -1000.0])).data
    np.testing.assert_allclose(p, [0.5, 0.5, 0.0], atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-500, 500)))
def test_softmax_rows_are_distributions(x):
    p = dc.softmax(x).data
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-12


def test_softmax_rejects_bad_input():
    with pytest.raises(dc.NumericError):
        dc.softmax(np.array([1.0, np.nan]))
    with pytest.raises(dc.NumericError):
        dc.softmax(np.zeros(0))


def test_log_floor_keeps_loss_finite():
    loss = dc.cross_entropy(np.array([1.0, 0.0]), 1).item()
    assert loss == pytest.approx(-np.log(dc.PROB_FLOOR))


def test_cross_entropy_rejects_out_of_range_label():
    with pytest.raises(dc.ConfigurationError):
        dc.cross_entropy(np.array([0.5, 0.5]), 2)


def test_backward_requires_scalar_and_zeroes_unused_leaves():
    tape = GradientTape()
    a = tape.param(np.ones(3))
    unused = tape.param(np.ones(2))
    with pytest.raises(dc.UsageError):
        tape.backward(dc.mul(a, 2.0))
    grads = tape.backward(dc.sum_(a))
    np.testing.assert_array_equal(grads[unused], np.zeros(2))


def test_mixing_tapes_is_an_error():
    a = GradientTape().input(np.ones(2))
    b = GradientTape().input(np.ones(2))
    with pytest.raises(dc.UsageError):
        dc.add(a, b)


def test_constants_never_receive_gradient(rng):
    tape = GradientTape()
    x = tape.input(rng.normal(size=3))
    const = dc.Tensor(rng.normal(size=3))
    grads = tape.backward(dc.sum_(dc.mul(x, const)))
    assert set(grads) == {x}
    np.testing.assert_allclose(grads[x], const.data)


def test_net_forward_matches_manual(rng):
    net = FeedforwardNet.initialise((4, 5, 3), rng, "tanh")
    x = rng.normal(size=(2, 4))
    manual = np.tanh(x @ net.weights[0] + net.biases[0]) @ net.weights[1] + net.biases[1]
    np.testing.assert_allclose(dc.forward(net, x).data, manual)


def test_net_rejects_wrong_input_width(rng):
    net = FeedforwardNet.initialise((4, 3), rng)
    with pytest.raises(dc.ConfigurationError):
        net(np.zeros(5))


def test_serialization_round_trip(tmp_path, rng):
    net = FeedforwardNet.initialise((3, 7, 2), rng, "tanh")
    path = tmp_path / "net.bin"
    net.save(path)
    back = FeedforwardNet.load(path)
    assert back.widths == net.widths and back.activation == "tanh"
    x = rng.normal(size=3)
    assert np.array_equal(back(x).data, net(x).data)


def test_serialization_layout(rng):
    net = FeedforwardNet.initialise((2, 3), rng, "relu")
    blob = net.to_bytes()
    magic, version, n = struct.unpack_from("<8sII", blob, 0)
    assert (magic, version, n) == (b"DIFFCORE", 1, 2)
    assert struct.unpack_from("<2IB", blob, 16) == (2, 3, 0)
    w = np.frombuffer(blob, "<f8", count=6, offset=25).reshape(2, 3)
    np.testing.assert_array_equal(w, net.weights[0])
    assert len(blob) == 25 + 8 * (6 + 3)


@pytest.mark.parametrize(
    "mutate",
    [
        lambda b: b"XIFFCORE" + b[8:],
        lambda b: b[:8] + struct.pack("<I", 2) + b[12:],
        lambda b: b[:-1],
        lambda b: b + b"\0",
        lambda b: b[:10],
    ],
)
def test_corrupted_blobs_are_rejected(mutate, rng):
    blob = FeedforwardNet.initialise((2, 3), rng).to_bytes()
    with pytest.raises(dc.FormatError):
        FeedforwardNet.from_bytes(mutate(blob))


def test_sgd_step():
    p = np.array([1.0, 2.0])
    dc.SGD([p], 0.5).step([np.array([2.0, -2.0])])
    np.testing.assert_allclose(p, [0.0, 3.0])


def test_adam_matches_reference_update():
    p = np.array([0.5, -1.0])
    opt = dc.Adam([p], 0.1)
    ref = p.copy()
    m = np.zeros(2)
    v = np.zeros(2)
    for t in range(1, 4):
        g = np.array([0.3 * t, -0.2])
        opt.step([g])
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p, ref, rtol=1e-13)


def test_adam_state_round_trip():
    p = np.array([1.0])
    opt = dc.Adam([p], 0.01)
    opt.step([np.array([1.0])])
    q = p.copy()
    clone = dc.Adam([q], 0.01)
    clone.load_state_dict(opt.state_dict())
    opt.step([np.array([0.5])])
    clone.step([np.array([0.5])])
    assert p[0] == q[0]


def test_make_optimizer_rejects_unknown():
    with pytest.raises(dc.ConfigurationError):
        dc.make_optimizer("rmsprop", [], 0.1)


def test_gradcheck_suite_passes_and_reports_error():
    result = dc.gradcheck_suite(10, seed=3)
    assert result.passed
    assert 0 < result.max_rel_error <= 1e-4


def test_gradcheck_negative_control_fails():
    flip = lambda grads: {k: -v for k, v in grads.items()}
    result = dc.gradcheck_suite(3, seed=3, tamper=flip)
    assert not result.passed
    assert result.failures
