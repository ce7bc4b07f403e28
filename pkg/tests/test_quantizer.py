import numpy as np
import pytest

from ddq import autodiff as ad
from ddq.autodiff import Tensor
from ddq.gates import GateSet
from ddq.levels import LevelSpec
from ddq.quantizer import (
    ACTIVATION, WEIGHT, DdqQuantizer, NonFiniteInput, nearest_level, quantize_activation,
    quantize_backward, quantize_forward, ste_backward,
)


def brute(x, q_hat):
    """argmin |q_hat_j - x| with the smallest index on ties."""
    return np.argmin(np.abs(q_hat[None, :] - x[:, None]), axis=1)


def test_nearest_examples():
    q_hat = np.array([0, 1 / 3, 2 / 3, 1])
    assert nearest_level(np.array([0.30]), q_hat)[0] == 1
    assert nearest_level(np.array([2 / 3]), q_hat)[0] == 2
    assert nearest_level(np.array([100.0]), q_hat)[0] == 3
    # exact midpoint goes to the smaller index
    assert nearest_level(np.array([0.5]), np.array([0.0, 1.0]))[0] == 0


def test_nearest_empty_and_nan():
    assert nearest_level(np.zeros(0), np.arange(4.0)).shape == (0,)
    with pytest.raises(NonFiniteInput):
        nearest_level(np.array([0.1, np.nan]), np.arange(4.0))


def test_nearest_matches_exhaustive_search(rng):
    total = 0
    while total < 10_000:
        b = int(rng.integers(1, 6))
        s = int(rng.integers(0, b + 1))
        q = LevelSpec(b, int(rng.integers(2, 9)), -1.0, 1.0, np.sort(rng.uniform(0, 2 ** b - 1, 2 ** b)))
        gs = GateSet.with_bits(b, s)
        qz = DdqQuantizer(b)
        qz.levels = [q]
        qz.gates = gs
        q_hat = qz.q_hat_matrix()[0]
        x = rng.uniform(-1.3, 1.3, 500)
        # include exact midpoints and exact levels
        u = np.unique(q_hat)
        x[:len(u)] = u
        if len(u) > 1:
            mids = (u[:-1] + u[1:]) / 2
            x[len(u):len(u) + len(mids)] = mids
        got = nearest_level(x, q_hat)
        np.testing.assert_array_equal(got, brute(x, q_hat))
        total += len(x)


def test_idempotence(rng):
    qz = DdqQuantizer(4)
    qz.set_range(-1.0, 1.0)
    x = rng.uniform(-1, 1, (1, 300))
    x_q, _, _ = quantize_forward(x, qz)
    again, _, _ = quantize_forward(x_q, qz)
    np.testing.assert_array_equal(again, x_q)


def test_correction_examples():
    up = np.array([[1.0]])
    q_hat = np.array([[0.0, 1.0]])
    x = np.array([[0.25]])
    x_q = np.array([[0.3]])
    grad_x, corrected = ste_backward(up, x, x_q, q_hat, 0.1)
    assert np.isclose(corrected[0, 0], 1.005)
    assert grad_x[0, 0] == 1.0  # correction stays off the input path
    _, corrected = ste_backward(up, x, x_q, q_hat, 0.0)
    assert corrected[0, 0] == 1.0
    grad_x, _ = ste_backward(up, np.array([[1.5]]), np.array([[1.0]]), q_hat, 0.1)
    assert grad_x[0, 0] == 0.0


def test_correction_is_l2_gradient(rng):
    # lam*(x_q - x) is the gradient of lam/2 * ||x - x_q||^2 w.r.t. x_q
    x = rng.normal(size=(1, 50))
    x_q = x + rng.normal(scale=0.1, size=x.shape)
    lam = 0.37
    _, corrected = ste_backward(np.zeros_like(x), x, x_q, np.array([[-5.0, 5.0]]), lam)
    f = lambda v: 0.5 * lam * np.sum((x - v) ** 2)
    fd = np.empty(x.size)
    for i in range(x.size):
        e = np.zeros_like(x_q)
        e.flat[i] = 1e-6
        fd[i] = (f(x_q + e) - f(x_q - e)) / 2e-6
    np.testing.assert_allclose(corrected.reshape(-1), fd, atol=1e-8)


def test_level_gradient_matches_directional_derivative(rng):
    qz = DdqQuantizer(3, lam=0.0)
    qz.set_range(-1.0, 1.0)
    x = rng.uniform(-1, 1, (1, 400))
    x_q, assign, q_hat = quantize_forward(x, qz)
    up = rng.normal(size=x.shape)
    qz.grad_q_hat[:] = 0
    grad_x, grad_qt, grad_g = quantize_backward(up, x, x_q, assign, qz)
    # perturb one level by eps (assignments fixed): d <up, x_q> = eps * sum of up over S_k
    for k in range(8):
        eps = 1e-7
        q2 = q_hat.copy()
        q2[0, k] += eps
        d = (np.sum(up * q2[0][assign]) - np.sum(up * x_q)) / eps
        np.testing.assert_allclose(d, up[assign == k].sum(), atol=1e-5)
        # q_tilde is in step units: d q / d q_tilde = scale
        np.testing.assert_allclose(grad_qt[0, k], up[assign == k].sum() * qz.levels[0].scale, atol=1e-12)
    assert grad_x.shape == x.shape and grad_g.shape == (3,)


def test_channel_granularity(rng):
    qz = DdqQuantizer(2, granularity="channel", channels=3)
    w = rng.normal(size=(3, 20)) * np.array([[1.0], [10.0], [0.1]])
    qz.observe(w, True)
    x_q, _, q_hat = quantize_forward(w, qz)
    for c in range(3):
        assert q_hat[c].min() == pytest.approx(w[c].min())
        assert q_hat[c].max() == pytest.approx(w[c].max())
        assert set(np.unique(x_q[c])) <= set(q_hat[c])
    with pytest.raises(ValueError):
        DdqQuantizer(2, kind=ACTIVATION, granularity="channel", channels=3)


def test_activation_examples(rng):
    act = DdqQuantizer(8, kind=ACTIVATION)
    act.set_range(0.0, 1.0)
    out = quantize_activation(Tensor(np.zeros((2, 5))), act, training=False)
    np.testing.assert_array_equal(out.data, 0.0)
    out = quantize_activation(Tensor(np.ones((2, 5))), act, training=False)
    np.testing.assert_array_equal(out.data, 1.0)
    y = rng.uniform(0, 1, (4, 100))
    out = quantize_activation(Tensor(y), act, training=False)
    assert np.max(np.abs(out.data - y)) <= 1.0 / (2 * 255) + 1e-12
    with pytest.raises(ValueError):
        quantize_activation(Tensor(y), DdqQuantizer(4, kind=WEIGHT))


def test_activation_range_ema(rng):
    act = DdqQuantizer(8, kind=ACTIVATION, ema_decay=0.9)
    act(Tensor(np.array([[0.0, 2.0]])), training=True)
    assert tuple(act.ranges[0]) == (0.0, 2.0)  # first batch seeds the range
    act(Tensor(np.array([[0.0, 4.0]])), training=True)
    assert act.ranges[0, 1] == pytest.approx(0.9 * 2 + 0.1 * 4)
    act(Tensor(np.array([[0.0, 100.0]])), training=False)
    assert act.ranges[0, 1] == pytest.approx(2.2)


def test_table_matches_block_means(rng):
    qz = DdqQuantizer(4, granularity="channel", channels=2)
    for lv in qz.levels:
        lv.q_tilde = np.sort(rng.uniform(0, 15, 16))
    qz.set_range(np.array([-1.0, 0.0]), np.array([1.0, 3.0]))
    qz.gates = GateSet.with_bits(4, 2)
    q = qz.q_matrix()
    want = q.reshape(2, 4, 4).mean(axis=-1).repeat(4, axis=-1)
    np.testing.assert_allclose(qz.q_hat_matrix(), want, atol=1e-14)


def test_autodiff_node_routes_gradients(rng):
    qz = DdqQuantizer(3)
    w = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    out = qz(w)
    ad.total(out).backward()
    lo, hi = qz.q_hat_matrix().min(), qz.q_hat_matrix().max()
    np.testing.assert_array_equal(w.grad, ((w.data >= lo) & (w.data <= hi)).astype(float))
    assert np.isclose(qz.grad_q_hat.sum(), w.size + qz.lam * np.sum(out.data - w.data))


def test_disabled_is_identity(rng):
    qz = DdqQuantizer(2, enabled=False)
    w = Tensor(rng.normal(size=(3, 3)))
    assert qz(w) is w
