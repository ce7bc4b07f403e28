import numpy as np
import pytest

from ddq import autodiff as ad
from ddq.autodiff import SGD, DimensionError, Tape, Tensor, TrainingDiverged

from conftest import rel_err


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def check_op(build, *shapes, rng, tol=1e-4):
    """FD-check every input of ``build`` through a random linear read-out."""
    inputs = [Tensor(rng.normal(size=s), requires_grad=True) for s in shapes]
    out = build(*inputs)
    weights = rng.normal(size=out.shape)

    def value():
        return float(np.sum(build(*[Tensor(t.data) for t in inputs]).data * weights))

    loss = ad.total(ad.mul(out, Tensor(weights)))
    loss.backward()
    for t in inputs:
        assert rel_err(t.grad, numeric_grad(value, t.data)) < tol


def test_add_sub_mul_fd(rng):
    check_op(ad.add, (3, 4), (3, 4), rng=rng)
    check_op(ad.sub, (3, 4), (3, 4), rng=rng)
    check_op(ad.mul, (2, 5), (2, 5), rng=rng)
    check_op(lambda a: ad.mul(a, 2.5), (4,), rng=rng)


def test_bias_add_fd(rng):
    check_op(ad.add, (3, 4), (4,), rng=rng)
    check_op(ad.add, (2, 3, 4, 4), (3,), rng=rng)


def test_matmul_transpose_reshape_fd(rng):
    check_op(ad.matmul, (3, 4), (4, 2), rng=rng)
    check_op(ad.transpose, (3, 5), rng=rng)
    check_op(lambda a: ad.reshape(a, (6, 2)), (3, 4), rng=rng)
    check_op(ad.flatten, (2, 3, 2, 2), rng=rng)


def test_reductions_fd(rng):
    check_op(lambda a: ad.reshape(ad.total(a), (1,)), (3, 3), rng=rng)
    check_op(lambda a: ad.reshape(ad.mean(a), (1,)), (3, 3), rng=rng)


def test_relu_fd(rng):
    # keep inputs away from the kink
    def build(a):
        return ad.relu(ad.add(a, Tensor(np.sign(a.data) * 0.1)))
    check_op(build, (4, 5), rng=rng)


def test_softmax_cross_entropy_fd(rng):
    labels = np.array([0, 2, 1])
    logits = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    loss = ad.softmax_cross_entropy(logits, labels)
    loss.backward()
    num = numeric_grad(lambda: ad.softmax_cross_entropy(Tensor(logits.data), labels).item(), logits.data)
    assert rel_err(logits.grad, num) < 1e-4


def test_softmax_cross_entropy_value():
    loss = ad.softmax_cross_entropy(Tensor(np.zeros((2, 4))), np.array([1, 3]))
    assert loss.item() == pytest.approx(np.log(4.0), abs=1e-15)


@pytest.mark.parametrize("stride,padding,groups", [(1, 0, 1), (2, 1, 1), (1, 1, 2), (2, 0, 2)])
def test_conv2d_fd(rng, stride, padding, groups):
    c_in, c_out = 4, 4

    def build(x, w, b):
        return ad.conv2d(x, w, b, stride=stride, padding=padding, groups=groups)
    check_op(build, (2, c_in, 5, 5), (c_out, c_in // groups, 3, 3), (c_out,), rng=rng)


def test_conv2d_matches_direct_loop(rng):
    x = rng.normal(size=(1, 2, 4, 4))
    w = rng.normal(size=(3, 2, 2, 2))
    out = ad.conv2d(Tensor(x), Tensor(w)).data
    ref = np.zeros((1, 3, 3, 3))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                ref[0, o, i, j] = np.sum(x[0, :, i:i + 2, j:j + 2] * w[o])
    assert np.allclose(out, ref, atol=1e-13)


def test_shape_errors():
    with pytest.raises(DimensionError):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    with pytest.raises(DimensionError):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    with pytest.raises(DimensionError):
        ad.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 2, 3, 3))))
    with pytest.raises(DimensionError):
        ad.softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0]))


def test_non_finite_loss_raises():
    with pytest.raises(TrainingDiverged):
        ad.softmax_cross_entropy(Tensor(np.array([[np.nan, 0.0]])), np.array([0]))


def test_shared_node_gradients_accumulate():
    a = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = ad.total(ad.mul(a, a))
    y.backward()
    assert np.allclose(a.grad, 2 * a.data)


def test_tape_records_and_runs_backward():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        y = ad.total(ad.mul(a, 3.0))
    assert len(tape.nodes) == 2
    tape.backward(y)
    assert np.allclose(a.grad, 3.0)


def test_custom_op_backward():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = ad.custom_op(np.round(a.data), (a,), lambda g: (g * 7.0,))
    ad.total(y).backward()
    assert np.allclose(a.grad, 7.0)


def test_sgd_momentum_and_zero_lr():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = SGD([p], lr=0.1, momentum=0.9)
    p.grad = np.array([1.0])
    opt.step()
    assert p.data[0] == pytest.approx(0.9)
    p.grad = np.array([1.0])
    opt.step()
    assert p.data[0] == pytest.approx(0.9 - 0.1 * 1.9)
    frozen = Tensor(np.array([2.0]), requires_grad=True)
    frozen.grad = np.array([5.0])
    SGD([frozen], lr=0.0, momentum=0.9).step()
    assert frozen.data[0] == 2.0
