import itertools

import numpy as np
import pytest

from ddq.autodiff import DimensionError
from ddq.gates import (
    CompositionTooLarge, GateSet, compose_u_explicit, composition_order, effective_levels,
    gate_gradients, gate_level_jacobian, heaviside_ste, relaxed_effective_levels,
)


def test_heaviside_ste_examples():
    g, back = heaviside_ste(-0.3)
    assert g == 0
    g, back = heaviside_ste(1e-8)
    assert g == 1
    assert heaviside_ste(0.0)[0] == 1
    _, back = heaviside_ste(1.5)
    assert back(1.0) == 0
    _, back = heaviside_ste(np.array([0.5, -1.0, -1.01]))
    np.testing.assert_array_equal(back(np.ones(3)), [1, 1, 0])


def test_default_init_is_full_precision():
    gs = GateSet(4)
    assert gs.s == 4 and gs.z_u == 1
    assert gs.g_hat.shape == (4,)  # b trainables, never 2**b squared
    with pytest.raises(DimensionError):
        GateSet(3, g_hat=[1.0, 1.0])
    with pytest.raises(ValueError):
        GateSet(3, normalizer="cubic")


def test_compose_examples():
    ones4 = np.ones((4, 4))
    np.testing.assert_array_equal(compose_u_explicit([1, 0, 0]), np.block([[ones4, 0 * ones4], [0 * ones4, ones4]]))
    np.testing.assert_array_equal(compose_u_explicit([1, 1, 0]), np.kron(np.eye(4), np.ones((2, 2))))
    np.testing.assert_array_equal(compose_u_explicit([1, 1, 1]), np.eye(8))
    # raw order is irrelevant: gates are sorted before composing
    np.testing.assert_array_equal(compose_u_explicit([0, 1, 0]), compose_u_explicit([1, 0, 0]))


def test_compose_refuses_large():
    with pytest.raises(CompositionTooLarge):
        compose_u_explicit(np.ones(7))


def test_effective_levels_examples():
    q = np.arange(8.0)
    np.testing.assert_allclose(effective_levels(q, GateSet.with_bits(3, 2)), [0.5, 0.5, 2.5, 2.5, 4.5, 4.5, 6.5, 6.5])
    np.testing.assert_array_equal(effective_levels(q, GateSet.with_bits(3, 3)), q)
    np.testing.assert_allclose(effective_levels(q, GateSet.with_bits(3, 0)), np.full(8, 3.5))
    with pytest.raises(DimensionError):
        effective_levels(np.arange(6.0), GateSet(3))


@pytest.mark.parametrize("b", [1, 2, 3, 4, 5])
def test_fast_path_matches_kronecker_for_every_pattern(b, rng):
    q = np.sort(rng.normal(size=2 ** b))
    for bits in itertools.product([0, 1], repeat=b):
        g = np.array(bits, dtype=float)
        gs = GateSet(b, g_hat=np.where(g > 0, 0.5, -0.5))
        u = compose_u_explicit(g)
        want = u.T @ q / gs.z_u
        got = effective_levels(q, gs)
        np.testing.assert_allclose(got, want, atol=1e-12)
        assert len(np.unique(got)) == 2 ** gs.s


def test_permutation_invariance(rng):
    q = np.sort(rng.normal(size=32))
    g_hat = np.array([0.3, -0.2, 0.1, -0.9, 0.4])
    base = effective_levels(q, GateSet(5, g_hat=g_hat))
    for perm in itertools.permutations(range(5)):
        np.testing.assert_array_equal(effective_levels(q, GateSet(5, g_hat=g_hat[list(perm)])), base)


def test_relaxed_matches_binary_composition(rng):
    q = np.sort(rng.normal(size=16))
    for s in range(5):
        g = np.array([1.0] * s + [0.0] * (4 - s))
        for norm in GateSet.NORMALIZERS:
            np.testing.assert_allclose(relaxed_effective_levels(q, g, norm), effective_levels(q, s, 4), atol=1e-12)


def test_composition_order_boundary():
    gs = GateSet(4, g_hat=[0.1, -0.1, 0.2, -0.3])
    np.testing.assert_array_equal(composition_order(gs, 0, "boundary"), [2, 0, 1, 3])
    np.testing.assert_array_equal(composition_order(gs, 3, "boundary"), [0, 2, 3, 1])
    np.testing.assert_array_equal(composition_order(gs, 3, "sorted"), gs.order())


def _relaxed_fd(q, gs, gate, h=1e-6):
    order = composition_order(gs, gate, gs.position_rule)
    g = gs.g[order].astype(float)
    pos = int(np.flatnonzero(order == gate)[0])
    e = np.zeros_like(g)
    e[pos] = h
    return (relaxed_effective_levels(q, g + e, gs.normalizer) - relaxed_effective_levels(q, g - e, gs.normalizer)) / (2 * h)


@pytest.mark.parametrize("b", [2, 3, 4])
@pytest.mark.parametrize("normalizer", GateSet.NORMALIZERS)
@pytest.mark.parametrize("rule", GateSet.POSITION_RULES)
def test_jacobian_matches_relaxed_finite_difference(b, normalizer, rule, rng):
    for _ in range(4):
        q = np.sort(rng.normal(size=2 ** b))
        g_hat = rng.choice([-0.5, 0.5], size=b)
        gs = GateSet(b, g_hat=g_hat, normalizer=normalizer, position_rule=rule)
        jac = gate_level_jacobian(q, gs)
        for i in range(b):
            fd = _relaxed_fd(q, gs, i)
            assert np.max(np.abs(jac[i] - fd)) <= 1e-4 * max(np.max(np.abs(fd)), 1e-8) + 1e-9


def test_gate_gradients_window_and_zero(rng):
    q = np.sort(rng.normal(size=8))
    gs = GateSet(3, g_hat=[0.5, 1.5, -0.2])
    np.testing.assert_array_equal(gate_gradients(q, np.zeros(8), gs), np.zeros(3))
    grad = gate_gradients(q, rng.normal(size=8), gs, extra=np.array([0.1, 0.1, 0.1]))
    assert grad[1] == 0.0
    assert np.all(np.isfinite(grad))


def test_gate_gradient_directional_against_relaxed(rng):
    q = np.sort(rng.normal(size=8))
    gs = GateSet(3, g_hat=[0.4, -0.4, 0.2])
    w = rng.normal(size=8)
    grad = gate_gradients(q, w, gs)
    for i in range(3):
        assert np.isclose(grad[i], w @ _relaxed_fd(q, gs, i), rtol=1e-5, atol=1e-9)
