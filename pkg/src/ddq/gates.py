"""Bitwidth gates and the block-averaging matrix they compose.

Each of the ``b`` gates selects between a 2x2 identity and a 2x2 all-ones
factor of a Kronecker product. With the binarized gates sorted descending
the product is block diagonal, so averaging levels through it reduces to
taking means over ``2**(b - s)`` adjacent entries. The production path only
ever does that; :func:`compose_u_explicit` builds the matrix for tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import DimensionError

EXPLICIT_MAX_BITS = 6
STE_WINDOW = 1.0
LN2 = np.log(2.0)


class CompositionTooLarge(ValueError):
    pass


def heaviside(g_hat):
    """Binarize raw gates; zero counts as on."""
    return (np.asarray(g_hat) >= 0).astype(np.float64)


def heaviside_ste(g_hat):
    """Return ``(g, backward)`` where backward applies the clipped straight-through rule."""
    g_hat = np.asarray(g_hat, dtype=np.float64)
    window = (np.abs(g_hat) <= STE_WINDOW).astype(np.float64)
    return heaviside(g_hat), lambda upstream: np.asarray(upstream) * window


@dataclass(frozen=True)
class BlockStructure:
    b: int
    s: int

    @property
    def block_size(self) -> int:
        return 2 ** (self.b - self.s)

    @property
    def block_count(self) -> int:
        return 2 ** self.s


class GateSet:
    """The ``b`` trainable raw gates of one quantization site.

    ``normalizer`` and ``position_rule`` choose how the relaxed composition
    is differentiated; see :func:`relaxed_effective_levels` and
    :func:`composition_order`.
    """

    NORMALIZERS = ("linear", "exp2")
    POSITION_RULES = ("boundary", "sorted")

    def __init__(self, b: int, init: float = 1e-8, g_hat=None, normalizer: str = "linear", position_rule: str = "boundary"):
        if normalizer not in self.NORMALIZERS:
            raise ValueError(f"normalizer must be one of {self.NORMALIZERS}, got {normalizer!r}")
        if position_rule not in self.POSITION_RULES:
            raise ValueError(f"position_rule must be one of {self.POSITION_RULES}, got {position_rule!r}")
        self.b = b
        self.normalizer = normalizer
        self.position_rule = position_rule
        if g_hat is None:
            g_hat = np.full(b, init, dtype=np.float64)
        self.g_hat = np.asarray(g_hat, dtype=np.float64).copy()
        if self.g_hat.shape != (b,):
            raise DimensionError(f"expected {b} gates, got shape {self.g_hat.shape}")

    @property
    def g(self) -> np.ndarray:
        return heaviside(self.g_hat)

    @property
    def s(self) -> int:
        return int(self.g.sum())

    @property
    def z_u(self) -> int:
        return 2 ** (self.b - self.s)

    @property
    def structure(self) -> BlockStructure:
        return BlockStructure(self.b, self.s)

    def order(self) -> np.ndarray:
        """Gate indices in composition order: on-gates first, stable within ties."""
        return np.argsort(-self.g, kind="stable")

    def copy(self) -> GateSet:
        return GateSet(self.b, g_hat=self.g_hat, normalizer=self.normalizer, position_rule=self.position_rule)

    @classmethod
    def with_bits(cls, b: int, s: int, on: float = 1e-8, off: float = -1e-8, **kw) -> GateSet:
        return cls(b, g_hat=np.array([on] * s + [off] * (b - s)), **kw)


def compose_u_explicit(g) -> np.ndarray:
    """Materialize U = U_1 kron ... kron U_b with gates sorted descending (testing only)."""
    g = np.sort(np.asarray(g, dtype=np.float64))[::-1]
    if len(g) > EXPLICIT_MAX_BITS:
        raise CompositionTooLarge(f"refusing to build a {2 ** len(g)}-square matrix; use effective_levels")
    return relaxed_u(g)


def relaxed_u(g) -> np.ndarray:
    """Kronecker product of g_i*I + (1-g_i)*ones(2,2) in the given order; g_i may be real."""
    u = np.ones((1, 1))
    for gi in np.asarray(g, dtype=np.float64):
        u = np.kron(u, _factor(gi))
    return u


def effective_levels(q: np.ndarray, gates: GateSet | int, b: int | None = None) -> np.ndarray:
    """Block means of ``q``; the fast form of U^T q / Z_U.

    ``gates`` may be a :class:`GateSet` or an effective bitwidth ``s`` (then
    ``b`` defaults to log2 of ``len(q)``).
    """
    q = np.asarray(q, dtype=np.float64)
    if isinstance(gates, GateSet):
        b, s = gates.b, gates.s
    else:
        s = int(gates)
        b = int(np.log2(len(q))) if b is None else b
    if q.shape[-1] != 2 ** b:
        raise DimensionError(f"level vector has {q.shape[-1]} entries, expected {2 ** b}")
    block = 2 ** (b - s)
    if block == 1:
        return q.copy()
    lead = q.shape[:-1]
    means = q.reshape(lead + (2 ** s, block)).mean(axis=-1)
    return np.repeat(means, block, axis=-1)


def spread_blocks(v: np.ndarray, s: int, b: int) -> np.ndarray:
    """Apply U (unnormalized): every entry becomes the sum over its block."""
    block = 2 ** (b - s)
    if block == 1:
        return np.array(v, dtype=np.float64, copy=True)
    lead = v.shape[:-1]
    sums = v.reshape(lead + (2 ** s, block)).sum(axis=-1)
    return np.repeat(sums, block, axis=-1)


def _apply_factor(t: np.ndarray, mat: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(np.tensordot(mat, t, axes=([1], [axis])), 0, axis)


def _factor(gi: float) -> np.ndarray:
    return gi * np.eye(2) + (1.0 - gi) * np.ones((2, 2))


def _normalizer(g_sorted: np.ndarray, kind: str) -> float:
    if kind == "exp2":
        return 2.0 ** (len(g_sorted) - g_sorted.sum())
    return float(np.prod(2.0 - g_sorted))


def relaxed_effective_levels(q: np.ndarray, g_sorted, normalizer: str = "linear") -> np.ndarray:
    """U(g)^T q / Z_U(g) for real-valued gates already in composition order.

    Applies the 2x2 factors axis by axis, never forming U. ``normalizer``
    picks the smooth extension of Z_U: ``"exp2"`` is 2**(b - sum(g)),
    ``"linear"`` is prod(2 - g_i); both equal 2**(b - s) at binary gates.
    """
    g_sorted = np.asarray(g_sorted, dtype=np.float64)
    b = len(g_sorted)
    t = np.asarray(q, dtype=np.float64).reshape((2,) * b)
    for axis, gi in enumerate(g_sorted):
        t = _apply_factor(t, _factor(gi), axis)
    return t.reshape(-1) / _normalizer(g_sorted, normalizer)


def composition_order(gates: GateSet, gate: int, rule: str) -> np.ndarray:
    """Order used to differentiate w.r.t. ``gate``.

    ``"sorted"`` keeps the stable descending sort of the binary gates.
    ``"boundary"`` breaks ties so ``gate`` sits next to the on/off boundary
    (last among the on-gates, or first among the off-gates), which is where
    a descending sort of the relaxed gates puts it once it moves inward.
    """
    order = gates.order()
    if rule == "sorted":
        return order
    on = [int(i) for i in order if gates.g[i] == 1 and i != gate]
    off = [int(i) for i in order if gates.g[i] == 0 and i != gate]
    return np.array(on + [gate] + off)


def gate_level_jacobian(q: np.ndarray, gates: GateSet) -> np.ndarray:
    """d q_hat / d g_i for every raw gate i (rows), at the current binary gates.

    Differentiates the relaxed composition with the composition order held
    fixed (see :func:`composition_order`): the factor at gate i's position
    becomes I - ones(2,2), and the normalizer contributes its own
    derivative times q_hat.
    """
    b = gates.b
    q = np.asarray(q, dtype=np.float64)
    g = gates.g
    jac = np.empty((b, 2 ** b))
    d_factor = np.eye(2) - np.ones((2, 2))
    cache = {}
    for gate in range(b):
        order = composition_order(gates, gate, gates.position_rule)
        g_sorted = g[order]
        pos = int(np.flatnonzero(order == gate)[0])
        key = (pos, tuple(g_sorted))
        if key not in cache:
            z = _normalizer(g_sorted, gates.normalizer)
            t = q.reshape((2,) * b)
            for axis, gi in enumerate(g_sorted):
                t = _apply_factor(t, d_factor if axis == pos else _factor(gi), axis)
            q_hat = relaxed_effective_levels(q, g_sorted, gates.normalizer)
            dlogz = LN2 if gates.normalizer == "exp2" else 1.0 / (2.0 - g_sorted[pos])
            cache[key] = t.reshape(-1) / z + dlogz * q_hat
        jac[gate] = cache[key]
    return jac


def gate_gradients(q: np.ndarray, grad_q_hat: np.ndarray, gates: GateSet, extra: np.ndarray | float = 0.0) -> np.ndarray:
    """Gradient over the raw gates from the gradient over q_hat.

    ``extra`` is any additional gradient w.r.t. the binary gates (the memory
    penalty) added before the straight-through window is applied.
    """
    grad_g = gate_level_jacobian(q, gates) @ np.asarray(grad_q_hat, dtype=np.float64)
    _, ste = heaviside_ste(gates.g_hat)
    return ste(grad_g + extra)
