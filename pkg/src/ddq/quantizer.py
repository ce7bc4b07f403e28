"""The differentiable quantizer: nearest effective level forward, corrected backward."""

from __future__ import annotations

import numpy as np

from . import gates as gates_mod
from .autodiff import DimensionError, Tensor, custom_op
from .gates import GateSet, spread_blocks
from .levels import LevelSpec, block_code_sums, canonicalize, decode_code_sums, level_gradients, pot_levels, q_tilde_gradient

WEIGHT = "weight"
ACTIVATION = "activation"
RANGE_EPS = 1e-8


class NonFiniteInput(ValueError):
    pass


def nearest_level(x: np.ndarray, q_hat: np.ndarray) -> np.ndarray:
    """Index of the nearest entry of sorted ``q_hat`` for every element of ``x``.

    Same answer as ``argmin_j |q_hat[j] - x|`` with ties resolved to the
    smallest index, found by binary search over the distinct values.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return np.zeros(x.shape, dtype=np.int64)
    if np.isnan(x).any():
        raise NonFiniteInput("cannot quantize NaN")
    q_hat = np.asarray(q_hat, dtype=np.float64)
    first = np.flatnonzero(np.r_[True, q_hat[1:] != q_hat[:-1]])
    vals = q_hat[first]
    if len(vals) == 1:
        return np.zeros(x.shape, dtype=np.int64)
    flat = x.reshape(-1)
    j = np.searchsorted((vals[:-1] + vals[1:]) * 0.5, flat, side="left")
    last = len(vals) - 1
    # settle float rounding at the midpoints against exact distance comparisons
    while True:
        dist = np.abs(vals[j] - flat)
        left = np.maximum(j - 1, 0)
        right = np.minimum(j + 1, last)
        go_left = (j > 0) & (np.abs(vals[left] - flat) <= dist)
        go_right = ~go_left & (j < last) & (np.abs(vals[right] - flat) < dist)
        if not (go_left.any() or go_right.any()):
            break
        j = np.where(go_left, left, np.where(go_right, right, j))
    return first[j].reshape(x.shape)


def quantize_values(x: np.ndarray, q_hat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    idx = nearest_level(x, q_hat)
    return q_hat[idx], idx


class DdqQuantizer:
    """One quantization site: levels (one set per channel if requested), gates, correction.

    Weight sites take their range from the tensor being quantized on every
    call; activation sites keep an exponential moving average of batch
    min/max, seeded by the first batch.
    """

    def __init__(
        self,
        b: int,
        kind: str = WEIGHT,
        b_q: int = 8,
        lam: float = 0.01,
        granularity: str = "layer",
        channels: int = 1,
        init: str = "uniform",
        learn_levels: bool = True,
        learn_gates: bool = True,
        gate_init: float = 1e-8,
        ema_decay: float = 0.99,
        correct: bool | None = None,
        enabled: bool = True,
        gate_normalizer: str = "linear",
        gate_position: str = "boundary",
    ):
        if kind not in (WEIGHT, ACTIVATION):
            raise ValueError(f"unknown site kind {kind!r}")
        if granularity not in ("layer", "channel"):
            raise ValueError(f"unknown granularity {granularity!r}")
        if granularity == "channel" and kind != WEIGHT:
            raise ValueError("channel granularity applies to weight sites only")
        self.b = b
        self.b_q = b_q
        self.kind = kind
        self.lam = lam
        self.granularity = granularity
        self.channels = channels if granularity == "channel" else 1
        self.init = init
        self.learn_levels = learn_levels
        self.learn_gates = learn_gates
        self.ema_decay = ema_decay
        self.correct = (kind == WEIGHT) if correct is None else correct
        self.enabled = enabled
        self.levels = [LevelSpec(b, b_q, 0.0, 1.0, initial_q_tilde(b, init)) for _ in range(self.channels)]
        self.gates = GateSet(b, init=gate_init, normalizer=gate_normalizer, position_rule=gate_position)
        self.range_initialized = False
        self.grad_q_hat = np.zeros((self.channels, 2 ** b))
        self.last_assignment: np.ndarray | None = None
        self.last_q_hat: np.ndarray | None = None

    # ----- state -----
    @property
    def n(self) -> int:
        return 2 ** self.b

    @property
    def s(self) -> int:
        return self.gates.s

    @property
    def z_u(self) -> int:
        return self.gates.z_u

    @property
    def ranges(self) -> np.ndarray:
        return np.array([[lv.x_min, lv.x_max] for lv in self.levels])

    def q_matrix(self) -> np.ndarray:
        return np.stack([lv.q for lv in self.levels])

    def code_sums(self) -> np.ndarray:
        """Per-channel block sums of the stored level codes (channels x 2**s)."""
        return block_code_sums(np.stack([lv.codes() for lv in self.levels]), self.s, self.b)

    def table(self) -> np.ndarray:
        """The 2**s distinct effective levels per channel, decoded from code sums."""
        sums = self.code_sums()
        return np.stack([decode_code_sums(row, self.z_u, lv.b, lv.b_q, lv.x_min, lv.x_max)
                         for row, lv in zip(sums, self.levels)])

    def q_hat_matrix(self) -> np.ndarray:
        """Effective levels U^T q / Z_U per channel; equals block means of :meth:`q_matrix`."""
        return np.repeat(self.table(), self.z_u, axis=-1)

    def canonicalize(self):
        for lv in self.levels:
            canonicalize(lv)

    def zero_grad(self):
        self.grad_q_hat[:] = 0.0

    def set_range(self, lo: np.ndarray, hi: np.ndarray):
        lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), (self.channels,))
        hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), (self.channels,))
        for lv, a, c in zip(self.levels, lo, hi):
            if not c - a > RANGE_EPS:
                mid = 0.5 * (a + c)
                a, c = mid - RANGE_EPS, mid + RANGE_EPS
            lv.x_min, lv.x_max = float(a), float(c)
        self.range_initialized = True

    def observe(self, rows: np.ndarray, training: bool):
        """Refresh [x_min, x_max] from ``rows`` (channels x elements)."""
        if self.kind == WEIGHT:
            self.set_range(rows.min(axis=1), rows.max(axis=1))
            return
        if not training and self.range_initialized:
            return
        lo, hi = float(rows.min()), float(rows.max())
        if self.range_initialized:
            d = self.ema_decay
            old = self.levels[0]
            lo = d * old.x_min + (1 - d) * lo
            hi = d * old.x_max + (1 - d) * hi
        self.set_range(lo, hi)

    # ----- forward / backward on raw arrays -----
    def rows(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64).reshape(self.channels, -1)

    def parameter_gradients(self, extra_gate_grad: float | np.ndarray = 0.0) -> tuple[np.ndarray, np.ndarray]:
        """Gradients for every channel's ``q_tilde`` and for the raw gates, from the accumulated q_hat gradient."""
        grad_q = spread_blocks(self.grad_q_hat, self.s, self.b) / self.z_u
        grad_qt = np.stack([q_tilde_gradient(gq, lv) for gq, lv in zip(grad_q, self.levels)])
        q = self.q_matrix()
        grad_g = sum(gates_mod.gate_level_jacobian(qc, self.gates) @ gc for qc, gc in zip(q, self.grad_q_hat))
        _, ste = gates_mod.heaviside_ste(self.gates.g_hat)
        return grad_qt, ste(grad_g + extra_gate_grad)

    # ----- autodiff entry points -----
    def __call__(self, x: Tensor, training: bool = True) -> Tensor:
        if not self.enabled:
            return x
        data = x.data
        if data.size == 0:
            return x
        rows = self.rows(data)
        self.observe(rows, training)
        x_q, assign, q_hat = quantize_forward(rows, self)
        return self._node(x, rows, x_q, assign, q_hat)

    def quantize_pair(self, w: Tensor, bias: Tensor | None, training: bool = True) -> tuple[Tensor, Tensor | None]:
        """Quantize a kernel and its bias with the same levels (bias column appended per channel)."""
        if not self.enabled:
            return w, bias
        wr = self.rows(w.data)
        if bias is None:
            self.observe(wr, training)
            x_q, assign, q_hat = quantize_forward(wr, self)
            return self._node(w, wr, x_q, assign, q_hat), None
        br = np.asarray(bias.data, dtype=np.float64).reshape(self.channels, -1)
        self.observe(np.concatenate([wr, br], axis=1), training)
        wq, wa, q_hat = quantize_forward(wr, self)
        bq, ba, _ = quantize_forward(br, self, q_hat)
        return self._node(w, wr, wq, wa, q_hat), self._node(bias, br, bq, ba, q_hat)

    def _node(self, x: Tensor, rows, x_q, assign, q_hat) -> Tensor:
        self.last_assignment = assign
        self.last_q_hat = q_hat

        def backward(upstream):
            up = upstream.reshape(self.channels, -1)
            grad_x, corrected = ste_backward(up, rows, x_q, q_hat, self.lam if self.correct else 0.0)
            if self.learn_levels or self.learn_gates:
                for c in range(self.channels):
                    self.grad_q_hat[c] += level_gradients(corrected[c], assign[c], 1.0, self.n)
            return (grad_x.reshape(x.shape),)

        return custom_op(x_q.reshape(x.shape), (x,), backward)


def initial_q_tilde(b: int, init: str) -> np.ndarray:
    n = 2 ** b
    if init == "uniform":
        return np.arange(n, dtype=np.float64)
    if init == "pot":
        return (pot_levels(b) + 0.5) * (n - 1)
    raise ValueError(f"unknown level init {init!r}")


def quantize_forward(x: np.ndarray, quantizer: DdqQuantizer, q_hat: np.ndarray | None = None):
    """Map every element of ``x`` (channels x elements) to its nearest effective level.

    Returns ``(x_q, assignment, q_hat)``; assignment indexes the 2**b entries.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(quantizer.channels, -1)
    if x.shape[0] != quantizer.channels:
        raise DimensionError(f"expected {quantizer.channels} channel rows, got shape {x.shape}")
    if q_hat is None:
        q_hat = quantizer.q_hat_matrix()
    assign = np.empty(x.shape, dtype=np.int64)
    x_q = np.empty_like(x)
    for c in range(x.shape[0]):
        assign[c] = nearest_level(x[c], q_hat[c])
        x_q[c] = q_hat[c][assign[c]]
    return x_q, assign, q_hat


def ste_backward(upstream, x, x_q, q_hat, lam: float):
    """Return ``(grad_x, corrected)``.

    ``grad_x`` passes the upstream gradient through where x lies inside
    [min q_hat, max q_hat]; ``corrected`` adds lam * (x_q - x) and only feeds
    the level and gate parameters.
    """
    lo = q_hat.min(axis=-1, keepdims=True)
    hi = q_hat.max(axis=-1, keepdims=True)
    grad_x = upstream * ((x >= lo) & (x <= hi))
    corrected = upstream + lam * (x_q - x) if lam else upstream
    return grad_x, corrected


def quantize_backward(upstream, x, x_q, assignment, quantizer: DdqQuantizer):
    """Pure backward of one forward call: ``(grad_x, grad_q_tilde, grad_g_hat)``."""
    up = np.asarray(upstream, dtype=np.float64).reshape(quantizer.channels, -1)
    x = np.asarray(x, dtype=np.float64).reshape(up.shape)
    x_q = np.asarray(x_q, dtype=np.float64).reshape(up.shape)
    assignment = np.asarray(assignment).reshape(up.shape)
    q_hat = quantizer.q_hat_matrix()
    lam = quantizer.lam if quantizer.correct else 0.0
    grad_x, corrected = ste_backward(up, x, x_q, q_hat, lam)
    saved = quantizer.grad_q_hat.copy()
    quantizer.grad_q_hat[:] = 0.0
    for c in range(quantizer.channels):
        quantizer.grad_q_hat[c] += level_gradients(corrected[c], assignment[c], 1.0, quantizer.n)
    grad_qt, grad_g = quantizer.parameter_gradients()
    quantizer.grad_q_hat[:] = saved
    return grad_x, grad_qt, grad_g


def quantize_activation(y: Tensor, quantizer: DdqQuantizer, training: bool = True) -> Tensor:
    if quantizer.kind != ACTIVATION:
        raise ValueError("quantize_activation needs an activation site")
    return quantizer(y, training)
