"""Quantization-level vectors: fixed constructors and the trainable form.

A trainable level vector lives in *step units*: entry ``k`` of ``q_tilde``
is a position on ``[0, 2**b - 1]``. Storage rounds it onto ``2**b_q``
evenly spaced codes, and the range ``[x_min, x_max]`` maps it to values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class InvalidBitwidth(ValueError):
    pass


class DegenerateRange(ValueError):
    pass


def uniform_levels(b: int, c: float = 1.0, x_bar: float = 0.0) -> np.ndarray:
    """Symmetric b-bit uniform levels on [-c, c] + x_bar, with zero listed twice."""
    if b < 1:
        raise InvalidBitwidth(f"bitwidth must be >= 1, got {b}")
    if c <= 0:
        raise ValueError(f"clipping threshold must be positive, got {c}")
    half = 2 ** (b - 1)
    if half == 1:
        pos = np.zeros(1)
    else:
        pos = np.arange(half, dtype=np.float64) / (half - 1)
    return np.concatenate([-pos[::-1], pos]) * c + x_bar


def pot_levels(b: int, c: float = 1.0, x_bar: float = 0.0) -> np.ndarray:
    """Symmetric b-bit powers-of-two levels: +-2^-1 ... +-2^-(2^(b-1)-1) and a double zero."""
    if b < 2:
        raise InvalidBitwidth(f"powers-of-two levels need b >= 2, got {b}")
    half = 2 ** (b - 1)
    exps = -np.arange(half - 1, 0, -1, dtype=np.float64)  # -(half-1) ... -1
    pos = np.concatenate([[0.0], 2.0 ** exps])
    return np.concatenate([-pos[::-1], pos]) * c + x_bar


@dataclass
class LevelSpec:
    """Trainable level vector of a single quantization site."""

    b: int
    b_q: int = 8
    x_min: float = 0.0
    x_max: float = 1.0
    q_tilde: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.b < 1:
            raise InvalidBitwidth(f"bitwidth must be >= 1, got {self.b}")
        if self.b_q < 1:
            raise InvalidBitwidth(f"storage bitwidth must be >= 1, got {self.b_q}")
        if self.q_tilde is None:
            self.q_tilde = np.arange(self.n, dtype=np.float64)
        self.q_tilde = np.asarray(self.q_tilde, dtype=np.float64)
        if self.q_tilde.shape != (self.n,):
            raise ValueError(f"q_tilde must have {self.n} entries, got shape {self.q_tilde.shape}")

    @property
    def n(self) -> int:
        return 2 ** self.b

    @property
    def scale(self) -> float:
        return (self.x_max - self.x_min) / (self.n - 1)

    @property
    def code_step(self) -> float:
        """Spacing of the storage grid in step units."""
        return (self.n - 1) / (2 ** self.b_q - 1)

    def codes(self) -> np.ndarray:
        """Stored b_q-bit code of each level."""
        return storage_codes(self.q_tilde, self.b, self.b_q)

    @property
    def q(self) -> np.ndarray:
        return reparam_levels(self)

    def copy(self) -> LevelSpec:
        return LevelSpec(self.b, self.b_q, self.x_min, self.x_max, self.q_tilde.copy())

    @classmethod
    def from_values(cls, values: np.ndarray, b: int, b_q: int, x_min: float, x_max: float) -> LevelSpec:
        """Inverse map: place ``q_tilde`` so the levels land on (rounded) ``values``."""
        if x_max <= x_min:
            raise DegenerateRange(f"x_max ({x_max}) must exceed x_min ({x_min})")
        values = np.asarray(values, dtype=np.float64)
        n = 2 ** b
        q_tilde = (values - x_min) * (n - 1) / (x_max - x_min)
        return cls(b, b_q, x_min, x_max, q_tilde)


def storage_codes(q_tilde: np.ndarray, b: int, b_q: int) -> np.ndarray:
    top = 2 ** b - 1
    step = top / (2 ** b_q - 1)
    return np.rint(np.clip(q_tilde, 0.0, top) / step).astype(np.int64)


def reparam_levels(spec: LevelSpec) -> np.ndarray:
    """Map ``q_tilde`` to value-unit levels inside ``[x_min, x_max]``."""
    if not spec.x_max > spec.x_min:
        raise DegenerateRange(f"x_max ({spec.x_max}) must exceed x_min ({spec.x_min})")
    stored = storage_codes(spec.q_tilde, spec.b, spec.b_q) * spec.code_step
    q = stored * spec.scale + spec.x_min
    return np.clip(q, spec.x_min, spec.x_max)


def block_code_sums(codes: np.ndarray, s: int, b: int) -> np.ndarray:
    """Sum storage codes over each block of 2**(b - s) adjacent levels."""
    codes = np.asarray(codes, dtype=np.int64)
    lead = codes.shape[:-1]
    return codes.reshape(lead + (2 ** s, 2 ** (b - s))).sum(axis=-1)


def decode_code_sums(sums: np.ndarray, block: int, b: int, b_q: int, x_min: float, x_max: float) -> np.ndarray:
    """Value of each block mean given its code sum; the one decoder shared by training and export."""
    n = 2 ** b
    code_step = (n - 1) / (2 ** b_q - 1)
    scale = (x_max - x_min) / (n - 1)
    stored = np.asarray(sums, dtype=np.int64) * code_step / block
    return np.clip(stored * scale + x_min, x_min, x_max)


def level_gradients(upstream: np.ndarray, assignment: np.ndarray, z_u: float, n: int) -> np.ndarray:
    """Per-level sum of upstream gradients over the elements assigned to it, over ``z_u``."""
    upstream = np.asarray(upstream, dtype=np.float64).reshape(-1)
    assignment = np.asarray(assignment).reshape(-1)
    return np.bincount(assignment, weights=upstream, minlength=n)[:n] / z_u


def q_tilde_gradient(grad_q: np.ndarray, spec: LevelSpec) -> np.ndarray:
    """Chain level gradients to ``q_tilde``; the storage rounding is passed straight through inside the clamp window."""
    window = (spec.q_tilde >= 0.0) & (spec.q_tilde <= spec.n - 1)
    return grad_q * spec.scale * window


def canonicalize(spec: LevelSpec) -> LevelSpec:
    """Sort levels ascending in place (stable), permuting ``q_tilde`` to match."""
    order = np.argsort(spec.q_tilde, kind="stable")
    spec.q_tilde = spec.q_tilde[order]
    return spec
