"""Quantized conv/dense layers, weight memory footprint and the budget-weighted loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .quantizer import ACTIVATION, WEIGHT, DdqQuantizer, quantize_forward

MIN_BITS = 2


class DegenerateFootprint(ValueError):
    pass


@dataclass
class LayerSpec:
    """Declarative description of one layer, as read from a config file."""

    kind: str  # "conv" | "dense"
    out: int
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    groups: int = 1
    relu: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> LayerSpec:
        d = dict(d)
        kind = d.pop("type", d.pop("kind", None))
        if kind not in ("conv", "dense"):
            raise ValueError(f"unsupported layer type {kind!r}")
        return cls(kind=kind, **d)


class QuantLayer:
    """relu(Q(W) * Q(y) + Q(bias)) with its own weight and activation quantizers."""

    def __init__(self, spec: LayerSpec, in_channels: int, rng: np.random.Generator,
                 weight_q: DdqQuantizer, act_q: DdqQuantizer):
        self.spec = spec
        if spec.kind == "conv":
            if in_channels % spec.groups:
                raise DimensionError(f"{in_channels} input channels not divisible by groups={spec.groups}")
            shape = (spec.out, in_channels // spec.groups, spec.kernel, spec.kernel)
        else:
            shape = (spec.out, in_channels)
        fan_in = int(np.prod(shape[1:]))
        self.weight = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True, name="weight")
        self.bias = Tensor(np.zeros(spec.out), requires_grad=True, name="bias")
        self.weight_q = weight_q
        self.act_q = act_q
        if weight_q.kind != WEIGHT or act_q.kind != ACTIVATION:
            raise ValueError("layer needs a weight-site and an activation-site quantizer")

    @property
    def kind(self) -> str:
        return self.spec.kind

    @property
    def param_count(self) -> int:
        """Number of kernel weights; biases are not counted in the footprint."""
        return self.weight.size

    @property
    def quantizers(self) -> list[DdqQuantizer]:
        return [self.weight_q, self.act_q]

    def quantized_operands(self, y_in: Tensor, training: bool = True):
        y_q = self.act_q(y_in, training)
        w_q, b_q = self.weight_q.quantize_pair(self.weight, self.bias, training)
        return y_q, w_q, b_q

    def linear(self, y_q: Tensor, w_q: Tensor, b_q: Tensor) -> Tensor:
        s = self.spec
        if s.kind == "conv":
            if y_q.data.ndim != 4:
                raise DimensionError(f"conv layer expects NCHW input, got {y_q.shape}")
            return ad.conv2d(y_q, w_q, b_q, stride=s.stride, padding=s.padding, groups=s.groups)
        if y_q.data.ndim != 2:
            y_q = ad.flatten(y_q)
        if y_q.shape[1] != self.weight.shape[1]:
            raise DimensionError(f"dense layer expects {self.weight.shape[1]} features, got {y_q.shape}")
        return ad.add(ad.matmul(y_q, ad.transpose(w_q)), b_q)


def layer_forward(layer: QuantLayer, y_in: Tensor, training: bool = True) -> Tensor:
    out = layer.linear(*layer.quantized_operands(y_in, training))
    return ad.relu(out) if layer.spec.relu else out


def memory_footprint(param_counts: Sequence[int], s: Sequence[float], variant: str = "linear") -> float:
    """Bits needed to store every layer's weights at bitwidth ``s[l]``.

    ``variant="printed"`` charges 2**s per weight instead of s.
    """
    if len(param_counts) != len(s):
        raise DimensionError(f"{len(param_counts)} layers but {len(s)} bitwidths")
    p = np.asarray(param_counts, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if variant == "linear":
        return float(np.sum(p * s))
    if variant == "printed":
        return float(np.sum(p * 2.0 ** s))
    raise ValueError(f"unknown footprint variant {variant!r}")


def footprint_slope(param_counts: Sequence[int], s: Sequence[float], variant: str = "linear") -> np.ndarray:
    p = np.asarray(param_counts, dtype=np.float64)
    if variant == "linear":
        return p
    return p * np.log(2.0) * 2.0 ** np.asarray(s, dtype=np.float64)


@dataclass
class MemoryBudget:
    param_counts: list[int]
    target_bits: list[int]
    alpha: float = -0.02
    variant: str = "linear"

    def __post_init__(self):
        if self.alpha > 0:
            raise ValueError(f"alpha must be <= 0, got {self.alpha}")

    @property
    def zeta_target(self) -> float:
        return memory_footprint(self.param_counts, self.target_bits, self.variant)

    def zeta(self, s: Sequence[float]) -> float:
        return memory_footprint(self.param_counts, s, self.variant)

    def ratio(self, s: Sequence[float]) -> float:
        return self.zeta(s) / self.zeta_target

    def effective_alpha(self, s: Sequence[float]) -> float:
        return 0.0 if self.zeta(s) <= self.zeta_target else self.alpha

    def multiplier(self, s: Sequence[float]) -> float:
        actual = self.zeta(s)
        if actual == 0:
            raise DegenerateFootprint("memory footprint is zero")
        alpha = self.effective_alpha(s)
        if alpha == 0:
            return 1.0
        return (self.zeta_target / actual) ** alpha

    def multiplier_gradient(self, s: Sequence[float]) -> np.ndarray:
        """d multiplier / d s_l for every layer (zero within budget)."""
        alpha = self.effective_alpha(s)
        if alpha == 0:
            return np.zeros(len(s))
        m = self.multiplier(s)
        return m * (-alpha) * footprint_slope(self.param_counts, s, self.variant) / self.zeta(s)


def constrained_loss(task_loss, budget: MemoryBudget, s: Sequence[float]):
    """Scale the task loss by (zeta_target / zeta_actual)**alpha, alpha active only over budget.

    Accepts a float or a scalar :class:`Tensor`; returns the same kind.
    """
    m = budget.multiplier(s)
    if isinstance(task_loss, Tensor):
        return ad.mul(task_loss, m)
    return float(task_loss) * m


def penalty_gate_gradients(task_loss: float, budget: MemoryBudget, s: Sequence[float], min_bits: int = MIN_BITS) -> np.ndarray:
    """d(constrained loss)/d s_l, masked to zero for layers already at ``min_bits``."""
    grad = float(task_loss) * budget.multiplier_gradient(s)
    return np.where(np.asarray(s) <= min_bits, 0.0, grad)


@dataclass
class QuantConfig:
    """Quantizer settings shared by every layer of a network."""

    max_bits: int = 4
    act_bits: int | None = 8
    b_q: int = 8
    lam: float = 0.01
    granularity: str = "layer"
    level_init: str = "uniform"
    learn_levels: bool = True
    learn_gates: bool = False
    fixed_bits: int | None = None
    gate_init: float = 1e-8
    correct_activations: bool = False
    reserve_edges: bool = False
    enabled: bool = True
    gate_normalizer: str = "linear"
    gate_position: str = "boundary"


class QuantNetwork:
    """A stack of :class:`QuantLayer` built from layer specs."""

    def __init__(self, input_shape: Sequence[int], layers: Sequence[LayerSpec | dict], qc: QuantConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.input_shape = tuple(input_shape)
        self.qc = qc
        self.layers: list[QuantLayer] = []
        specs = [LayerSpec.from_dict(s) if isinstance(s, dict) else s for s in layers]
        c, h, w = self.input_shape
        flat = None
        for i, spec in enumerate(specs):
            if i == len(specs) - 1:
                spec.relu = False
            edge = qc.reserve_edges and i in (0, len(specs) - 1)
            if spec.kind == "conv":
                if flat is not None:
                    raise DimensionError("conv layer after a dense layer")
                in_ch = c
                h = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
                w = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
                c = spec.out
                if h < 1 or w < 1:
                    raise DimensionError(f"layer {i} reduces spatial size below 1")
            else:
                in_ch = flat if flat is not None else c * h * w
                flat = spec.out
            layer = QuantLayer(spec, in_ch, rng, self._weight_quantizer(spec, edge), self._act_quantizer())
            self.layers.append(layer)

    def _weight_quantizer(self, spec: LayerSpec, edge: bool) -> DdqQuantizer:
        qc = self.qc
        b = 8 if edge else qc.max_bits
        q = DdqQuantizer(
            b, WEIGHT, qc.b_q, qc.lam, qc.granularity, spec.out, qc.level_init,
            learn_levels=qc.learn_levels, learn_gates=qc.learn_gates and not edge,
            gate_init=qc.gate_init, enabled=qc.enabled,
            gate_normalizer=qc.gate_normalizer, gate_position=qc.gate_position,
        )
        if qc.fixed_bits is not None and not edge:
            q.gates.g_hat[:] = [qc.gate_init] * qc.fixed_bits + [-abs(qc.gate_init)] * (b - qc.fixed_bits)
        return q

    def _act_quantizer(self) -> DdqQuantizer:
        qc = self.qc
        bits = qc.act_bits or 8
        return DdqQuantizer(
            bits, ACTIVATION, qc.b_q, qc.lam, "layer", 1, "uniform",
            learn_levels=qc.learn_levels, learn_gates=False,
            correct=qc.correct_activations, enabled=qc.enabled and qc.act_bits is not None,
        )

    def forward(self, x, training: bool = True) -> Tensor:
        y = ad.as_tensor(x)
        for layer in self.layers:
            y = layer_forward(layer, y, training)
        return y

    __call__ = forward

    @property
    def weights(self) -> list[Tensor]:
        return [t for layer in self.layers for t in (layer.weight, layer.bias)]

    @property
    def weight_quantizers(self) -> list[DdqQuantizer]:
        return [layer.weight_q for layer in self.layers]

    @property
    def quantizers(self) -> list[DdqQuantizer]:
        return [q for layer in self.layers for q in layer.quantizers]

    @property
    def param_counts(self) -> list[int]:
        return [layer.param_count for layer in self.layers]

    def bits(self) -> list[int]:
        """Effective weight bitwidth per layer (32 for float layers)."""
        return [q.s if q.enabled else 32 for q in self.weight_quantizers]

    def quantization_errors(self) -> list[float]:
        """Per-layer ||W_q - W||^2 at the current parameters."""
        errs = []
        for layer in self.layers:
            q = layer.weight_q
            if not q.enabled:
                errs.append(0.0)
                continue
            rows = q.rows(layer.weight.data)
            saved = q.ranges.copy()
            q.observe(np.concatenate([rows, layer.bias.data.reshape(q.channels, -1)], axis=1), True)
            x_q, _, _ = quantize_forward(rows, q)
            q.set_range(saved[:, 0], saved[:, 1])
            with np.errstate(over="ignore", invalid="ignore"):
                errs.append(float(np.sum((x_q - rows) ** 2)))
        return errs

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = []
        for i in range(0, len(x), batch_size):
            out.append(self.forward(Tensor(x[i:i + batch_size]), training=False).data)
        return np.concatenate(out) if out else np.zeros((0, 0))

    def zero_grad(self):
        for t in self.weights:
            t.grad = None
        for q in self.quantizers:
            q.zero_grad()
