"""Joint training of weights, levels and bitwidth gates under a memory budget."""

from __future__ import annotations

import copy
import csv
import io
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import SGD, Tensor, TrainingDiverged
from .data import Dataset, load
from .network import MIN_BITS, MemoryBudget, QuantConfig, QuantNetwork, penalty_gate_gradients

log = logging.getLogger(__name__)

DEFAULT_LAYERS = [
    {"type": "conv", "out": 8, "kernel": 3, "stride": 1, "padding": 1},
    {"type": "conv", "out": 16, "kernel": 3, "stride": 2, "padding": 1},
    {"type": "conv", "out": 16, "kernel": 3, "stride": 2, "padding": 1},
    {"type": "dense", "out": 10},
]

MODES = ("ddq", "uq", "pot", "float")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 8
    batch_size: int = 64
    lr: float = 0.05
    lr_levels: float = 1e-3
    lr_gates: float = 1e-8
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lam: float = 0.01
    alpha: float = -0.02
    max_bits: int = 8
    target_bits: int = 4
    b_q: int = 8
    act_bits: int | None = 8
    seed: int = 0
    granularity: str = "layer"
    mode: str = "ddq"
    fixed_precision: int | None = None
    gate_init: float = 1e-8
    gate_normalizer: str = "linear"
    gate_position: str = "boundary"
    footprint: str = "linear"
    correct_activations: bool = False
    reserve_edges: bool = False
    lr_decay_epochs: int = 0
    lr_decay: float = 0.1
    eval_every: int = 0
    dataset: dict = field(default_factory=lambda: {"name": "synthetic"})
    layers: list = field(default_factory=lambda: copy.deepcopy(DEFAULT_LAYERS))

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.lr_gates > 0:
            raise ConfigError("lr_gates must be positive")
        if self.max_bits < self.target_bits:
            raise ConfigError(f"max_bits ({self.max_bits}) must be >= target_bits ({self.target_bits})")
        if self.fixed_precision is not None and not 1 <= self.fixed_precision <= 8:
            raise ConfigError("fixed_precision must be between 1 and 8")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.alpha > 0:
            raise ConfigError("alpha must be <= 0")
        if self.granularity not in ("layer", "channel"):
            raise ConfigError(f"granularity must be 'layer' or 'channel', got {self.granularity!r}")
        if self.gate_normalizer not in ("linear", "exp2"):
            raise ConfigError(f"gate_normalizer must be 'linear' or 'exp2', got {self.gate_normalizer!r}")
        if self.gate_position not in ("boundary", "sorted"):
            raise ConfigError(f"gate_position must be 'boundary' or 'sorted', got {self.gate_position!r}")
        if self.footprint not in ("linear", "printed"):
            raise ConfigError(f"footprint must be 'linear' or 'printed', got {self.footprint!r}")
        if self.act_bits is not None and not 1 <= self.act_bits <= 8:
            raise ConfigError("act_bits must be between 1 and 8 (or null to disable)")

    @property
    def learns_gates(self) -> bool:
        return self.mode == "ddq" and self.fixed_precision is None

    @property
    def weight_bits(self) -> int:
        return self.fixed_precision if self.fixed_precision is not None else self.max_bits

    def quant_config(self) -> QuantConfig:
        return QuantConfig(
            max_bits=self.weight_bits,
            act_bits=self.act_bits,
            b_q=self.b_q,
            lam=self.lam,
            granularity=self.granularity,
            level_init="pot" if self.mode == "pot" else "uniform",
            learn_levels=self.mode == "ddq",
            learn_gates=self.learns_gates,
            gate_init=self.gate_init,
            correct_activations=self.correct_activations,
            reserve_edges=self.reserve_edges,
            enabled=self.mode != "float",
            gate_normalizer=self.gate_normalizer,
            gate_position=self.gate_position,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def build_network(cfg: TrainConfig, input_shape) -> QuantNetwork:
    return QuantNetwork(input_shape, copy.deepcopy(cfg.layers), cfg.quant_config(), seed=cfg.seed)


def build_budget(cfg: TrainConfig, net: QuantNetwork) -> MemoryBudget:
    return MemoryBudget(net.param_counts, [cfg.target_bits] * len(net.layers), cfg.alpha, cfg.footprint)


class TrainState:
    """Network, optimizer slots, step counter and the append-only metric log."""

    def __init__(self, cfg: TrainConfig, net: QuantNetwork):
        self.cfg = cfg
        self.net = net
        self.budget = build_budget(cfg, net)
        self.opt = SGD(net.weights, cfg.lr, cfg.momentum, cfg.weight_decay)
        self.step = 0
        self.log: list[dict] = []
        self.evals: list[dict] = []

    @property
    def layer_count(self) -> int:
        return len(self.net.layers)


def metric_header(layers: int) -> list[str]:
    return (["step", "loss", "multiplier", "zeta_ratio"]
            + [f"layer_{i}_bits" for i in range(layers)]
            + [f"layer_{i}_qerr" for i in range(layers)])


def level_step(q, grad_qt: np.ndarray, lr: float):
    """SGD on every channel's q_tilde; the value-unit rate is converted to step units."""
    for lv, g in zip(q.levels, grad_qt):
        lv.q_tilde = lv.q_tilde - (lr / lv.scale ** 2) * g
    q.canonicalize()


def gate_step(gate_sets, grads, lr: float, min_bits: int = MIN_BITS, rearm: float | None = None):
    """SGD on the raw gates of several sites with at most one gate changing state.

    When several gates cross zero in the same step only the one that
    crossed furthest keeps its update; the others keep their old value. A
    switch-off that would leave a site with fewer than ``min_bits`` on-gates
    is dropped. With ``rearm`` set, every site has its raw gates reset to
    +/-rearm after a flip, so the next flip needs fresh evidence.
    """
    olds = [gs.g_hat.copy() for gs in gate_sets]
    news = [o - lr * np.asarray(g, dtype=np.float64) for o, g in zip(olds, grads)]
    crossings = []
    for k, (old, new) in enumerate(zip(olds, news)):
        for i in np.flatnonzero((new >= 0) != (old >= 0)):
            turning_off = old[i] >= 0
            if turning_off and (old >= 0).sum() - 1 < min_bits:
                new[i] = old[i]
                continue
            crossings.append((abs(new[i]), k, i))
    crossings.sort(key=lambda c: (-c[0], c[1], c[2]))
    for _, k, i in crossings[1:]:
        news[k][i] = olds[k][i]
    if crossings and rearm is not None:
        news = [np.where(new >= 0, abs(rearm), -abs(rearm)) for new in news]
    for gs, new in zip(gate_sets, news):
        gs.g_hat[:] = new


def train_step(state: TrainState, batch: tuple[np.ndarray, np.ndarray]) -> dict:
    """Forward, budget-weighted loss, corrected backward, then update W, bias, levels and gates.

    Overflow is detected by explicit finiteness checks and reported as
    :class:`TrainingDiverged`, so numpy's own warnings are silenced here.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        return _train_step(state, batch)


def _train_step(state: TrainState, batch: tuple[np.ndarray, np.ndarray]) -> dict:
    cfg, net = state.cfg, state.net
    x, y = batch
    net.zero_grad()
    logits = net(Tensor(x), training=True)
    try:
        task = ad.softmax_cross_entropy(logits, y)
    except TrainingDiverged as exc:
        raise TrainingDiverged(f"non-finite loss at step {state.step}", step=state.step) from exc
    s = net.bits()
    gated = cfg.learns_gates
    multiplier = state.budget.multiplier(s) if gated else 1.0
    loss = ad.mul(task, multiplier) if gated else task
    loss.backward()

    penalty = penalty_gate_gradients(task.item(), state.budget, s, MIN_BITS) if gated else np.zeros(len(s))
    updates = []
    for l, layer in enumerate(net.layers):
        for q in layer.quantizers:
            if not q.enabled or not (q.learn_levels or q.learn_gates):
                continue
            extra = penalty[l] if q is layer.weight_q else 0.0
            grad_qt, grad_g = q.parameter_gradients(extra)
            if not (np.all(np.isfinite(grad_qt)) and np.all(np.isfinite(grad_g))):
                raise TrainingDiverged(f"non-finite quantizer gradient at step {state.step}", step=state.step)
            updates.append((q, grad_qt, grad_g))
    state.opt.step()
    if not all(np.all(np.isfinite(t.data)) for t in net.weights):
        raise TrainingDiverged(f"non-finite weights after step {state.step}", step=state.step)
    for q, grad_qt, grad_g in updates:
        if q.learn_levels and cfg.lr_levels:
            level_step(q, grad_qt, cfg.lr_levels)
    gated_sites = [(q.gates, grad_g) for q, _, grad_g in updates if q.learn_gates]
    if gated_sites:
        gate_step(*zip(*gated_sites), cfg.lr_gates, MIN_BITS, rearm=cfg.gate_init)

    bits_after = net.bits()
    row = {
        "step": state.step,
        "loss": float(loss.item()),
        "multiplier": float(multiplier),
        "zeta_ratio": state.budget.ratio(bits_after) if net.qc.enabled else float("nan"),
    }
    for i, b in enumerate(bits_after):
        row[f"layer_{i}_bits"] = b
    qerr = net.quantization_errors()
    if not np.all(np.isfinite(qerr)):
        raise TrainingDiverged(f"non-finite quantization error at step {state.step}", step=state.step)
    for i, e in enumerate(qerr):
        row[f"layer_{i}_qerr"] = e
    state.log.append(row)
    state.step += 1
    return row


def evaluate(net: QuantNetwork, x: np.ndarray, y: np.ndarray) -> float:
    if len(x) == 0:
        raise ValueError("cannot evaluate on an empty set")
    return float(np.mean(net.predict(x).argmax(axis=1) == y))


@dataclass
class TrainResult:
    state: TrainState
    test_accuracy: float
    dataset: Dataset

    @property
    def net(self) -> QuantNetwork:
        return self.state.net

    def summary(self) -> dict:
        net, budget = self.state.net, self.state.budget
        bits = net.bits()
        qerr = net.quantization_errors()
        return {
            "top1": self.test_accuracy,
            "zeta_ratio": budget.ratio(bits) if net.qc.enabled else None,
            "mean_qerr": float(np.mean(qerr)),
            "steps": self.state.step,
            "layers": [
                {"index": i, "kind": l.kind, "params": l.param_count, "bits": b, "qerr": e}
                for i, (l, b, e) in enumerate(zip(net.layers, bits, qerr))
            ],
        }


def train(cfg: TrainConfig, dataset: Dataset | None = None, out_dir=None, warm_start=None) -> TrainResult:
    """Run the full loop; deterministic for a given config on one thread.

    With ``out_dir`` set, a checkpoint is written at every eval point and at
    the end. A divergence re-raises with ``last_checkpoint`` attached.
    """
    ds = dataset if dataset is not None else load(cfg.dataset)
    net = build_network(cfg, ds.input_shape)
    if warm_start is not None:
        _, arrays, _ = checkpoint.load(warm_start)
        for i, layer in enumerate(net.layers):
            layer.weight.data[...] = arrays[f"layer{i}.weight"]
            layer.bias.data[...] = arrays[f"layer{i}.bias"]
    state = TrainState(cfg, net)
    rng = np.random.default_rng(cfg.seed + 1)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.ddq1" if out is not None else None
    last_ckpt = None
    n = len(ds.x_train)
    try:
        for epoch in range(cfg.epochs):
            if cfg.lr_decay_epochs and epoch and epoch % cfg.lr_decay_epochs == 0:
                state.opt.lr *= cfg.lr_decay
            order = rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                train_step(state, (ds.x_train[idx], ds.y_train[idx]))
                if cfg.eval_every and state.step % cfg.eval_every == 0:
                    acc = evaluate(net, ds.x_test, ds.y_test)
                    state.evals.append({"step": state.step, "top1": acc})
                    if ckpt_path is not None:
                        checkpoint.save(ckpt_path, cfg.to_dict(), net, {"step": state.step, "input_shape": list(ds.input_shape)})
                        last_ckpt = ckpt_path
            log.debug("epoch %d loss %.4f bits %s", epoch, state.log[-1]["loss"] if state.log else float("nan"), net.bits())
    except TrainingDiverged as exc:
        exc.last_checkpoint = last_ckpt
        raise
    acc = evaluate(net, ds.x_test, ds.y_test)
    if ckpt_path is not None:
        checkpoint.save(ckpt_path, cfg.to_dict(), net, {"step": state.step, "input_shape": list(ds.input_shape)})
    return TrainResult(state, acc, ds)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def metrics_csv(state: TrainState) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = metric_header(state.layer_count)
    w.writerow(header)
    for row in state.log:
        w.writerow([_fmt(row[h]) for h in header])
    return buf.getvalue()


def bits_csv(state: TrainState) -> str:
    """Per-layer bitwidth trace, one row per step."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step"] + [f"layer_{i}" for i in range(state.layer_count)])
    for row in state.log:
        w.writerow([row["step"]] + [row[f"layer_{i}_bits"] for i in range(state.layer_count)])
    return buf.getvalue()


def restore(path) -> tuple[TrainConfig, QuantNetwork, dict]:
    """Rebuild a network from a ``DDQ1`` checkpoint."""
    config, arrays, extra = checkpoint.load(path)
    cfg = TrainConfig.from_dict(config)
    shape = extra.get("input_shape")
    if shape is None:
        raise checkpoint.CorruptCheckpoint("checkpoint lacks the input shape")
    net = build_network(cfg, shape)
    checkpoint.load_network_arrays(net, arrays)
    return cfg, net, extra

