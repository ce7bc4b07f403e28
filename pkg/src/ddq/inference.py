"""Deployment path: packed level indices, shared level tables and lookup forward.

``DDQM`` layout (little-endian)::

    b"DDQM" u16 version u16 layer_count u16[3] input_shape
    per layer:
        u8 kind (0 conv, 1 dense)  u8 relu  u8 ndim  u32[ndim] weight shape
        u16 stride  u16 padding  u16 groups
        weight site                (see _write_site)
        packed weight indices      ceil(n_weights * s / 8) bytes
        packed bias indices        ceil(out * s / 8) bytes
        u8 activation enabled, then the activation site when enabled

A site is ``u8 b, u8 s, u8 b_q, u16 channels, f64[channels][2] ranges,
u8 code_width`` followed by ``channels * 2**s`` unsigned code sums of
``code_width`` bytes each. Entry ``k`` of a table is the sum of the
``2**(b - s)`` storage codes merged into effective level ``k``; it is
decoded with the same routine the training forward uses, so both paths see
bit-identical level values.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .autodiff import Tensor
from .levels import decode_code_sums
from .quantizer import nearest_level

MAGIC = b"DDQM"
VERSION = 1
KINDS = ("conv", "dense")


class ExportError(ValueError):
    pass


class CorruptModel(ValueError):
    pass


# ----- bit packing -----

def pack_indices(indices: np.ndarray, s: int) -> bytes:
    """Pack non-negative integers below 2**s into s bits each, LSB first, row-major."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if s == 0 or idx.size == 0:
        return b""
    if idx.min(initial=0) < 0 or idx.max(initial=0) >= 2 ** s:
        raise ExportError(f"index out of range for {s}-bit packing")
    bits = (idx[:, None] >> np.arange(s)) & 1
    return np.packbits(bits.astype(np.uint8).reshape(-1), bitorder="little").tobytes()


def unpack_indices(blob: bytes, count: int, s: int) -> np.ndarray:
    if s == 0 or count == 0:
        return np.zeros(count, dtype=np.int64)
    need = packed_size(count, s)
    if len(blob) < need:
        raise CorruptModel(f"index stream has {len(blob)} bytes, needs {need}")
    bits = np.unpackbits(np.frombuffer(blob, dtype=np.uint8, count=need), count=count * s, bitorder="little")
    return bits.reshape(count, s).astype(np.int64) @ (1 << np.arange(s, dtype=np.int64))


def packed_size(count: int, s: int) -> int:
    return (count * s + 7) // 8


# ----- tables -----

@dataclass(frozen=True)
class SiteTable:
    """Effective levels of one quantization site, kept as block code sums."""

    b: int
    s: int
    b_q: int
    ranges: np.ndarray  # channels x 2
    sums: np.ndarray  # channels x 2**s

    @property
    def channels(self) -> int:
        return len(self.ranges)

    @property
    def block(self) -> int:
        return 2 ** (self.b - self.s)

    def values(self) -> np.ndarray:
        """Decoded levels, channels x 2**s, ascending per channel."""
        return np.stack([decode_code_sums(row, self.block, self.b, self.b_q, lo, hi)
                         for row, (lo, hi) in zip(self.sums, self.ranges)])

    def affine(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel ``(offset, step)`` with value = offset + step * code_sum (before clipping)."""
        n = 2 ** self.b
        code_step = (n - 1) / (2 ** self.b_q - 1)
        scale = (self.ranges[:, 1] - self.ranges[:, 0]) / (n - 1)
        return self.ranges[:, 0].copy(), code_step * scale / self.block

    @classmethod
    def from_quantizer(cls, q) -> SiteTable:
        return cls(q.b, q.s, q.b_q, q.ranges.copy(), q.code_sums())


def quantize_codes(x: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Table index of the nearest level for every element (rows = channels)."""
    return np.stack([nearest_level(row, t) for row, t in zip(x, table)])


# ----- packed layer -----

@dataclass(frozen=True)
class PackedLayer:
    kind: str
    shape: tuple[int, ...]
    stride: int
    padding: int
    groups: int
    relu: bool
    weight: SiteTable
    weight_indices: bytes
    bias_indices: bytes
    act: SiteTable | None

    @property
    def out(self) -> int:
        return self.shape[0]

    @property
    def s(self) -> int:
        return self.weight.s

    @property
    def weight_count(self) -> int:
        return int(np.prod(self.shape))

    def indices(self) -> tuple[np.ndarray, np.ndarray]:
        """Unpacked (weight, bias) table indices, shaped channels x elements."""
        c = self.weight.channels
        w = unpack_indices(self.weight_indices, self.weight_count, self.s).reshape(c, -1)
        bias = unpack_indices(self.bias_indices, self.out, self.s).reshape(c, -1)
        return w, bias

    def _check(self, idx: np.ndarray):
        if idx.size and idx.max() >= self.weight.sums.shape[1]:
            raise CorruptModel(f"index {idx.max()} outside a table of {self.weight.sums.shape[1]} levels")

    def decode(self) -> tuple[np.ndarray, np.ndarray]:
        """Dequantized ``(W_q, bias_q)`` by table lookup."""
        w_idx, b_idx = self.indices()
        self._check(w_idx)
        self._check(b_idx)
        table = self.weight.values()
        rows = np.arange(len(table))[:, None]
        return table[rows, w_idx].reshape(self.shape), table[rows, b_idx].reshape(self.out)

    def quantize_input(self, y: np.ndarray) -> np.ndarray:
        if self.act is None:
            return y
        table = self.act.values()
        idx = nearest_level(y, table[0])
        return table[0][idx]


def _cols(x: np.ndarray, kernel: tuple[int, int], stride: int, padding: int, c_per: int, gi: int) -> np.ndarray:
    """im2col for group ``gi``; rows ordered (n, ho, wo), columns (c, kh, kw)."""
    kh, kw = kernel
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    xs = win[:, gi * c_per:(gi + 1) * c_per]
    n, _, ho, wo = xs.shape[:4]
    return xs.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, -1), (n, ho, wo)


def lookup_forward(packed: PackedLayer, x_q: np.ndarray, mode: str = "float") -> np.ndarray:
    """Pre-activation output of a packed layer for already-quantized inputs.

    ``mode="float"`` decodes weights from the table and runs the same
    float64 arithmetic as the training forward. ``mode="integer"``
    accumulates activation codes times weight code sums in int64 and
    rescales once per output channel.
    """
    x_q = np.asarray(x_q, dtype=np.float64)
    if mode == "float":
        w, bias = packed.decode()
        if packed.kind == "conv":
            out = ad.conv2d(Tensor(x_q), Tensor(w), Tensor(bias), packed.stride, packed.padding, packed.groups)
        else:
            x2 = ad.flatten(Tensor(x_q)) if x_q.ndim != 2 else Tensor(x_q)
            out = ad.add(ad.matmul(x2, ad.transpose(Tensor(w))), Tensor(bias))
        return out.data
    if mode != "integer":
        raise ValueError(f"unknown mode {mode!r}")
    if packed.act is None:
        raise ValueError("integer mode needs a quantized activation site")
    return _integer_forward(packed, x_q)


def _integer_forward(packed: PackedLayer, x_q: np.ndarray) -> np.ndarray:
    w_idx, b_idx = packed.indices()
    packed._check(w_idx)
    wt = packed.weight
    # weight code sum per element and per-output-channel affine map
    k_w = np.take_along_axis(wt.sums, w_idx, axis=1).reshape(packed.shape)
    a_w, d_w = wt.affine()
    if wt.channels == 1:
        a_w = np.full(packed.out, a_w[0])
        d_w = np.full(packed.out, d_w[0])
    else:
        a_w = np.repeat(a_w, packed.out // wt.channels)
        d_w = np.repeat(d_w, packed.out // wt.channels)
    act = packed.act
    act_table = act.values()[0]
    k_x = act.sums[0][nearest_level(x_q, act_table)]
    a_x, d_x = (float(v[0]) for v in act.affine())
    _, bias = packed.decode()

    if packed.kind == "conv":
        c_out, c_per, kh, kw = packed.shape
        og = c_out // packed.groups
        valid = np.ones_like(k_x)
        parts = []
        for gi in range(packed.groups):
            col_k, dims = _cols(k_x, (kh, kw), packed.stride, packed.padding, c_per, gi)
            col_v, _ = _cols(valid, (kh, kw), packed.stride, packed.padding, c_per, gi)
            wk = k_w[gi * og:(gi + 1) * og].reshape(og, -1)
            parts.append((col_k @ wk.T, col_k.sum(axis=1), col_v @ wk.T, col_v.sum(axis=1)))
        kk = np.concatenate([p[0] for p in parts], axis=1)
        sx = np.concatenate([np.repeat(p[1][:, None], og, axis=1) for p in parts], axis=1)
        sw = np.concatenate([p[2] for p in parts], axis=1)
        cnt = np.concatenate([np.repeat(p[3][:, None], og, axis=1) for p in parts], axis=1)
        n, ho, wo = dims
    else:
        k2 = k_x.reshape(len(k_x), -1)
        kk = k2 @ k_w.T
        sx = np.repeat(k2.sum(axis=1)[:, None], packed.out, axis=1)
        sw = np.broadcast_to(k_w.sum(axis=1), kk.shape)
        cnt = np.full(kk.shape, k2.shape[1])
    out = (d_w * d_x) * kk + (a_w * d_x) * sx + (d_w * a_x) * sw + (a_w * a_x) * cnt + bias
    if packed.kind == "conv":
        out = out.reshape(n, ho, wo, packed.out).transpose(0, 3, 1, 2)
    return out


# ----- model -----

class InferenceModel:
    """A stack of packed layers with the training network's forward semantics."""

    def __init__(self, input_shape, layers: list[PackedLayer]):
        self.input_shape = tuple(int(v) for v in input_shape)
        self.layers = list(layers)

    @classmethod
    def from_network(cls, net) -> InferenceModel:
        return cls(net.input_shape, [_pack_layer(layer) for layer in net.layers])

    def forward(self, x: np.ndarray, mode: str = "float") -> np.ndarray:
        y = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            y = lookup_forward(layer, layer.quantize_input(y), mode)
            if layer.relu:
                y = np.maximum(y, 0.0)
        return y

    def predict(self, x: np.ndarray, batch_size: int = 256, mode: str = "float") -> np.ndarray:
        out = [self.forward(x[i:i + batch_size], mode) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, 0))

    @property
    def param_counts(self) -> list[int]:
        return [layer.weight_count for layer in self.layers]

    @property
    def bits(self) -> list[int]:
        return [layer.s for layer in self.layers]

    def to_bytes(self) -> bytes:
        return export_model(self)


def _pack_layer(layer) -> PackedLayer:
    spec = layer.spec
    if spec.kind not in KINDS:
        raise ExportError(f"unsupported layer kind {spec.kind!r}")
    wq = layer.weight_q
    if not wq.enabled:
        raise ExportError("cannot export a layer without weight quantization")
    # the eval forward refreshes the weight range from W and bias; do the same
    rows = wq.rows(layer.weight.data)
    brows = layer.bias.data.reshape(wq.channels, -1)
    wq.observe(np.concatenate([rows, brows], axis=1), False)
    site = SiteTable.from_quantizer(wq)
    table = site.values()
    w_idx = quantize_codes(rows, table)
    b_idx = quantize_codes(brows, table)
    act = SiteTable.from_quantizer(layer.act_q) if layer.act_q.enabled else None
    return PackedLayer(
        spec.kind, tuple(layer.weight.shape), spec.stride, spec.padding, spec.groups, bool(spec.relu),
        site, pack_indices(w_idx, site.s), pack_indices(b_idx, site.s), act,
    )


# ----- serialization -----

def _code_width(sums: np.ndarray) -> int:
    top = int(sums.max(initial=0))
    return 1 if top < 1 << 8 else 2 if top < 1 << 16 else 4


def _write_site(buf, site: SiteTable):
    buf.write(struct.pack("<BBBH", site.b, site.s, site.b_q, site.channels))
    buf.write(np.ascontiguousarray(site.ranges, dtype="<f8").tobytes())
    width = _code_width(site.sums)
    buf.write(struct.pack("<B", width))
    buf.write(np.ascontiguousarray(site.sums, dtype=f"<u{width}").tobytes())


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CorruptModel("model file is truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()


def _read_site(r: _Reader) -> SiteTable:
    b, s, b_q, channels = r.unpack("<BBBH")
    if not (1 <= b <= 16 and s <= b and b_q >= 1 and channels >= 1):
        raise CorruptModel(f"bad site header b={b} s={s} b_q={b_q} channels={channels}")
    ranges = r.array("<f8", 2 * channels).reshape(channels, 2)
    (width,) = r.unpack("<B")
    if width not in (1, 2, 4):
        raise CorruptModel(f"bad code width {width}")
    sums = r.array(f"<u{width}", channels * 2 ** s).astype(np.int64).reshape(channels, 2 ** s)
    if np.any(np.diff(sums, axis=1) < 0):
        raise CorruptModel("level table is not sorted")
    return SiteTable(b, s, b_q, ranges, sums)


def export_model(model: InferenceModel) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HH", VERSION, len(model.layers)))
    buf.write(struct.pack("<3H", *model.input_shape))
    for layer in model.layers:
        buf.write(struct.pack("<BBB", KINDS.index(layer.kind), int(layer.relu), len(layer.shape)))
        buf.write(struct.pack(f"<{len(layer.shape)}I", *layer.shape))
        buf.write(struct.pack("<HHH", layer.stride, layer.padding, layer.groups))
        _write_site(buf, layer.weight)
        buf.write(layer.weight_indices)
        buf.write(layer.bias_indices)
        buf.write(struct.pack("<B", layer.act is not None))
        if layer.act is not None:
            _write_site(buf, layer.act)
    return buf.getvalue()


def export(net) -> bytes:
    """Serialize a trained network to ``DDQM`` bytes."""
    return export_model(InferenceModel.from_network(net))


def import_model(blob: bytes) -> InferenceModel:
    r = _Reader(bytes(blob))
    if r.take(4) != MAGIC:
        raise CorruptModel("not a DDQM model")
    version, count = r.unpack("<HH")
    if version != VERSION:
        raise CorruptModel(f"unsupported model version {version}")
    input_shape = r.unpack("<3H")
    layers = []
    for _ in range(count):
        kind_id, relu, ndim = r.unpack("<BBB")
        if kind_id >= len(KINDS) or ndim not in (2, 4):
            raise CorruptModel(f"bad layer header kind={kind_id} ndim={ndim}")
        shape = r.unpack(f"<{ndim}I")
        stride, padding, groups = r.unpack("<HHH")
        site = _read_site(r)
        if shape[0] % site.channels:
            raise CorruptModel(f"{site.channels} tables for {shape[0]} output channels")
        n_w = int(np.prod(shape))
        w_blob = r.take(packed_size(n_w, site.s))
        b_blob = r.take(packed_size(shape[0], site.s))
        (has_act,) = r.unpack("<B")
        act = _read_site(r) if has_act else None
        layers.append(PackedLayer(KINDS[kind_id], tuple(shape), stride, padding, groups, bool(relu),
                                  site, w_blob, b_blob, act))
    if r.pos != len(r.blob):
        raise CorruptModel(f"{len(r.blob) - r.pos} trailing bytes after the last layer")
    return InferenceModel(input_shape, layers)


def save(path, model: InferenceModel | bytes):
    blob = model if isinstance(model, (bytes, bytearray)) else export_model(model)
    Path(path).write_bytes(blob)


def load(path) -> InferenceModel:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptModel(f"cannot read {path}: {exc}") from exc
    return import_model(blob)


def describe(blob: bytes) -> dict:
    """Header and per-layer summary of a ``DDQM`` file as a JSON-ready dict."""
    model = import_model(blob)
    layers = []
    for i, layer in enumerate(model.layers):
        layers.append({
            "index": i,
            "kind": layer.kind,
            "shape": list(layer.shape),
            "bits": layer.s,
            "max_bits": layer.weight.b,
            "b_q": layer.weight.b_q,
            "channels": layer.weight.channels,
            "ranges": layer.weight.ranges.tolist(),
            "levels": layer.weight.values().tolist(),
            "index_bytes": len(layer.weight_indices) + len(layer.bias_indices),
            "activation_bits": layer.act.s if layer.act is not None else None,
        })
    return {
        "format": MAGIC.decode(),
        "version": VERSION,
        "input_shape": list(model.input_shape),
        "size_bytes": len(blob),
        "weight_index_bits": sum(l.weight_count * l.s for l in model.layers),
        "layers": layers,
    }


def describe_json(blob: bytes) -> str:
    return json.dumps(describe(blob), indent=2, sort_keys=True)
