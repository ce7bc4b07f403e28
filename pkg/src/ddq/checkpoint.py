"""``DDQ1`` checkpoint container.

Layout (little-endian)::

    b"DDQ1"  u16 version  u32 header_len  header (UTF-8 JSON)  payload

The JSON header echoes the training config and lists every array as
``{"name", "shape", "offset"}``; arrays are float64 in the payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DDQ1"
VERSION = 1


class CorruptCheckpoint(ValueError):
    pass


def network_arrays(net) -> dict[str, np.ndarray]:
    arrays = {}
    for i, layer in enumerate(net.layers):
        arrays[f"layer{i}.weight"] = layer.weight.data
        arrays[f"layer{i}.bias"] = layer.bias.data
        for tag, q in (("wq", layer.weight_q), ("aq", layer.act_q)):
            arrays[f"layer{i}.{tag}.q_tilde"] = np.stack([lv.q_tilde for lv in q.levels])
            arrays[f"layer{i}.{tag}.g_hat"] = q.gates.g_hat
            arrays[f"layer{i}.{tag}.range"] = q.ranges
    return arrays


def load_network_arrays(net, arrays: dict[str, np.ndarray]):
    try:
        for i, layer in enumerate(net.layers):
            layer.weight.data[...] = arrays[f"layer{i}.weight"]
            layer.bias.data[...] = arrays[f"layer{i}.bias"]
            for tag, q in (("wq", layer.weight_q), ("aq", layer.act_q)):
                for lv, row in zip(q.levels, arrays[f"layer{i}.{tag}.q_tilde"]):
                    lv.q_tilde = row.copy()
                q.gates.g_hat[:] = arrays[f"layer{i}.{tag}.g_hat"]
                rng = arrays[f"layer{i}.{tag}.range"]
                q.set_range(rng[:, 0], rng[:, 1])
    except (KeyError, ValueError) as exc:
        raise CorruptCheckpoint(f"checkpoint does not match the network: {exc}") from exc


def dumps(config: dict, arrays: dict[str, np.ndarray], extra: dict | None = None) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"config": config, "arrays": entries, "extra": extra or {}}, sort_keys=True).encode()
    return MAGIC + struct.pack("<HI", VERSION, len(header)) + header + b"".join(blobs)


def loads(blob: bytes) -> tuple[dict, dict[str, np.ndarray], dict]:
    if len(blob) < 10 or blob[:4] != MAGIC:
        raise CorruptCheckpoint("not a DDQ1 checkpoint")
    version, hlen = struct.unpack_from("<HI", blob, 4)
    if version != VERSION:
        raise CorruptCheckpoint(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[10:10 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"unreadable header: {exc}") from exc
    payload = memoryview(blob)[10 + hlen:]
    arrays = {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        end = e["offset"] + 8 * count
        if end > len(payload):
            raise CorruptCheckpoint(f"array {e['name']} runs past the end of the file")
        arrays[e["name"]] = np.frombuffer(payload[e["offset"]:end], dtype="<f8").reshape(e["shape"]).copy()
    return header["config"], arrays, header.get("extra", {})


def save(path, config: dict, net, extra: dict | None = None):
    Path(path).write_bytes(dumps(config, network_arrays(net), extra))


def load(path) -> tuple[dict, dict[str, np.ndarray], dict]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptCheckpoint(f"cannot read {path}: {exc}") from exc
    return loads(blob)
