"""Tabular artifacts (CSV/JSON) and the figures rendered next to them."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

HIST_BINS = 64
LEVELS_HEADER = ["layer", "channel", "index", "code", "value", "effective_value"]
HIST_HEADER = ["layer", "bin", "lo", "hi", "count"]
ABLATION_HEADER = [
    "suite", "method", "seed", "max_bits", "target_bits", "act_bits", "lambda",
    "top1", "delta_top1", "mean_qerr", "zeta_ratio", "bits", "status",
]
SUMMARY_KEYS = ("top1", "zeta_ratio", "mean_qerr", "steps", "layers")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def read_csv(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default)


def _json_default(v):
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"cannot serialize {type(v).__name__}")


# ----- per-layer dumps -----

def level_rows(net) -> list[list]:
    """One row per stored level of every weight site (2**b rows per channel)."""
    rows = []
    for i, layer in enumerate(net.layers):
        q = layer.weight_q
        q_hat = q.q_hat_matrix()
        for c, lv in enumerate(q.levels):
            codes = lv.codes()
            values = lv.q
            for k in range(lv.n):
                rows.append([i, c, k, int(codes[k]), float(values[k]), float(q_hat[c, k])])
    return rows


def histogram_rows(net, bins: int = HIST_BINS) -> list[list]:
    """Fixed-bin histogram of every layer's float kernel; counts sum to the parameter count."""
    rows = []
    for i, layer in enumerate(net.layers):
        w = layer.weight.data.reshape(-1)
        lo, hi = float(w.min()), float(w.max())
        if hi <= lo:
            hi = lo + 1.0
        counts, edges = np.histogram(w, bins=bins, range=(lo, hi))
        for k in range(bins):
            rows.append([i, k, float(edges[k]), float(edges[k + 1]), int(counts[k])])
    return rows


# ----- figures -----

def _save(fig, path: Path):
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_training(log: list[dict], layers: int, out_dir) -> list[Path]:
    """Loss, footprint ratio and per-layer bitwidth traces from a metric log."""
    out = Path(out_dir)
    if not log:
        return []
    steps = np.array([r["step"] for r in log])
    paths = []

    fig, ax = plt.subplots(figsize=(6, 3.4))
    ax.plot(steps, [r["loss"] for r in log], lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    _save(fig, out / "loss.png")
    paths.append(out / "loss.png")

    fig, ax = plt.subplots(figsize=(6, 3.4))
    for i in range(layers):
        ax.step(steps, [r[f"layer_{i}_bits"] for r in log], where="post", label=f"layer {i}")
    ax.set_xlabel("step")
    ax.set_ylabel("weight bits")
    ax.legend(fontsize=8, ncol=2)
    _save(fig, out / "bits.png")
    paths.append(out / "bits.png")

    fig, ax = plt.subplots(figsize=(6, 3.4))
    for i in range(layers):
        ax.plot(steps, [r[f"layer_{i}_qerr"] for r in log], lw=1, label=f"layer {i}")
    ax.set_xlabel("step")
    ax.set_ylabel("quantization error")
    ax.set_yscale("log")
    ax.legend(fontsize=8, ncol=2)
    _save(fig, out / "qerr.png")
    paths.append(out / "qerr.png")
    return paths


def plot_layers(net, out_dir, bins: int = HIST_BINS) -> list[Path]:
    """Weight histogram per layer with the effective levels overlaid."""
    out = Path(out_dir)
    paths = []
    for i, layer in enumerate(net.layers):
        w = layer.weight.data.reshape(-1)
        fig, ax = plt.subplots(figsize=(6, 3.2))
        ax.hist(w, bins=bins, color="0.6")
        q = layer.weight_q
        if q.enabled:
            for v in np.unique(q.table()[0]):
                ax.axvline(v, color="C3", lw=0.6)
        ax.set_title(f"layer {i} ({layer.kind}, {q.s if q.enabled else 32} bits)", fontsize=9)
        ax.set_xlabel("weight")
        path = out / f"layer_{i}_levels.png"
        _save(fig, path)
        paths.append(path)
    return paths


def plot_ablation(rows: list[dict], out_path) -> Path | None:
    ok = [r for r in rows if r["status"] == "ok"]
    if not ok:
        return None
    labels = [f"{r['method']}\nseed {r['seed']}" for r in ok]
    fig, ax = plt.subplots(figsize=(max(4, 0.9 * len(ok)), 3.4))
    ax.bar(range(len(ok)), [r["top1"] for r in ok], color="C0")
    ax.set_xticks(range(len(ok)))
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylabel("top-1")
    lo = min(r["top1"] for r in ok)
    ax.set_ylim(max(0.0, lo - 0.1), 1.0)
    _save(fig, Path(out_path))
    return Path(out_path)
