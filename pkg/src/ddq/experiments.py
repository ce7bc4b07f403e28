"""Desk-scale presets and the paired ablation suites."""

from __future__ import annotations

import copy
import logging
from dataclasses import replace

from .autodiff import TrainingDiverged
from .data import Dataset, load
from .report import ABLATION_HEADER, write_csv
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)

# Gate settings for runs of a few hundred steps. The TrainConfig defaults
# (alpha -0.02, gate lr 1e-8) leave the gates essentially frozen here.
DESK_GATES = {"alpha": -0.2, "lr_gates": 1e-7}

PRESETS = {
    "smoke": {"epochs": 2, "dataset": {"name": "synthetic", "n_train": 600, "n_test": 300}, **DESK_GATES},
    "full": {"epochs": 8, "dataset": {"name": "synthetic", "n_train": 2000, "n_test": 1000}, **DESK_GATES},
}

SUITES = ("adaptive-resolution", "grad-correction", "mixed-precision")

MISSING = "-"


class UnknownSuite(ValueError):
    pass


def preset(name: str) -> dict:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return copy.deepcopy(PRESETS[name])


def suite_cells(suite: str, cfg: TrainConfig) -> list[tuple[str, TrainConfig]]:
    """The (method label, config) pairs a suite trains, in table order."""
    t = cfg.target_bits
    if suite == "adaptive-resolution":
        return [
            ("float", replace(cfg, mode="float")),
            ("uq", replace(cfg, mode="uq", fixed_precision=t)),
            ("pot", replace(cfg, mode="pot", fixed_precision=t)),
            ("ddq-fixed", replace(cfg, mode="ddq", fixed_precision=t)),
            ("ddq-fixed-2", replace(cfg, mode="ddq", fixed_precision=2)),
        ]
    if suite == "grad-correction":
        return [
            ("lambda-0", replace(cfg, mode="ddq", fixed_precision=t, lam=0.0)),
            ("lambda-default", replace(cfg, mode="ddq", fixed_precision=t)),
        ]
    if suite == "mixed-precision":
        return [
            ("ddq-fixed", replace(cfg, mode="ddq", fixed_precision=t)),
            ("ddq-mixed", replace(cfg, mode="ddq", fixed_precision=None)),
        ]
    raise UnknownSuite(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}")


def run_cell(suite: str, method: str, cfg: TrainConfig, dataset: Dataset) -> dict:
    row = {
        "suite": suite, "method": method, "seed": cfg.seed,
        "max_bits": cfg.weight_bits if cfg.mode != "float" else 32,
        "target_bits": cfg.target_bits, "act_bits": cfg.act_bits if cfg.act_bits is not None else "off",
        "lambda": cfg.lam,
    }
    try:
        result = train(cfg, dataset)
    except TrainingDiverged as exc:
        log.warning("%s/%s seed %d diverged: %s", suite, method, cfg.seed, exc)
        row.update(top1=None, mean_qerr=None, zeta_ratio=None, bits=None, status="diverged")
        return row
    s = result.summary()
    row.update(
        top1=s["top1"], mean_qerr=s["mean_qerr"], zeta_ratio=s["zeta_ratio"],
        bits="/".join(str(layer["bits"]) for layer in s["layers"]), status="ok",
    )
    return row


def run_suite(suite: str, cfg: TrainConfig, seeds=None, dataset: Dataset | None = None) -> list[dict]:
    """Train every cell of ``suite`` for each seed; divergent cells are kept with status 'diverged'."""
    seeds = [cfg.seed] if seeds is None else list(seeds)
    suite_cells(suite, cfg)  # validate the name before loading data
    ds = dataset if dataset is not None else load(cfg.dataset)
    rows = []
    for seed in seeds:
        cells = suite_cells(suite, replace(cfg, seed=seed))
        block = [run_cell(suite, method, c, ds) for method, c in cells]
        base = block[0]["top1"]
        for r in block:
            r["delta_top1"] = None if base is None or r["top1"] is None else r["top1"] - base
        rows.extend(block)
    return rows


def ablation_csv(rows: list[dict]) -> str:
    """Comparison table; cells of a diverged run read '-'."""
    metrics = ("top1", "delta_top1", "mean_qerr", "zeta_ratio", "bits")
    table = []
    for r in rows:
        diverged = r["status"] != "ok"
        table.append([MISSING if diverged and h in metrics else r.get(h) for h in ABLATION_HEADER])
    return write_csv(ABLATION_HEADER, table)
