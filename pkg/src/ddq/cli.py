"""Command line: train, eval, export, inspect, ablate.

Configuration precedence, lowest first: built-in defaults, ``--preset``,
the ``--config`` YAML file, then individual flags.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import checkpoint, inference, report
from .autodiff import TrainingDiverged
from .data import DatasetError, load
from .experiments import PRESETS, SUITES, UnknownSuite, ablation_csv, preset, run_suite
from .network import MemoryBudget
from .trainer import ConfigError, TrainConfig, bits_csv, evaluate, metrics_csv, restore, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3

log = logging.getLogger("ddq")

DEFAULTS = TrainConfig()

# flag name -> (TrainConfig field, type, help)
OVERRIDES = {
    "seed": ("seed", int, "random seed"),
    "epochs": ("epochs", int, "training epochs"),
    "target_bits": ("target_bits", int, "average weight bitwidth the footprint budget allows"),
    "max_bits": ("max_bits", int, "largest weight bitwidth (number of gates)"),
    "bq": ("b_q", int, "storage bits of each level code"),
    "lambda": ("lam", float, "gradient-correction strength"),
    "alpha": ("alpha", float, "footprint penalty exponent (<= 0)"),
    "lr": ("lr", float, "weight learning rate"),
    "lr_gates": ("lr_gates", float, "gate learning rate"),
    "fixed_precision": ("fixed_precision", int, "freeze gates at N bits"),
    "granularity": ("granularity", str, "weight level granularity"),
}


class UsageError(ValueError):
    pass


# ----- configuration -----

def _normalize_keys(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        k = str(k).replace("-", "_")
        out["lam" if k == "lambda" else k] = v
    return out


def read_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise UsageError(f"config {path} is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a mapping")
    return _normalize_keys(data)


def build_config(args) -> TrainConfig:
    values: dict = {}
    if getattr(args, "preset", None):
        values.update(preset(args.preset))
    if getattr(args, "config", None):
        values.update(read_config(args.config))
    for flag, (name, _, _) in OVERRIDES.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[name] = v
    qa = getattr(args, "quantize_activations", None)
    if qa is not None:
        values["act_bits"] = None if qa == "off" else int(qa)
    try:
        return TrainConfig.from_dict(values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML file with TrainConfig keys")
    p.add_argument("--preset", choices=sorted(PRESETS), help="desk-scale preset applied before the config file")
    for flag, (name, typ, text) in OVERRIDES.items():
        kw = {"choices": ["layer", "channel"]} if flag == "granularity" else {}
        p.add_argument("--" + flag.replace("_", "-"), dest=flag, type=typ, default=None,
                       help=f"{text} (default: {getattr(DEFAULTS, name)})", **kw)
    p.add_argument("--quantize-activations", choices=["4", "8", "off"], default=None,
                   help=f"activation bits (default: {DEFAULTS.act_bits})")


# ----- helpers -----

def _write(out: Path, name: str, text: str) -> Path:
    path = out / name
    path.write_text(text)
    return path


def _print_summary(summary: dict, as_json: bool):
    if as_json:
        print(report.dump_json(summary))
        return
    ratio = summary.get("zeta_ratio")
    print(f"top1        {summary['top1']:.4f}")
    if summary.get("mean_qerr") is not None:
        print(f"mean qerr   {summary['mean_qerr']:.6g}")
    print(f"zeta ratio  {'n/a' if ratio is None else f'{ratio:.4f}'}")
    for layer in summary["layers"]:
        qerr = layer.get("qerr")
        extra = "" if qerr is None else f"  qerr {qerr:.6g}"
        print(f"  layer {layer['index']} {layer['kind']:5s} params {layer['params']:6d}  bits {layer['bits']}{extra}")


def _is_model_file(path) -> bool:
    try:
        with open(path, "rb") as fh:
            return fh.read(4) == inference.MAGIC
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc


# ----- commands -----

def cmd_train(args) -> int:
    cfg = build_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = load(cfg.dataset)
    try:
        result = train(cfg, ds, out_dir=out)
    except TrainingDiverged as exc:
        print(f"error: training diverged at step {exc.step}: {exc}", file=sys.stderr)
        if getattr(exc, "last_checkpoint", None):
            print(f"last checkpoint: {exc.last_checkpoint}", file=sys.stderr)
        return EXIT_DIVERGED
    state = result.state
    _write(out, "metrics.csv", metrics_csv(state))
    _write(out, "bits.csv", bits_csv(state))
    summary = result.summary()
    _write(out, "summary.json", report.dump_json(summary) + "\n")
    report.plot_training(state.log, state.layer_count, out)
    _print_summary(summary, args.json)
    return EXIT_OK


def _eval_dataset(args, fallback: dict) -> dict:
    spec = dict(fallback)
    if args.preset:
        spec = preset(args.preset)["dataset"]
    if args.config:
        spec = read_config(args.config).get("dataset", spec)
    if args.dataset:
        spec = {"name": args.dataset}
    return spec


def cmd_eval(args) -> int:
    path = Path(args.artifact)
    if not path.exists():
        raise UsageError(f"no such file: {path}")
    if _is_model_file(path):
        model = inference.load(path)
        ds = load(_eval_dataset(args, {"name": "synthetic"}))
        if len(ds.x_test) == 0:
            raise DatasetError("dataset is empty")
        pred = model.predict(ds.x_test).argmax(axis=1)
        budget = MemoryBudget(model.param_counts, [args.target_bits] * len(model.layers))
        summary = {
            "top1": float(np.mean(pred == ds.y_test)),
            "zeta_ratio": budget.ratio(model.bits),
            "mean_qerr": None,
            "layers": [
                {"index": i, "kind": l.kind, "params": l.weight_count, "bits": l.s, "qerr": None}
                for i, l in enumerate(model.layers)
            ],
        }
    else:
        cfg, net, _ = restore(path)
        ds = load(_eval_dataset(args, cfg.dataset))
        qerr = net.quantization_errors()
        budget = MemoryBudget(net.param_counts, [cfg.target_bits] * len(net.layers), cfg.alpha, cfg.footprint)
        bits = net.bits()
        summary = {
            "top1": evaluate(net, ds.x_test, ds.y_test),
            "zeta_ratio": budget.ratio(bits) if net.qc.enabled else None,
            "mean_qerr": float(np.mean(qerr)),
            "layers": [
                {"index": i, "kind": l.kind, "params": l.param_count, "bits": b, "qerr": e}
                for i, (l, b, e) in enumerate(zip(net.layers, bits, qerr))
            ],
        }
    _print_summary(summary, args.json)
    return EXIT_OK


def cmd_export(args) -> int:
    _, net, _ = restore(args.checkpoint)
    blob = inference.export(net)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(blob)
    info = inference.describe(blob)
    if args.json:
        print(report.dump_json(info))
    else:
        print(f"wrote {out} ({info['size_bytes']} bytes, {info['weight_index_bits']} index bits)")
    return EXIT_OK


def cmd_inspect(args) -> int:
    _, net, _ = restore(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write(out, "levels.csv", report.write_csv(report.LEVELS_HEADER, report.level_rows(net)))
    _write(out, "histograms.csv", report.write_csv(report.HIST_HEADER, report.histogram_rows(net)))
    report.plot_layers(net, out)
    dump = {
        "layers": [
            {"index": i, "kind": l.kind, "params": l.param_count, "bits": b,
             "levels": np.unique(l.weight_q.table()).tolist() if l.weight_q.enabled else []}
            for i, (l, b) in enumerate(zip(net.layers, net.bits()))
        ]
    }
    if args.json:
        print(report.dump_json(dump))
    else:
        for layer in dump["layers"]:
            print(f"layer {layer['index']} {layer['kind']:5s} bits {layer['bits']}  {len(layer['levels'])} levels")
        print(f"wrote {out / 'levels.csv'} and {out / 'histograms.csv'}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    if args.suite not in SUITES:
        raise UsageError(f"unknown suite {args.suite!r}; choose from {', '.join(SUITES)}")
    cfg = build_config(args)
    seeds = args.seeds if args.seeds else [cfg.seed]
    rows = run_suite(args.suite, cfg, seeds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = ablation_csv(rows)
    _write(out, f"{args.suite}.csv", text)
    report.plot_ablation(rows, out / f"{args.suite}.png")
    if args.json:
        print(report.dump_json(rows))
    else:
        print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddq", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network and write metrics, bit traces and a checkpoint")
    _add_train_flags(p)
    p.add_argument("--out", default="runs/train", help="output directory")
    p.add_argument("--json", action="store_true", help="print the summary as JSON")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of a checkpoint or exported model")
    p.add_argument("artifact", help="DDQ1 checkpoint or DDQM model file")
    p.add_argument("--dataset", choices=["synthetic", "mnist"], default=None,
                   help="dataset with default sizes (default: the checkpoint's own, synthetic for model files)")
    p.add_argument("--preset", choices=sorted(PRESETS), help="take the dataset from a preset")
    p.add_argument("--config", help="take the dataset from a YAML config")
    p.add_argument("--target-bits", type=int, default=DEFAULTS.target_bits,
                   help="budget bits for the footprint ratio of a model file")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="pack a checkpoint into a DDQM model file")
    p.add_argument("checkpoint")
    p.add_argument("--out", default="model.ddqm")
    p.add_argument("--json", action="store_true", help="print the model description")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("inspect", help="per-layer level and histogram CSVs")
    p.add_argument("checkpoint")
    p.add_argument("--out", default="runs/inspect")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("ablate", help="paired comparison runs")
    p.add_argument("suite", help=f"one of {', '.join(SUITES)}")
    _add_train_flags(p)
    p.add_argument("--seeds", type=int, nargs="+", help="run every cell for each seed")
    p.add_argument("--out", default="runs/ablate")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, DatasetError, UnknownSuite, KeyError,
            checkpoint.CorruptCheckpoint, inference.CorruptModel, inference.ExportError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
