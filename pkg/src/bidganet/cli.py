"""``bidganet`` command line: train, infer, eval, bench, check, params.

Machine-readable output is one JSON object per line on stdout; diagnostics
go to stderr. Exit codes: 0 ok, 1 usage/config, 2 data, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import jsonschema
import numpy as np

from .bench import BenchConfig, bench_model
from .data import (class_colors, colorize, cityscapes_pairs, evaluate, load_manifest, load_sample, miou,
                   normalize, read_raster, synth_dataset, thread_count, write_raster)
from .errors import BidgError, ConfigError, DataError, NumericError, ShapeError
from .model import (FUSION_MODES, VERSIONS, NetworkConfig, build_model, count_params,
                    load_checkpoint, param_breakdown, SegModel)
from .train import TrainConfig, iters_for_epochs, train_loop

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

_INT = {"type": "integer"}
_NUM = {"type": "number"}
_BOOL = {"type": "boolean"}
_PAIR = {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2, "maxItems": 2}


def _section(props: dict) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False}


CONFIG_SCHEMA = _section({
    "seed": _INT,
    "out_dir": {"type": "string"},
    "network": _section({
        "version": {"enum": list(VERSIONS)},
        "num_classes": {"type": "integer", "minimum": 1},
        "fusion_mode": {"enum": list(FUSION_MODES)},
        "ohem": _BOOL,
        "ga_s": {"type": "integer", "minimum": 1},
        "ga_dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "seed": _INT,
        "high_res_stage_channels": {"type": "array", "items": _PAIR},
        "low_res_blocks": {"type": "array", "items": {"type": "array", "items": _INT,
                                                      "minItems": 4, "maxItems": 4}},
    }),
    "train": _section({
        "base_lr": _NUM, "momentum": _NUM, "weight_decay": _NUM,
        "total_iters": {"type": "integer", "minimum": 0},
        "epochs": {"type": "integer", "minimum": 0},
        "warmup_iters": {"type": ["integer", "null"], "minimum": 0},
        "poly_power": _NUM, "crop": _PAIR, "batch_size": {"type": "integer", "minimum": 1},
        "ohem": _BOOL, "ohem_thresh": _NUM, "ohem_min_kept": _NUM,
        "ignore_index": _INT, "seed": _INT, "log_every": _INT, "ckpt_every": _INT,
        "workers": {"type": "integer", "minimum": 1},
    }),
    "data": _section({
        "manifest": {"type": "string"},
        "cityscapes_root": {"type": "string"},
        "split": {"type": "string"},
        "scheme": {"enum": ["identity", "cityscapes19", "camvid11"]},
        "synthetic": _section({
            "n": {"type": "integer", "minimum": 1},
            "size": _PAIR,
            "classes": {"type": "integer", "minimum": 2},
            "seed": _INT,
            "noise": {"type": "number", "minimum": 0},
        }),
    }),
    "bench": _section({
        "warmup_runs": {"type": "integer", "minimum": 0},
        "timed_runs": {"type": "integer", "minimum": 1},
        "resolutions": {"type": "array", "items": _PAIR, "minItems": 1},
    }),
})


class UsageError(Exception):
    pass


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}")
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config {path}: {where}: {e.message}")
    return cfg


def _emit(obj: dict) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


def _network_config(cfg: dict, seed: Optional[int]) -> NetworkConfig:
    net = dict(cfg.get("network", {}))
    if seed is not None:
        net["seed"] = seed
    return NetworkConfig.from_dict(net)


def _dataset(data: dict, num_classes: int):
    if "manifest" in data:
        return load_manifest(data["manifest"], data.get("scheme", "identity"), num_classes)
    if "cityscapes_root" in data:
        pairs = cityscapes_pairs(data["cityscapes_root"], data.get("split", "train"))
        return [load_sample(p["image"], p["label"], p["id"], data.get("scheme", "cityscapes19"),
                            num_classes) for p in pairs]
    if "synthetic" in data:
        s = data["synthetic"]
        return synth_dataset(s.get("n", 8), tuple(s.get("size", (64, 64))),
                             s.get("classes", num_classes), s.get("seed", 0), s.get("noise", 0.05))
    raise ConfigError("data section needs one of manifest, cityscapes_root or synthetic")


# subcommands ------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config)
    net = _network_config(cfg, args.seed)
    tr = dict(cfg.get("train", {}))
    if args.seed is not None:
        tr["seed"] = args.seed
    tr.setdefault("ohem", net.ohem)
    tr["workers"] = min(tr.get("workers", 1), thread_count(tr.get("workers", 1)))
    dataset = _dataset(cfg.get("data", {}), net.num_classes)
    if "epochs" in tr:
        tr["total_iters"] = iters_for_epochs(tr.pop("epochs"), len(dataset), tr.get("batch_size", 32))
    tcfg = TrainConfig.from_dict(tr)
    out_dir = Path(args.out or cfg.get("out_dir", "runs"))
    model = build_model(net)
    report = train_loop(model, dataset, tcfg, out_dir=out_dir, log=_emit)
    _emit({"event": "done", "checkpoints": report.checkpoints,
           "final_loss": report.losses[-1] if report.losses else None})
    return EXIT_OK


def cmd_infer(args) -> int:
    model = load_checkpoint(args.ckpt)
    raw = read_raster(args.input)
    if raw.ndim != 3:
        raise DataError(f"{args.input}: expected a color (P6) image")
    pred = model.predict(normalize(raw))
    write_raster(args.out, pred)
    out = {"out": str(args.out), "shape": list(pred.shape),
           "labels": sorted(int(v) for v in np.unique(pred))}
    if args.color:
        write_raster(args.color, colorize(pred, _palette(args.palette, model.config.num_classes)))
        out["color"] = str(args.color)
    _emit(out)
    return EXIT_OK


def _palette(name: Optional[str], k: int):
    if name:
        return name
    if k == 19:
        return "cityscapes19"
    if k == 11:
        return "camvid11"
    return (class_colors(k) * 255).astype(np.uint8)


def cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    k = model.config.num_classes
    samples = load_manifest(args.manifest, args.scheme, k)
    per_class, mean = miou(evaluate(model, samples, k))
    _emit({"per_class_iou": per_class, "miou": mean, "samples": len(samples)})
    for c, v in enumerate(per_class):
        print(f"class {c:3d}  IoU {'   n/a' if v is None else f'{v:6.4f}'}", file=sys.stderr)
    print(f"mIoU {mean:.4f}", file=sys.stderr)
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = load_config(args.config)
    bcfg = BenchConfig(**cfg.get("bench", {}), seed=args.seed or 0)
    if args.ckpt:
        model = load_checkpoint(args.ckpt)
    else:
        model = build_model(_network_config(cfg, args.seed))
    for rep in bench_model(model, bcfg):
        _emit(rep)
    return EXIT_OK


def cmd_check(args) -> int:
    from .check import run_all
    ok = True
    for r in run_all(seed=args.seed or 0, quick=args.quick):
        _emit(r.to_dict())
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}  {r.value:.3g} (tol {r.tol:g})",
              file=sys.stderr)
        ok &= r.passed
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_params(args) -> int:
    cfg = NetworkConfig(version=args.version, num_classes=args.num_classes,
                        fusion_mode=args.fusion_mode)
    model = SegModel(cfg)
    _emit({"version": cfg.version, "fusion_mode": cfg.fusion_mode, "total": count_params(model),
           "breakdown": param_breakdown(model)})
    return EXIT_OK


# entry point --------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bidganet", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="output directory (default: config out_dir or ./runs)")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="predict a label map for one PPM image")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--in", dest="input", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--color", help="also write a colorized PPM here")
    i.add_argument("--palette", choices=["cityscapes19", "camvid11"])
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="per-class IoU and mIoU over a manifest")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--scheme", default="identity", choices=["identity", "cityscapes19", "camvid11"])
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="batch-1 forward latency per resolution")
    b.add_argument("--config", required=True)
    b.add_argument("--ckpt")
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("check", help="run the invariant and oracle suite")
    c.add_argument("--quick", action="store_true", help="skip end-to-end gradients and timing")
    c.set_defaults(func=cmd_check)

    q = sub.add_parser("params", help="parameter counts per version")
    q.add_argument("--version", required=True, choices=list(VERSIONS))
    q.add_argument("--num-classes", type=int, default=19)
    q.add_argument("--fusion-mode", default="dga", choices=list(FUSION_MODES))
    q.set_defaults(func=cmd_params)
    return p


def run(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    try:
        return args.func(args)
    except NumericError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ShapeError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except BidgError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())
