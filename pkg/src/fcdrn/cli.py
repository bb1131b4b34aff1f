"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .analysis import (
    ablation_sweep,
    comparison_table,
    compress,
    plot_weight_norms,
    retrain_reduced,
    weight_norms,
    write_comparison_csv,
)
from .autodiff import NumericalError
from .builder import (
    ChannelPlan,
    VariantSpec,
    build,
    build_dilated_from_scratch,
    count_parameters,
    describe,
    surgery_to_dilated,
)
from .checkpoint import CheckpointError, load_checkpoint, load_optimizer_state, save_checkpoint
from .config import config_hash, load_config, split_config, version_string
from .data import DataError, Dataset, load_camvid_format, parse_synth, save_camvid_format, synthetic_splits
from .metrics import CAMVID_CLASSES, miou, write_report
from .receptive_field import compute_receptive_field
from .training import TrainConfig, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# argument helpers ------------------------------------------------------------------

def _scale(text: str) -> float:
    v = float(text)
    if not np.isfinite(v) or v <= 0:
        raise argparse.ArgumentTypeError("scale must be a positive number")
    return v


def _rates(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"rates must be comma-separated integers, got {text!r}")
    if not vals or any(r < 2 or r % 2 for r in vals):
        raise argparse.ArgumentTypeError("rates must be positive even integers")
    return vals


def _stage_threshold(text: str) -> tuple[str, float]:
    k, sep, v = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError("stage threshold must look like R3=0.05")
    return k.strip(), float(v)


def _add_model(p, variants=("P", "S", "D")):
    p.add_argument("--variant", choices=variants, default=None)
    p.add_argument("--scale", type=_scale, default=None)
    p.add_argument("--blocks-per-stage", type=int, default=None)
    p.add_argument("--dtype", choices=("f32", "f64"), default=None)


def _add_common(p):
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None, help="flat key = value file; flags override it")


def _add_train(p):
    p.add_argument("--data", default=None, help="synth:<key=value,...> or camvid:<root>")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--crop", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--soft-targets", action="store_true", default=None)


def make_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="fcdrn", description="FC-DRN segmentation toolkit")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="train a model")
    _add_model(p, ("P", "S", "D", "P-D", "S-D"))
    _add_common(p)
    _add_train(p)
    p.add_argument("--resume", default=None, help="checkpoint to continue from (or finetune after surgery)")
    p.add_argument("--from-scratch", action="store_true", help="allow P-D / S-D without a pretrained model")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--from", dest="source", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")

    p = sub.add_parser("surgery", help="turn a P or S checkpoint into P-D / S-D")
    _add_common(p)
    p.add_argument("--from", dest="source", required=True)
    p.add_argument("--rates", type=_rates, default=(4, 8))

    p = sub.add_parser("ablate", help="drop each ResNet in turn and re-evaluate")
    _add_common(p)
    p.add_argument("--from", dest="source", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("norms", help="per-block weight norms")
    _add_common(p)
    p.add_argument("--from", dest="source", required=True)

    p = sub.add_parser("compress", help="remove low-norm residual blocks")
    _add_common(p)
    p.add_argument("--from", dest="source", required=True)
    p.add_argument("--threshold", type=float, required=True)
    p.add_argument("--stage-threshold", type=_stage_threshold, action="append", default=[])
    p.add_argument("--data", default=None)

    p = sub.add_parser("retrain-reduced", help="compress, then retrain the reduced architecture from scratch")
    _add_common(p)
    _add_train(p)
    p.add_argument("--from", dest="source", required=True)
    p.add_argument("--threshold", type=float, required=True)
    p.add_argument("--stage-threshold", type=_stage_threshold, action="append", default=[])

    p = sub.add_parser("count-params", help="parameter count and block listing")
    _add_model(p, ("P", "S", "D", "P-D", "S-D"))
    _add_common(p)
    p.add_argument("--from", dest="source", default=None)
    p.add_argument("--list", action="store_true", help="print the per-block listing")

    p = sub.add_parser("rf", help="per-stage receptive field")
    _add_model(p, ("P", "S", "D", "P-D", "S-D"))
    _add_common(p)
    p.add_argument("--from", dest="source", default=None)

    p = sub.add_parser("synth", help="write a synthetic dataset in CamVid layout")
    _add_common(p)
    p.add_argument("--data", required=True, help="synth:<key=value,...>")
    return ap


# resolution of settings --------------------------------------------------------------

DEFAULTS = {"variant": "P", "scale": 1.0, "blocks_per_stage": 7, "dtype": "f32", "seed": 0}


def _resolve(args) -> dict:
    """Merge defaults < config file < explicit flags into one flat dict."""
    cfg: dict = {}
    if getattr(args, "config", None):
        try:
            cfg.update(load_config(args.config))
        except OSError as exc:
            raise DataError(f"cannot read config: {exc}")
        except ValueError as exc:
            raise UsageError(str(exc))
    flag_map = {"variant": "variant", "scale": "scale", "blocks_per_stage": "blocks_per_stage", "dtype": "dtype",
                "seed": "seed", "data": "data", "epochs": "max_epochs", "patience": "patience",
                "batch_size": "batch_size", "crop": "crop", "lr": "lr0", "weight_decay": "weight_decay",
                "dropout": "dropout", "soft_targets": "soft_targets"}
    for attr, key in flag_map.items():
        v = getattr(args, attr, None)
        if v is not None:
            cfg[key] = v
    for k, v in DEFAULTS.items():
        cfg.setdefault(k, v)
    if cfg["dtype"] in ("float32", "float64"):
        cfg["dtype"] = "f32" if cfg["dtype"] == "float32" else "f64"
    if cfg["dtype"] not in ("f32", "f64"):
        raise UsageError(f"dtype must be f32 or f64, got {cfg['dtype']!r}")
    if cfg["blocks_per_stage"] < 1:
        raise UsageError("--blocks-per-stage must be >= 1")
    return cfg


def _train_cfg(cfg: dict, data_kind: str) -> TrainConfig:
    tc, _ = split_config(cfg)
    tc.setdefault("seed", cfg["seed"])
    if data_kind == "synth":
        tc.setdefault("crop", None)
    try:
        return TrainConfig.from_dict(tc)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc))


def _dtype(cfg) -> type:
    return np.float64 if cfg["dtype"] == "f64" else np.float32


def _check_data_flag(spec: Optional[str]) -> str:
    if not spec:
        raise UsageError("--data is required")
    kind, sep, rest = spec.partition(":")
    if not sep or kind not in ("synth", "camvid"):
        raise UsageError(f"--data must be synth:<spec> or camvid:<root>, got {spec!r}")
    if kind == "synth":
        try:
            _synth_parts(rest)
        except ValueError as exc:
            raise UsageError(str(exc))
    return kind


def _synth_parts(rest: str):
    items = [t for t in rest.split(",") if t.strip()]
    n_val = 50
    keep = []
    for t in items:
        k, _, v = t.partition("=")
        if k.strip() == "val":
            n_val = int(v)
        else:
            keep.append(t)
    if n_val < 1:
        raise ValueError("val must be >= 1")
    return parse_synth(",".join(keep)), n_val


def load_data(spec: str) -> tuple[Dataset, Dataset]:
    """(train, val) datasets from a --data string."""
    kind, _, rest = spec.partition(":")
    if kind == "synth":
        synth, n_val = _synth_parts(rest)
        return synthetic_splits(synth, n_val)
    root = Path(rest)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    return load_camvid_format(root, "train"), load_camvid_format(root, "val")


def _load_split(spec: str, split: str) -> Dataset:
    kind, _, rest = spec.partition(":")
    if kind == "synth":
        tr, va = load_data(spec)
        if split not in ("train", "val"):
            raise UsageError("synthetic data has train and val splits only")
        return tr if split == "train" else va
    return load_camvid_format(Path(rest), split)


def _need_out(args) -> Path:
    if not args.out:
        raise UsageError(f"{args.command} needs --out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(source: str):
    p = Path(source)
    if not (p / "manifest.json").is_file() and (p / "best" / "manifest.json").is_file():
        p = p / "best"
    try:
        return load_checkpoint(p) + (p,)
    except FileNotFoundError as exc:
        raise CheckpointError(str(exc))


def _stanza(out: Optional[Path], args, cfg: dict, extra: Optional[dict] = None) -> dict:
    st = {"command": args.command, "seed": cfg.get("seed", 0), "config_hash": config_hash(cfg),
          "version": version_string(), "config": {k: cfg[k] for k in sorted(cfg)}}
    if extra:
        st.update(extra)
    if out is not None:
        (out / "run.json").write_text(json.dumps(st, indent=1, sort_keys=True, default=str))
    return st


def _plan_from(cfg: dict, classes: int = 11) -> ChannelPlan:
    return ChannelPlan(scale=cfg["scale"], classes=classes)


def _build_model(cfg: dict, classes: int, from_scratch: bool = False):
    fam = cfg["variant"]
    kw = dict(plan=_plan_from(cfg, classes), seed=cfg["seed"], blocks_per_stage=cfg["blocks_per_stage"],
              dtype=_dtype(cfg))
    if "dropout" in cfg:
        kw["dropout"] = cfg["dropout"]
    if fam in ("P-D", "S-D"):
        if not from_scratch:
            raise UsageError(f"{fam} comes from `surgery` on a trained {fam[0]} model; "
                             f"pass --from-scratch to train it directly")
        rates = tuple(int(r) for r in str(cfg.get("rates", "4,8")).split(","))
        return build_dilated_from_scratch(fam, rates=rates, **kw)
    variant = VariantSpec(fam, multigrid=cfg.get("multigrid", "constant"), up_kernel_dilated=cfg.get("up_kernel", 1))
    return build(variant, **kw)


# commands ------------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _resolve(args)
    kind = _check_data_flag(cfg.get("data"))
    tcfg = _train_cfg(cfg, kind)
    out = _need_out(args)
    train_ds, val_ds = load_data(cfg["data"])
    start, opt_state, stop_state = 0, None, None
    if args.resume:
        model, manifest, _ = _load(args.resume)
        meta = manifest.get("meta") or {}
        if manifest.get("epoch"):
            start = int(manifest["epoch"])
            opt_state = load_optimizer_state(Path(args.resume))
            stop_state = meta.get("stopper")
    else:
        model = _build_model(cfg, train_ds.num_classes, args.from_scratch)
    if model.plan.classes != train_ds.num_classes:
        raise DataError(f"model predicts {model.plan.classes} classes, data has {train_ds.num_classes}")
    _stanza(out, args, cfg, {"variant": model.family, "params": count_parameters(model)})

    def on_epoch(row, m, opt, stopper):
        meta = {"epoch": row["epoch"], "val_miou": row["val_miou"], "stopper": stopper.state(),
                "rng_state": np.random.default_rng([tcfg.seed, row["epoch"]])}
        save_checkpoint(m, out / "last", meta, optimizer_state=opt.state_dict())
        if stopper.best_epoch == row["epoch"]:
            save_checkpoint(m, out / "best", dict(meta))

    res = train(model, train_ds, val_ds, tcfg, log_path=out / "train_log.csv", start_epoch=start,
                optimizer_state=opt_state, stopper_state=stop_state, on_epoch=on_epoch)
    if not (out / "best").exists():
        save_checkpoint(model, out / "best", {"epoch": start, "val_miou": None})
    summary = {"status": res.status, "best_epoch": res.best_epoch, "best_val_miou": res.best_val_miou,
               "epochs_run": res.epochs_run, "message": res.message}
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    print(f"{res.status}: best val mIoU {res.best_val_miou:.4f} at epoch {res.best_epoch}")
    if res.status == "diverged":
        print(f"error: training diverged ({res.message}); last good checkpoint kept", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_eval(args) -> int:
    _check_data_flag(args.data)
    model, manifest, _ = _load(args.source)
    ds = _load_split(args.data, args.split)
    cm = evaluate(model, ds)
    iou, mean = miou(cm)
    acc = cm.accuracy()
    cfg = {"source": args.source, "data": args.data, "split": args.split, "seed": args.seed or 0}
    if args.out:
        out = _need_out(args)
        names = CAMVID_CLASSES if model.plan.classes == 11 else None
        write_report(cm, out / "metrics.csv", names)
        _stanza(out, args, cfg)
    print(f"mean IoU {mean:.4f}  global accuracy {acc:.4f}")
    return EXIT_OK


def cmd_surgery(args) -> int:
    out = _need_out(args)
    model, manifest, _ = _load(args.source)
    try:
        new = surgery_to_dilated(model, args.rates)
    except ValueError as exc:
        raise UsageError(str(exc))
    save_checkpoint(new, out, {"source": str(args.source)})
    _stanza(out, args, {"source": args.source, "rates": list(args.rates), "seed": args.seed or 0})
    print(f"{model.family} -> {new.family}: {count_parameters(model)} -> {count_parameters(new)} parameters")
    return EXIT_OK


def cmd_ablate(args) -> int:
    _check_data_flag(args.data)
    out = _need_out(args)
    model, _, _ = _load(args.source)
    _, val = load_data(args.data)
    rep = ablation_sweep(model, val, out)
    _stanza(out, args, {"source": args.source, "data": args.data, "seed": args.seed or 0})
    for r in rep.rows:
        print(f"{r.stage}: {100 * r.delta:+.2f}")
    return EXIT_OK


def cmd_norms(args) -> int:
    out = _need_out(args)
    model, _, _ = _load(args.source)
    rep = weight_norms(model)
    rep.to_csv(out / "norms.csv")
    plot_weight_norms(rep, out / "norms.svg")
    _stanza(out, args, {"source": args.source, "seed": args.seed or 0})
    print(f"{len(rep.entries)} residual convs written to {out / 'norms.csv'}")
    return EXIT_OK


def cmd_compress(args) -> int:
    if args.threshold < 0:
        raise UsageError("--threshold must be >= 0")
    if args.data:
        _check_data_flag(args.data)
    out = _need_out(args)
    model, _, _ = _load(args.source)
    val = load_data(args.data)[1] if args.data else None
    try:
        res, new = compress(model, args.threshold, dict(args.stage_threshold), val)
    except ValueError as exc:
        raise UsageError(str(exc))
    save_checkpoint(new, out / "compressed", {"removed": [list(r) for r in res.removed]})
    with open(out / "compression.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["params_before", "params_after", "rate", "miou_before", "miou_after", "removed"])
        w.writerow([res.params_before, res.params_after, f"{res.rate:.6f}",
                    "" if res.miou_before is None else f"{res.miou_before:.9g}",
                    "" if res.miou_after is None else f"{res.miou_after:.9g}",
                    " ".join(f"{s}.b{b}" for s, b in res.removed)])
    _stanza(out, args, {"source": args.source, "threshold": args.threshold,
                        "stage_threshold": dict(args.stage_threshold), "data": args.data, "seed": args.seed or 0})
    print(f"removed {len(res.removed)} blocks, compression rate {res.rate:.3f}")
    return EXIT_OK


def cmd_retrain(args) -> int:
    cfg = _resolve(args)
    kind = _check_data_flag(cfg.get("data"))
    tcfg = _train_cfg(cfg, kind)
    out = _need_out(args)
    model, _, _ = _load(args.source)
    train_ds, val_ds = load_data(cfg["data"])
    res, small = compress(model, args.threshold, dict(args.stage_threshold), val_ds)
    _stanza(out, args, cfg, {"source": args.source, "threshold": args.threshold})
    rows, _ = retrain_reduced(small, res, train_ds, val_ds, tcfg, seed=cfg["seed"], log_dir=out)
    write_comparison_csv(rows, out / "comparison.csv")
    table = comparison_table(rows, model.family)
    (out / "comparison.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def _model_for_listing(args):
    if args.source:
        return _load(args.source)[0]
    cfg = _resolve(args)
    fam = cfg["variant"]
    if fam in ("P-D", "S-D"):
        base = _build_model({**cfg, "variant": fam[0]}, 11)
        return surgery_to_dilated(base)
    return _build_model(cfg, 11)


def cmd_count(args) -> int:
    model = _model_for_listing(args)
    n = count_parameters(model)
    text = describe(model) if args.list else f"FC-DRN-{model.family}: {n} parameters"
    if args.out:
        out = _need_out(args)
        (out / "params.txt").write_text(describe(model) + "\n")
    print(text)
    return EXIT_OK


def cmd_rf(args) -> int:
    model = _model_for_listing(args)
    rf = compute_receptive_field(model)
    lines = ["node,receptive_field,downsample"] + [f"{k},{v['rf']},{v['downsample']}" for k, v in rf.items()]
    if args.out:
        out = _need_out(args)
        (out / "receptive_field.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_synth(args) -> int:
    kind = _check_data_flag(args.data)
    if kind != "synth":
        raise UsageError("synth needs --data synth:<spec>")
    out = _need_out(args)
    tr, va = load_data(args.data)
    names = [f"class{i}" for i in range(tr.num_classes)]
    save_camvid_format(tr, out, "train", names)
    save_camvid_format(va, out, "val", names)
    _stanza(out, args, {"data": args.data, "seed": args.seed or 0})
    print(f"wrote {len(tr)} train and {len(va)} val samples to {out}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "surgery": cmd_surgery, "ablate": cmd_ablate,
            "norms": cmd_norms, "compress": cmd_compress, "retrain-reduced": cmd_retrain,
            "count-params": cmd_count, "rf": cmd_rf, "synth": cmd_synth}


def run(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = make_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
