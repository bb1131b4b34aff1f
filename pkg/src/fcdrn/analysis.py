"""Inspection tools for trained models: per-block weight norms, stage-drop
ablation, norm-thresholded block removal and the retrain-reduced comparison."""
from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .builder import FCDRN, STAGES, count_parameters, from_architecture
from .data import Dataset
from .metrics import miou
from .training import TrainConfig, evaluate, train


def weight_norm(w: np.ndarray) -> float:
    """(1/M) * sum_m ||w[:, m, :, :]||_1 for a conv weight of shape (N, M, K, K)."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 4:
        raise ValueError("expected an (N, M, K, K) conv weight")
    return float(np.abs(w).sum() / w.shape[1])


@dataclass
class NormEntry:
    stage: str
    block: int
    conv: str
    norm: float


@dataclass
class WeightNormReport:
    entries: list[NormEntry]

    def by_stage(self) -> dict[str, list[NormEntry]]:
        out: dict[str, list[NormEntry]] = {s: [] for s in STAGES}
        for e in self.entries:
            out[e.stage].append(e)
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stage", "block", "conv", "norm"])
            for e in self.entries:
                w.writerow([e.stage, e.block, e.conv, f"{e.norm:.9g}"])


def weight_norms(model: FCDRN) -> WeightNormReport:
    """One entry per 3x3 conv of every residual branch, in stage/block order."""
    entries = []
    for name in STAGES:
        for b in model.stages[name].blocks:
            for conv_name in ("conv1", "conv2"):
                entries.append(NormEntry(name, b.index, conv_name, weight_norm(getattr(b, conv_name).weight.data)))
    return WeightNormReport(entries)


def _stage_name(stage_id) -> str:
    if isinstance(stage_id, str) and stage_id in STAGES:
        return stage_id
    if isinstance(stage_id, (int, np.integer)) and not isinstance(stage_id, bool) and 1 <= stage_id <= 9:
        return STAGES[int(stage_id) - 1]
    raise ValueError(f"stage id must be 1..9, got {stage_id!r}")


def drop_resnet(model: FCDRN, stage_id) -> FCDRN:
    """View of ``model`` whose stage keeps only its first block; the original is untouched."""
    name = _stage_name(stage_id)
    view = copy.copy(model)
    view.stages = dict(model.stages)
    stage = copy.copy(model.stages[name])
    stage.blocks = model.stages[name].blocks[:1]
    view.stages[name] = stage
    return view


@dataclass
class AblationRow:
    stage: str
    miou_full: float
    miou_dropped: float

    @property
    def delta(self) -> float:
        return self.miou_dropped - self.miou_full


@dataclass
class AblationReport:
    baseline: AblationRow
    rows: list[AblationRow]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["dropped", "miou_full", "miou_dropped", "delta"])
            for r in [self.baseline] + self.rows:
                w.writerow([r.stage, f"{r.miou_full:.9g}", f"{r.miou_dropped:.9g}", f"{r.delta:.9g}"])


def ablation_sweep(model: FCDRN, val_ds: Dataset, out_dir=None, batch_size: int = 8) -> AblationReport:
    """Baseline plus one evaluation per dropped stage (eval mode, running BN stats kept)."""
    if len(val_ds) == 0:
        raise ValueError("empty validation set")
    full = miou(evaluate(model, val_ds, batch_size))[1]
    rows = [AblationRow(name, full, miou(evaluate(drop_resnet(model, name), val_ds, batch_size))[1])
            for name in STAGES]
    report = AblationReport(AblationRow("none", full, full), rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.to_csv(out / "ablation.csv")
        plot_ablation(report, out / "ablation.svg")
    return report


@dataclass
class CompressionResult:
    removed: list[tuple[str, int]]
    params_before: int
    params_after: int
    miou_before: Optional[float] = None
    miou_after: Optional[float] = None
    stage_blocks: dict[str, list[int]] = field(default_factory=dict)

    @property
    def rate(self) -> float:
        return self.params_before / self.params_after

    @property
    def delta(self) -> Optional[float]:
        if self.miou_before is None or self.miou_after is None:
            return None
        return self.miou_after - self.miou_before


def compress(model: FCDRN, threshold: float, stage_thresholds: Optional[dict] = None,
             val_ds: Optional[Dataset] = None, batch_size: int = 8) -> tuple[CompressionResult, FCDRN]:
    """Remove every non-first residual block whose final-conv norm is below the threshold.

    ``stage_thresholds`` overrides the threshold per stage (keys 1..9 or R1..R9).
    Removed blocks are bypassed by the identity; the returned model is a new
    object and ``model`` is left unchanged.
    """
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    per_stage = {_stage_name(k): float(v) for k, v in (stage_thresholds or {}).items()}
    if any(v < 0 for v in per_stage.values()):
        raise ValueError("threshold must be >= 0")
    new = copy.deepcopy(model)
    removed = []
    for name in STAGES:
        eps = per_stage.get(name, threshold)
        stage = new.stages[name]
        keep = [stage.blocks[0]]
        for b in stage.blocks[1:]:
            if b.in_ch != b.out_ch or b.proj is not None:
                keep.append(b)
                continue
            if weight_norm(b.conv2.weight.data) < eps:
                removed.append((name, b.index))
            else:
                keep.append(b)
        stage.blocks = keep
    res = CompressionResult(removed, count_parameters(model), count_parameters(new),
                            stage_blocks=new.stage_blocks())
    if val_ds is not None:
        res.miou_before = miou(evaluate(model, val_ds, batch_size))[1]
        res.miou_after = miou(evaluate(new, val_ds, batch_size))[1] if removed else res.miou_before
    return res, new


@dataclass
class ComparisonRow:
    arm: str
    params: int
    rate: float
    miou: float
    delta: float


def retrain_reduced(compressed: FCDRN, result: CompressionResult, train_ds: Dataset, val_ds: Dataset,
                    cfg: TrainConfig, seed: int = 0, weight_decay_arms: Sequence[bool] = (True, False),
                    log_dir=None) -> tuple[list[ComparisonRow], dict[str, FCDRN]]:
    """Compare the compressed model against the same reduced architecture trained from scratch.

    Returns one row for the compressed-from-trained model plus one per
    retraining arm (with / without weight decay), and the retrained models.
    """
    if result.miou_before is None:
        raise ValueError("compression result needs validation scores (pass val_ds to compress)")
    base = result.miou_before
    rows = [ComparisonRow("compressed", result.params_after, result.rate, result.miou_after,
                          result.miou_after - base)]
    models = {}
    for use_wd in weight_decay_arms:
        arch = compressed.architecture()
        arch["seed"] = seed
        fresh = from_architecture(arch)
        arm_cfg = TrainConfig.from_dict({**cfg.to_dict(), "weight_decay": cfg.weight_decay if use_wd else 0.0})
        label = "retrained" if use_wd else "retrained_no_wd"
        log = None if log_dir is None else Path(log_dir) / f"{label}.csv"
        train(fresh, train_ds, val_ds, arm_cfg, log_path=log)
        m = miou(evaluate(fresh, val_ds, cfg.eval_batch_size))[1]
        n = count_parameters(fresh)
        rows.append(ComparisonRow(label, n, result.params_before / n, m, m - base))
        models[label] = fresh
    return rows, models


def comparison_table(rows: Sequence[ComparisonRow], family: str = "") -> str:
    """Model / # params [M] / compression rate / mean IoU [%] / delta rows."""
    head = f"{'model':<28} {'# params [M]':>12} {'rate':>6} {'mean IoU [%]':>13} {'delta':>7}"
    lines = [head, "-" * len(head)]
    for r in rows:
        name = f"FC-DRN-{family} {r.arm}" if family else r.arm
        lines.append(f"{name:<28} {r.params / 1e6:>12.3f} {r.rate:>6.2f} {100 * r.miou:>13.1f} "
                     f"{100 * r.delta:>+7.1f}")
    return "\n".join(lines)


def write_comparison_csv(rows: Sequence[ComparisonRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arm", "params", "compression_rate", "miou", "delta"])
        for r in rows:
            w.writerow([r.arm, r.params, f"{r.rate:.6f}", f"{r.miou:.9g}", f"{r.delta:.9g}"])


# plots ------------------------------------------------------------------------------

def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "fcdrn"
    return plt


def plot_weight_norms(report: WeightNormReport, path, conv: str = "conv2") -> None:
    """Bar per residual conv, stages separated by vertical lines."""
    plt = _pyplot()
    ents = [e for e in report.entries if e.conv == conv]
    fig, ax = plt.subplots(figsize=(10, 3))
    ax.bar(range(len(ents)), [e.norm for e in ents], color="tab:blue")
    pos = 0
    for name, group in report.by_stage().items():
        n = sum(1 for e in group if e.conv == conv)
        if pos:
            ax.axvline(pos - 0.5, color="k", lw=0.8)
        ax.text(pos + n / 2 - 0.5, 1.0, name, transform=ax.get_xaxis_transform(), ha="center", va="bottom")
        pos += n
    ax.set_xlabel("residual block")
    ax.set_ylabel("weight norm")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_ablation(report: AblationReport, path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.bar([r.stage for r in report.rows], [100 * r.delta for r in report.rows], color="tab:red")
    ax.axhline(0, color="k", lw=0.8)
    ax.set_xlabel("dropped ResNet")
    ax.set_ylabel("mean IoU change [%]")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
