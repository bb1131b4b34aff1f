"""Inspection workflow on a trained checkpoint: weight-norm profile, ResNet
ablation, norm-thresholded compression and dilation surgery.

Run train_synthetic.py first, or pass --from pointing at any checkpoint
written by ``fcdrn train``.
"""
import argparse
from pathlib import Path

import numpy as np

from fcdrn.analysis import ablation_sweep, compress, plot_weight_norms, weight_norms
from fcdrn.builder import count_parameters, surgery_to_dilated
from fcdrn.checkpoint import load_checkpoint
from fcdrn.data import SyntheticSpec, synthetic_splits
from fcdrn.training import evaluate


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--from", dest="source", default="demo_runs/train_synthetic/best")
    ap.add_argument("--out", default="demo_runs/inspect")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    model, _ = load_checkpoint(args.source)
    _, val_ds = synthetic_splits(SyntheticSpec(n=100, size=64, classes=model.plan.classes, seed=0), 30)

    norms = weight_norms(model)
    norms.to_csv(out / "norms.csv")
    plot_weight_norms(norms, out / "norms.svg")
    for stage, entries in norms.by_stage().items():
        vals = [e.norm for e in entries if e.conv == "conv2"]
        print(f"{stage}: final-conv norms " + " ".join(f"{v:.3f}" for v in vals))

    rep = ablation_sweep(model, val_ds, out)
    print("drop-one-ResNet deltas:", " ".join(f"{r.stage}:{100 * r.delta:+.1f}" for r in rep.rows))

    tail = [e.norm for e in norms.entries if e.conv == "conv2" and e.block > 0]
    eps = float(np.quantile(tail, 0.25)) if tail else 0.0
    res, small = compress(model, eps, val_ds=val_ds)
    print(f"threshold {eps:.3f}: removed {len(res.removed)} blocks, rate {res.rate:.3f}, "
          f"mIoU {res.miou_before:.4f} -> {res.miou_after:.4f}")

    if model.family in ("P", "S"):
        dil = surgery_to_dilated(model)
        print(f"surgery {model.family} -> {dil.family}: {count_parameters(model):,} -> {count_parameters(dil):,} "
              f"parameters, mIoU before finetuning {evaluate(dil, val_ds).miou()[1]:.4f}")


if __name__ == "__main__":
    main()
