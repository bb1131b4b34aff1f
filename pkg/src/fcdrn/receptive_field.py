"""Receptive-field calculator.

A layer is summarised by (kernel, stride, dilation); nearest upsampling by an
integer factor is (1, 1/factor, 1).  Along a chain

    rf   <- rf + (kernel - 1) * dilation * jump
    jump <- jump * stride

and at a concatenation the longest path (largest rf) wins.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence, Union

import numpy as np

from .blocks import Conv2d, ResidualBasicBlock, TransformBlock

Layer = tuple[int, Union[int, Fraction], int]


@dataclass(frozen=True)
class RF:
    size: Fraction
    jump: Fraction

    def through(self, layers: Iterable[Layer]) -> "RF":
        rf, jump = self.size, self.jump
        for k, s, d in layers:
            rf = rf + (k - 1) * d * jump
            jump = jump * Fraction(s)
        return RF(rf, jump)


START = RF(Fraction(1), Fraction(1))


def as_layers(obj) -> list[Layer]:
    """Convert a conv, transform block, basic block or a tuple list to layer triples."""
    if isinstance(obj, Conv2d):
        return [(obj.kernel, obj.stride, obj.dilation)]
    if isinstance(obj, TransformBlock):
        out: list[Layer] = []
        for name, op in obj.layers():
            if name == "maxpool":
                out.append((2, 2, 1))
            elif name == "upsample":
                out.append((1, Fraction(1, 2), 1))
            else:
                out.extend(as_layers(op))
        return out
    if isinstance(obj, ResidualBasicBlock):
        # longest path is the residual branch
        return as_layers(obj.conv1) + as_layers(obj.conv2)
    if isinstance(obj, tuple) and len(obj) == 3 and all(isinstance(v, (int, Fraction)) for v in obj):
        return [obj]
    if isinstance(obj, str) and obj == "maxpool":
        return [(2, 2, 1)]
    if isinstance(obj, (list, tuple)):
        out = []
        for item in obj:
            out.extend(as_layers(item))
        return out
    raise TypeError(f"cannot derive layers from {type(obj).__name__}")


def layer_list_rf(layers: Sequence) -> tuple[int, Fraction]:
    """(receptive field, cumulative stride) of a plain chain."""
    r = START.through(as_layers(list(layers)))
    return int(r.size), r.jump


def compute_receptive_field(model_or_layers) -> dict:
    """Per-stage receptive field (input pixels) and downsample factor.

    For a layer list the result has a single entry ``"output"``.
    """
    from .builder import DENSE_TABLE, STAGES, FCDRN

    if not isinstance(model_or_layers, FCDRN):
        rf, jump = layer_list_rf(model_or_layers)
        return {"output": {"rf": rf, "downsample": jump}}

    model = model_or_layers
    feats: dict[str, RF] = {}
    out: dict[str, dict] = {}

    def through_stage(r: RF, name: str) -> RF:
        for blk in model.stages[name].blocks:
            r = r.through(as_layers(blk))
        return r

    def edge(src: str, d: str, n: int) -> RF:
        r = feats[src]
        if d == "=":
            return r.through(as_layers(model.same[src]))
        chain = model.down[src] if d == "d" else model.up[src]
        for tf in chain[:n]:
            r = r.through(as_layers(tf))
        return r

    idb = model.idb
    r = START.through(as_layers([idb.conv0, "maxpool", idb.conv1, idb.conv2]))
    feats["IDB"] = r
    out["IDB"] = r
    feats["R1"] = through_stage(r, "R1")
    out["R1"] = feats["R1"]
    mixed = r
    for i, row in enumerate(DENSE_TABLE):
        parts = [edge(*e) for e in row]
        mixed = max(parts, key=lambda p: p.size)
        if i < 8:
            name = STAGES[i + 1]
            feats[name] = through_stage(mixed, name)
            out[name] = feats[name]
    fub = mixed.through([(1, Fraction(1, 2), 1)] + as_layers(model.fub.conv))
    out["FUB"] = fub
    out["classifier"] = fub.through(as_layers(model.classifier.conv))
    return {k: {"rf": int(v.size), "downsample": v.jump} for k, v in out.items()}


def impulse_support(layers: Sequence[Layer], size: int = 0, seed: int = 0) -> int:
    """Numerical receptive field of a single-channel chain.

    Builds the chain with random strictly positive weights and zero bias, takes
    the gradient of the centre output pixel with respect to the input and
    returns the side of the square non-zero support.  2x2 pooling windows are
    realised as stride-2 sums so that every tap in the window stays visible.
    """
    from . import autodiff as F
    from .autodiff import Tensor

    layers = [tuple(l) for l in layers]
    rf, jump = layer_list_rf(layers)
    if any(Fraction(s).denominator != 1 for _, s, _ in layers):
        raise ValueError("impulse oracle supports down/equal-stride chains only")
    n = size or int(2 * rf + 4 * jump + 8)
    rng = np.random.default_rng(seed)
    x = Tensor(np.zeros((1, 1, n, n)), requires_grad=True)
    h = x
    for k, s, d in layers:
        w = Tensor(rng.uniform(0.5, 1.5, size=(1, 1, k, k)))
        h = F.conv2d(h, w, None, stride=int(s), dilation=d, padding=0)
    cy, cx = h.shape[2] // 2, h.shape[3] // 2
    g = np.zeros(h.shape)
    g[0, 0, cy, cx] = 1.0
    F.backward(h, g)
    nz = np.argwhere(x.grad[0, 0] != 0)
    return int(nz[:, 0].max() - nz[:, 0].min() + 1)
