"""FC-DRN graph construction, forward pass, dilation surgery and model listing."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import autodiff as F
from .autodiff import Tensor
from .blocks import (
    Classifier,
    Context,
    FinalUpsamplingBlock,
    InitialDownsamplingBlock,
    MixingBlock,
    Module,
    ResNetStage,
    TransformBlock,
    multigrid_rates,
)

FAMILIES = ("P", "S", "D", "P-D", "S-D")
BASE_FAMILIES = ("P", "S", "D")
STAGES = tuple(f"R{i}" for i in range(1, 10))
SOURCES = ("IDB",) + STAGES

# Dense block topology. Row k lists the inputs concatenated before the k-th
# mixing block as (source, direction, cascade length); direction "d" and "u"
# are down/up transforms, "=" a same-resolution input (which still gets a conv).
# Rows 1-8 feed stages R2..R9; row 9 feeds the final upsampling block.
DENSE_TABLE: tuple[tuple[tuple[str, str, int], ...], ...] = (
    (("IDB", "d", 1), ("R1", "d", 1)),
    (("IDB", "d", 2), ("R1", "d", 2), ("R2", "d", 1)),
    (("IDB", "d", 3), ("R1", "d", 3), ("R2", "d", 2), ("R3", "d", 1)),
    (("IDB", "d", 4), ("R1", "d", 4), ("R2", "d", 3), ("R3", "d", 2), ("R4", "d", 1)),
    (("IDB", "d", 3), ("R1", "d", 3), ("R2", "d", 2), ("R3", "d", 1), ("R4", "=", 0), ("R5", "u", 1)),
    (("IDB", "d", 2), ("R1", "d", 2), ("R2", "d", 1), ("R3", "=", 0), ("R4", "u", 1), ("R5", "u", 2),
     ("R6", "u", 1)),
    (("IDB", "d", 1), ("R1", "d", 1), ("R2", "=", 0), ("R3", "u", 1), ("R4", "u", 2), ("R5", "u", 3),
     ("R6", "u", 2), ("R7", "u", 1)),
    (("IDB", "=", 0), ("R1", "=", 0), ("R2", "u", 1), ("R3", "u", 2), ("R4", "u", 3), ("R5", "u", 4),
     ("R6", "u", 3), ("R7", "u", 2), ("R8", "u", 1)),
    (("IDB", "=", 0), ("R1", "=", 0), ("R2", "u", 1), ("R3", "u", 2), ("R4", "u", 3), ("R5", "u", 4),
     ("R6", "u", 3), ("R7", "u", 2), ("R8", "u", 1), ("R9", "=", 0)),
)

# Representation level (number of down transforms below the IDB output).
SOURCE_LEVEL = {"IDB": 0, "R1": 0, "R2": 1, "R3": 2, "R4": 3, "R5": 4, "R6": 3, "R7": 2, "R8": 1, "R9": 0}
DOWN_SLOTS = ("d1", "d2", "d3", "d4")
UP_SLOTS = ("u1", "u2", "u3", "u4")


def entry_level(src: str, direction: str, count: int) -> int:
    lv = SOURCE_LEVEL[src]
    return lv + count if direction == "d" else lv - count if direction == "u" else lv


def down_slot(src: str, step: int) -> str:
    return DOWN_SLOTS[SOURCE_LEVEL[src] + step]


def up_slot(src: str, step: int) -> str:
    # u1 takes level 4 to 3, ..., u4 takes level 1 to 0
    return UP_SLOTS[4 - (SOURCE_LEVEL[src] - step)]


def chain_lengths() -> tuple[dict[str, int], dict[str, int]]:
    down: dict[str, int] = {}
    up: dict[str, int] = {}
    for row in DENSE_TABLE:
        for src, d, n in row:
            if d == "d":
                down[src] = max(down.get(src, 0), n)
            elif d == "u":
                up[src] = max(up.get(src, 0), n)
    return down, up


@dataclass(frozen=True)
class ChannelPlan:
    """Channel widths of the dense block.

    ``scale`` multiplies every width (rounded half-up, floored at 4) for
    desk-sized models.
    """

    idb: int = 50
    stages: tuple[int, ...] = (30, 40, 40, 40, 50, 40, 40, 40, 30)
    mixing: tuple[int, ...] = (80, 120, 160, 200, 200, 240, 280, 320, 350)
    fub: int = 50
    classes: int = 11
    scale: float = 1.0
    min_width: int = 4

    def __post_init__(self):
        if not (isinstance(self.scale, (int, float)) and math.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"invalid scale {self.scale!r}")
        if len(self.stages) != 9 or len(self.mixing) != 9:
            raise ValueError("plan needs 9 stage widths and 9 mixing widths")

    def width(self, w: int) -> int:
        return max(self.min_width, int(math.floor(w * self.scale + 0.5)))

    @property
    def idb_width(self) -> int:
        return self.width(self.idb)

    @property
    def stage_widths(self) -> dict[str, int]:
        return {name: self.width(w) for name, w in zip(STAGES, self.stages)}

    @property
    def mixing_widths(self) -> tuple[int, ...]:
        return tuple(self.width(w) for w in self.mixing)

    @property
    def fub_width(self) -> int:
        return self.width(self.fub)

    def source_width(self, src: str) -> int:
        return self.idb_width if src == "IDB" else self.stage_widths[src]

    def concat_widths(self) -> tuple[int, ...]:
        return tuple(sum(self.source_width(s) for s, _, _ in row) for row in DENSE_TABLE)


@dataclass(frozen=True)
class VariantSpec:
    family: str = "P"
    down_rates: tuple[int, ...] = (2, 4, 16, 32)
    surgery_rates: tuple[int, ...] = (4, 8)
    multigrid: str = "constant"
    up_kernel_dilated: int = 1

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown variant family {self.family!r}")
        if self.up_kernel_dilated not in (1, 3):
            raise ValueError("up_kernel_dilated must be 1 or 3")

    def base_slots(self) -> dict[str, dict]:
        fam = self.family
        if fam == "P":
            return {**{s: {"kind": "pool"} for s in DOWN_SLOTS}, **{s: {"kind": "upsample"} for s in UP_SLOTS}}
        if fam == "S":
            return {**{s: {"kind": "strided"} for s in DOWN_SLOTS}, **{s: {"kind": "upsample"} for s in UP_SLOTS}}
        if fam == "D":
            up_kind = "conv1x1" if self.up_kernel_dilated == 1 else "conv3x3"
            slots = {s: {"kind": "multigrid", "rates": list(multigrid_rates(r, self.multigrid))}
                     for s, r in zip(DOWN_SLOTS, self.down_rates)}
            slots.update({s: {"kind": up_kind} for s in UP_SLOTS})
            return slots
        raise ValueError(f"{fam} is reachable only through dilation surgery on a trained P or S model")


class FCDRN(Module):
    """Fully convolutional dense-over-residual network.

    Transform chains are shared per source: ``down[src][j]`` is the (j+1)-th
    down transform applied to ``src`` and its output is reused by every row
    that needs that cascade depth.
    """

    def __init__(self, plan: ChannelPlan, slots: dict[str, dict], family: str, blocks_per_stage: int = 7,
                 dropout: float = 0.2, seed: int = 0, dtype=np.float32, in_channels: int = 3,
                 stage_blocks: Optional[dict[str, Sequence[int]]] = None, variant: Optional[VariantSpec] = None,
                 bn_momentum: float = 0.1, bn_eps: float = 1e-5):
        self._plan = plan
        self._slots = {k: dict(v) for k, v in slots.items()}
        self._family = family
        self._variant = variant or VariantSpec(family if family in BASE_FAMILIES else family.split("-")[0])
        self._blocks_per_stage = blocks_per_stage
        self._dropout = dropout
        self._seed = seed
        self._dtype = np.dtype(dtype)
        self._in_channels = in_channels
        self._bn = {"momentum": bn_momentum, "eps": bn_eps}
        self.last_level_sizes: dict[int, tuple[int, int]] = {}
        rng = np.random.default_rng(seed)
        dt = self._dtype
        bn = self._bn
        blk_bn = {"bn_momentum": bn_momentum, "bn_eps": bn_eps}

        self.idb = InitialDownsamplingBlock(in_channels, plan.idb_width, rng, dt, **bn)
        widths = plan.stage_widths
        mix = plan.mixing_widths
        self.stages: dict[str, ResNetStage] = {}
        self.mixing: list[MixingBlock] = []
        concat = plan.concat_widths()
        stage_in = [plan.idb_width] + list(mix[:8])
        for i, name in enumerate(STAGES):
            self.stages[name] = ResNetStage(stage_in[i], widths[name], blocks_per_stage, dropout, rng, dt, **blk_bn)
            self.mixing.append(MixingBlock(concat[i], mix[i], rng, dt))

        down_len, up_len = chain_lengths()
        self.down: dict[str, list[TransformBlock]] = {}
        self.up: dict[str, list[TransformBlock]] = {}
        self.same: dict[str, TransformBlock] = {}
        for src in SOURCES:
            c = plan.source_width(src)
            if src in down_len:
                self.down[src] = [self._make_transform(down_slot(src, j), c, rng) for j in range(down_len[src])]
            if src in up_len:
                self.up[src] = [self._make_transform(up_slot(src, j), c, rng) for j in range(up_len[src])]
        for row in DENSE_TABLE:
            for src, d, _ in row:
                if d == "=" and src not in self.same:
                    self.same[src] = TransformBlock("conv3x3", plan.source_width(src), rng=rng, dtype=dt)

        self.fub = FinalUpsamplingBlock(mix[8], plan.fub_width, rng, dt, **bn)
        self.classifier = Classifier(plan.fub_width, plan.classes, rng, dt, **bn)

        if stage_blocks is not None:
            for name, keep in stage_blocks.items():
                keep = set(int(k) for k in keep)
                if 0 not in keep:
                    raise ValueError(f"stage {name} must keep its first block")
                self.stages[name].blocks = [b for b in self.stages[name].blocks if b.index in keep]

    def _make_transform(self, slot: str, channels: int, rng) -> TransformBlock:
        spec = self._slots[slot]
        return TransformBlock(spec["kind"], channels, spec.get("rates", ()), rng=rng, dtype=self._dtype)

    # descriptors -----------------------------------------------------------------
    @property
    def family(self) -> str:
        return self._family

    @property
    def plan(self) -> ChannelPlan:
        return self._plan

    @property
    def slots(self) -> dict[str, dict]:
        return {k: dict(v) for k, v in self._slots.items()}

    @property
    def dtype(self):
        return self._dtype

    @property
    def blocks_per_stage(self) -> int:
        return self._blocks_per_stage

    def stage_blocks(self) -> dict[str, list[int]]:
        return {name: st.block_indices for name, st in self.stages.items()}

    def skip_registry(self) -> list[list[tuple[str, str, int]]]:
        """Per concat row: (source, direction, cascade length) of each input, in order."""
        return [list(row) for row in DENSE_TABLE]

    def architecture(self) -> dict:
        """Self-describing architecture record (enough to rebuild the graph)."""
        p = self._plan
        return {
            "family": self._family,
            "plan": {"idb": p.idb, "stages": list(p.stages), "mixing": list(p.mixing), "fub": p.fub,
                     "classes": p.classes, "scale": p.scale, "min_width": p.min_width},
            "slots": self.slots,
            "blocks_per_stage": self._blocks_per_stage,
            "stage_blocks": self.stage_blocks(),
            "dropout": self._dropout,
            "seed": self._seed,
            "dtype": self._dtype.name,
            "in_channels": self._in_channels,
            "bn_momentum": self._bn["momentum"],
            "bn_eps": self._bn["eps"],
            "variant": {"down_rates": list(self._variant.down_rates),
                        "surgery_rates": list(self._variant.surgery_rates),
                        "multigrid": self._variant.multigrid,
                        "up_kernel_dilated": self._variant.up_kernel_dilated},
        }

    # forward ---------------------------------------------------------------------
    def forward(self, image: Tensor, train: bool = False, rng=None, channelwise_dropout: bool = False) -> Tensor:
        if not isinstance(image, Tensor):
            image = Tensor(np.asarray(image, dtype=self._dtype))
        if image.ndim != 4:
            raise ValueError("expected an N x C x H x W image batch")
        h, w = image.shape[2:]
        if h < 32 or w < 32:
            raise ValueError(f"input must be at least 32x32, got {h}x{w}")
        ctx = Context(train, rng if rng is not None else np.random.default_rng(0), channelwise_dropout)
        sizes: dict[int, tuple[int, int]] = {}
        feats: dict[str, Tensor] = {}
        cache: dict[tuple[str, str, int], Tensor] = {}

        def fetch(src: str, d: str, n: int) -> Tensor:
            key = (src, d, n)
            if key in cache:
                return cache[key]
            if d == "=":
                out = self.same[src].forward(feats[src])
            elif d == "d":
                prev = feats[src] if n == 1 else fetch(src, "d", n - 1)
                out = self.down[src][n - 1].forward(prev)
                lv = SOURCE_LEVEL[src] + n
                sizes.setdefault(lv, tuple(out.shape[2:]))
            else:
                prev = feats[src] if n == 1 else fetch(src, "u", n - 1)
                lv = SOURCE_LEVEL[src] - n
                out = self.up[src][n - 1].forward(prev, target_size=sizes[lv])
            cache[key] = out
            return out

        x = self.idb.forward(image, ctx)
        feats["IDB"] = x
        sizes[0] = tuple(x.shape[2:])
        feats["R1"] = self.stages["R1"].forward(x, ctx)
        for i, row in enumerate(DENSE_TABLE):
            parts = [fetch(src, d, n) for src, d, n in row]
            mixed = self.mixing[i].forward(F.concat_channels(parts))
            if i < 8:
                feats[STAGES[i + 1]] = self.stages[STAGES[i + 1]].forward(mixed, ctx)
        self.last_level_sizes = dict(sizes)
        out = self.fub.forward(mixed, (h, w), ctx)
        return self.classifier.forward(out, ctx)

    __call__ = forward

    def predict(self, image) -> np.ndarray:
        with F.no_grad():
            return self.forward(image).data.argmax(axis=1)

    def internal_resolutions(self, h: int, w: int) -> dict[int, tuple[int, int]]:
        """Spatial size at each representation level for an h x w input."""
        sizes = {0: (h // 2, w // 2)}
        for lv, slot in enumerate(DOWN_SLOTS, start=1):
            probe = TransformBlock(self._slots[slot]["kind"], 1, self._slots[slot].get("rates", ()), build=False)
            sizes[lv] = probe.output_size(*sizes[lv - 1])
        return sizes


def build(variant: VariantSpec | str = "P", plan: Optional[ChannelPlan] = None, seed: int = 0,
          blocks_per_stage: int = 7, dropout: float = 0.2, dtype=np.float32, **kw) -> FCDRN:
    """Build a freshly HeUniform-initialised FC-DRN of family P, S or D."""
    if isinstance(variant, str):
        variant = VariantSpec(variant)
    plan = plan or ChannelPlan()
    if blocks_per_stage < 1:
        raise ValueError("blocks_per_stage must be >= 1")
    slots = variant.base_slots()
    return FCDRN(plan, slots, variant.family, blocks_per_stage, dropout, seed, dtype, variant=variant, **kw)


def from_architecture(arch: dict) -> FCDRN:
    """Rebuild an (uninitialised-weights) graph from ``FCDRN.architecture()`` output."""
    p = arch["plan"]
    plan = ChannelPlan(p["idb"], tuple(p["stages"]), tuple(p["mixing"]), p["fub"], p["classes"],
                       p["scale"], p.get("min_width", 4))
    v = arch.get("variant", {})
    fam = arch["family"]
    variant = VariantSpec(fam if fam in BASE_FAMILIES else fam.split("-")[0],
                          tuple(v.get("down_rates", (2, 4, 16, 32))), tuple(v.get("surgery_rates", (4, 8))),
                          v.get("multigrid", "constant"), v.get("up_kernel_dilated", 1))
    return FCDRN(plan, arch["slots"], fam, arch["blocks_per_stage"], arch.get("dropout", 0.2),
                 arch.get("seed", 0), np.dtype(arch.get("dtype", "float32")), arch.get("in_channels", 3),
                 stage_blocks=arch.get("stage_blocks"), variant=variant,
                 bn_momentum=arch.get("bn_momentum", 0.1), bn_eps=arch.get("bn_eps", 1e-5))


def count_parameters(model: Module) -> int:
    return sum(p.data.size for _, p in model.named_parameters())


def _surgered_slots(slots: dict[str, dict], family: str, rates: Sequence[int]) -> dict[str, dict]:
    new = {k: dict(v) for k, v in slots.items()}
    kind = "dilated_conv" if family == "P" else "dilated"
    for slot, r in zip(DOWN_SLOTS[-len(rates):], rates):
        new[slot] = {"kind": kind, "rates": [int(r)]}
    for slot in UP_SLOTS[: len(rates)]:
        new[slot] = {"kind": "conv3x3"}
    return new


def surgery_to_dilated(model: FCDRN, rates: Sequence[int] = (4, 8), init: str = "pretrained",
                       seed: int = 0) -> FCDRN:
    """Replace the last down transforms with dilated convs and the first up transforms
    with resolution-preserving convs, in every cascade.

    From P: the pooling is swapped for an identity-initialised dilated conv; the
    trailing 3x3 conv is kept.  From S: the strided conv's weights are reused as a
    stride-1 dilated conv.  The upsample+conv transforms lose the upsample and keep
    their conv.  ``init="random"`` instead draws fresh HeUniform weights for the
    replaced layers (for the from-scratch arm).
    """
    if model.family not in ("P", "S"):
        if model.family in ("P-D", "S-D"):
            raise ValueError(f"model is already surgered ({model.family})")
        raise ValueError(f"dilation surgery needs a P or S model, got {model.family}")
    rates = tuple(int(r) for r in rates)
    if len(rates) < 1 or len(rates) > 4:
        raise ValueError("between one and four rates are allowed")
    for r in rates:
        if r < 2 or r % 2:
            raise ValueError(f"dilation rates must be positive even integers, got {rates}")
    src_family = model.family
    new = copy.deepcopy(model)
    new._family = f"{src_family}-D"
    new._slots = _surgered_slots(model._slots, src_family, rates)
    new._variant = replace(model._variant, surgery_rates=rates)
    rng = np.random.default_rng(seed)
    rate_of = dict(zip(DOWN_SLOTS[-len(rates):], rates))
    up_targets = set(UP_SLOTS[: len(rates)])

    for src, chain in new.down.items():
        for j, tf in enumerate(chain):
            slot = down_slot(src, j)
            if slot not in rate_of:
                continue
            r = rate_of[slot]
            if src_family == "P":
                repl = TransformBlock("dilated_conv", tf.channels, (r,), rng=rng, dtype=new.dtype)
                if init != "random":
                    repl.dil[0].set_identity()
                repl.conv = tf.conv
            else:
                repl = TransformBlock("dilated", tf.channels, (r,), rng=rng, dtype=new.dtype)
                if init != "random":
                    repl.dil[0].weight.data = tf.conv.weight.data.copy()
                    repl.dil[0].bias.data = tf.conv.bias.data.copy()
            chain[j] = repl
    for src, chain in new.up.items():
        for j, tf in enumerate(chain):
            if up_slot(src, j) in up_targets:
                repl = TransformBlock("conv3x3", tf.channels, build=False)
                repl.conv = tf.conv
                chain[j] = repl
    return new


def build_dilated_from_scratch(family: str, plan: Optional[ChannelPlan] = None, seed: int = 0,
                               rates: Sequence[int] = (4, 8), **kw) -> FCDRN:
    """P-D / S-D trained from scratch: the base graph with surgery applied to fresh weights."""
    if family not in ("P-D", "S-D"):
        raise ValueError("family must be P-D or S-D")
    base = build(family[0], plan, seed, **kw)
    return surgery_to_dilated(base, rates, init="random", seed=seed + 1)


def describe(model: FCDRN) -> str:
    """One line per block: name, kind, in/out channels, stride/dilation, parameter count."""
    lines = [f"# FC-DRN-{model.family} scale={model.plan.scale} blocks/stage={model.blocks_per_stage} "
             f"params={count_parameters(model)}"]

    def nparams(m: Module) -> int:
        return sum(p.data.size for _, p in m.named_parameters())

    def row(name, kind, cin, cout, stride, dil, m):
        lines.append(f"{name:<24} {kind:<14} {cin:>4} -> {cout:<4} s={stride} d={dil} params={nparams(m)}")

    idb = model.idb
    row("idb", "idb", idb.conv0.in_ch, idb.conv2.out_ch, 1, 1, idb)
    for i, name in enumerate(STAGES):
        st = model.stages[name]
        for b in st.blocks:
            kind = "basic+proj" if b.proj is not None else "basic"
            row(f"{name}.b{b.index}", kind, b.in_ch, b.out_ch, 1, 1, b)
        mb = model.mixing[i]
        row(f"mix{i + 1}", "mixing1x1", mb.conv.in_ch, mb.conv.out_ch, 1, 1, mb)
    for direction, chains in (("down", model.down), ("up", model.up)):
        for src, chain in chains.items():
            for j, tf in enumerate(chain):
                convs = [op for _, op in tf.layers() if op is not None]
                stride = 2 if tf.kind in ("pool", "strided") else 1
                dil = ",".join(str(c.dilation) for c in convs) or "1"
                row(f"{direction}.{src}.{j + 1}", tf.kind, tf.channels, tf.channels, stride, dil, tf)
    for src, tf in model.same.items():
        row(f"same.{src}", tf.kind, tf.channels, tf.channels, 1, 1, tf)
    row("fub", "fub", model.fub.conv.in_ch, model.fub.conv.out_ch, 1, 1, model.fub)
    row("classifier", "conv1x1", model.classifier.conv.in_ch, model.classifier.conv.out_ch, 1, 1,
        model.classifier)
    return "\n".join(lines)
