"""Layers and composite blocks: residual basic block, ResNet stage,
resolution-changing transforms, mixing block, IDB and FUB."""
from __future__ import annotations

from typing import Iterator, Optional, Sequence

import numpy as np

from . import autodiff as F
from .autodiff import Tensor


class Module:
    """Parameter container. Children are discovered from instance attributes."""

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        def walk(prefix: str, val):
            if isinstance(val, Module):
                yield prefix, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    yield from walk(f"{prefix}.{getattr(item, 'path_name', i)}", item)
            elif isinstance(val, dict):
                for k, item in val.items():
                    yield from walk(f"{prefix}.{k}", item)

        for key, val in vars(self).items():
            if not key.startswith("_"):
                yield from walk(key, val)

    def _own_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(())

    def _own_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(())

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._own_parameters():
            yield prefix + name, p
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._own_buffers():
            yield prefix + name, b
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def he_uniform(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1, dilation: int = 1,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        if stride < 1 or dilation < 1:
            raise ValueError("stride and dilation must be >= 1")
        if stride > 1 and dilation > 1:
            raise ValueError("a conv may be strided or dilated, not both")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.stride, self.dilation = stride, dilation
        fan_in = in_ch * kernel * kernel
        self.weight = Tensor(he_uniform((out_ch, in_ch, kernel, kernel), fan_in, rng, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)

    @property
    def padding(self) -> int:
        return F.same_padding(self.kernel, self.dilation)

    def _own_parameters(self):
        yield "weight", self.weight
        yield "bias", self.bias

    def set_identity(self) -> None:
        """Zero everything except a unit centre tap on the channel diagonal."""
        if self.in_ch != self.out_ch:
            raise ValueError("identity init needs in_ch == out_ch")
        w = np.zeros_like(self.weight.data)
        c = self.kernel // 2
        w[np.arange(self.out_ch), np.arange(self.in_ch), c, c] = 1
        self.weight.data = w
        self.bias.data = np.zeros_like(self.bias.data)

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.dilation, self.padding)

    def describe(self) -> str:
        return f"conv{self.kernel}x{self.kernel} {self.in_ch}->{self.out_ch} s{self.stride} d{self.dilation}"


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.channels = channels
        self.momentum, self.eps = momentum, eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def _own_parameters(self):
        yield "gamma", self.gamma
        yield "beta", self.beta

    def _own_buffers(self):
        yield "running_mean", self.running_mean
        yield "running_var", self.running_var

    def forward(self, x: Tensor, train: bool) -> Tensor:
        return F.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                           train, self.momentum, self.eps)


class Context:
    """Per-forward state: train/eval mode, dropout RNG and dropout flavour."""

    def __init__(self, train: bool = False, rng: Optional[np.random.Generator] = None,
                 channelwise_dropout: bool = False):
        self.train = train
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.channelwise_dropout = channelwise_dropout


EVAL = Context(train=False)


class ResidualBasicBlock(Module):
    """Pre-activation basic block: twice (BN, ReLU, dropout, 3x3 conv), plus identity.

    When the channel count changes the identity path is a 1x1 projection.
    """

    def __init__(self, in_ch: int, out_ch: int, dropout: float = 0.2, index: int = 0,
                 rng=None, dtype=np.float32, bn_momentum: float = 0.1, bn_eps: float = 1e-5):
        self.in_ch, self.out_ch, self.dropout_p = in_ch, out_ch, dropout
        self.index = index
        self.path_name = f"b{index}"
        self.bn1 = BatchNorm2d(in_ch, bn_momentum, bn_eps, dtype)
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(out_ch, bn_momentum, bn_eps, dtype)
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng=rng, dtype=dtype)
        self.proj = Conv2d(in_ch, out_ch, 1, rng=rng, dtype=dtype) if in_ch != out_ch else None

    def _drop(self, x: Tensor, ctx: Context) -> Tensor:
        return F.dropout(x, self.dropout_p, ctx.train, ctx.rng, ctx.channelwise_dropout)

    def residual(self, x: Tensor, ctx: Context) -> Tensor:
        h = self.conv1.forward(self._drop(F.relu(self.bn1.forward(x, ctx.train)), ctx))
        return self.conv2.forward(self._drop(F.relu(self.bn2.forward(h, ctx.train)), ctx))

    def forward(self, x: Tensor, ctx: Context = EVAL) -> Tensor:
        if x.shape[1] != self.in_ch:
            raise ValueError(f"block expects {self.in_ch} channels, got {x.shape[1]}")
        identity = self.proj.forward(x) if self.proj is not None else x
        return F.add(self.residual(x, ctx), identity)

    def zero_residual(self) -> None:
        """Zero the final conv so the block reduces to its identity path."""
        self.conv2.weight.data = np.zeros_like(self.conv2.weight.data)
        self.conv2.bias.data = np.zeros_like(self.conv2.bias.data)


class ResNetStage(Module):
    """A chain of basic blocks; only the first may change the channel count."""

    def __init__(self, in_ch: int, out_ch: int, n_blocks: int = 7, dropout: float = 0.2,
                 rng=None, dtype=np.float32, **bn):
        if n_blocks < 1:
            raise ValueError("a stage needs at least one block")
        self.in_ch, self.out_ch = in_ch, out_ch
        self.blocks = [ResidualBasicBlock(in_ch if i == 0 else out_ch, out_ch, dropout, i, rng, dtype, **bn)
                       for i in range(n_blocks)]

    @property
    def block_indices(self) -> list[int]:
        return [b.index for b in self.blocks]

    def forward(self, x: Tensor, ctx: Context = EVAL) -> Tensor:
        for blk in self.blocks:
            x = blk.forward(x, ctx)
        return x


# Transform kinds. "Down" kinds halve resolution; "upsample" restores a target size.
DOWN_KINDS = ("pool", "strided")
TRANSFORM_KINDS = ("pool", "strided", "multigrid", "upsample", "conv1x1", "conv3x3", "dilated", "dilated_conv")


class TransformBlock(Module):
    """Resolution-changing (or -preserving) transform between stages.

    kinds
      pool          2x2 max pool, then 3x3 conv
      strided       3x3 conv, stride 2
      multigrid     stacked 3x3 dilated convs at ``rates``
      upsample      nearest upsample to a target size, then 3x3 conv
      conv1x1       1x1 conv
      conv3x3       3x3 conv
      dilated       3x3 conv at dilation ``rates[0]``
      dilated_conv  3x3 conv at dilation ``rates[0]``, then 3x3 conv
    """

    def __init__(self, kind: str, channels: int, rates: Sequence[int] = (), rng=None, dtype=np.float32,
                 build: bool = True):
        if kind not in TRANSFORM_KINDS:
            raise ValueError(f"unknown transform kind {kind!r}")
        if kind in ("multigrid", "dilated", "dilated_conv"):
            if not rates or any(r < 1 or (r > 1 and r % 2) for r in rates):
                raise ValueError(f"dilation rates must be 1 or positive even integers, got {rates}")
        self.kind = kind
        self.channels = channels
        self.rates = tuple(int(r) for r in rates)
        self.dil: list[Conv2d] = []
        self.conv: Optional[Conv2d] = None
        if not build:
            return
        c = channels
        if kind == "pool" or kind == "upsample" or kind == "conv3x3":
            self.conv = Conv2d(c, c, 3, rng=rng, dtype=dtype)
        elif kind == "strided":
            self.conv = Conv2d(c, c, 3, stride=2, rng=rng, dtype=dtype)
        elif kind == "conv1x1":
            self.conv = Conv2d(c, c, 1, rng=rng, dtype=dtype)
        elif kind == "multigrid":
            self.dil = [Conv2d(c, c, 3, dilation=r, rng=rng, dtype=dtype) for r in self.rates]
        elif kind == "dilated":
            self.dil = [Conv2d(c, c, 3, dilation=self.rates[0], rng=rng, dtype=dtype)]
        elif kind == "dilated_conv":
            self.dil = [Conv2d(c, c, 3, dilation=self.rates[0], rng=rng, dtype=dtype)]
            self.conv = Conv2d(c, c, 3, rng=rng, dtype=dtype)

    @property
    def downsamples(self) -> bool:
        return self.kind in DOWN_KINDS

    @property
    def upsamples(self) -> bool:
        return self.kind == "upsample"

    def layers(self) -> list[tuple[str, object]]:
        """Primitive ops in application order, for receptive-field analysis and listings."""
        ops: list[tuple[str, object]] = []
        if self.kind == "pool":
            ops.append(("maxpool", None))
        if self.kind == "upsample":
            ops.append(("upsample", None))
        ops.extend(("conv", d) for d in self.dil)
        if self.conv is not None:
            ops.append(("conv", self.conv))
        return ops

    def output_size(self, h: int, w: int, target: Optional[tuple[int, int]] = None) -> tuple[int, int]:
        if self.kind == "pool":
            return h // 2, w // 2
        if self.kind == "strided":
            return F.output_size(h, 3, 2, 1, 1), F.output_size(w, 3, 2, 1, 1)
        if self.kind == "upsample":
            if target is None:
                raise ValueError("upsample transform needs a target size")
            return target
        return h, w

    def forward(self, x: Tensor, target_size: Optional[tuple[int, int]] = None) -> Tensor:
        if self.downsamples and min(x.shape[2:]) < 2:
            raise ValueError(f"cannot downsample a {x.shape[2]}x{x.shape[3]} map")
        if self.kind == "upsample":
            if target_size is None:
                raise ValueError("upsample transform needs a target size")
            x = F.upsample_nearest(x, *target_size)
        elif self.kind == "pool":
            x = F.maxpool2d(x)
        for d in self.dil:
            x = d.forward(x)
        if self.conv is not None:
            x = self.conv.forward(x)
        return x

    def describe(self) -> str:
        extra = f" rates={','.join(map(str, self.rates))}" if self.rates else ""
        return f"{self.kind} c={self.channels}{extra}"


def multigrid_rates(base: int, pattern: str = "constant", n: int = 3) -> tuple[int, ...]:
    """Dilation rates of a multi-grid block with base rate ``base``.

    ``constant`` gives (r, r, r); ``doubling`` gives (r, 2r, 4r).
    """
    if base < 1 or (base > 1 and base % 2):
        raise ValueError(f"multi-grid base rate must be a positive even integer, got {base}")
    if pattern == "constant":
        return (base,) * n
    if pattern == "doubling":
        return tuple(base * 2 ** i for i in range(n))
    raise ValueError(f"unknown multi-grid pattern {pattern!r}")


class MixingBlock(Module):
    def __init__(self, in_ch: int, out_ch: int, rng=None, dtype=np.float32):
        self.conv = Conv2d(in_ch, out_ch, 1, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv.forward(x)


class InitialDownsamplingBlock(Module):
    """3x3 conv, 2x2 max pool, then two pre-activated 3x3 convs."""

    def __init__(self, in_ch: int, width: int, rng=None, dtype=np.float32, **bn):
        self.conv0 = Conv2d(in_ch, width, 3, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(width, dtype=dtype, **bn)
        self.conv1 = Conv2d(width, width, 3, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(width, dtype=dtype, **bn)
        self.conv2 = Conv2d(width, width, 3, rng=rng, dtype=dtype)

    def forward(self, x: Tensor, ctx: Context = EVAL) -> Tensor:
        x = F.maxpool2d(self.conv0.forward(x))
        x = self.conv1.forward(F.relu(self.bn1.forward(x, ctx.train)))
        return self.conv2.forward(F.relu(self.bn2.forward(x, ctx.train)))


class FinalUpsamplingBlock(Module):
    """Nearest upsample back to the input size, then a pre-activated 3x3 conv."""

    def __init__(self, in_ch: int, width: int, rng=None, dtype=np.float32, **bn):
        self.bn = BatchNorm2d(in_ch, dtype=dtype, **bn)
        self.conv = Conv2d(in_ch, width, 3, rng=rng, dtype=dtype)

    def forward(self, x: Tensor, target_size: tuple[int, int], ctx: Context = EVAL) -> Tensor:
        x = F.relu(self.bn.forward(x, ctx.train))
        return self.conv.forward(F.upsample_nearest(x, *target_size))


class Classifier(Module):
    def __init__(self, in_ch: int, n_classes: int, rng=None, dtype=np.float32, **bn):
        self.bn = BatchNorm2d(in_ch, dtype=dtype, **bn)
        self.conv = Conv2d(in_ch, n_classes, 1, rng=rng, dtype=dtype)

    def forward(self, x: Tensor, ctx: Context = EVAL) -> Tensor:
        return self.conv.forward(F.relu(self.bn.forward(x, ctx.train)))
