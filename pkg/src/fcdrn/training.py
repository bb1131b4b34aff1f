"""Training protocol: RMSProp with coupled weight decay, per-epoch exponential
learning-rate decay, crop/flip augmentation, optional soft targets and early
stopping on validation mean IoU."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as F
from .autodiff import NumericalError, Tensor
from .builder import FCDRN
from .data import Dataset
from .metrics import ConfusionMatrix, accumulate, global_accuracy, miou


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    lr_decay: float = 0.995
    weight_decay: float = 1e-4
    dropout: float = 0.2
    crop: Optional[int] = 324
    hflip_prob: float = 0.5
    patience: int = 200
    soft_targets: bool = False
    soft_on: float = 0.9
    soft_off: float = 0.01
    batch_size: int = 8
    max_epochs: int = 1000
    seed: int = 0
    rho: float = 0.9
    eps: float = 1e-8
    channelwise_dropout: bool = False
    eval_batch_size: int = 8
    track_train_miou: bool = False
    # optional early exit once both targets are met (used by the overfit check)
    target_train_miou: Optional[float] = None
    target_val_miou: Optional[float] = None

    def __post_init__(self):
        checks = [
            (self.lr0 >= 0, "lr0 must be >= 0"),
            (0 < self.lr_decay <= 1, "lr_decay must be in (0, 1]"),
            (self.weight_decay >= 0, "weight_decay must be >= 0"),
            (0 <= self.dropout < 1, "dropout must be in [0, 1)"),
            (self.crop is None or self.crop >= 32, "crop must be >= 32"),
            (0 <= self.hflip_prob <= 1, "hflip_prob must be in [0, 1]"),
            (self.patience >= 1, "patience must be >= 1"),
            (0 <= self.soft_off < self.soft_on <= 1, "need 0 <= soft_off < soft_on <= 1"),
            (self.batch_size >= 1 and self.eval_batch_size >= 1, "batch sizes must be >= 1"),
            (self.max_epochs >= 1, "max_epochs must be >= 1"),
            (0 <= self.rho < 1, "rho must be in [0, 1)"),
            (self.eps > 0, "eps must be > 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * cfg.lr_decay ** epoch


class RMSProp:
    """v <- rho*v + (1-rho)*g^2 ; p <- p - lr*g/(sqrt(v)+eps), with g += wd*p first."""

    def __init__(self, params: dict[str, Tensor], rho: float = 0.9, eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.rho, self.eps, self.weight_decay = rho, eps, weight_decay
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        grads = {}
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise NumericalError(f"non-finite gradient for {k}")
            grads[k] = g
        for k, p in self.params.items():
            g = grads[k]
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.v[k]
            v *= self.rho
            v += (1 - self.rho) * g * g
            p.data = (p.data - lr * g / (np.sqrt(v) + self.eps)).astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.v.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if k not in self.v or self.v[k].shape != v.shape:
                raise ValueError(f"optimizer state mismatch for {k}")
            self.v[k] = np.asarray(v, dtype=self.v[k].dtype).copy()


def rmsprop_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: dict[str, np.ndarray],
                 lr: float, rho: float = 0.9, eps: float = 1e-8, weight_decay: float = 0.0) -> dict[str, np.ndarray]:
    """Functional form of one update; ``state`` holds the running squared-gradient averages."""
    out = {}
    for k, p in params.items():
        g = np.asarray(grads[k])
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {k}")
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for {k}")
        g = g + weight_decay * p
        v = state.get(k, np.zeros_like(p))
        v = rho * v + (1 - rho) * g * g
        state[k] = v
        out[k] = p - lr * g / (np.sqrt(v) + eps)
    return out


def augment(image: np.ndarray, label: np.ndarray, rng: np.random.Generator, crop: Optional[int] = None,
            hflip_prob: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Uniform random crop then horizontal flip, applied identically to both maps."""
    _, h, w = image.shape
    if label.shape != (h, w):
        raise ValueError("image and label are not aligned")
    if crop is not None:
        if h < crop or w < crop:
            raise ValueError(f"image {h}x{w} smaller than crop {crop}")
        y0 = int(rng.integers(0, h - crop + 1))
        x0 = int(rng.integers(0, w - crop + 1))
        image = image[:, y0 : y0 + crop, x0 : x0 + crop]
        label = label[y0 : y0 + crop, x0 : x0 + crop]
    if rng.random() < hflip_prob:
        image = image[:, :, ::-1]
        label = label[:, ::-1]
    return np.ascontiguousarray(image), np.ascontiguousarray(label)


def soften(target: np.ndarray, on: float = 0.9, off: float = 0.01) -> np.ndarray:
    """Map a one-hot (N, K, H, W) target to on/off values; all-zero (void) pixels stay zero."""
    valid = target.sum(axis=1, keepdims=True) > 0
    return np.where(target > 0, on, off).astype(target.dtype) * valid


def evaluate(model: FCDRN, ds: Dataset, batch_size: int = 8) -> ConfusionMatrix:
    """Eval-mode confusion matrix over a dataset at full resolution."""
    if len(ds) == 0:
        raise ValueError("empty dataset")
    cm = ConfusionMatrix(model.plan.classes, ds.void_index)
    for x, y in ds.batches(batch_size):
        accumulate(cm, model.predict(x.astype(model.dtype, copy=False)), y, ds.void_index)
    return cm


def state_dict(model: FCDRN) -> dict[str, np.ndarray]:
    out = {k: p.data.copy() for k, p in model.named_parameters()}
    out.update({k: b.copy() for k, b in model.named_buffers()})
    return out


def load_state(model: FCDRN, state: dict[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    for k, v in state.items():
        if k in params:
            params[k].data = v.copy()
        elif k in buffers:
            buffers[k][...] = v
        else:
            raise KeyError(k)


class EarlyStopping:
    """Strict-improvement early stopping; epochs are numbered from 1."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.bad = 0

    def update(self, epoch: int, value: float) -> tuple[bool, bool]:
        """Returns (improved, should_stop)."""
        if value > self.best:
            self.best, self.best_epoch, self.bad = value, epoch, 0
            return True, False
        self.bad += 1
        return False, self.bad >= self.patience

    def state(self) -> dict:
        return {"best": self.best, "best_epoch": self.best_epoch, "bad": self.bad}

    def load(self, state: dict) -> None:
        self.best = float(state["best"])
        self.best_epoch = int(state["best_epoch"])
        self.bad = int(state["bad"])


LOG_FIELDS = ("epoch", "lr", "train_loss", "val_miou", "val_acc", "seconds")


@dataclass
class TrainResult:
    status: str  # "converged" | "patience" | "max_epochs" | "target" | "diverged"
    best_epoch: int
    best_val_miou: float
    epochs_run: int
    history: list[dict] = field(default_factory=list)
    best_state: Optional[dict[str, np.ndarray]] = None
    message: str = ""


def _format_row(row: dict) -> list[str]:
    out = []
    for k in row:
        v = row[k]
        out.append(f"{v:.9g}" if isinstance(v, float) else str(v))
    return out


def train(model: FCDRN, train_ds: Dataset, val_ds: Dataset, cfg: TrainConfig, log_path=None,
          start_epoch: int = 0, optimizer_state: Optional[dict] = None, stopper_state: Optional[dict] = None,
          on_epoch: Optional[Callable[[dict, FCDRN, "RMSProp", "EarlyStopping"], None]] = None) -> TrainResult:
    """Train in place; the model ends holding the best-validation weights.

    Each epoch draws its shuffle, augmentation and dropout randomness from a
    generator seeded by (cfg.seed, epoch), so a run resumed at any epoch
    continues exactly as the uninterrupted run would.
    """
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("empty dataset")
    if set(train_ds.names) & set(val_ds.names):
        raise ValueError("train and validation splits overlap")
    params = dict(model.named_parameters())
    opt = RMSProp(params, cfg.rho, cfg.eps, cfg.weight_decay)
    if optimizer_state:
        opt.load_state_dict(optimizer_state)
    model._dropout = cfg.dropout
    for st in model.stages.values():
        for b in st.blocks:
            b.dropout_p = cfg.dropout
    void = train_ds.void_index
    k = model.plan.classes
    stopper = EarlyStopping(cfg.patience)
    if stopper_state:
        stopper.load(stopper_state)
    history: list[dict] = []
    best_state = state_dict(model)
    status = "max_epochs"
    message = ""
    log_fh = writer = None
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        append = start_epoch > 0 and log_path.exists()
        log_fh = open(log_path, "a" if append else "w", newline="")
        writer = csv.writer(log_fh)
        if not append:
            writer.writerow(list(LOG_FIELDS) + (["train_miou"] if cfg.track_train_miou else []))
    epoch = start_epoch
    try:
        for epoch in range(start_epoch, cfg.max_epochs):
            t0 = time.perf_counter()
            rng = np.random.default_rng([cfg.seed, epoch])
            lr = lr_at_epoch(cfg, epoch)
            order = rng.permutation(len(train_ds))
            losses = []
            try:
                for s in range(0, len(order), cfg.batch_size):
                    sel = order[s : s + cfg.batch_size]
                    xs, ys = zip(*(augment(train_ds.images[i], train_ds.labels[i], rng, cfg.crop, cfg.hflip_prob)
                                   for i in sel))
                    x = Tensor(np.stack(xs).astype(model.dtype, copy=False))
                    y = np.stack(ys)
                    if cfg.soft_targets:
                        target = soften(F.one_hot(y, k, void), cfg.soft_on, cfg.soft_off).astype(model.dtype)
                    else:
                        target = y
                    logits = model.forward(x, train=True, rng=rng, channelwise_dropout=cfg.channelwise_dropout)
                    loss = F.softmax_cross_entropy(logits, target, void)
                    if not np.isfinite(loss.data):
                        raise NumericalError("non-finite loss")
                    opt.zero_grad()
                    F.backward(loss)
                    opt.step(lr)
                    losses.append(float(loss.data))
            except NumericalError as exc:
                status, message = "diverged", f"epoch {epoch + 1}: {exc}"
                break
            cm = evaluate(model, val_ds, cfg.eval_batch_size)
            _, vm = miou(cm)
            row = {"epoch": epoch + 1, "lr": lr, "train_loss": float(np.mean(losses)), "val_miou": vm,
                   "val_acc": global_accuracy(cm), "seconds": time.perf_counter() - t0}
            if cfg.track_train_miou:
                row["train_miou"] = miou(evaluate(model, train_ds, cfg.eval_batch_size))[1]
            history.append(row)
            if writer is not None:
                writer.writerow(_format_row(row))
                log_fh.flush()
            improved, stop = stopper.update(epoch + 1, vm)
            if improved:
                best_state = state_dict(model)
            if on_epoch is not None:
                on_epoch(row, model, opt, stopper)
            if (cfg.target_val_miou is not None and vm >= cfg.target_val_miou
                    and (cfg.target_train_miou is None or row.get("train_miou", -1.0) >= cfg.target_train_miou)):
                status = "target"
                break
            if stop:
                status = "patience"
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    load_state(model, best_state)
    return TrainResult(status, stopper.best_epoch, stopper.best if stopper.best_epoch else float("nan"),
                       len(history), history, best_state, message)
