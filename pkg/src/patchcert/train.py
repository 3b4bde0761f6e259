"""Training on randomly ablated images, plus the synthetic stripe task.

Each epoch applies one uniformly random ablation to every training
image, forwards it through the reduced-token path, and updates with
momentum SGD: v <- momentum*v + g + weight_decay*theta, theta -= lr*v.
Runs are single-threaded and bit-deterministic for a given seed.

The stripe dataset paints every pixel with a class-specific base level
plus bounded uniform noise, so any single pixel column carries the full
label and column ablations stay classifiable by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .ablation import block_ablation, column_ablation
from .errors import DivergenceError, ParameterError
from .vit import Model, loss_and_gradients, process_ablation

__all__ = [
    "TrainConfig",
    "LabeledDataset",
    "OptState",
    "make_stripe_dataset",
    "train_epoch",
    "early_stopping_select",
    "ablation_accuracy",
    "fit",
]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.05
    lr_step_factor: float = 1.0
    lr_step_period: int = 0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    b_train: int = 3
    kind: str = "column"
    seed: int = 0
    patience: int = 5

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.b_train, self.patience) < 1:
            raise ParameterError("epochs, batch size, b_train and patience must be positive")
        if self.lr < 0 or self.weight_decay < 0:
            raise ParameterError("lr and weight decay must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ParameterError(f"momentum must be in [0, 1), got {self.momentum}")

    def lr_at(self, epoch: int) -> float:
        if self.lr_step_period <= 0 or self.lr_step_factor == 1.0:
            return self.lr
        return self.lr * self.lr_step_factor ** (epoch // self.lr_step_period)


@dataclass(frozen=True)
class LabeledDataset:
    """Images with labels and disjoint train/val/test split tags."""

    images: np.ndarray  # (n, h, w, c) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64 in [0, k)
    splits: np.ndarray  # (n,) strings from {train, val, test}
    k: int

    def __post_init__(self):
        if not (len(self.images) == len(self.labels) == len(self.splits)):
            raise ParameterError("images, labels and splits must have equal length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.k):
            raise ParameterError(f"labels outside [0, {self.k})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, tag: str) -> "LabeledDataset":
        sel = self.splits == tag
        return LabeledDataset(
            images=self.images[sel], labels=self.labels[sel], splits=self.splits[sel], k=self.k
        )


def stripe_base_levels(k: int) -> np.ndarray:
    """k maximally separated levels in (0, 1): (2c+1)/(2k)."""
    return (2 * np.arange(k) + 1) / (2 * k)


def make_stripe_dataset(
    n: int, h: int, w: int, k: int, noise: float, seed: int, channels: int = 1
) -> LabeledDataset:
    """Constant-color images (per class) with bounded uniform pixel noise.

    Split tags are assigned deterministically: first 70% train, next 15%
    val, rest test.
    """
    if k > 8 or k < 2:
        raise ParameterError(f"stripe dataset supports 2..8 classes, got {k}")
    if not 0.0 <= noise < 0.5:
        raise ParameterError(f"noise amplitude must be in [0, 0.5), got {noise}")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, k, size=n).astype(np.int64)
    base = stripe_base_levels(k)[labels].astype(np.float32)
    images = np.broadcast_to(base[:, None, None, None], (n, h, w, channels)).copy()
    if noise > 0:
        images += rng.uniform(-noise, noise, size=images.shape).astype(np.float32)
        np.clip(images, 0.0, 1.0, out=images)
    n_train = int(n * 0.70)
    n_val = int(n * 0.15)
    splits = np.array(["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val))
    return LabeledDataset(images=images, labels=labels, splits=splits, k=k)


@dataclass
class OptState:
    """Momentum buffers plus the epoch RNG; explicit so runs replay exactly."""

    velocity: dict
    rng: np.random.Generator
    epoch: int = 0

    @classmethod
    def fresh(cls, model: Model, cfg: TrainConfig) -> "OptState":
        seq = np.random.SeedSequence(cfg.seed)
        (epoch_seed,) = seq.spawn(1)
        return cls(
            velocity={k: np.zeros_like(v) for k, v in model.params.items()},
            rng=np.random.default_rng(epoch_seed),
        )


def _random_ablation(x: np.ndarray, cfg: TrainConfig, rng: np.random.Generator):
    h, w = x.shape[0], x.shape[1]
    if cfg.kind == "column":
        return column_ablation(x, int(rng.integers(0, w)), cfg.b_train)
    return block_ablation(x, int(rng.integers(0, h)), int(rng.integers(0, w)), cfg.b_train)


def train_epoch(model: Model, data: LabeledDataset, cfg: TrainConfig, state: OptState | None = None):
    """One pass over the data with fresh random ablations; returns mean loss.

    Updates model.params in place and returns (model, epoch_loss, state).
    """
    if state is None:
        state = OptState.fresh(model, cfg)
    rng = state.rng
    lr = cfg.lr_at(state.epoch)
    order = rng.permutation(len(data))
    total_loss = 0.0
    for batch_index, start in enumerate(range(0, len(order), cfg.batch_size)):
        idx = order[start : start + cfg.batch_size]
        grads = {k: np.zeros_like(v) for k, v in model.params.items()}
        batch_loss = 0.0
        for i in idx:
            z_m = _random_ablation(data.images[i], cfg, rng)
            loss, g = loss_and_gradients(z_m, int(data.labels[i]), model.params, model.cfg)
            batch_loss += loss
            for k in grads:
                grads[k] += g[k]
        if not np.isfinite(batch_loss):
            raise DivergenceError(
                f"non-finite loss in batch {batch_index}", batch_index=batch_index
            )
        inv = 1.0 / len(idx)
        for k, theta in model.params.items():
            g = grads[k] * inv + cfg.weight_decay * theta
            v = state.velocity[k]
            v *= cfg.momentum
            v += g
            theta -= lr * v
        total_loss += batch_loss
    state.epoch += 1
    return model, total_loss / len(data), state


def early_stopping_select(history, patience: int) -> int:
    """Index of the best validation accuracy under patience-based stopping.

    Walks the history as training would: tracks the best epoch (ties go
    to the earliest) and stops once ``patience`` epochs pass without
    improvement. Later entries beyond the stopping point are ignored.
    """
    if len(history) == 0:
        raise ParameterError("early stopping needs a nonempty history")
    if patience < 1:
        raise ParameterError(f"patience must be >= 1, got {patience}")
    best = 0
    for i, acc in enumerate(history):
        if acc > history[best]:
            best = i
        elif i - best >= patience:
            break
    return best


def ablation_accuracy(model: Model, data: LabeledDataset, b_eval: int, kind: str = "column") -> float:
    """Fraction of correct single-ablation predictions over the stride-1 set."""
    if len(data) == 0:
        raise ParameterError("cannot evaluate an empty dataset")
    h, w = model.cfg.h, model.cfg.w
    correct = 0
    total = 0
    for i in range(len(data)):
        x = data.images[i]
        label = int(data.labels[i])
        if kind == "column":
            ablations = (column_ablation(x, s, b_eval) for s in range(w))
        else:
            ablations = (
                block_ablation(x, t, l, b_eval) for t in range(h) for l in range(w)
            )
        for z_m in ablations:
            correct += process_ablation(z_m, model.params, model.cfg) == label
            total += 1
    return correct / total


def fit(model: Model, data: LabeledDataset, cfg: TrainConfig, log_path=None) -> dict:
    """Train with per-epoch validation and early stopping.

    Keeps the parameter snapshot of the best validation epoch and stops
    after ``patience`` epochs without improvement. Returns a record with
    the best model, per-epoch history, and the JSONL log lines.
    """
    train_split = data.subset("train")
    val_split = data.subset("val")
    if len(train_split) == 0 or len(val_split) == 0:
        raise ParameterError("fit needs nonempty train and val splits")
    state = OptState.fresh(model, cfg)
    history: list[float] = []
    losses: list[float] = []
    log_lines: list[str] = []
    best_params = {k: v.copy() for k, v in model.params.items()}
    best_epoch = -1
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        model, loss, state = train_epoch(model, train_split, cfg, state)
        val_acc = ablation_accuracy(model, val_split, cfg.b_train, cfg.kind)
        losses.append(loss)
        history.append(val_acc)
        line = json.dumps(
            {"epoch": epoch, "train_loss": round(loss, 6), "val_ablation_acc": val_acc, "lr": lr},
            sort_keys=True,
        )
        log_lines.append(line)
        if best_epoch < 0 or val_acc > history[best_epoch]:
            best_epoch = epoch
            best_params = {k: v.copy() for k, v in model.params.items()}
        if epoch - best_epoch >= cfg.patience:
            break
    model.params = best_params
    if log_path is not None:
        with open(log_path, "w") as fh:
            fh.write("\n".join(log_lines) + "\n")
    return {
        "model": model,
        "best_epoch": best_epoch,
        "val_history": history,
        "loss_history": losses,
        "log_lines": log_lines,
    }
