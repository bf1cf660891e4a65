"""Masked-MSE training loop: Adam with bias correction, exponential
learning-rate decay, early stopping on validation loss, best-checkpoint
selection. Fully deterministic for a fixed seed."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .autodiff import GradTape, RngStream, Tensor, backward, mul, scale, sum_all
from .data import NormStats, SampleWindow, drop_fully_invalid
from .errors import ConfigError, DatasetError, TrainingError
from .model import HSTTN, ModelConfig


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 1e-4
    lr_decay: float = 0.7
    batch_size: int = 4
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0

    def validate(self) -> None:
        if self.initial_lr <= 0:
            raise ConfigError(f"initial_lr must be positive, got {self.initial_lr}")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.max_epochs < 0:
            raise ConfigError(f"max_epochs must be non-negative, got {self.max_epochs}")
        if self.patience < 1:
            raise ConfigError(f"patience must be at least 1, got {self.patience}")


def mse_loss(y_hat: Tensor, y: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean squared error over valid positions only.

    `y` is (N, F, 1) targets, `mask` is (N, F) validity. Masked positions
    contribute nothing, whatever their stored values."""
    y = np.asarray(y, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if y_hat.shape != y.shape:
        raise TrainingError(f"prediction shape {y_hat.shape} != target shape {y.shape}")
    if mask.shape != y.shape[:-1]:
        raise TrainingError(f"mask shape {mask.shape} does not match targets {y.shape}")
    m = int(mask.sum())
    if m == 0:
        raise TrainingError("loss over a window with zero valid positions "
                            "(it should have been dropped upstream)")
    diff = y_hat - Tensor(y)
    masked_sq = mul(mul(diff, diff), Tensor(mask[..., None].astype(np.float64)))
    return scale(sum_all(masked_sq), 1.0 / m)


@dataclass
class AdamState:
    """First/second moment estimates per parameter plus the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: Mapping[str, Tensor]) -> "AdamState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: Mapping[str, Tensor], state: AdamState, lr: float) -> None:
    """One Adam update over every parameter with a populated gradient."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p.data = p.data - lr * m_hat / np.sqrt(v_hat + state.eps)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    return cfg.initial_lr * cfg.lr_decay ** epoch


def early_stop(history: Sequence[float], patience: int) -> bool:
    """True once the running best has gone `patience` consecutive epochs
    without strict improvement."""
    if not history:
        raise ConfigError("early_stop needs a non-empty history")
    best = history[0]
    stale = 0
    for value in history[1:]:
        if value < best:
            best = value
            stale = 0
        else:
            stale += 1
    return stale >= patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class Checkpoint:
    """Best-on-validation snapshot with everything needed to re-run it."""

    model_config: ModelConfig
    parameters: dict[str, np.ndarray]
    epoch: int
    val_loss: float
    norm_stats: NormStats
    train_config: TrainConfig
    schema_dict: dict = field(default_factory=dict)


def validation_loss(model: HSTTN, windows: Sequence[SampleWindow]) -> float:
    """Mean masked MSE over windows, dropout off, no gradient recording."""
    if not windows:
        raise DatasetError("validation loss over an empty window set")
    total = 0.0
    for w in windows:
        y_hat = model.forward(Tensor(w.history))
        total += float(mse_loss(y_hat, w.future_target, w.future_validity).data)
    return total / len(windows)


def train(model: HSTTN, train_windows: Sequence[SampleWindow],
          val_windows: Sequence[SampleWindow], cfg: TrainConfig,
          norm_stats: NormStats, schema_dict: dict | None = None,
          ) -> tuple[Checkpoint, list[EpochRecord]]:
    """Epoch loop over seeded shuffles of full-farm windows. Each epoch
    ends with a validation pass; the best snapshot so far is kept and
    returned once early stopping or the epoch budget ends the run."""
    cfg.validate()
    train_windows = drop_fully_invalid(train_windows)
    val_windows = drop_fully_invalid(val_windows)
    if not train_windows:
        raise DatasetError("no training windows with any valid future cell")
    if not val_windows:
        raise DatasetError("no validation windows with any valid future cell")

    params = model.params.trainable()
    state = AdamState.init(params)
    rng = RngStream(cfg.seed)
    dropout_rng = rng.child(1)

    def snapshot(epoch: int, val: float) -> Checkpoint:
        return Checkpoint(
            model_config=model.config,
            parameters=model.params.state_arrays(),
            epoch=epoch,
            val_loss=val,
            norm_stats=norm_stats,
            train_config=cfg,
            schema_dict=schema_dict or {},
        )

    best_val = validation_loss(model, val_windows)
    best = snapshot(0, best_val)
    history = [best_val]
    records: list[EpochRecord] = []

    for epoch in range(cfg.max_epochs):
        lr = lr_schedule(epoch, cfg)
        order = rng.child(1000 + epoch).permutation(len(train_windows))
        epoch_loss = 0.0
        n_batches = 0
        for lo in range(0, len(order), cfg.batch_size):
            batch = [train_windows[i] for i in order[lo:lo + cfg.batch_size]]
            model.params.zero_grad()
            with GradTape() as tape:
                loss = None
                for w in batch:
                    y_hat = model.forward(Tensor(w.history), training=True, rng=dropout_rng)
                    wl = mse_loss(y_hat, w.future_target, w.future_validity)
                    loss = wl if loss is None else loss + wl
                loss = scale(loss, 1.0 / len(batch))
                if not np.isfinite(loss.data):
                    raise TrainingError(
                        f"training loss diverged at epoch {epoch}, batch {n_batches}"
                    )
                backward(loss, tape)
            adam_step(params, state, lr)
            epoch_loss += float(loss.data)
            n_batches += 1

        val = validation_loss(model, val_windows)
        history.append(val)
        records.append(EpochRecord(epoch=epoch + 1, train_loss=epoch_loss / n_batches,
                                   val_loss=val, lr=lr))
        if val < best_val:
            best_val = val
            best = snapshot(epoch + 1, val)
        if early_stop(history, cfg.patience):
            break
    return best, records
