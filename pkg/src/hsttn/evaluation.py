"""Farm-level masked MAE/RMSE and test-split model evaluation.

Both metrics sum per-turbine figures: MAE is the sum over turbines of
each turbine's mean absolute error over its own valid samples, RMSE the
sum of per-turbine root mean squared errors. A turbine with no valid
samples is excluded from the sums and reported, never silently averaged.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .data import NormStats, SampleWindow
from .errors import EvaluationError
from .model import HSTTN


@dataclass
class MetricReport:
    mae: float
    rmse: float
    per_turbine_mae: np.ndarray
    per_turbine_rmse: np.ndarray
    valid_counts: np.ndarray
    excluded_turbines: list[int]
    unit: str = "kW"
    n_windows: int = 0

    def to_kv(self) -> dict[str, str]:
        return {
            "mae": repr(float(self.mae)),
            "rmse": repr(float(self.rmse)),
            "unit": self.unit,
            "n_windows": str(self.n_windows),
            "n_turbines": str(len(self.per_turbine_mae)),
            "excluded_turbines": ",".join(map(str, self.excluded_turbines)) or "none",
        }

    def to_csv_rows(self) -> list[list[str]]:
        rows = [["turbine", "mae", "rmse", "valid_count"]]
        for n in range(len(self.per_turbine_mae)):
            rows.append([
                str(n),
                repr(float(self.per_turbine_mae[n])),
                repr(float(self.per_turbine_rmse[n])),
                str(int(self.valid_counts[n])),
            ])
        rows.append(["farm", repr(float(self.mae)), repr(float(self.rmse)),
                     str(int(self.valid_counts.sum()))])
        return rows


class _Accumulator:
    """Streaming per-turbine error sums; order of windows does not matter."""

    def __init__(self, n_turbines: int):
        self.abs_sum = np.zeros(n_turbines)
        self.sq_sum = np.zeros(n_turbines)
        self.count = np.zeros(n_turbines, dtype=np.int64)

    def add(self, y: np.ndarray, y_hat: np.ndarray, mask: np.ndarray) -> None:
        err = np.where(mask, y - y_hat, 0.0)
        self.abs_sum += np.abs(err).sum(axis=1)
        self.sq_sum += (err * err).sum(axis=1)
        self.count += mask.sum(axis=1)

    def report(self, unit: str, n_windows: int) -> MetricReport:
        if self.count.sum() == 0:
            raise EvaluationError("no valid cells in the evaluation set")
        included = self.count > 0
        mae_n = np.full(len(self.count), np.nan)
        rmse_n = np.full(len(self.count), np.nan)
        mae_n[included] = self.abs_sum[included] / self.count[included]
        rmse_n[included] = np.sqrt(self.sq_sum[included] / self.count[included])
        return MetricReport(
            mae=float(mae_n[included].sum()),
            rmse=float(rmse_n[included].sum()),
            per_turbine_mae=mae_n,
            per_turbine_rmse=rmse_n,
            valid_counts=self.count.copy(),
            excluded_turbines=[int(i) for i in np.flatnonzero(~included)],
            unit=unit,
            n_windows=n_windows,
        )


def _flatten(y: np.ndarray, y_hat: np.ndarray, mask: np.ndarray
             ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if y.shape != y_hat.shape:
        raise EvaluationError(f"shape mismatch: targets {y.shape} vs predictions {y_hat.shape}")
    n = y.shape[0]
    y = y.reshape(n, -1)
    y_hat = y_hat.reshape(n, -1)
    mask = mask.reshape(n, -1)
    if mask.shape != y.shape:
        raise EvaluationError(f"mask shape {mask.shape} does not match samples {y.shape}")
    return y, y_hat, mask


def masked_mae(y: np.ndarray, y_hat: np.ndarray, mask: np.ndarray) -> float:
    """Sum over turbines of per-turbine mean absolute error on valid cells."""
    y, y_hat, mask = _flatten(y, y_hat, mask)
    acc = _Accumulator(y.shape[0])
    acc.add(y, y_hat, mask)
    return acc.report("native", 0).mae


def masked_rmse(y: np.ndarray, y_hat: np.ndarray, mask: np.ndarray) -> float:
    """Sum over turbines of per-turbine root mean squared error on valid cells."""
    y, y_hat, mask = _flatten(y, y_hat, mask)
    acc = _Accumulator(y.shape[0])
    acc.add(y, y_hat, mask)
    return acc.report("native", 0).rmse


def predict_window(model: HSTTN, window: SampleWindow, stats: NormStats,
                   target_channel: int) -> np.ndarray:
    """Denormalized (N, F) predictions for one window."""
    y_hat = model.forward(Tensor(window.history)).data[:, :, 0]
    return stats.invert(y_hat, target_channel)


def evaluate_model(model: HSTTN, windows: Sequence[SampleWindow], stats: NormStats,
                   target_channel: int, megawatts: bool = False) -> MetricReport:
    """Run inference over every window, invert normalization on both
    predictions and targets, and accumulate the farm metrics in native
    power units (or MW when `megawatts` is set)."""
    if not windows:
        raise EvaluationError("evaluation over an empty window set")
    divisor = 1000.0 if megawatts else 1.0
    acc = _Accumulator(model.config.n_turbines)
    for w in windows:
        pred = predict_window(model, w, stats, target_channel) / divisor
        truth = stats.invert(w.future_target[:, :, 0], target_channel) / divisor
        acc.add(truth, pred, w.future_validity)
    return acc.report("MW" if megawatts else "kW", len(windows))


def persistence_forecast(window: SampleWindow, stats: NormStats,
                         target_channel: int) -> np.ndarray:
    """Baseline: repeat each turbine's last observed target value across
    the whole horizon, in denormalized units."""
    last = stats.invert(window.history[:, -1, target_channel], target_channel)
    horizon = window.future_target.shape[1]
    return np.repeat(last[:, None], horizon, axis=1)


def evaluate_persistence(windows: Sequence[SampleWindow], stats: NormStats,
                         target_channel: int, megawatts: bool = False) -> MetricReport:
    if not windows:
        raise EvaluationError("evaluation over an empty window set")
    divisor = 1000.0 if megawatts else 1.0
    n_turbines = windows[0].history.shape[0]
    acc = _Accumulator(n_turbines)
    for w in windows:
        pred = persistence_forecast(w, stats, target_channel) / divisor
        truth = stats.invert(w.future_target[:, :, 0], target_channel) / divisor
        acc.add(truth, pred, w.future_validity)
    return acc.report("MW" if megawatts else "kW", len(windows))
