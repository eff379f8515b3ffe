"""Regression accuracy metrics and the 1-D Gaussian kernel density estimator
used to render trajectory figures.

MAPE is reported in percent. A truth vector containing zeros makes MAPE
undefined; it is then reported as None (flagged) while the other metrics
still compute, since near-zero targets do occur in the data this is used on.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

__all__ = ["MetricReport", "regression_metrics", "kde_gaussian"]


@dataclass(frozen=True)
class MetricReport:
    """rmse/mae >= 0, r2 <= 1, mape in percent (None when undefined)."""

    rmse: float
    r2: float
    mae: float
    mape: Optional[float]
    n: int

    def to_json(self) -> str:
        return json.dumps({"rmse": self.rmse, "r2": self.r2, "mae": self.mae,
                           "mape": self.mape, "n": self.n})


def regression_metrics(truth, pred) -> MetricReport:
    """RMSE, R^2 = 1 - SSE/SST, MAE, and MAPE (x100) of predictions.

    Lengths must match and be >= 1. Any zero truth value flags MAPE as
    undefined (None).
    """
    t = np.asarray(truth, dtype=np.float64).reshape(-1)
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: {t.shape[0]} vs {p.shape[0]}")
    if t.shape[0] < 1:
        raise ValueError("need at least one value")
    err = t - p
    rmse = float(np.sqrt(np.mean(err * err)))
    mae = float(np.mean(np.abs(err)))
    sse = float(np.sum(err * err))
    sst = float(np.sum((t - t.mean()) ** 2))
    r2 = 1.0 - sse / sst if sst > 0 else (1.0 if sse == 0 else -np.inf)
    if np.any(t == 0):
        mape = None
    else:
        mape = float(np.mean(np.abs(err / t)) * 100.0)
    return MetricReport(rmse=rmse, r2=float(r2), mae=mae, mape=mape, n=t.shape[0])


def kde_gaussian(samples, grid) -> np.ndarray:
    """Gaussian KDE on a 1-D grid with Scott's bandwidth n^(-1/5) * sample std.

    Needs at least two samples and a non-empty grid. A zero-variance sample
    falls back to bandwidth 1e-3 (with a warning) instead of collapsing.
    """
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    g = np.asarray(grid, dtype=np.float64).reshape(-1)
    if x.shape[0] < 2:
        raise ValueError("need at least two samples")
    if g.shape[0] < 1:
        raise ValueError("grid must be non-empty")
    std = float(x.std(ddof=1))
    bw = x.shape[0] ** (-0.2) * std
    if bw <= 0:
        warnings.warn("zero sample variance; falling back to bandwidth 1e-3")
        bw = 1e-3
    u = (g[:, None] - x[None, :]) / bw
    return np.exp(-0.5 * u * u).mean(axis=1) / (bw * np.sqrt(2 * np.pi))
