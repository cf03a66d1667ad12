"""Forecast error metrics, run aggregation and box-plot summaries."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from dpfedcast.data import WindowSample, stack_samples
from dpfedcast.mlp import ModelParams, predict

ZERO_TARGET = 1e-8
METRIC_NAMES = ("mse", "mae", "mape_percent", "r2")


@dataclass(frozen=True)
class MetricsReport:
    mse: float
    mae: float
    mape_percent: float | None  # None when every target is zero
    r2: float | None  # None when the targets are constant
    n_samples: int
    per_client: dict[str, float | None] = field(default_factory=dict)
    excluded_zero_targets: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsReport":
        return cls(**d)


def _mape(y_true: np.ndarray, y_pred: np.ndarray) -> tuple[float | None, int]:
    keep = np.abs(y_true) >= ZERO_TARGET
    if not keep.any():
        return None, int((~keep).sum())
    ape = np.abs(y_pred[keep] - y_true[keep]) / np.abs(y_true[keep])
    return float(100.0 * ape.mean()), int((~keep).sum())


def compute_metrics(y_true: Sequence[float], y_pred: Sequence[float], client_ids: Sequence[str] | None = None) -> MetricsReport:
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise ValueError("targets and predictions must be matching 1-d arrays")
    if len(y_true) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    err = y_pred - y_true
    ss_res = float(np.sum(err * err))
    ss_tot = float(np.sum((y_true - y_true.mean()) ** 2))
    mape, excluded = _mape(y_true, y_pred)
    per_client: dict[str, float | None] = {}
    if client_ids is not None:
        ids = np.asarray(client_ids)
        for cid in sorted(set(ids.tolist())):
            sel = ids == cid
            per_client[cid] = _mape(y_true[sel], y_pred[sel])[0]
    return MetricsReport(
        mse=ss_res / len(y_true),
        mae=float(np.mean(np.abs(err))),
        mape_percent=mape,
        r2=1.0 - ss_res / ss_tot if ss_tot > 0 else None,
        n_samples=len(y_true),
        per_client=per_client,
        excluded_zero_targets=excluded,
    )


def evaluate(model: ModelParams, test: Sequence[WindowSample]) -> MetricsReport:
    """Pooled and per-client metrics of ``model`` on the test windows."""
    X, y = stack_samples(test, model.layer_sizes[0])
    return compute_metrics(y, predict(model, X), [s.region_id for s in test])


@dataclass(frozen=True)
class Summary:
    mean: float | None
    std: float | None
    n: int


def aggregate_runs(reports: Sequence[MetricsReport]) -> dict[str, Summary]:
    """Mean and sample standard deviation (n-1) of each metric over runs.

    A single run gets std 0. Undefined values (None) are skipped.
    """
    if not reports:
        raise ValueError("no runs to aggregate")
    out = {}
    for name in METRIC_NAMES:
        vals = np.array([getattr(r, name) for r in reports if getattr(r, name) is not None], dtype=float)
        if len(vals) == 0:
            out[name] = Summary(None, None, 0)
        elif len(vals) == 1:
            out[name] = Summary(float(vals[0]), 0.0, 1)
        else:
            out[name] = Summary(float(vals.mean()), float(vals.std(ddof=1)), len(vals))
    return out


@dataclass(frozen=True)
class BoxStats:
    minimum: float
    q1: float
    median: float
    q3: float
    maximum: float
    whisker_low: float
    whisker_high: float
    outliers: list[float]
    n: int


def box_stats(values: Iterable[float]) -> BoxStats:
    """Five-number summary with whiskers at the most extreme points inside 1.5*IQR.

    Quartiles use linear interpolation between order statistics.
    """
    v = np.sort(np.asarray([x for x in values if x is not None], dtype=float))
    if len(v) == 0:
        raise ValueError("no values to summarise")
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    return BoxStats(
        minimum=float(v[0]), q1=float(q1), median=float(med), q3=float(q3), maximum=float(v[-1]),
        whisker_low=float(inside[0]), whisker_high=float(inside[-1]),
        outliers=[float(x) for x in v if x < lo_fence or x > hi_fence],
        n=len(v),
    )


def mape_distribution(reports_by_level: Mapping[float, Sequence[MetricsReport]]) -> dict[float, list[float]]:
    """Per-client MAPE values of all runs, pooled per privacy level."""
    out = {}
    for level, reports in reports_by_level.items():
        out[level] = [
            v for r in reports for _, v in sorted(r.per_client.items()) if v is not None and math.isfinite(v)
        ]
    return out
