"""Localization accuracy reports and error CDFs."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class LocalizationReport:
    acc_5m: float
    acc_10m: float
    acc_15m: float
    mean_error: float
    recall: float
    n_queries: int

    def as_row(self) -> dict:
        return asdict(self)


def localization_errors(pred, truth) -> np.ndarray:
    """Euclidean errors; rows of ``pred`` that are NaN (no fix) give NaN."""
    pred = np.asarray(pred, dtype=float).reshape(-1, 2)
    truth = np.asarray(truth, dtype=float).reshape(-1, 2)
    if pred.shape != truth.shape:
        raise ValueError("predictions and ground truth are not aligned")
    return np.hypot(pred[:, 0] - truth[:, 0], pred[:, 1] - truth[:, 1])


def accuracy_metrics(pred, truth) -> LocalizationReport:
    """Accuracy and mean error over yielded fixes; NaN prediction rows count as no-fix."""
    err = localization_errors(pred, truth)
    return report_from_errors(err)


def report_from_errors(errors) -> LocalizationReport:
    err = np.asarray(errors, dtype=float)
    if err.size == 0:
        raise ValueError("no queries to score")
    ok = ~np.isnan(err)
    e = err[ok]
    if e.size == 0:
        return LocalizationReport(0.0, 0.0, 0.0, math.nan, 0.0, int(err.size))
    return LocalizationReport(
        acc_5m=float(np.mean(e < 5.0)),
        acc_10m=float(np.mean(e < 10.0)),
        acc_15m=float(np.mean(e < 15.0)),
        mean_error=float(e.mean()),
        recall=float(ok.mean()),
        n_queries=int(err.size),
    )


def error_cdf(errors, max_threshold: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Complementary CDF ``P(error >= k)`` at integer meters ``k = 0 .. max_threshold``."""
    e = np.asarray(errors, dtype=float)
    e = e[~np.isnan(e)]
    if e.size == 0:
        raise ValueError("no errors given")
    top = int(math.ceil(e.max())) + 1 if max_threshold is None else int(max_threshold)
    thresholds = np.arange(top + 1, dtype=float)
    s = np.sort(e)
    frac = 1.0 - np.searchsorted(s, thresholds, side="left") / s.size
    return thresholds, frac
