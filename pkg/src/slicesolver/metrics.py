"""Field-error and coefficient-accuracy metrics."""

from __future__ import annotations

import numpy as np

from .errors import DegenerateTargetError, ShapeError


def rel_l2(pred: np.ndarray, truth: np.ndarray) -> float:
    """Relative L2 error, joint over all columns: ||pred - truth|| / ||truth||."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"rel_l2: shapes differ: {pred.shape} vs {truth.shape}")
    denom = float(np.sqrt((truth ** 2).sum()))
    if denom == 0.0:
        raise DegenerateTargetError("rel_l2: truth has zero norm")
    return float(np.sqrt(((pred - truth) ** 2).sum()) / denom)


def r2_per_column(pred: np.ndarray, truth: np.ndarray) -> list[float | None]:
    """R^2 = 1 - SS_res/SS_tot per scalar series; None where truth is constant
    (or has fewer than two samples), where the score is undefined."""
    pred, truth = _columns(pred, truth)
    out: list[float | None] = []
    for j in range(truth.shape[1]):
        y, yhat = truth[:, j], pred[:, j]
        ss_tot = float(((y - y.mean()) ** 2).sum())
        if y.shape[0] < 2 or ss_tot == 0.0:
            out.append(None)
            continue
        out.append(1.0 - float(((y - yhat) ** 2).sum()) / ss_tot)
    return out


def mae_per_column(pred: np.ndarray, truth: np.ndarray) -> list[float]:
    """Mean absolute error per scalar series."""
    pred, truth = _columns(pred, truth)
    return [float(np.abs(pred[:, j] - truth[:, j]).mean()) for j in range(truth.shape[1])]


def metrics(pred: np.ndarray, truth: np.ndarray) -> dict:
    return {
        "rel_l2": rel_l2(pred, truth),
        "r2": r2_per_column(pred, truth),
        "mae": mae_per_column(pred, truth),
    }


def _columns(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"metrics: shapes differ: {pred.shape} vs {truth.shape}")
    if pred.ndim == 1:
        pred, truth = pred[:, None], truth[:, None]
    return pred, truth
