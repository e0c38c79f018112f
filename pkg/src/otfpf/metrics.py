"""Evaluation metrics: MAE plus Pearson and Spearman correlations.

Correlations use population moments so hand-computable cases come out
exact; the rank correlation is the Pearson correlation of average ranks,
which stays correct under ties (the closed-form rank-difference formula
does not). A zero-variance input makes a correlation undefined; that is
reported as an explicit ``None``, never NaN.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError


@dataclass
class MetricsReport:
    mae: float
    pcc: float | None
    srcc: float | None
    n: int
    residuals: list[float]

    def to_dict(self) -> dict:
        return {"mae": self.mae, "pcc": self.pcc, "srcc": self.srcc,
                "n": self.n, "residuals": self.residuals}

    def save(self, path, extra: dict | None = None) -> Path:
        payload = self.to_dict()
        if extra:
            payload.update(extra)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        return path


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their group's average rank."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _pearson(x: np.ndarray, y: np.ndarray) -> float | None:
    xc = x - x.mean()
    yc = y - y.mean()
    vx = (xc * xc).mean()
    vy = (yc * yc).mean()
    if vx <= 0.0 or vy <= 0.0:
        return None
    return float((xc * yc).mean() / np.sqrt(vx * vy))


def compute_metrics(preds, ages) -> MetricsReport:
    """MAE, Pearson, and Spearman between predictions and true ages."""
    preds = np.asarray(preds, dtype=np.float64).reshape(-1)
    ages = np.asarray(ages, dtype=np.float64).reshape(-1)
    if preds.size != ages.size:
        raise DataError(f"prediction/age lengths differ: {preds.size} vs {ages.size}")
    if preds.size == 0:
        raise DataError("metrics need at least one sample")
    residuals = preds - ages
    mae = float(np.abs(residuals).mean())
    if preds.size < 2:
        pcc = srcc = None
    else:
        pcc = _pearson(preds, ages)
        srcc = _pearson(average_ranks(preds), average_ranks(ages))
    return MetricsReport(mae=mae, pcc=pcc, srcc=srcc, n=int(preds.size),
                         residuals=[float(r) for r in residuals])
