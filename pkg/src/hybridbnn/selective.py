"""Uncertainty-threshold rejection, classification metrics, threshold sweeps."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

TABLE_THRESHOLDS = (0.002, 0.005, 0.01, 0.02, 0.05, 0.10, 0.15, 0.2)
NA = "NA"


class ConfigurationError(ValueError):
    pass


def uncertainty_scores(preds) -> np.ndarray:
    """p_std of the argmax class for each prediction."""
    return np.array([float(p.p_std[int(np.argmax(p.p_mean))]) for p in preds])


def reject_filter(preds, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Indices kept (uncertainty strictly below ``t``) and rejected."""
    if t < 0:
        raise ConfigurationError(f"threshold must be >= 0, got {t}")
    scores = uncertainty_scores(preds)
    keep = scores < t
    return np.flatnonzero(keep), np.flatnonzero(~keep)


def auc_rank(scores, labels) -> float | None:
    """Mann-Whitney AUC with average ranks for ties; None for a single class."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    u = np.sum(ranks[labels == 1]) - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def auc_pairwise(scores, labels) -> float | None:
    """Brute-force AUC over every positive/negative pair (test oracle)."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y != 1]
    if not pos or not neg:
        return None
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


@dataclass(frozen=True)
class Metrics:
    """Kept-set metrics; ``None`` marks an undefined value."""

    accuracy: float | None
    precision: float | None
    recall: float | None
    f1: float | None
    auc: float | None
    n: int


def compute_metrics(p_mean, labels, kept=None) -> Metrics:
    p_mean = np.asarray(p_mean, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if kept is not None:
        kept = np.asarray(kept, dtype=np.int64)
        p_mean, labels = p_mean[kept], labels[kept]
    if len(labels) == 0:
        return Metrics(None, None, None, None, None, 0)
    pred = np.argmax(p_mean, axis=1)
    accuracy = float(np.mean(pred == labels))
    tp = int(np.sum((pred == 1) & (labels == 1)))
    fp = int(np.sum((pred == 1) & (labels == 0)))
    fn = int(np.sum((pred == 0) & (labels == 1)))
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    if precision is None or recall is None:
        f1 = None
    elif precision + recall == 0:
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return Metrics(accuracy, precision, recall, f1, auc_rank(p_mean[:, 1], labels), len(labels))


@dataclass(frozen=True)
class SweepRow:
    threshold: float
    accuracy: float | None
    auc: float | None
    coverage: float
    kept: int
    rejected: int


def sweep(preds, labels, thresholds=TABLE_THRESHOLDS) -> list[SweepRow]:
    thresholds = [float(t) for t in thresholds]
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ConfigurationError(f"thresholds must be sorted ascending: {thresholds}")
    p_mean = np.array([p.p_mean for p in preds])
    total = len(preds)
    rows = []
    for t in thresholds:
        kept, rejected = reject_filter(preds, t)
        m = compute_metrics(p_mean, labels, kept)
        rows.append(SweepRow(t, m.accuracy, m.auc, len(kept) / total if total else 0.0,
                             len(kept), len(rejected)))
    check_monotone_coverage(rows)
    return rows


def check_monotone_coverage(rows: list[SweepRow]) -> None:
    for a, b in zip(rows, rows[1:]):
        if b.coverage < a.coverage:
            raise AssertionError(f"coverage decreased between t={a.threshold} and t={b.threshold}")


def _cell(value) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return NA
    return repr(float(value))


def parse_thresholds(text: str) -> list[float]:
    values = [float(tok) for tok in text.split(",") if tok.strip()]
    if not values:
        raise ConfigurationError("no thresholds given")
    if any(b < a for a, b in zip(values, values[1:])):
        raise ConfigurationError(f"thresholds must be sorted ascending: {text}")
    return values


def write_sweep_csv(path, rows: list[SweepRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["threshold", "accuracy", "auc", "coverage", "kept", "rejected"])
        for r in rows:
            writer.writerow([repr(r.threshold), _cell(r.accuracy), _cell(r.auc),
                             _cell(r.coverage), r.kept, r.rejected])


def write_curves(directory, rows: list[SweepRow]) -> list[Path]:
    """Two-column ``threshold value`` files, one per metric."""
    directory = Path(directory)
    paths = []
    for column in ("accuracy", "auc", "coverage"):
        path = directory / f"{column}_vs_threshold.dat"
        with open(path, "w") as fh:
            fh.write(f"# threshold {column}\n")
            for r in rows:
                fh.write(f"{r.threshold!r} {_cell(getattr(r, column))}\n")
        paths.append(path)
    return paths
