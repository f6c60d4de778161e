"""Post-hoc Gaussian classifier head and Monte-Carlo ensemble inference.

The trained linear head ``(w*, b*)`` becomes a distribution ``N(w*, s^2)``
with one shared scale ``s``; everything before the head stays deterministic.
Head sample ``i`` always comes from stream ``i`` of the ``bayes`` seed, so the
N sampled networks are the same for every input and any evaluation order.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import nn
from .tensor import InvalidParameterError, named_rng, normal_sample, softmax


@dataclass(frozen=True)
class BayesianHead:
    weight: np.ndarray  # [n_classes, F]
    bias: np.ndarray  # [n_classes]
    s: float = 0.01


@dataclass
class McPrediction:
    p_mean: np.ndarray
    p_std: np.ndarray
    n_samples: int

    @property
    def predicted(self) -> int:
        return int(np.argmax(self.p_mean))

    @property
    def uncertainty(self) -> float:
        """Std of the probability of the predicted class."""
        return float(self.p_std[self.predicted])


def to_bayesian(params: nn.Params, s: float = 0.01) -> BayesianHead:
    if not s >= 0:
        raise InvalidParameterError(f"scale s must be >= 0, got {s}")
    return BayesianHead(params["head.weight"].copy(), params["head.bias"].copy(), float(s))


def sample_head(bh: BayesianHead, seed: int, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Draw head ``index``: every weight and bias from N(mean, s^2)."""
    gen = named_rng(seed, "bayes", index).generator()
    dtype = bh.weight.dtype
    w = normal_sample(gen, bh.weight, bh.s, bh.weight.shape, dtype=dtype)
    b = normal_sample(gen, bh.bias, bh.s, bh.bias.shape, dtype=dtype)
    return w, b


def aggregate(probs: np.ndarray, n: int) -> McPrediction:
    """Mean and population std over axis 0, accumulated in float64."""
    probs = np.asarray(probs, dtype=np.float64)
    mean = np.sum(probs, axis=0) / n
    std = np.sqrt(np.sum((probs - mean) ** 2, axis=0) / n)
    return McPrediction(mean, std, n)


def _check_n(n: int) -> None:
    if n < 1:
        raise InvalidParameterError(f"number of Monte-Carlo samples must be >= 1, got {n}")


def _as_batch(x: np.ndarray) -> np.ndarray:
    return x[None] if x.ndim == 4 else x


def mc_infer(spec: nn.ModelSpec, params: nn.Params, bh: BayesianHead, x: np.ndarray,
             n: int = 100, seed: int = 1) -> McPrediction:
    """Monte-Carlo prediction for one volume ``x`` [1,S,S,S].

    The convolutional trunk runs once; only the N sampled heads are applied
    per sample.
    """
    _check_n(n)
    features, _ = nn.trunk_forward(spec, params, _as_batch(x))
    if features.shape[0] != 1:
        raise nn.InvalidShapeError("mc_infer takes a single volume")
    probs = []
    for i in range(n):
        w, b = sample_head(bh, seed, i)
        probs.append(softmax(nn.linear(features, w, b), axis=1)[0])
    return aggregate(np.stack(probs), n)


def mc_infer_naive(spec, params, bh, x, n=100, seed=1) -> McPrediction:
    """Reference: N complete forward passes with the sampled head spliced in."""
    _check_n(n)
    probs = []
    for i in range(n):
        w, b = sample_head(bh, seed, i)
        sampled = dict(params)
        sampled["head.weight"], sampled["head.bias"] = w, b
        logits, _ = nn.forward(spec, sampled, _as_batch(x))
        probs.append(softmax(logits, axis=1)[0])
    return aggregate(np.stack(probs), n)


def mc_infer_many(spec, params, bh, volumes, n=100, seed=1, threads=1) -> list[McPrediction]:
    def run(x):
        return mc_infer(spec, params, bh, x, n, seed)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(run, volumes))
    return [run(x) for x in volumes]


def deterministic_predict(spec, params, volumes) -> list[np.ndarray]:
    """Plain softmax of the trained network, one volume at a time."""
    out = []
    for x in volumes:
        logits, _ = nn.forward(spec, params, _as_batch(x))
        out.append(softmax(logits, axis=1)[0])
    return out


# ---------------------------------------------------------------------------
# predictions CSV: id, p_mean_0, p_mean_1, p_std_0, p_std_1, label

PREDICTION_COLUMNS = ["id", "p_mean_0", "p_mean_1", "p_std_0", "p_std_1", "label"]


def write_predictions(path, ids, preds: list[McPrediction], labels) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PREDICTION_COLUMNS)
        for vid, p, y in zip(ids, preds, labels):
            writer.writerow([vid, repr(float(p.p_mean[0])), repr(float(p.p_mean[1])),
                             repr(float(p.p_std[0])), repr(float(p.p_std[1])), int(y)])


def read_predictions(path, n_samples: int = 0) -> tuple[list[str], list[McPrediction], np.ndarray]:
    ids, preds, labels = [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != PREDICTION_COLUMNS:
            raise ValueError(f"{path}: expected columns {PREDICTION_COLUMNS}, got {reader.fieldnames}")
        for row in reader:
            ids.append(row["id"])
            preds.append(McPrediction(np.array([float(row["p_mean_0"]), float(row["p_mean_1"])]),
                                      np.array([float(row["p_std_0"]), float(row["p_std_1"])]),
                                      n_samples))
            labels.append(int(row["label"]))
    return ids, preds, np.array(labels, dtype=np.int64)
