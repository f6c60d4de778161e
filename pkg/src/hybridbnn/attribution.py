"""Integrated gradients, Gaussian smoothing and percentile masks.

The explained quantity is the softmax probability of the target class.  The
path integral uses the right-endpoint rule over ``steps`` interpolants
``alpha = k / steps, k = 1..steps``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from . import bayes, nn
from .tensor import InvalidParameterError, softmax


@dataclass(frozen=True)
class AttributionConfig:
    steps: int = 64
    target: int | None = None
    sigma: float = 4.0
    percentile: float = 95.0
    repeats: int = 10
    seed: int = 1
    mc_samples: int = 100
    chunk: int = 16

    def __post_init__(self):
        if self.steps < 2:
            raise InvalidParameterError("steps must be >= 2")
        if not 0 < self.percentile < 100:
            raise InvalidParameterError("percentile must lie in (0, 100)")
        if self.repeats < 1:
            raise InvalidParameterError("repeats must be >= 1")
        if self.sigma < 0:
            raise InvalidParameterError("sigma must be >= 0")


@dataclass
class AttributionResult:
    raw: np.ndarray
    smoothed: np.ndarray
    mask_fraction: np.ndarray
    mask: np.ndarray
    completeness_gap: float
    target: int


def path_alphas(steps: int) -> np.ndarray:
    return np.arange(1, steps + 1, dtype=np.float64) / steps


def integrate_path(grad_fn, x, baseline=None, steps=64, chunk=16) -> np.ndarray:
    """(x - x0) * mean of ``grad_fn`` over the straight path from x0 to x.

    ``grad_fn`` maps a stack of points [m, *x.shape] to gradients of the same
    shape.
    """
    x = np.asarray(x, dtype=np.float64)
    x0 = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=np.float64)
    diff = x - x0
    total = np.zeros_like(x)
    alphas = path_alphas(steps)
    for start in range(0, steps, chunk):
        a = alphas[start:start + chunk].reshape((-1,) + (1,) * x.ndim)
        grads = np.asarray(grad_fn(x0[None] + a * diff[None]), dtype=np.float64)
        for g in grads:
            total += g
    return diff * (total / steps)


def probability_and_grad(spec, params, batch, target):
    """Target-class probability and its input gradient for a batch."""
    logits, trace = nn.forward(spec, params, batch)
    p = softmax(logits, axis=1)
    onehot = np.zeros_like(p)
    onehot[:, target] = 1
    upstream = p[:, target:target + 1] * (onehot - p)
    _, gx = nn.backward(trace, params, upstream)
    return p[:, target], gx


def integrated_gradients(spec, params, x, target: int, steps=64, baseline=None, chunk=16) -> np.ndarray:
    """Attribution volume for one input ``x`` [1,S,S,S]."""
    if not 0 <= target < spec.n_classes:
        raise InvalidParameterError(f"target class {target} out of range")
    dtype = params["head.weight"].dtype

    def grad_fn(points):
        _, gx = probability_and_grad(spec, params, points.astype(dtype), target)
        return gx

    return integrate_path(grad_fn, x, baseline, steps, chunk)


def completeness_gap(spec, params, x, attribution, target, baseline=None) -> float:
    """|sum(attribution) - (F(x) - F(x0))| / |F(x) - F(x0)|."""
    x0 = np.zeros_like(x) if baseline is None else baseline
    dtype = params["head.weight"].dtype
    ends = np.stack([x, x0]).astype(dtype)
    p, _ = probability_and_grad(spec, params, ends, target)
    delta = float(p[0]) - float(p[1])
    return abs(float(np.sum(attribution)) - delta) / max(abs(delta), 1e-12)


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-(k**2) / (2 * sigma**2))
    return w / w.sum()


def smooth_gaussian_3d(vol: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian over the last three axes, reflect boundary."""
    if sigma < 0:
        raise InvalidParameterError("sigma must be >= 0")
    if sigma == 0:
        return vol.copy()
    kernel = gaussian_kernel1d(sigma)
    out = np.asarray(vol, dtype=np.float64)
    for axis in range(vol.ndim - 3, vol.ndim):
        out = ndimage.correlate1d(out, kernel, axis=axis, mode="reflect")
    return out


def percentile_mask(vol: np.ndarray, q: float) -> np.ndarray:
    """1 where the value is strictly above the q-th percentile.

    With linear interpolation the percentile lies in ``[s[lo], s[lo + 1]]``
    (``s`` sorted, ``lo = floor(q/100 * (n-1))``), so "strictly above" equals
    "strictly above s[lo]".  Comparing against the order statistic keeps the
    mask a function of ranks only.
    """
    if not 0 < q < 100:
        raise InvalidParameterError("percentile must lie in (0, 100)")
    flat = np.asarray(vol).ravel()
    lo = int(math.floor(q / 100 * (flat.size - 1)))
    return (vol > np.partition(flat, lo)[lo]).astype(np.uint8)


def _head_params(params, w, b):
    sampled = dict(params)
    sampled["head.weight"], sampled["head.bias"] = w, b
    return sampled


def single_attribution(spec, params, x, target, config: AttributionConfig):
    """IG -> smoothing -> mask for one fixed network.

    Volumes are returned in float32 so that averaging identical repeats in
    float64 is exact.
    """
    raw64 = integrated_gradients(spec, params, x, target, config.steps, chunk=config.chunk)
    raw = raw64.astype(np.float32)
    smoothed = smooth_gaussian_3d(raw, config.sigma).astype(np.float32)
    mask = percentile_mask(smoothed, config.percentile)
    gap = completeness_gap(spec, params, x, raw64, target)
    return raw, smoothed, mask, gap


def choose_target(spec, params, bh, x, config: AttributionConfig) -> int:
    if config.target is not None:
        if not 0 <= config.target < spec.n_classes:
            raise InvalidParameterError(f"target class {config.target} out of range")
        return config.target
    return bayes.mc_infer(spec, params, bh, x, config.mc_samples, config.seed).predicted


def bayes_attribution(spec, params, bh: bayes.BayesianHead, x, config: AttributionConfig,
                      threads: int = 1) -> AttributionResult:
    """Average of ``repeats`` single-network pipelines over sampled heads.

    Head ``r`` (1-based) is stream ``r`` of the config seed.  The binary mask
    is a majority vote (mean of the per-network masks >= 0.5).
    """
    target = choose_target(spec, params, bh, x, config)

    def run(r):
        w, b = bayes.sample_head(bh, config.seed, r)
        return single_attribution(spec, _head_params(params, w, b), x, target, config)

    reps = range(1, config.repeats + 1)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, reps))
    else:
        results = [run(r) for r in reps]
    n = config.repeats
    raw = (sum_fixed_order([r[0] for r in results]) / n).astype(np.float32)
    smoothed = (sum_fixed_order([r[1] for r in results]) / n).astype(np.float32)
    fraction = sum_fixed_order([r[2].astype(np.float64) for r in results]) / n
    mask = (fraction >= 0.5).astype(np.uint8)
    gap = max(r[3] for r in results)
    return AttributionResult(raw, smoothed, fraction, mask, gap, target)


def sum_fixed_order(arrays) -> np.ndarray:
    total = np.zeros_like(arrays[0], dtype=np.float64)
    for a in arrays:
        total += a
    return total


def with_overrides(config: AttributionConfig, **kw) -> AttributionConfig:
    return replace(config, **{k: v for k, v in kw.items() if v is not None})
