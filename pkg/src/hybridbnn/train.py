"""Cross-entropy loss, Adam, and the epoch loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .tensor import named_rng, softmax

log = logging.getLogger(__name__)


class InvalidLabelError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


def cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    bsz, n_classes = logits.shape
    if labels.shape != (bsz,):
        raise InvalidLabelError(f"expected {bsz} labels, got shape {labels.shape}")
    if np.any((labels < 0) | (labels >= n_classes)):
        raise InvalidLabelError(f"labels must lie in [0, {n_classes}), got {labels.tolist()}")
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    log_z = np.log(np.sum(np.exp(shifted), axis=1))
    log_p = shifted[np.arange(bsz), labels] - log_z
    loss = float(-np.mean(log_p))
    grad = softmax(logits, axis=1)
    grad[np.arange(bsz), labels] -= 1
    return loss, (grad / bsz).astype(logits.dtype)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: nn.Params, **hyper) -> "AdamState":
        return cls(m={k: np.zeros_like(v) for k, v in params.items()},
                   v={k: np.zeros_like(v) for k, v in params.items()}, **hyper)


def adam_step(params: nn.Params, grads: nn.Params, state: AdamState) -> tuple[nn.Params, AdamState]:
    """One bias-corrected Adam update. Inputs are not modified."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1 - b1**t
    corr2 = 1 - b2**t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / corr1
        v_hat = v / corr2
        if state.lr == 0:
            new_params[name] = p.copy()
        else:
            new_params[name] = (p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)
        new_m[name] = m.astype(p.dtype)
        new_v[name] = v.astype(p.dtype)
    new_state = AdamState(new_m, new_v, t, state.lr, b1, b2, state.eps)
    return new_params, new_state


@dataclass
class TrainConfig:
    spec: nn.ModelSpec = field(default_factory=nn.ModelSpec)
    epochs: int = 5
    batch_size: int = 8
    lr: float = 3e-4
    seed: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch size must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            raise ConfigurationError(f"learning rate must be >= 0, got {self.lr}")


@dataclass
class EpochLog:
    epoch: int
    loss: float
    accuracy: float


def train_step(spec, params, state, x, y):
    logits, trace = nn.forward(spec, params, x)
    loss, dlogits = cross_entropy(logits, y)
    grads, _ = nn.backward(trace, params, dlogits)
    params, state = adam_step(params, grads, state)
    correct = int(np.sum(np.argmax(logits, axis=1) == y))
    return params, state, loss, correct


def fit(config: TrainConfig, images: np.ndarray, labels: np.ndarray,
        params: nn.Params | None = None) -> tuple[nn.Params, list[EpochLog]]:
    """Train from seeded init (or ``params``) on ``images`` [N,1,S,S,S].

    Sample order is reshuffled every epoch from the ``shuffle`` stream of the
    run seed, so the result is a pure function of the inputs.
    """
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(images)
    if n == 0:
        raise ConfigurationError("training split is empty")
    spec = config.spec
    if params is None:
        params = nn.init_params(spec, config.seed)
    state = AdamState.zeros_like(params, lr=config.lr)
    history = []
    for epoch in range(1, config.epochs + 1):
        order = named_rng(config.seed, "shuffle", epoch).generator().permutation(n)
        total_loss = 0.0
        correct = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            params, state, loss, c = train_step(spec, params, state, images[idx], labels[idx])
            total_loss += loss * len(idx)
            correct += c
        entry = EpochLog(epoch, total_loss / n, correct / n)
        log.info("epoch %d loss %.4f acc %.3f", entry.epoch, entry.loss, entry.accuracy)
        history.append(entry)
    return params, history


def write_log_csv(path, history: list[EpochLog]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "loss", "accuracy"])
        for row in history:
            writer.writerow([row.epoch, repr(row.loss), repr(row.accuracy)])
