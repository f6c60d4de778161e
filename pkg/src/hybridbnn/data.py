"""Synthetic Jacobian-determinant-like volumes, normalization, split and I/O.

Each volume is ``1 + smooth random field``: local volume change fluctuating
around unity.  Class 1 ("atrophy-like") additionally carries a dilation blob
near the centre, standing in for ventricular expansion.  Optionally a fraction
of samples is made *hard*: their blob amplitude sits halfway between the
classes, so the image carries no information about their label.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .tensor import InvalidShapeError, named_rng


class DegenerateDataError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass
class Volume:
    data: np.ndarray  # [1, S, S, S] float32
    label: int
    id: str
    split: str | None = None
    hard: bool = False

    @property
    def side(self) -> int:
        return self.data.shape[-1]


@dataclass
class GenConfig:
    n_samples: int = 376
    side: int = 32
    balance: float = 0.5
    seed: int = 1
    amplitudes: tuple[float, float] = (0.0, 1.0)
    field_std: float = 0.1
    smoothness: float = 2.0
    blob_width: float = 0.125  # relative to side
    blob_jitter: float = 0.0625  # relative to side
    hard_fraction: float = 0.0
    raw_side: int | None = None

    def __post_init__(self):
        self.amplitudes = tuple(float(a) for a in self.amplitudes)
        if self.n_samples < 2:
            raise ConfigurationError("n_samples must be >= 2")
        if not 0 < self.balance < 1:
            raise ConfigurationError("balance must lie in (0, 1)")
        if self.side < 8 or self.side % 8:
            raise ConfigurationError(f"side must be a positive multiple of 8, got {self.side}")
        if self.raw_side is not None and self.raw_side < self.side:
            raise ConfigurationError("raw_side must be >= side")
        if not 0 <= self.hard_fraction <= 1:
            raise ConfigurationError("hard_fraction must lie in [0, 1]")


def _labels(cfg: GenConfig) -> np.ndarray:
    n1 = int(math.floor(cfg.n_samples * cfg.balance + 0.5))
    labels = np.array([1] * n1 + [0] * (cfg.n_samples - n1), dtype=np.int64)
    return named_rng(cfg.seed, "data", 0).generator().permutation(labels)


def _one_volume(cfg: GenConfig, index: int, label: int) -> tuple[np.ndarray, bool]:
    side = cfg.raw_side or cfg.side
    gen = named_rng(cfg.seed, "data", index + 1).generator()
    noise = ndimage.gaussian_filter(gen.standard_normal((side,) * 3), cfg.smoothness, mode="wrap")
    noise *= cfg.field_std / (noise.std() + 1e-12)
    hard = bool(gen.random() < cfg.hard_fraction)
    amplitude = 0.5 * (cfg.amplitudes[0] + cfg.amplitudes[1]) if hard else cfg.amplitudes[label]
    center = (side - 1) / 2 + gen.uniform(-1, 1, size=3) * cfg.blob_jitter * side
    width = cfg.blob_width * side
    grid = np.indices((side,) * 3, dtype=np.float64)
    r2 = sum((grid[i] - center[i]) ** 2 for i in range(3))
    vol = 1.0 + noise + amplitude * np.exp(-r2 / (2 * width**2))
    if cfg.raw_side:
        vol = center_crop(vol, cfg.side)
    return vol[None].astype(np.float32), hard


def generate(cfg: GenConfig, threads: int = 1) -> list[Volume]:
    """Deterministic synthetic cohort; every sample has its own RNG stream."""
    labels = _labels(cfg)

    def build(i):
        data, hard = _one_volume(cfg, i, int(labels[i]))
        return Volume(data, int(labels[i]), f"sub{i:04d}", hard=hard)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(build, range(cfg.n_samples)))
    return [build(i) for i in range(cfg.n_samples)]


def center_crop(vol: np.ndarray, target: int) -> np.ndarray:
    """Crop the last three axes to ``target``; odd surplus goes to the high side."""
    out = vol
    for axis in range(vol.ndim - 3, vol.ndim):
        n = vol.shape[axis]
        if target > n:
            raise InvalidShapeError(f"cannot crop side {n} to {target}")
        lo = (n - target) // 2
        out = np.take(out, np.arange(lo, lo + target), axis=axis)
    return np.ascontiguousarray(out)


def normalize_global(volumes: list[Volume]) -> tuple[list[Volume], tuple[float, float]]:
    """Min-max map of all volumes jointly onto [0, 1]."""
    if not volumes:
        raise DegenerateDataError("no volumes to normalize")
    lo = min(float(v.data.min()) for v in volumes)
    hi = max(float(v.data.max()) for v in volumes)
    if hi == lo:
        raise DegenerateDataError(f"all voxels equal {lo}; cannot normalize")
    scale = hi - lo
    out = []
    for v in volumes:
        data = ((v.data.astype(np.float64) - lo) / scale).astype(np.float32)
        out.append(Volume(data, v.label, v.id, v.split, v.hard))
    return out, (lo, hi)


def split(volumes: list[Volume], fraction: float = 0.8, seed: int = 1) -> tuple[list[Volume], list[Volume]]:
    """Stratified seeded split; both outputs keep the input order."""
    in_train = np.zeros(len(volumes), dtype=bool)
    labels = np.array([v.label for v in volumes])
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        perm = named_rng(seed, "data", (1 << 30) + int(cls)).generator().permutation(idx)
        n_train = int(math.floor(len(idx) * fraction + 0.5))
        if n_train < 1 or n_train >= len(idx):
            raise ConfigurationError(f"class {cls} with {len(idx)} samples cannot populate both splits")
        in_train[perm[:n_train]] = True
    train = [Volume(v.data, v.label, v.id, "train", v.hard) for v, t in zip(volumes, in_train) if t]
    test = [Volume(v.data, v.label, v.id, "test", v.hard) for v, t in zip(volumes, in_train) if not t]
    return train, test


def stack(volumes: list[Volume]) -> tuple[np.ndarray, np.ndarray]:
    return (np.stack([v.data for v in volumes]).astype(np.float32),
            np.array([v.label for v in volumes], dtype=np.int64))


# ---------------------------------------------------------------------------
# I/O: <id>.json header + <id>.raw little-endian float32 payload


def write_volume(directory, vol: Volume, norm: tuple[float, float] | None = None) -> str:
    directory = Path(directory)
    header = {
        "id": vol.id,
        "shape": list(vol.data.shape),
        "dtype": "f32le",
        "label": vol.label,
        "hard": vol.hard,
        "normalization": None if norm is None else {"min": norm[0], "max": norm[1]},
        "payload": f"{vol.id}.raw",
    }
    (directory / f"{vol.id}.raw").write_bytes(np.ascontiguousarray(vol.data, dtype="<f4").tobytes())
    name = f"{vol.id}.json"
    (directory / name).write_text(json.dumps(header, indent=1) + "\n")
    return name


def read_volume(header_path) -> Volume:
    header_path = Path(header_path)
    header = json.loads(header_path.read_text())
    if header.get("dtype") != "f32le":
        raise ValueError(f"{header_path}: unsupported dtype {header.get('dtype')}")
    raw = (header_path.parent / header["payload"]).read_bytes()
    data = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(header["shape"])
    return Volume(data, int(header["label"]), header["id"], hard=bool(header.get("hard", False)))


@dataclass
class Dataset:
    train: list[Volume] = field(default_factory=list)
    test: list[Volume] = field(default_factory=list)

    def by_id(self, vid: str) -> Volume:
        for v in self.train + self.test:
            if v.id == vid:
                return v
        raise KeyError(f"unknown input id {vid!r}")


def write_dataset(directory, train: list[Volume], test: list[Volume], norm: tuple[float, float]) -> list[dict]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = []
    for v in sorted(train + test, key=lambda v: v.id):
        name = write_volume(directory, v, norm)
        manifest.append({"id": v.id, "file": name, "label": v.label, "split": v.split})
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return manifest


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    ds = Dataset()
    for entry in json.loads(path.read_text()):
        vol = read_volume(directory / entry["file"])
        vol.split = entry["split"]
        (ds.train if entry["split"] == "train" else ds.test).append(vol)
    return ds
