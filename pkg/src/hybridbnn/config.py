"""INI run configuration: defaults, file values, flag overrides."""

from __future__ import annotations

import configparser
import io
from pathlib import Path

DEFAULTS: dict[str, dict[str, str]] = {
    "data": {
        "n_samples": "376",
        "side": "32",
        "balance": "0.5",
        "seed": "1",
        "amplitude_0": "0.0",
        "amplitude_1": "1.0",
        "field_std": "0.1",
        "smoothness": "2.0",
        "blob_width": "0.125",
        "blob_jitter": "0.0625",
        "hard_fraction": "0.0",
        "raw_side": "",
        "train_fraction": "0.8",
    },
    "model": {"channels": "8,16,32", "kernel": "3"},
    "train": {"epochs": "5", "batch_size": "8", "lr": "0.0003", "seed": "1"},
    "bayes": {"s": "0.01", "n": "100", "seed": "1"},
    "sweep": {"thresholds": "0.002,0.005,0.01,0.02,0.05,0.10,0.15,0.2"},
    "attribution": {
        "steps": "64",
        "sigma": "4.0",
        "percentile": "95.0",
        "repeats": "10",
        "seed": "1",
        "target": "",
    },
    "run": {"threads": "1"},
}


class ConfigError(ValueError):
    pass


class RunConfig:
    def __init__(self, values: dict[str, dict[str, str]] | None = None):
        self.values = {sec: dict(keys) for sec, keys in DEFAULTS.items()}
        if values:
            self.update(values)

    @classmethod
    def load(cls, path=None) -> "RunConfig":
        cfg = cls()
        if path is None:
            return cfg
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        parser.read_string(path.read_text(), source=str(path))
        cfg.update({sec: dict(parser[sec]) for sec in parser.sections()})
        return cfg

    def update(self, values: dict[str, dict[str, str]]) -> None:
        for section, keys in values.items():
            if section not in DEFAULTS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, value in keys.items():
                if key not in DEFAULTS[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")
                self.values[section][key] = str(value)

    def set(self, section: str, key: str, value) -> None:
        if value is not None:
            self.update({section: {key: value}})

    def get(self, section: str, key: str) -> str:
        return self.values[section][key]

    def int(self, section, key) -> int:
        return self._typed(section, key, int)

    def float(self, section, key) -> float:
        return self._typed(section, key, float)

    def optional_int(self, section, key):
        return None if self.get(section, key).strip() == "" else self.int(section, key)

    def floats(self, section, key) -> list[float]:
        text = self.get(section, key)
        try:
            return [float(tok) for tok in text.split(",") if tok.strip()]
        except ValueError:
            raise ConfigError(f"{section}.{key}: expected comma-separated numbers, got {text!r}") from None

    def _typed(self, section, key, kind):
        text = self.get(section, key)
        try:
            return kind(text)
        except ValueError:
            raise ConfigError(f"{section}.{key}: expected {kind.__name__}, got {text!r}") from None

    def dumps(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for section, keys in self.values.items():
            parser[section] = keys
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.dumps())
