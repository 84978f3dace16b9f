"""Experiment configuration: INI sections, named presets and ``--set`` overrides."""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

__all__ = ["ConfigError", "ExperimentConfig", "PRESETS", "load_config", "config_hash"]


class ConfigError(ValueError):
    pass


@dataclass
class SchemeSection:
    name: str = "musa"
    K: int = 14
    N: int = 21
    U: int = 3
    R: int = 4
    rho: float = 0.6
    min_nonzero: int = 2
    seed: int = 0


@dataclass
class ChannelSection:
    kind: str = "rayleigh"          # rayleigh | macro | inf
    inf: str = "SL"
    shadow_std_db: float = 8.0
    r_min_km: float = 0.05
    r_max_km: float = 0.25
    fc_ghz: float = 28.0
    bandwidth_hz: float = 0.0       # 0 selects the model default
    normalize_power: bool = True
    shadow_before_max: bool = False


@dataclass
class NetworkSection:
    L: int = 4
    width: int = 128
    block_widths: str = ""          # "512,256,128,28" enables the tapered mode
    dropout: float = 0.5
    l2: float = 0.01
    X: int = 1


@dataclass
class TrainSection:
    D: int = 200_000
    epochs: int = 50
    batch_size: int = 1000
    lr: float = 1e-3
    seed: int = 1
    activity: str = "fixed"         # fixed | bernoulli
    n_values: str = "1,2"
    p: float = 0.0
    snr_low: float = 0.0
    snr_high: float = 20.0
    val_fraction: float = 0.05


@dataclass
class SweepSection:
    snr: str = "0,5,10,15,20"
    n_values: str = "1,2"
    activity_grid: str = "1,2,3,4,5,6"
    activity_snr: float = 20.0
    test_size: int = 10_000
    algorithms: str = "dnn,stomp,ls-bomp"
    stomp_t: float = 2.0
    stomp_stages: int = 10
    stomp_known_sparsity: bool = True
    seed: int = 1000


@dataclass
class ExperimentConfig:
    scheme: SchemeSection = field(default_factory=SchemeSection)
    channel: ChannelSection = field(default_factory=ChannelSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    train: TrainSection = field(default_factory=TrainSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    output: str = "out"

    def as_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> "ExperimentConfig":
        s = self.scheme
        if s.name not in ("musa", "scma"):
            raise ConfigError(f"scheme.name must be musa or scma, got {s.name!r}")
        if s.K < 1 or s.N < 1:
            raise ConfigError("scheme.K and scheme.N must be positive")
        if s.name == "musa" and not 0 < s.rho < 1:
            raise ConfigError("scheme.rho must lie in (0, 1)")
        if self.channel.kind not in ("rayleigh", "macro", "inf"):
            raise ConfigError(f"unknown channel.kind {self.channel.kind!r}")
        if self.network.X < 1:
            raise ConfigError("network.X must be >= 1")
        if not 0 <= self.network.dropout < 1:
            raise ConfigError("network.dropout must lie in [0, 1)")
        for n in int_list(self.train.n_values) + int_list(self.sweep.n_values):
            if not 1 <= n <= s.N:
                raise ConfigError(f"sparsity {n} outside 1..{s.N}")
        return self


def int_list(text: str) -> list[int]:
    return [int(v) for v in str(text).replace(" ", "").split(",") if v]


def float_list(text: str) -> list[float]:
    return [float(v) for v in str(text).replace(" ", "").split(",") if v]


PRESETS = {
    "musa150": {"scheme.name": "musa", "scheme.K": 14, "scheme.N": 21},
    "musa300": {"scheme.name": "musa", "scheme.K": 7, "scheme.N": 21},
    "scma150": {"scheme.name": "scma", "scheme.K": 60, "scheme.N": 90, "scheme.U": 2,
                "train.n_values": "3", "sweep.n_values": "3", "sweep.activity_grid": "1,3,5,7,9"},
    "scma300": {"scheme.name": "scma", "scheme.K": 30, "scheme.N": 90, "scheme.U": 3,
                "train.n_values": "3", "sweep.n_values": "3", "sweep.activity_grid": "1,3,5,7,9"},
    "scma-small": {"scheme.name": "scma", "scheme.K": 6, "scheme.N": 8, "scheme.U": 3,
                   "train.n_values": "1,2", "sweep.n_values": "1,2"},
}


def _coerce(kind, value: str):
    if kind in (bool, "bool"):
        v = str(value).strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if kind in (int, "int"):
        return int(float(value)) if str(value).strip().lower().count("e") else int(value)
    if kind in (float, "float"):
        return float(value)
    return str(value)


def _apply(cfg: ExperimentConfig, key: str, value) -> None:
    if key == "output":
        cfg.output = str(value)
        return
    if "." not in key:
        raise ConfigError(f"override key must look like section.key, got {key!r}")
    sec_name, name = key.split(".", 1)
    section = getattr(cfg, sec_name, None)
    if section is None or sec_name == "output":
        raise ConfigError(f"unknown config section [{sec_name}]")
    types = {f.name: f.type for f in fields(section)}
    if name not in types:
        raise ConfigError(f"unknown key {name!r} in section [{sec_name}]")
    try:
        setattr(section, name, _coerce(types[name], value))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from None


def load_config(path=None, preset: str | None = None, overrides=()) -> ExperimentConfig:
    """Defaults, then the preset, then the INI file, then ``key=value`` overrides."""
    cfg = ExperimentConfig()
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        for k, v in PRESETS[preset].items():
            _apply(cfg, k, v)
    if path:
        parser = configparser.ConfigParser()
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
        for sec in parser.sections():
            for k, v in parser.items(sec):
                _apply(cfg, "output" if sec == "output" and k == "dir" else f"{sec}.{k}", v)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        _apply(cfg, k.strip(), v.strip())
    return cfg.validate()


def config_hash(cfg: ExperimentConfig) -> str:
    d = cfg.as_dict()
    d.pop("output", None)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]
