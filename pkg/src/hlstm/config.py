"""Run configuration and its key/value file format.

A config file is INI-style text with a single ``[run]`` section; every key is
a :class:`RunConfig` field name::

    [run]
    mode = lc-blstm
    n_layers = 3
    cell_dim = 32
    highway = true
    lr = 0.2

Lists (``cell_dim`` per layer) are comma separated.  Unknown keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field

from .network import LayerSpec, StackSpec

MODES = ("uni", "blstm-full", "lc-blstm", "csc")
SEED_ENV = "HLSTM_SEED"


class ConfigError(ValueError):
    pass


def default_seed() -> int:
    return int(os.environ.get(SEED_ENV, "1"))


@dataclass
class RunConfig:
    seed: int = field(default_factory=default_seed)
    mode: str = "uni"
    # network
    n_layers: int = 2
    cell_dim: tuple[int, ...] = (32,)
    proj_dim: int = 16
    highway: bool = False
    init_scale: float = 0.05
    forget_bias: float = 1.0
    carry_bias: float = 0.0
    # chunking / packing
    segment_len: int = 20
    n_streams: int = 40
    n_c: int = 22
    n_r: int = 21
    n_l: int = 22
    # cross-entropy training
    epochs: int = 10
    lr: float = 0.2
    lr_per_sample: bool = False
    lr_halving: float = 0.5
    max_norm: float = 1.0
    highway_dropout: bool = True
    dropout_early: float = 0.1
    dropout_late: float = 0.8
    dropout_switch_epoch: int = 5
    # sequence training
    seq_lr: float = 2e-6
    seq_lr_per_sample: bool = True
    kappa: float = 0.2
    pool_capacity: int = 40
    pool_max_frames: int = 1_000_000
    seq_epochs: int = 1
    # synthetic task
    alphabet: int = 4
    feature_dim: int = 8
    context: int = 2
    noise: float = 0.5
    rule: str = "shift"
    stay_prob: float = 0.5
    n_train: int = 200
    n_valid: int = 40
    n_test: int = 40
    min_len: int = 30
    max_len: int = 60

    def __post_init__(self):
        if isinstance(self.cell_dim, int):
            self.cell_dim = (self.cell_dim,)
        self.cell_dim = tuple(int(c) for c in self.cell_dim)
        self.validate()

    @property
    def bidirectional(self) -> bool:
        return self.mode != "uni"

    def cell_dims(self) -> list[int]:
        if len(self.cell_dim) == 1:
            return list(self.cell_dim) * self.n_layers
        return list(self.cell_dim)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if len(self.cell_dim) not in (1, self.n_layers):
            raise ConfigError("cell_dim must give one value or one per layer")
        if self.highway:
            if self.n_layers < 2:
                raise ConfigError("highway connections need at least two layers")
            dims = self.cell_dims()
            if len(set(dims)) != 1:
                raise ConfigError(f"highway layers need equal cell dims, got {dims}")
        for name in ("segment_len", "n_streams", "n_c", "pool_capacity"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("n_r", "n_l", "context", "epochs", "seq_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("dropout_early", "dropout_late"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.lr < 0 or self.seq_lr < 0 or self.max_norm < 0:
            raise ConfigError("learning rates and max_norm must be non-negative")
        if not 0.0 < self.lr_halving <= 1.0:
            raise ConfigError("lr_halving must lie in (0, 1]")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ConfigError("need 1 <= min_len <= max_len")
        if self.rule not in ("shift", "max"):
            raise ConfigError(f"unknown context rule {self.rule!r}")

    def stack_spec(self, input_dim: int, output_dim: int) -> StackSpec:
        proj = self.proj_dim or None
        layers = []
        for idx, cell in enumerate(self.cell_dims()):
            kind = "highway" if self.highway and idx > 0 else "lstm"
            layers.append(LayerSpec(kind, cell, proj))
        return StackSpec(input_dim, output_dim, tuple(layers), self.bidirectional)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["cell_dim"] = list(self.cell_dim)
        return d

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)


def _parse_value(name: str, raw: str):
    f = {f.name: f for f in dataclasses.fields(RunConfig)}[name]
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    raw = raw.strip()
    try:
        if kind.startswith("tuple"):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if kind == "bool":
            lowered = raw.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return lowered in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc
    return raw


def parse_overrides(pairs: dict[str, str]) -> dict:
    known = {f.name for f in dataclasses.fields(RunConfig)}
    out = {}
    for key, raw in pairs.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _parse_value(key, raw)
    return out


def read_config_file(path) -> dict:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    with open(path) as fh:
        try:
            parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    if not parser.has_section("run"):
        raise ConfigError(f"{path}: missing [run] section")
    return parse_overrides(dict(parser.items("run")))


def load_config(path=None, **overrides) -> RunConfig:
    """Defaults, then ``overrides`` (e.g. CLI flags), then the file at ``path``."""
    values = dict(overrides)
    if path is not None:
        values.update(read_config_file(path))
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
