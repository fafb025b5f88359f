"""Run configuration: YAML file plus ``section.key=value`` overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Any

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    num_ids: int = 16
    snippets_per_id: int = 6
    video_len: int = 8
    N: int = 4
    height: int = 64
    width: int = 32
    seed: int = 0
    path: str = ""  # load a generated dataset instead of generating in memory


@dataclass
class ModelConfig:
    blocks: list = field(default_factory=lambda: [[16, 2], [32, 2], [64, 2], [128, 2]])
    aggregation: str = "avg"


@dataclass
class CosamSection:
    enable: bool = True
    insert_after: list = field(default_factory=lambda: [3, 4])
    K: int = 3
    D_R: int = 256
    eps: float = 1e-4
    spatial: bool = True
    channel: bool = True


@dataclass
class SrimSection:
    enable: bool = False
    insert_after: list = field(default_factory=lambda: [4])
    C_R: int = 512
    N_o: int = 5
    heads: int = 8
    window: int = 1


@dataclass
class LossConfig:
    margin: float = 0.3
    lam: float = 1.0
    lam_kl: float = 1.0


@dataclass
class OptimConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 2000
    decay_every: int = 0  # 0 -> a quarter of the steps
    decay_factor: float = 0.1


@dataclass
class BatchConfig:
    P: int = 4
    K_s: int = 2
    frame_select: str = "sequential"


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    cosam: CosamSection = field(default_factory=CosamSection)
    srim: SrimSection = field(default_factory=SrimSection)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    batch: BatchConfig = field(default_factory=BatchConfig)
    seed: int = 0
    out_dir: str = ""

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def run_dict(self) -> dict:
        """Everything that influences results (the output location does not)."""
        d = self.to_dict()
        d.pop("out_dir")
        return d

    def hash(self) -> str:
        blob = json.dumps(self.run_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def decay_every(self) -> int:
        return self.optim.decay_every or max(1, self.optim.steps // 4)

    def validate(self) -> "RunConfig":
        d = self.data
        if d.path and not os.path.isfile(os.path.join(d.path, "manifest")):
            raise ConfigError(f"data.path {d.path!r} holds no dataset manifest")
        if d.N < 2:
            raise ConfigError("data.N must be >= 2")
        if d.N > d.video_len:
            raise ConfigError(f"data.N={d.N} exceeds data.video_len={d.video_len}")
        if d.snippets_per_id < 2 or d.num_ids < 4:
            raise ConfigError("need num_ids >= 4 and snippets_per_id >= 2")
        if self.cosam.enable:
            if not 1 <= self.cosam.K <= d.N - 1:
                raise ConfigError(f"cosam.K={self.cosam.K} must lie in [1, N-1={d.N - 1}]")
            if not (self.cosam.spatial or self.cosam.channel):
                raise ConfigError("cosam needs at least one of spatial/channel")
        nblocks = len(self.model.blocks)
        for name, sec in (("cosam", self.cosam), ("srim", self.srim)):
            if sec.enable and any(not 1 <= i <= nblocks for i in sec.insert_after):
                raise ConfigError(f"{name}.insert_after must index blocks 1..{nblocks}")
        stride = 1
        for blk in self.model.blocks:
            if len(blk) != 2 or blk[1] not in (1, 2) or blk[0] < 1:
                raise ConfigError(f"bad block {blk}")
            stride *= blk[1]
        if d.height % stride or d.width % stride:
            raise ConfigError(f"{d.height}x{d.width} not divisible by total stride {stride}")
        if self.model.aggregation not in ("avg", "ta"):
            raise ConfigError("model.aggregation must be 'avg' or 'ta'")
        if self.batch.frame_select not in ("sequential", "random"):
            raise ConfigError("batch.frame_select must be 'sequential' or 'random'")
        n_train = round(d.num_ids / 2)
        if self.batch.P > n_train or self.batch.P < 2:
            raise ConfigError(f"batch.P={self.batch.P} must lie in [2, {n_train}] training identities")
        if not 1 <= self.batch.K_s <= d.snippets_per_id:
            raise ConfigError("batch.K_s must lie in [1, snippets_per_id]")
        if self.optim.steps < 0 or self.optim.lr <= 0:
            raise ConfigError("optim.steps >= 0 and optim.lr > 0 required")
        if self.loss.margin < 0:
            raise ConfigError("loss.margin must be >= 0")
        return self


_SECTIONS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(value: Any, default: Any, key: str) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, str):
            # YAML 1.1 reads "1e-3" (no dot) as a string
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return value
    return value


def _apply(cfg: RunConfig, key: str, value: Any) -> None:
    section, _, leaf = key.partition(".")
    if section not in _SECTIONS:
        raise ConfigError(f"unknown config key {key!r}")
    target = getattr(cfg, section)
    if not leaf:
        if dataclasses.is_dataclass(target):
            if not isinstance(value, dict):
                raise ConfigError(f"{section}: expected a mapping")
            for k, v in value.items():
                _apply(cfg, f"{section}.{k}", v)
            return
        setattr(cfg, section, _coerce(value, target, key))
        return
    if not dataclasses.is_dataclass(target) or leaf not in {f.name for f in dataclasses.fields(target)}:
        raise ConfigError(f"unknown config key {key!r}")
    setattr(target, leaf, _coerce(value, getattr(target, leaf), key))


def parse_overrides(pairs) -> list[tuple[str, Any]]:
    out = []
    for pair in pairs or []:
        key, sep, raw = pair.partition("=")
        if not sep:
            raise ConfigError(f"override {pair!r} is not key=value")
        out.append((key.strip(), yaml.safe_load(raw)))
    return out


def parse_config(path: str | None = None, overrides=None) -> RunConfig:
    """Defaults, then the YAML file at ``path``, then ``overrides`` (key, value) pairs."""
    cfg = RunConfig()
    if path:
        try:
            with open(path) as fh:
                data = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping")
        for k, v in data.items():
            _apply(cfg, k, v)
    for k, v in overrides or []:
        _apply(cfg, k, v)
    return cfg.validate()


def from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    for k, v in data.items():
        _apply(cfg, k, v)
    return cfg.validate()
