"""Run configuration: a strict JSON document with one section per component.

Every field is optional; unknown sections or keys are rejected before any
work starts. The fully resolved document (defaults applied) is written next
to each run's outputs.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .dataio import SynthConfig, atomic_write_text
from .errors import ConfigError
from .features import FbankConfig
from .mdn import MtlWeights
from .mlan import MlanConfig
from .neuralnet import TrainConfig
from .pipeline import InversionRecipe

SEED_ENV = "A2A_SEED"


@dataclass
class NetConfig:
    hidden: tuple = (256, 256, 256)
    dropout: float = 0.0
    lhuc: bool = True
    splice_left: int = 1
    splice_right: int = 1
    n_classes: int = 40


@dataclass
class MdnSection:
    n_mix: int = 2
    variance_floor: float = 1e-6
    use_deltas: bool = True


@dataclass
class MlpgSection:
    variance_source: str = "predicted"


def _inversion_train() -> TrainConfig:
    return InversionRecipe().train


@dataclass
class RunConfig:
    features: FbankConfig = field(default_factory=FbankConfig)
    net: NetConfig = field(default_factory=NetConfig)
    mdn: MdnSection = field(default_factory=MdnSection)
    mtl_weights: MtlWeights = field(default_factory=MtlWeights)
    mlpg: MlpgSection = field(default_factory=MlpgSection)
    mlan: MlanConfig = field(default_factory=MlanConfig)
    train: TrainConfig = field(default_factory=_inversion_train)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def recipe(self, front_end: str = "raw_spliced") -> InversionRecipe:
        return InversionRecipe(front_end=front_end, hidden=self.net.hidden, dropout=self.net.dropout,
                               lhuc=self.net.lhuc, splice_left=self.net.splice_left,
                               splice_right=self.net.splice_right, n_mix=self.mdn.n_mix,
                               variance_floor=self.mdn.variance_floor, use_deltas=self.mdn.use_deltas,
                               n_classes=self.net.n_classes, weights=self.mtl_weights, train=self.train,
                               mlpg_variance=self.mlpg.variance_source)

    def with_seed(self, seed: int | None) -> "RunConfig":
        if seed is None:
            return self
        return dataclasses.replace(
            self,
            train=dataclasses.replace(self.train, seed=seed),
            mlan=dataclasses.replace(self.mlan, train=dataclasses.replace(self.mlan.train, seed=seed)),
            synth=dataclasses.replace(self.synth, seed=seed),
        )

    def to_json(self) -> dict:
        return _to_plain(self)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_plain(v) for v in obj]
    return obj


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}; allowed: {', '.join(sorted(fields))}")
    kwargs = {}
    for name, value in data.items():
        default = fields[name].default_factory() if fields[name].default_factory is not dataclasses.MISSING \
            else fields[name].default
        if dataclasses.is_dataclass(default):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}.{name}: expected an object, got {type(value).__name__}")
            # partial sections override that section's own defaults
            unknown_nested = set(value) - {f.name for f in dataclasses.fields(default)}
            merged = value if unknown_nested else {**_to_plain(default), **value}
            value = _build(type(default), merged, f"{where}.{name}")
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: invalid value ({exc})") from None


def parse_run_config(data: dict, where: str = "config") -> RunConfig:
    return _build(RunConfig, data, where)


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: not valid UTF-8 JSON ({exc})") from None
    return parse_run_config(data, str(path))


def resolve_seed(flag: int | None) -> int | None:
    """``--seed`` if given, else the A2A_SEED environment variable, else None."""
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return None
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None


def write_resolved(cfg: RunConfig, run_dir: str | Path) -> Path:
    out = Path(run_dir) / "resolved-config.json"
    atomic_write_text(out, json.dumps(cfg.to_json(), indent=2, sort_keys=True) + "\n")
    return out

