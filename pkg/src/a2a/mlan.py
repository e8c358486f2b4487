"""Two-level bottleneck cascade for cross-domain feature adaptation.

Level 1 is trained on in-domain audio; its bottleneck is computed for the
out-of-domain audio, and level 2 is trained on ``[spliced raw | level-1
bottleneck]`` of the out-of-domain audio. Feeding either domain through
both levels yields the level-2 bottleneck used by the inversion model.
Both levels are frame-level monophone classifiers.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError
from .features import FeatureMatrix, Standardizer, splice_context
from .mdn import ce_loss
from .neuralnet import MlpModel, Sample, TrainConfig, extract_bottleneck, fit

STACK_MANIFEST = "stack.json"


@dataclass
class MlanConfig:
    hidden: tuple = (256, 256)
    bottleneck_dim: int = 39
    bottleneck_activation: str = "linear"
    n_classes: int = 40
    splice_left: int = 1
    splice_right: int = 1
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        learning_rate=1e-3, batch_size=256, epochs=15, seed=0, batch_unit="frame"))

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.bottleneck_dim < 1 or self.n_classes < 2:
            raise ConfigError("bottleneck_dim must be >= 1 and n_classes >= 2")


def _spliced(feats: np.ndarray, left: int, right: int) -> np.ndarray:
    return splice_context(FeatureMatrix(feats), left, right).data


def _build(input_dim: int, cfg: MlanConfig, seed: int) -> MlpModel:
    widths = list(cfg.hidden) + [cfg.bottleneck_dim]
    acts = ["relu"] * len(cfg.hidden) + [cfg.bottleneck_activation]
    return MlpModel.build(input_dim, widths, {"ce": cfg.n_classes}, activations=acts,
                          bottleneck_tap=len(widths) - 1, seed=seed)


def _ce_objective(outputs, batch):
    loss, g = ce_loss(outputs["ce"], batch.targets["labels"])
    return loss, {"ce": g}


def _check_labels(feats_list, labels_list):
    if len(feats_list) != len(labels_list):
        raise DataError(f"{len(feats_list)} feature matrices but {len(labels_list)} label sequences")
    for i, (f, l) in enumerate(zip(feats_list, labels_list)):
        if f.shape[0] != len(l):
            raise DataError(f"utterance {i}: {f.shape[0]} frames but {len(l)} labels")


def _train_classifier(inputs: list[np.ndarray], labels: list[np.ndarray], cfg: MlanConfig,
                      seed_offset: int) -> MlpModel:
    norm = Standardizer.fit(np.concatenate(inputs))
    model = _build(inputs[0].shape[1], cfg, cfg.train.seed + seed_offset)
    data = [Sample(norm.apply(x), {"labels": np.asarray(l)}) for x, l in zip(inputs, labels)]
    report = fit(model, data, _ce_objective, cfg.train)
    model.meta["input_norm"] = norm.to_json()
    model.meta["splice"] = [cfg.splice_left, cfg.splice_right]
    model.meta["train_losses"] = report.epoch_losses
    return model


def train_level1(feats: Sequence[np.ndarray], labels: Sequence[np.ndarray], cfg: MlanConfig) -> MlpModel:
    """Level-1 classifier on in-domain (spliced, standardized) features."""
    _check_labels(feats, labels)
    inputs = [_spliced(f, cfg.splice_left, cfg.splice_right) for f in feats]
    model = _train_classifier(inputs, list(labels), cfg, 0)
    model.meta["level"] = 1
    return model


def _normed(model: MlpModel, x: np.ndarray) -> np.ndarray:
    return Standardizer.from_json(model.meta["input_norm"]).apply(x)


def gen_bottleneck1(dnn1: MlpModel, feats: np.ndarray) -> np.ndarray:
    left, right = dnn1.meta["splice"]
    return extract_bottleneck(dnn1, _normed(dnn1, _spliced(feats, left, right)))


def level2_input(feats: np.ndarray, bottleneck1: np.ndarray, left: int, right: int) -> np.ndarray:
    """``[spliced raw | level-1 bottleneck]`` in that order."""
    if bottleneck1.shape[0] != feats.shape[0]:
        raise DataError(f"bottleneck has {bottleneck1.shape[0]} frames, features {feats.shape[0]}")
    return np.concatenate([_spliced(feats, left, right), bottleneck1], axis=1)


def train_level2(feats: Sequence[np.ndarray], bottlenecks: Sequence[np.ndarray],
                 labels: Sequence[np.ndarray], cfg: MlanConfig, dnn1: MlpModel | None = None) -> MlpModel:
    """Level-2 classifier on out-of-domain raw features joined with level-1 bottlenecks."""
    _check_labels(feats, labels)
    inputs = [level2_input(f, b, cfg.splice_left, cfg.splice_right) for f, b in zip(feats, bottlenecks)]
    widths = {x.shape[1] for x in inputs}
    if len(widths) != 1:
        raise ConfigError(f"inconsistent level-2 input widths {sorted(widths)}")
    if dnn1 is not None:
        expected = dnn1.input_dim + dnn1.specs[dnn1.bottleneck_tap].out_dim
        if inputs[0].shape[1] != expected:
            raise ConfigError(f"level-2 input width {inputs[0].shape[1]} != raw {dnn1.input_dim} "
                              f"+ bottleneck {dnn1.specs[dnn1.bottleneck_tap].out_dim}")
    model = _train_classifier(inputs, list(labels), cfg, 1)
    model.meta["level"] = 2
    return model


@dataclass
class MlanStack:
    dnn1: MlpModel
    dnn2: MlpModel

    def __post_init__(self):
        if self.dnn1.bottleneck_tap is None or self.dnn2.bottleneck_tap is None:
            raise ConfigError("both MLAN levels need a bottleneck tap")
        if "input_norm" not in self.dnn1.meta or "input_norm" not in self.dnn2.meta:
            raise ConfigError("MLAN stack is untrained (missing input statistics)")
        raw_dim = self.dnn1.input_dim
        bn1 = self.dnn1.specs[self.dnn1.bottleneck_tap].out_dim
        if self.dnn2.input_dim != raw_dim + bn1:
            raise ConfigError(f"level-2 input {self.dnn2.input_dim} != {raw_dim} + {bn1}")

    @property
    def bottleneck_dim(self) -> int:
        return self.dnn2.specs[self.dnn2.bottleneck_tap].out_dim

    @property
    def stack_id(self) -> str:
        from .dataio import model_bytes
        h = hashlib.sha256(model_bytes(self.dnn1) + model_bytes(self.dnn2))
        return h.hexdigest()[:16]

    def save(self, out_dir: str | Path) -> None:
        from .dataio import atomic_write_text, save_model
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_model(out_dir / "dnn1.a2am", self.dnn1)
        save_model(out_dir / "dnn2.a2am", self.dnn2)
        manifest = {"stack_id": self.stack_id, "dnn1": "dnn1.a2am", "dnn2": "dnn2.a2am",
                    "bottleneck_dim": self.bottleneck_dim, "raw_dim": self.dnn1.meta.get("raw_dim")}
        atomic_write_text(out_dir / STACK_MANIFEST, json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, stack_dir: str | Path) -> "MlanStack":
        from .dataio import load_model
        stack_dir = Path(stack_dir)
        path = stack_dir / STACK_MANIFEST
        if not path.exists():
            raise ConfigError(f"{stack_dir} is not an MLAN stack (no {STACK_MANIFEST})")
        manifest = json.loads(path.read_text())
        stack = cls(load_model(stack_dir / manifest["dnn1"]), load_model(stack_dir / manifest["dnn2"]))
        if stack.stack_id != manifest["stack_id"]:
            raise ConfigError(f"{path}: stack id {manifest['stack_id']} does not match its models")
        return stack


def mlan_features(stack: MlanStack, feats: np.ndarray) -> np.ndarray:
    """Level-2 bottleneck of ``[feats | level-1 bottleneck(feats)]``."""
    left, right = stack.dnn2.meta["splice"]
    raw_width = stack.dnn1.input_dim // (stack.dnn1.meta["splice"][0] + 1 + stack.dnn1.meta["splice"][1])
    if feats.shape[1] != raw_width:
        raise DataError(f"feature width {feats.shape[1]} != MLAN raw input width {raw_width}")
    x = level2_input(feats, gen_bottleneck1(stack.dnn1, feats), left, right)
    return extract_bottleneck(stack.dnn2, _normed(stack.dnn2, x))


def train_mlan(in_domain: tuple, out_domain: tuple, cfg: MlanConfig) -> MlanStack:
    """Full cascade from (feats, labels) lists of each domain."""
    dnn1 = train_level1(in_domain[0], in_domain[1], cfg)
    bn = [gen_bottleneck1(dnn1, f) for f in out_domain[0]]
    dnn2 = train_level2(out_domain[0], bn, out_domain[1], cfg, dnn1)
    raw = int(in_domain[0][0].shape[1])
    dnn1.meta["raw_dim"] = raw
    dnn2.meta["raw_dim"] = raw
    return MlanStack(dnn1, dnn2)


def domain_gap(feats_a: np.ndarray, feats_b: np.ndarray, var_floor: float = 1e-8) -> float:
    """Symmetric KL (KL(A||B) + KL(B||A)) between diagonal-Gaussian fits, summed over dims."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DataError(f"domain_gap needs equal-width matrices, got {a.shape} and {b.shape}")
    if a.shape[0] < 1 or b.shape[0] < 1:
        raise DataError("domain_gap needs non-empty sets")
    va = np.maximum(a.var(axis=0), var_floor)
    vb = np.maximum(b.var(axis=0), var_floor)
    dm2 = (a.mean(axis=0) - b.mean(axis=0)) ** 2
    # log-variance terms cancel in the symmetric sum
    j = 0.5 * (va / vb + vb / va - 2.0 + dm2 * (1.0 / va + 1.0 / vb))
    return float(np.sum(j))
