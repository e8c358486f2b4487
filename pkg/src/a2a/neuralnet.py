"""Small feed-forward network engine with explicit backprop.

ReLU/linear hidden layers, any number of named linear output heads fed by
the last hidden layer, an optional bottleneck tap, an optional auxiliary
input concatenated at one layer's input (hidden-layer fusion) and
per-speaker LHUC scaling ``r = 2 sigmoid(alpha)`` on ReLU outputs.
Everything is float64 and deterministic given a seed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import AdaptationError, ConfigError, DataError, InternalError, NumericError

log = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "linear")


@dataclass
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"
    dropout_rate: float = 0.0
    lhuc: bool = False

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ConfigError("layer dims must be positive")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.lhuc and self.activation != "relu":
            raise ConfigError("LHUC scaling applies to ReLU layers only")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _init_matrix(rng, fan_in, fan_out, activation):
    limit = np.sqrt((6.0 if activation == "relu" else 3.0) / fan_in)
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class MlpModel:
    """Layered MLP with named heads.

    Parameters are stored as ``weights[i]`` (in, out) and ``biases[i]``
    per hidden layer, then ``head_weights[name]``/``head_biases[name]``.
    """

    def __init__(self, input_dim: int, hidden: Sequence[LayerSpec], heads: dict[str, int],
                 bottleneck_tap: int | None = None, aux_dim: int = 0, aux_layer: int | None = None,
                 seed: int = 0):
        self.input_dim = int(input_dim)
        self.specs = list(hidden)
        self.head_dims = dict(heads)
        self.bottleneck_tap = bottleneck_tap
        self.aux_dim = int(aux_dim)
        self.aux_layer = aux_layer
        self.lhuc: dict[str, dict[int, np.ndarray]] = {}
        self.meta: dict = {}
        self._validate()
        rng = np.random.default_rng(seed)
        self.weights = [_init_matrix(rng, s.in_dim, s.out_dim, s.activation) for s in self.specs]
        self.biases = [np.zeros(s.out_dim) for s in self.specs]
        self.head_weights = {n: _init_matrix(rng, self.hidden_width, d, "linear") for n, d in self.head_dims.items()}
        self.head_biases = {n: np.zeros(d) for n, d in self.head_dims.items()}

    @classmethod
    def build(cls, input_dim: int, widths: Sequence[int], heads: dict[str, int], activations=None,
              dropout: float = 0.0, lhuc: bool = False, bottleneck_tap=None, aux_dim=0, aux_layer=None,
              seed: int = 0) -> "MlpModel":
        activations = activations or ["relu"] * len(widths)
        specs = []
        prev = input_dim
        for i, (w, act) in enumerate(zip(widths, activations)):
            extra = aux_dim if aux_layer == i else 0
            specs.append(LayerSpec(prev + extra, w, act, dropout if act == "relu" else 0.0,
                                   lhuc and act == "relu"))
            prev = w
        return cls(input_dim, specs, heads, bottleneck_tap, aux_dim, aux_layer, seed)

    def _validate(self):
        prev = self.input_dim
        for i, s in enumerate(self.specs):
            extra = self.aux_dim if self.aux_layer == i else 0
            if s.in_dim != prev + extra:
                raise ConfigError(f"layer {i} in_dim {s.in_dim} != {prev + extra}")
            prev = s.out_dim
        if self.aux_dim and (self.aux_layer is None or not 0 <= self.aux_layer < max(1, len(self.specs))):
            raise ConfigError("aux_layer must index a hidden layer when aux_dim > 0")
        if self.bottleneck_tap is not None and not 0 <= self.bottleneck_tap < len(self.specs):
            raise ConfigError(f"bottleneck tap {self.bottleneck_tap} out of range")
        if not self.head_dims:
            raise ConfigError("model needs at least one head")

    @property
    def hidden_width(self) -> int:
        return self.specs[-1].out_dim if self.specs else self.input_dim

    @property
    def lhuc_layers(self) -> list[int]:
        return [i for i, s in enumerate(self.specs) if s.lhuc]

    def params(self) -> list[np.ndarray]:
        """Trainable weight/bias tensors in serialization order."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        for n in self.head_dims:
            out += [self.head_weights[n], self.head_biases[n]]
        return out

    def set_params(self, flat: Sequence[np.ndarray]):
        flat = list(flat)
        k = 0
        for i in range(len(self.specs)):
            self.weights[i], self.biases[i] = flat[k], flat[k + 1]
            k += 2
        for n in self.head_dims:
            self.head_weights[n], self.head_biases[n] = flat[k], flat[k + 1]
            k += 2

    def init_lhuc(self, speaker: str) -> dict[int, np.ndarray]:
        if not self.lhuc_layers:
            raise ConfigError("model has no LHUC-enabled layers")
        if speaker not in self.lhuc:
            self.lhuc[speaker] = {i: np.zeros(self.specs[i].out_dim) for i in self.lhuc_layers}
        return self.lhuc[speaker]

    def topology(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "layers": [{"in_dim": s.in_dim, "out_dim": s.out_dim, "activation": s.activation,
                        "dropout_rate": s.dropout_rate, "lhuc": s.lhuc} for s in self.specs],
            "heads": [[n, d] for n, d in self.head_dims.items()],
            "bottleneck_tap": self.bottleneck_tap,
            "aux_dim": self.aux_dim,
            "aux_layer": self.aux_layer,
            "lhuc_speakers": sorted(self.lhuc),
        }

    @classmethod
    def from_topology(cls, topo: dict) -> "MlpModel":
        specs = [LayerSpec(**d) for d in topo["layers"]]
        model = cls(topo["input_dim"], specs, {n: d for n, d in topo["heads"]},
                    topo.get("bottleneck_tap"), topo.get("aux_dim", 0), topo.get("aux_layer"))
        for spk in topo.get("lhuc_speakers", []):
            model.init_lhuc(spk)
        return model

    def all_arrays(self) -> list[np.ndarray]:
        """params() followed by LHUC vectors (speakers sorted, layers ascending)."""
        out = self.params()
        for spk in sorted(self.lhuc):
            out += [self.lhuc[spk][i] for i in sorted(self.lhuc[spk])]
        return out

    def copy(self) -> "MlpModel":
        m = MlpModel.from_topology(self.topology())
        m.set_params([a.copy() for a in self.params()])
        m.lhuc = {s: {i: a.copy() for i, a in v.items()} for s, v in self.lhuc.items()}
        m.meta = _deepcopy_json(self.meta)
        return m


def _deepcopy_json(d):
    import json
    return json.loads(json.dumps(d))


@dataclass
class Cache:
    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    act: list = field(default_factory=list)
    lhuc_r: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    hidden: np.ndarray | None = None
    speaker: str | None = None
    n_layers: int = 0
    aux_dim: int = 0


def forward(model: MlpModel, x: np.ndarray, mode: str = "eval", speaker: str | None = None,
            aux: np.ndarray | None = None, rng: np.random.Generator | None = None,
            stop_at: int | None = None):
    """Run the network; returns (head outputs dict, cache).

    ``stop_at`` returns after that hidden layer with outputs ``{"tap": h}``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise DataError(f"input width {x.shape[-1]} != model input dim {model.input_dim}")
    if model.aux_dim:
        if aux is None or aux.shape != (x.shape[0], model.aux_dim):
            raise DataError(f"model expects auxiliary input of shape ({x.shape[0]}, {model.aux_dim})")
    alphas = None
    if speaker is not None and model.lhuc_layers:
        if speaker not in model.lhuc:
            raise AdaptationError(f"no LHUC parameters for speaker {speaker!r}")
        alphas = model.lhuc[speaker]
    train = mode == "train"
    if train and rng is None:
        rng = np.random.default_rng(0)
    cache = Cache(speaker=speaker if alphas is not None else None, n_layers=len(model.specs),
                  aux_dim=model.aux_dim)
    h = x
    for i, spec in enumerate(model.specs):
        if model.aux_layer == i and model.aux_dim:
            h = np.concatenate([h, aux], axis=1)
        cache.inputs.append(h)
        z = h @ model.weights[i] + model.biases[i]
        a = np.maximum(z, 0.0) if spec.activation == "relu" else z
        cache.pre.append(z)
        cache.act.append(a)
        r = None
        if alphas is not None and spec.lhuc:
            r = 2.0 * sigmoid(alphas[i])
            a = a * r
        cache.lhuc_r.append(r)
        mask = None
        if train and spec.dropout_rate > 0:
            keep = 1.0 - spec.dropout_rate
            mask = (rng.random(a.shape) < keep) / keep
            a = a * mask
        cache.masks.append(mask)
        h = a
        if stop_at is not None and i == stop_at:
            cache.hidden = h
            return {"tap": h}, cache
    if not model.specs and model.aux_dim:
        h = np.concatenate([h, aux], axis=1)
    cache.hidden = h
    outputs = {n: h @ model.head_weights[n] + model.head_biases[n] for n in model.head_dims}
    return outputs, cache


@dataclass
class Grads:
    params: list[np.ndarray]
    lhuc: dict[int, np.ndarray]


def backward(model: MlpModel, cache: Cache, head_grads: dict[str, np.ndarray],
             want_lhuc: bool = False) -> Grads:
    """Gradients of the loss w.r.t. every parameter (and LHUC alphas)."""
    if cache.n_layers != len(model.specs) or cache.hidden is None or len(cache.pre) != len(model.specs):
        raise InternalError("cache does not belong to this model or is from a truncated forward")
    h = cache.hidden
    dh = np.zeros_like(h)
    head_out = []
    for n in model.head_dims:
        g = head_grads.get(n)
        if g is None:
            head_out += [np.zeros_like(model.head_weights[n]), np.zeros_like(model.head_biases[n])]
            continue
        head_out += [h.T @ g, g.sum(axis=0)]
        dh += g @ model.head_weights[n].T
    layer_out = [None] * (2 * len(model.specs))
    lhuc_grads = {}
    alphas = model.lhuc.get(cache.speaker) if cache.speaker is not None else None
    for i in range(len(model.specs) - 1, -1, -1):
        spec = model.specs[i]
        if cache.masks[i] is not None:
            dh = dh * cache.masks[i]
        r = cache.lhuc_r[i]
        if r is not None:
            if want_lhuc:
                s = sigmoid(alphas[i])
                lhuc_grads[i] = np.sum(dh * cache.act[i], axis=0) * 2.0 * s * (1.0 - s)
            dh = dh * r
        dz = dh * (cache.pre[i] > 0) if spec.activation == "relu" else dh
        layer_out[2 * i] = cache.inputs[i].T @ dz
        layer_out[2 * i + 1] = dz.sum(axis=0)
        if i > 0:
            dh = dz @ model.weights[i].T
            if model.aux_layer == i and model.aux_dim:
                dh = dh[:, :-model.aux_dim]
    return Grads(layer_out + head_out, lhuc_grads)


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 20
    seed: int = 0
    gradient_clip_norm: float | None = 5.0
    batch_unit: str = "frame"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.batch_unit not in ("frame", "utterance"):
            raise ConfigError(f"unknown batch_unit {self.batch_unit!r}")


@dataclass
class Sample:
    """One utterance: inputs, named per-frame targets, optional speaker/aux."""

    x: np.ndarray
    targets: dict = field(default_factory=dict)
    speaker: str | None = None
    aux: np.ndarray | None = None
    utt_id: str = ""


@dataclass
class Batch:
    x: np.ndarray
    targets: dict
    bounds: list
    aux: np.ndarray | None = None


@dataclass
class TrainReport:
    epoch_losses: list = field(default_factory=list)
    epoch_parts: list = field(default_factory=list)


LossFn = Callable[[dict, Batch], tuple]


def _make_batches(data: Sequence[Sample], cfg: TrainConfig, rng: np.random.Generator):
    if cfg.batch_unit == "utterance":
        order = rng.permutation(len(data))
        for k in range(0, len(order), cfg.batch_size):
            items = [data[j] for j in order[k:k + cfg.batch_size]]
            bounds, start = [], 0
            for s in items:
                bounds.append((start, start + s.x.shape[0]))
                start += s.x.shape[0]
            yield Batch(np.concatenate([s.x for s in items]),
                        {key: np.concatenate([s.targets[key] for s in items]) for key in items[0].targets},
                        bounds,
                        None if items[0].aux is None else np.concatenate([s.aux for s in items]))
    else:
        x = np.concatenate([s.x for s in data])
        targets = {key: np.concatenate([s.targets[key] for s in data]) for key in data[0].targets}
        aux = None if data[0].aux is None else np.concatenate([s.aux for s in data])
        order = rng.permutation(x.shape[0])
        for k in range(0, len(order), cfg.batch_size):
            idx = order[k:k + cfg.batch_size]
            yield Batch(x[idx], {key: v[idx] for key, v in targets.items()}, [(0, len(idx))],
                        None if aux is None else aux[idx])


class _Optimizer:
    def __init__(self, arrays, cfg: TrainConfig):
        self.cfg = cfg
        self.step_count = 0
        if cfg.optimizer == "adam":
            self.m = [np.zeros_like(a) for a in arrays]
            self.v = [np.zeros_like(a) for a in arrays]

    def step(self, arrays, grads):
        cfg = self.cfg
        if cfg.gradient_clip_norm:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > cfg.gradient_clip_norm:
                grads = [g * (cfg.gradient_clip_norm / norm) for g in grads]
        self.step_count += 1
        if cfg.optimizer == "sgd":
            for a, g in zip(arrays, grads):
                a -= cfg.learning_rate * g
            return
        b1, b2 = cfg.beta1, cfg.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            a -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def fit(model: MlpModel, data: Sequence[Sample], loss_fn: LossFn, cfg: TrainConfig,
        speaker: str | None = None, adapt_only: bool = False) -> TrainReport:
    """Minibatch training; ``loss_fn(outputs, batch) -> (loss, head_grads[, parts])``.

    With ``adapt_only`` only the LHUC vectors of ``speaker`` are updated.
    """
    if not data:
        raise DataError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    if adapt_only:
        alphas = model.lhuc[speaker]
        trainable = [alphas[i] for i in sorted(alphas)]
    else:
        trainable = model.params()
    opt = _Optimizer(trainable, cfg)
    report = TrainReport()
    for epoch in range(cfg.epochs):
        losses, weights, parts_acc = [], [], {}
        for b, batch in enumerate(_make_batches(data, cfg, rng)):
            outputs, cache = forward(model, batch.x, "train", speaker, batch.aux, rng)
            res = loss_fn(outputs, batch)
            loss, head_grads = res[0], res[1]
            if not np.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {epoch}, batch {b}")
            grads = backward(model, cache, head_grads, want_lhuc=adapt_only)
            g = [grads.lhuc[i] for i in sorted(grads.lhuc)] if adapt_only else grads.params
            opt.step(trainable, g)
            n = batch.x.shape[0]
            losses.append(loss)
            weights.append(n)
            if len(res) > 2:
                for k, v in res[2].items():
                    parts_acc[k] = parts_acc.get(k, 0.0) + v * n
        total = float(np.sum(weights))
        report.epoch_losses.append(float(np.dot(losses, weights) / total))
        report.epoch_parts.append({k: v / total for k, v in parts_acc.items()})
        log.debug("epoch %d loss %.6f", epoch, report.epoch_losses[-1])
    return report


def evaluate_loss(model: MlpModel, data: Sequence[Sample], loss_fn: LossFn,
                  speaker: str | None = None) -> float:
    """Frame-weighted mean loss in eval mode, one utterance per batch."""
    total, n = 0.0, 0
    for s in data:
        outputs, _ = forward(model, s.x, "eval", speaker, s.aux)
        loss = loss_fn(outputs, Batch(s.x, s.targets, [(0, s.x.shape[0])], s.aux))[0]
        total += loss * s.x.shape[0]
        n += s.x.shape[0]
    return total / n


def lhuc_adapt(model: MlpModel, speaker: str, data: Sequence[Sample], loss_fn: LossFn,
               cfg: TrainConfig | None = None, pseudo_targets: Callable | None = None) -> TrainReport:
    """Estimate LHUC vectors for one speaker with all weights frozen.

    ``pseudo_targets(model, sample) -> targets`` enables unsupervised
    adaptation from the speaker-independent model's own hypotheses.
    """
    cfg = cfg or TrainConfig(optimizer="adam", learning_rate=0.01, epochs=10, batch_unit="utterance",
                             batch_size=1, gradient_clip_norm=None)
    model.init_lhuc(speaker)
    if pseudo_targets is not None:
        data = [Sample(s.x, pseudo_targets(model, s), speaker, s.aux, s.utt_id) for s in data]
    return fit(model, data, loss_fn, cfg, speaker=speaker, adapt_only=True)


def extract_bottleneck(model: MlpModel, x: np.ndarray, speaker: str | None = None,
                       aux: np.ndarray | None = None) -> np.ndarray:
    if model.bottleneck_tap is None:
        raise ConfigError("model has no bottleneck tap")
    out, _ = forward(model, x, "eval", speaker, aux, stop_at=model.bottleneck_tap)
    return out["tap"]


def ce_pseudo_targets(model: MlpModel, sample: Sample, head: str = "ce") -> dict:
    out, _ = forward(model, sample.x, "eval", None, sample.aux)
    return {**sample.targets, "labels": np.argmax(out[head], axis=1)}
