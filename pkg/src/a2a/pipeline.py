"""Inversion training, trajectory generation, evaluation and fusion."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .dataio import Utterance
from .errors import ConfigError, DataError
from .features import N_ARTIC, FeatureMatrix, Kind, Standardizer, append_deltas, splice_context
from .mdn import MdnConfig, MdnParams, MtlWeights, inversion_objective, logsumexp, mdn_point_estimate, mdn_split
from .mlan import MlanStack, mlan_features
from .mlpg import DeltaWindows, smooth_mdn_sequence
from .neuralnet import MlpModel, Sample, TrainConfig, TrainReport, evaluate_loss, fit, forward, lhuc_adapt

log = logging.getLogger(__name__)


@dataclass
class InversionRecipe:
    front_end: str = "raw_spliced"
    hidden: tuple = (256, 256, 256)
    dropout: float = 0.0
    lhuc: bool = True
    splice_left: int = 1
    splice_right: int = 1
    n_mix: int = 2
    variance_floor: float = 1e-6
    use_deltas: bool = True
    n_classes: int = 40
    weights: MtlWeights = field(default_factory=MtlWeights)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        learning_rate=1e-3, batch_size=1, epochs=40, seed=0, batch_unit="utterance"))
    mlpg_variance: str = "predicted"

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.front_end not in ("raw_spliced", "mlan"):
            raise ConfigError(f"unknown front end {self.front_end!r}")
        if self.mlpg_variance not in ("predicted", "pooled"):
            raise ConfigError(f"unknown MLPG variance source {self.mlpg_variance!r}")

    @property
    def mdn(self) -> MdnConfig:
        return MdnConfig(self.n_mix, 3 * N_ARTIC if self.use_deltas else N_ARTIC, self.variance_floor)

    def to_json(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def _front_end_input(model_meta: dict, feats: np.ndarray, stack: MlanStack | None) -> np.ndarray:
    fe = model_meta["front_end"]
    if fe["kind"] == "mlan":
        if stack is None:
            raise ConfigError("model uses the MLAN front end; an MLAN stack is required")
        if stack.stack_id != fe["stack_id"]:
            raise ConfigError(f"MLAN stack {stack.stack_id} does not match the stack "
                              f"{fe['stack_id']} this model was trained with")
        feats = mlan_features(stack, feats)
    x = splice_context(FeatureMatrix(feats), fe["splice"][0], fe["splice"][1]).data
    return Standardizer.from_json(fe["norm"]).apply(x)


def _check_parallel(utts: Sequence[Utterance]):
    bad = [u.utt_id for u in utts
           if u.traj is None or u.labels is None
           or not (u.feats.shape[0] == u.traj.shape[0] == u.labels.shape[0])]
    if bad:
        raise DataError(f"frame-count mismatch or missing targets for utterances: {', '.join(bad)}")
    if not utts:
        raise DataError("no training utterances")


def _targets(traj: np.ndarray, use_deltas: bool) -> np.ndarray:
    if use_deltas:
        return append_deltas(FeatureMatrix(traj, kind=Kind.ARTICULATORY)).data
    return np.asarray(traj, dtype=np.float64)


def inversion_loss(mdn_cfg: MdnConfig, weights: MtlWeights):
    def loss_fn(outputs, batch):
        total, parts, g_raw, g_logits = inversion_objective(
            outputs["mdn"], batch.targets["traj"], mdn_cfg, weights,
            outputs.get("ce"), batch.targets.get("labels"), batch.bounds)
        grads = {"mdn": g_raw}
        if g_logits is not None:
            grads["ce"] = g_logits
        return total, grads, parts
    return loss_fn


def train_inversion(utts: Sequence[Utterance], recipe: InversionRecipe = InversionRecipe(),
                    stack: MlanStack | None = None) -> tuple[MlpModel, TrainReport]:
    """Multi-task MDN inversion model with an auxiliary monophone head."""
    _check_parallel(utts)
    if recipe.front_end == "mlan" and stack is None:
        raise ConfigError("the mlan front end requires a trained MLAN stack")
    feats = [mlan_features(stack, u.feats) if recipe.front_end == "mlan" else u.feats for u in utts]
    xs = [splice_context(FeatureMatrix(f), recipe.splice_left, recipe.splice_right).data for f in feats]
    in_norm = Standardizer.fit(np.concatenate(xs))
    ys = [_targets(u.traj, recipe.use_deltas) for u in utts]
    out_norm = Standardizer.fit(np.concatenate(ys))
    mdn_cfg = recipe.mdn
    model = MlpModel.build(xs[0].shape[1], recipe.hidden, {"mdn": mdn_cfg.raw_width, "ce": recipe.n_classes},
                           dropout=recipe.dropout, lhuc=recipe.lhuc, seed=recipe.train.seed)
    data = [Sample(in_norm.apply(x), {"traj": out_norm.apply(y), "labels": u.labels}, u.speaker_id, None, u.utt_id)
            for x, y, u in zip(xs, ys, utts)]
    report = fit(model, data, inversion_loss(mdn_cfg, recipe.weights), recipe.train)
    model.meta.update({
        "kind": "inversion",
        "front_end": {"kind": recipe.front_end, "splice": [recipe.splice_left, recipe.splice_right],
                      "norm": in_norm.to_json(), "stack_id": stack.stack_id if stack is not None else None},
        "target_norm": out_norm.to_json(),
        "mdn": {"n_mix": mdn_cfg.n_mix, "target_dim": mdn_cfg.target_dim,
                "variance_floor": mdn_cfg.variance_floor},
        "mtl_weights": list(recipe.weights.as_tuple()),
        "mlpg_variance": recipe.mlpg_variance,
        "train_losses": report.epoch_losses,
    })
    return model, report


def mdn_params_mm(model: MlpModel, feats: np.ndarray, stack: MlanStack | None = None,
                  speaker: str | None = None) -> tuple[MdnParams, np.ndarray]:
    """MDN parameters in millimetre units, and the CE logits."""
    x = _front_end_input(model.meta, feats, stack)
    outputs, _ = forward(model, x, "eval", speaker)
    cfg = MdnConfig(**model.meta["mdn"])
    p = mdn_split(outputs["mdn"], cfg)
    norm = Standardizer.from_json(model.meta["target_norm"])
    means = p.means * norm.std + norm.mean
    variances = p.variances * norm.std ** 2
    return MdnParams(p.weights, means, variances, p.log_weights), outputs.get("ce")


def invert(model: MlpModel, feats: np.ndarray, smoothing: str = "mlpg", stack: MlanStack | None = None,
           speaker: str | None = None, win: DeltaWindows = DeltaWindows()) -> np.ndarray:
    """Articulatory trajectory (T, 18) in mm."""
    expected = model.meta["front_end"]
    if expected["kind"] == "raw_spliced":
        raw_width = model.input_dim // (expected["splice"][0] + 1 + expected["splice"][1])
        if feats.shape[1] != raw_width:
            raise DataError(f"feature width {feats.shape[1]} != model input width {raw_width}")
    p, _ = mdn_params_mm(model, feats, stack, speaker)
    if smoothing == "none":
        return mdn_point_estimate(p, "max_component")[:, :N_ARTIC]
    if smoothing == "mlpg":
        if p.dim != 3 * N_ARTIC:
            raise ConfigError("MLPG smoothing needs a model trained with delta targets")
        floor = model.meta["mdn"]["variance_floor"]
        return smooth_mdn_sequence(p, win, N_ARTIC, model.meta.get("mlpg_variance", "predicted"), floor)
    raise ConfigError(f"unknown smoothing {smoothing!r}")


def inversion_samples(model: MlpModel, utts: Sequence[Utterance], stack: MlanStack | None = None) -> list[Sample]:
    """Normalized training samples for an already trained inversion model."""
    _check_parallel(utts)
    norm = Standardizer.from_json(model.meta["target_norm"])
    use_deltas = model.meta["mdn"]["target_dim"] == 3 * N_ARTIC
    return [Sample(_front_end_input(model.meta, u.feats, stack), {"traj": norm.apply(_targets(u.traj, use_deltas)),
                                                                  "labels": u.labels}, u.speaker_id, None, u.utt_id)
            for u in utts]


def _model_loss(model: MlpModel):
    return inversion_loss(MdnConfig(**model.meta["mdn"]), MtlWeights(*model.meta["mtl_weights"]))


def inversion_model_loss(model: MlpModel, samples: Sequence[Sample], speaker: str | None = None) -> float:
    """Frame-weighted objective of ``model`` on prepared samples."""
    return evaluate_loss(model, samples, _model_loss(model), speaker)


def _pseudo_targets(model: MlpModel, sample: Sample) -> dict:
    outputs, _ = forward(model, sample.x, "eval")
    p = mdn_split(outputs["mdn"], MdnConfig(**model.meta["mdn"]))
    return {"traj": mdn_point_estimate(p, "mixture_mean"), "labels": np.argmax(outputs["ce"], axis=1)}


def adapt_inversion(model: MlpModel, speaker: str, utts: Sequence[Utterance], stack: MlanStack | None = None,
                    cfg: TrainConfig | None = None, unsupervised: bool = False) -> TrainReport:
    """Estimate LHUC vectors for ``speaker``; weights stay frozen.

    Unsupervised mode replaces the reference trajectories and labels by the
    speaker-independent model's own hypotheses, so only features are needed.
    """
    if unsupervised:
        if not utts:
            raise DataError(f"no utterances for speaker {speaker!r}")
        samples = [Sample(_front_end_input(model.meta, u.feats, stack), {}, speaker, None, u.utt_id) for u in utts]
        return lhuc_adapt(model, speaker, samples, _model_loss(model), cfg, pseudo_targets=_pseudo_targets)
    return lhuc_adapt(model, speaker, inversion_samples(model, utts, stack), _model_loss(model), cfg)


def cross_domain_generate(stack: MlanStack, model: MlpModel, feats: np.ndarray) -> np.ndarray:
    """MLAN features of target-domain audio, then MLPG-smoothed inversion."""
    fe = model.meta.get("front_end", {})
    if fe.get("kind") != "mlan" or fe.get("stack_id") != stack.stack_id:
        raise ConfigError(f"inversion model was trained with front end {fe.get('kind')!r} / stack "
                          f"{fe.get('stack_id')!r}, not MLAN stack {stack.stack_id}")
    return invert(model, feats, "mlpg", stack)


def roughness(traj: np.ndarray) -> float:
    d = np.diff(np.asarray(traj), axis=0)
    return float(np.sum(d * d))


def pearson_columns(pred: np.ndarray, ref: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    xc = pred - pred.mean(axis=0)
    yc = ref - ref.mean(axis=0)
    sx = np.maximum(np.sqrt(np.sum(xc * xc, axis=0)), eps)
    sy = np.maximum(np.sqrt(np.sum(yc * yc, axis=0)), eps)
    return np.clip(np.sum(xc * yc, axis=0) / (sx * sy), -1.0, 1.0)


@dataclass
class EvalReport:
    rmse_mm: float
    pearson_per_dim: list
    pearson_mean: float
    n_frames: int
    frame_accuracy: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def evaluate(pred, ref, frame_accuracy: float | None = None) -> EvalReport:
    """RMSE and per-dimension Pearson over all frames (lists are concatenated)."""
    if isinstance(pred, (list, tuple)):
        if len(pred) != len(ref):
            raise DataError(f"{len(pred)} predicted vs {len(ref)} reference utterances")
        for i, (p, r) in enumerate(zip(pred, ref)):
            if np.shape(p) != np.shape(r):
                raise DataError(f"utterance {i}: prediction {np.shape(p)} vs reference {np.shape(r)}")
        pred, ref = np.concatenate(pred), np.concatenate(ref)
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise DataError(f"prediction {pred.shape} vs reference {ref.shape}")
    r = pearson_columns(pred, ref)
    rmse = float(np.sqrt(np.mean((pred - ref) ** 2)))
    return EvalReport(rmse, [float(v) for v in r], float(np.mean(r)), int(pred.shape[0]), frame_accuracy)


def frame_classifier_eval(logits: np.ndarray, labels: np.ndarray) -> float:
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.shape[0] != labels.shape[0]:
        raise DataError(f"{logits.shape[0]} frames of scores but {labels.shape[0]} labels")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def score_fusion(logpost_a: np.ndarray, logpost_b: np.ndarray, wa: float = 0.5, wb: float = 0.5) -> np.ndarray:
    """Log-linear combination renormalized per frame."""
    a = np.asarray(logpost_a, dtype=np.float64)
    b = np.asarray(logpost_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise DataError(f"score shapes differ: {a.shape} vs {b.shape}")
    if wa < 0 or wb < 0 or wa + wb <= 0:
        raise ConfigError("fusion weights must be >= 0 with a positive sum")
    fused = wa * a + wb * b
    return fused - logsumexp(fused, axis=1)[:, None]


def fit_articulatory_stats(trajs: Sequence[np.ndarray]) -> Standardizer:
    """Training-set statistics for articulatory columns in fused features."""
    return Standardizer.fit(np.concatenate(list(trajs)))


def concat_features(acoustic: FeatureMatrix, articulatory: np.ndarray, stats: Standardizer) -> FeatureMatrix:
    """``[acoustic | standardized articulatory]``."""
    art = np.asarray(articulatory, dtype=np.float64)
    if art.ndim != 2 or art.shape[1] != N_ARTIC:
        raise DataError(f"articulatory features must be T x {N_ARTIC}, got {art.shape}")
    if art.shape[0] != acoustic.n_frames:
        raise DataError(f"acoustic has {acoustic.n_frames} frames, articulatory {art.shape[0]}")
    return FeatureMatrix(np.concatenate([acoustic.data, stats.apply(art)], axis=1), acoustic.frame_shift, Kind.CONCAT)


def fusion_classifier(acoustic_dim: int, widths: Sequence[int], n_classes: int, fusion_layer: int = 0,
                      seed: int = 0) -> MlpModel:
    """Classifier taking standardized articulatory features at ``fusion_layer``'s input."""
    return MlpModel.build(acoustic_dim, widths, {"ce": n_classes}, aux_dim=N_ARTIC, aux_layer=fusion_layer,
                          seed=seed)
