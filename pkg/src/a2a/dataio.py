"""Binary formats, manifests, model containers and the synthetic corpus.

Layouts (all little-endian):

AFM1 feature file::

    "AFM1" | version u32 | rows u32 | cols u32 | frame_shift_ms f32 | kind u8 | rows*cols f32

TRJ1 trajectory file::

    "TRJ1" | version u32 | rows u32 | cols u32 (18 or 54) | "mm" | rows*cols f32

A2AM model container::

    "A2AM" | version u32 | meta_len u32 | meta (UTF-8 JSON) | n_values u64 | n_values f64

Payloads are row-major. In-memory float64 values are rounded to float32
when written to AFM1/TRJ1.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .features import N_ARTIC, FeatureMatrix, Kind
from .neuralnet import MlpModel

log = logging.getLogger(__name__)

AFM_MAGIC = b"AFM1"
TRJ_MAGIC = b"TRJ1"
MODEL_MAGIC = b"A2AM"
AFM_VERSION = 1
TRJ_VERSION = 1
MODEL_VERSION = 1
AFM_HEADER = struct.Struct("<4sIIIfB")
TRJ_HEADER = struct.Struct("<4sIII2s")


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write to a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- AFM1 / TRJ1 -------------------------------------------------------------

def afm_bytes(fm: FeatureMatrix) -> bytes:
    rows, cols = fm.data.shape
    header = AFM_HEADER.pack(AFM_MAGIC, AFM_VERSION, rows, cols, float(fm.frame_shift), int(fm.kind))
    return header + np.ascontiguousarray(fm.data, dtype="<f4").tobytes()


def write_afm(path: str | Path, fm: FeatureMatrix) -> None:
    atomic_write_bytes(path, afm_bytes(fm))


def parse_afm(buf: bytes, name: str = "<bytes>") -> FeatureMatrix:
    if len(buf) < AFM_HEADER.size:
        raise FormatError(f"{name}: truncated header ({len(buf)} < {AFM_HEADER.size} bytes)")
    magic, version, rows, cols, shift, kind = AFM_HEADER.unpack_from(buf, 0)
    if magic != AFM_MAGIC:
        raise FormatError(f"{name}: bad magic {magic!r} at offset 0")
    if version != AFM_VERSION:
        raise FormatError(f"{name}: unsupported AFM version {version} at offset 4")
    if rows < 1 or cols < 1:
        raise FormatError(f"{name}: empty matrix ({rows} x {cols})")
    expected = AFM_HEADER.size + rows * cols * 4
    if len(buf) != expected:
        raise FormatError(f"{name}: payload size mismatch at offset {AFM_HEADER.size}: "
                          f"file has {len(buf)} bytes, header implies {expected}")
    try:
        kind = Kind(kind)
    except ValueError:
        raise FormatError(f"{name}: unknown kind {kind} at offset 20") from None
    data = np.frombuffer(buf, dtype="<f4", offset=AFM_HEADER.size).reshape(rows, cols).astype(np.float64)
    return FeatureMatrix(data, float(shift), kind)


def read_afm(path: str | Path) -> FeatureMatrix:
    return parse_afm(Path(path).read_bytes(), str(path))


def trj_bytes(traj: np.ndarray) -> bytes:
    traj = np.asarray(traj)
    if traj.ndim != 2 or traj.shape[0] < 1 or traj.shape[1] not in (N_ARTIC, 3 * N_ARTIC):
        raise DataError(f"trajectory must be T x {N_ARTIC} or T x {3 * N_ARTIC}, got {traj.shape}")
    header = TRJ_HEADER.pack(TRJ_MAGIC, TRJ_VERSION, traj.shape[0], traj.shape[1], b"mm")
    return header + np.ascontiguousarray(traj, dtype="<f4").tobytes()


def write_trj(path: str | Path, traj: np.ndarray) -> None:
    atomic_write_bytes(path, trj_bytes(traj))


def parse_trj(buf: bytes, name: str = "<bytes>") -> np.ndarray:
    if len(buf) < TRJ_HEADER.size:
        raise FormatError(f"{name}: truncated header ({len(buf)} < {TRJ_HEADER.size} bytes)")
    magic, version, rows, cols, units = TRJ_HEADER.unpack_from(buf, 0)
    if magic != TRJ_MAGIC:
        raise FormatError(f"{name}: bad magic {magic!r} at offset 0")
    if version != TRJ_VERSION:
        raise FormatError(f"{name}: unsupported TRJ version {version} at offset 4")
    if units != b"mm":
        raise FormatError(f"{name}: unknown units tag {units!r} at offset 16")
    if rows < 1 or cols not in (N_ARTIC, 3 * N_ARTIC):
        raise FormatError(f"{name}: bad shape {rows} x {cols}")
    expected = TRJ_HEADER.size + rows * cols * 4
    if len(buf) != expected:
        raise FormatError(f"{name}: payload size mismatch at offset {TRJ_HEADER.size}: "
                          f"file has {len(buf)} bytes, header implies {expected}")
    return np.frombuffer(buf, dtype="<f4", offset=TRJ_HEADER.size).reshape(rows, cols).astype(np.float64)


def read_trj(path: str | Path) -> np.ndarray:
    return parse_trj(Path(path).read_bytes(), str(path))


def write_labels(path: str | Path, labels: np.ndarray) -> None:
    atomic_write_text(path, "".join(f"{int(v)}\n" for v in labels))


def read_labels(path: str | Path) -> np.ndarray:
    text = Path(path).read_text()
    try:
        return np.array([int(line) for line in text.split()], dtype=np.int64)
    except ValueError as exc:
        raise FormatError(f"{path}: labels must be one integer per line ({exc})") from None


# -- A2AM model container -----------------------------------------------------

_KNOWN_META = ("topology", "info")


def model_bytes(model: MlpModel) -> bytes:
    container = getattr(model, "container", None) or {"version": MODEL_VERSION, "extra": {}}
    meta = dict(container["extra"])
    meta["topology"] = model.topology()
    meta["info"] = model.meta
    meta_raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    values = np.concatenate([a.ravel() for a in model.all_arrays()]) if model.all_arrays() else np.zeros(0)
    return (MODEL_MAGIC + struct.pack("<II", container["version"], len(meta_raw)) + meta_raw
            + struct.pack("<Q", values.size) + values.astype("<f8").tobytes())


def save_model(path: str | Path, model: MlpModel) -> None:
    atomic_write_bytes(path, model_bytes(model))


def parse_model(buf: bytes, name: str = "<bytes>") -> MlpModel:
    if len(buf) < 12:
        raise FormatError(f"{name}: truncated header at offset {len(buf)}")
    if buf[:4] != MODEL_MAGIC:
        raise FormatError(f"{name}: bad magic {buf[:4]!r} at offset 0")
    version, meta_len = struct.unpack_from("<II", buf, 4)
    if version < 1:
        raise FormatError(f"{name}: invalid version {version} at offset 4")
    if version > MODEL_VERSION:
        log.warning("%s: model version %d is newer than %d; loading known fields", name, version, MODEL_VERSION)
    off = 12
    if len(buf) < off + meta_len + 8:
        raise FormatError(f"{name}: truncated metadata at offset {off} (need {meta_len} bytes)")
    try:
        meta = json.loads(buf[off:off + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{name}: corrupt metadata at offset {off}: {exc}") from None
    off += meta_len
    (n_values,) = struct.unpack_from("<Q", buf, off)
    off += 8
    if len(buf) != off + 8 * n_values:
        raise FormatError(f"{name}: parameter blob truncated at offset {off}: "
                          f"expected {8 * n_values} bytes, found {len(buf) - off}")
    if "topology" not in meta:
        raise FormatError(f"{name}: metadata lacks topology")
    model = MlpModel.from_topology(meta["topology"])
    arrays = model.all_arrays()
    total = sum(a.size for a in arrays)
    if total != n_values:
        raise FormatError(f"{name}: blob has {n_values} values but topology needs {total} (offset {off - 8})")
    values = np.frombuffer(buf, dtype="<f8", offset=off, count=n_values).astype(np.float64)
    k = 0
    filled = []
    for a in arrays:
        filled.append(values[k:k + a.size].reshape(a.shape).copy())
        k += a.size
    n_params = len(model.params())
    model.set_params(filled[:n_params])
    rest = iter(filled[n_params:])
    for spk in sorted(model.lhuc):
        for i in sorted(model.lhuc[spk]):
            model.lhuc[spk][i] = next(rest)
    model.meta = meta.get("info", {})
    model.container = {"version": version, "extra": {k: v for k, v in meta.items() if k not in _KNOWN_META}}
    return model


def load_model(path: str | Path) -> MlpModel:
    return parse_model(Path(path).read_bytes(), str(path))


# -- manifests -----------------------------------------------------------------

@dataclass
class Record:
    utt_id: str
    speaker_id: str
    domain: str
    n_frames: int
    paths: dict
    split: str = "train"
    root: Path = field(default=Path("."), repr=False, compare=False)

    def path(self, key: str) -> Path:
        if key not in self.paths:
            raise DataError(f"utterance {self.utt_id}: manifest has no {key!r} path")
        p = Path(self.paths[key])
        return p if p.is_absolute() else self.root / p

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("root")
        return d


def write_manifest(path: str | Path, records: list[Record]) -> None:
    lines = [json.dumps(r.to_json(), sort_keys=True) for r in records]
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_manifest(path: str | Path, check_paths: bool = True) -> list[Record]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest {path} does not exist")
    records, seen = [], set()
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            rec = Record(d["utt_id"], d["speaker_id"], d.get("domain", ""), int(d["n_frames"]),
                         dict(d["paths"]), d.get("split", "train"), path.parent)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: malformed manifest record ({exc})") from None
        if rec.utt_id in seen:
            raise DataError(f"{path}:{lineno}: duplicate utt_id {rec.utt_id!r}")
        seen.add(rec.utt_id)
        if check_paths:
            for key in rec.paths:
                if not rec.path(key).exists():
                    raise DataError(f"{path}:{lineno}: utterance {rec.utt_id} references missing "
                                    f"{key} file {rec.path(key)}")
        records.append(rec)
    if not records:
        raise DataError(f"manifest {path} is empty")
    return records


def select(records: list[Record], domain: str | None = None, split: str | None = None) -> list[Record]:
    return [r for r in records if (domain is None or r.domain == domain) and (split is None or r.split == split)]


@dataclass
class Utterance:
    utt_id: str
    speaker_id: str
    feats: np.ndarray
    traj: np.ndarray | None = None
    labels: np.ndarray | None = None


def load_utterance(rec: Record, feature_key: str = "features") -> Utterance:
    fm = read_afm(rec.path(feature_key))
    traj = read_trj(rec.path("trajectory")) if "trajectory" in rec.paths else None
    labels = read_labels(rec.path("labels")) if "labels" in rec.paths else None
    for name, arr in (("trajectory", traj), ("labels", labels)):
        if arr is not None and arr.shape[0] != fm.n_frames:
            raise DataError(f"utterance {rec.utt_id}: {name} has {arr.shape[0]} frames, "
                            f"features have {fm.n_frames}")
    return Utterance(rec.utt_id, rec.speaker_id, fm.data, traj, labels)


# -- synthetic parallel corpus ---------------------------------------------------

@dataclass
class SynthConfig:
    n_speakers: int = 6
    utts_per_speaker: int = 20
    n_test_per_speaker: int = 3
    t_min: int = 120
    t_max: int = 200
    seed: int = 11
    noise_std: float = 0.05
    traj_noise_std: float = 0.5
    n_classes: int = 40
    n_feats: int = 40
    speaker_dim: int = 4
    map_hidden: int = 64
    shift_gain: float = 1.0
    shift_offset: float = 1.0
    amplitude_mm: float = 10.0
    amplitude_split: tuple = (0.9, 0.06, 0.04)
    period_range: tuple = (20.0, 80.0)

    def __post_init__(self):
        self.period_range = tuple(self.period_range)
        self.amplitude_split = tuple(self.amplitude_split)
        if len(self.amplitude_split) != 3 or abs(sum(self.amplitude_split) - 1.0) > 1e-9:
            raise ConfigError("amplitude_split must be three fractions summing to 1")
        if self.n_speakers < 1 or self.utts_per_speaker < 1:
            raise ConfigError("n_speakers and utts_per_speaker must be >= 1")
        if not 0 <= self.n_test_per_speaker < self.utts_per_speaker:
            raise ConfigError("n_test_per_speaker must be smaller than utts_per_speaker")
        if not 2 <= self.t_min <= self.t_max:
            raise ConfigError("need 2 <= t_min <= t_max")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")


@dataclass
class SynthWorld:
    """Corpus-level fixed quantities shared by every utterance."""

    cfg: SynthConfig
    amps: np.ndarray          # (18, 3)
    offsets: np.ndarray       # (18, 3) per-channel phase offsets of each oscillator
    spk_emb: np.ndarray       # (n_speakers, speaker_dim)
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    shift_matrix: np.ndarray  # (n_feats, n_feats)
    shift_bias: np.ndarray

    @classmethod
    def create(cls, cfg: SynthConfig) -> "SynthWorld":
        rng = np.random.default_rng([cfg.seed, 0])
        frac = np.asarray(cfg.amplitude_split)
        amps = cfg.amplitude_mm * frac[None, :] * rng.uniform(0.8, 1.0, size=(N_ARTIC, 1))
        offsets = rng.uniform(0, 2 * np.pi, size=(N_ARTIC, 3))
        spk_emb = rng.normal(size=(cfg.n_speakers, cfg.speaker_dim))
        n_in = N_ARTIC + cfg.speaker_dim
        w1 = rng.normal(size=(n_in, cfg.map_hidden)) * (1.5 / np.sqrt(n_in))
        b1 = rng.normal(size=cfg.map_hidden) * 0.5
        w2 = rng.normal(size=(cfg.map_hidden, cfg.n_feats)) * (2.0 / np.sqrt(cfg.map_hidden))
        b2 = rng.normal(size=cfg.n_feats)
        shift_matrix = np.eye(cfg.n_feats) + cfg.shift_gain * rng.normal(size=(cfg.n_feats, cfg.n_feats)) / np.sqrt(cfg.n_feats)
        shift_bias = cfg.shift_offset * rng.normal(size=cfg.n_feats)
        return cls(cfg, amps, offsets, spk_emb, w1, b1, w2, b2, shift_matrix, shift_bias)

    def acoustics(self, clean_traj: np.ndarray, speaker: int, domain: str,
                  rng: np.random.Generator | None = None) -> np.ndarray:
        """Noise-free map of (trajectory, speaker) to features, plus optional noise."""
        T = clean_traj.shape[0]
        u = np.concatenate([clean_traj / self.cfg.amplitude_mm,
                            np.broadcast_to(self.spk_emb[speaker], (T, self.cfg.speaker_dim))], axis=1)
        feats = np.tanh(u @ self.w1 + self.b1) @ self.w2 + self.b2
        if rng is not None and self.cfg.noise_std > 0:
            feats = feats + self.cfg.noise_std * rng.standard_normal(feats.shape)
        if domain == "B":
            feats = feats @ self.shift_matrix.T + self.shift_bias
        return feats


def speaker_domain(speaker: int) -> str:
    return "A" if speaker % 2 == 0 else "B"


def synth_utterance(world: SynthWorld, speaker: int, index: int):
    """Return (clean trajectory, measured trajectory, features, labels)."""
    cfg = world.cfg
    rng = np.random.default_rng([cfg.seed, 1, speaker, index])
    T = int(rng.integers(cfg.t_min, cfg.t_max + 1))
    t = np.arange(T, dtype=np.float64)
    lo, hi = cfg.period_range
    # three shared oscillators drive every channel; oscillator 0 is the phonetic phase
    phases = rng.uniform(0, 2 * np.pi, size=3)[None, :] + 2 * np.pi * t[:, None] / rng.uniform(lo, hi, size=3)
    clean = np.einsum("dj,tdj->td", world.amps, np.sin(phases[:, None, :] + world.offsets[None, :, :]))
    phase = phases[:, 0]
    measured = clean + cfg.traj_noise_std * rng.standard_normal(clean.shape)
    feats = world.acoustics(clean, speaker, speaker_domain(speaker), rng)
    wrapped = np.mod(phase, 2 * np.pi) / (2 * np.pi)
    labels = np.minimum((wrapped * cfg.n_classes).astype(np.int64), cfg.n_classes - 1)
    return clean, measured, feats, labels


def synth_generate(cfg: SynthConfig, out_dir: str | Path) -> list[Record]:
    """Write a seeded two-domain parallel corpus and its manifest."""
    out_dir = Path(out_dir)
    try:
        for sub in ("feats", "trj", "labels"):
            (out_dir / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out_dir}: {exc}") from None
    world = SynthWorld.create(cfg)
    records = []
    for s in range(cfg.n_speakers):
        domain = speaker_domain(s)
        for u in range(cfg.utts_per_speaker):
            _, measured, feats, labels = synth_utterance(world, s, u)
            utt = f"{domain}_spk{s:02d}_utt{u:03d}"
            paths = {"features": f"feats/{utt}.afm", "trajectory": f"trj/{utt}.trj", "labels": f"labels/{utt}.lab"}
            write_afm(out_dir / paths["features"], FeatureMatrix(feats, 10.0, Kind.FBK))
            write_trj(out_dir / paths["trajectory"], measured)
            write_labels(out_dir / paths["labels"], labels)
            split = "test" if u >= cfg.utts_per_speaker - cfg.n_test_per_speaker else "train"
            records.append(Record(utt, f"spk{s:02d}", domain, feats.shape[0], paths, split, out_dir))
    write_manifest(out_dir / "manifest.jsonl", records)
    return records


def synth_config_json(cfg: SynthConfig) -> dict:
    d = asdict(cfg)
    d["period_range"] = list(cfg.period_range)
    d["amplitude_split"] = list(cfg.amplitude_split)
    return d
