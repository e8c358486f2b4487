import json
import logging
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from a2a.dataio import (
    AFM_HEADER,
    Record,
    SynthConfig,
    SynthWorld,
    afm_bytes,
    load_manifest,
    load_model,
    load_utterance,
    model_bytes,
    parse_afm,
    parse_model,
    parse_trj,
    read_afm,
    read_labels,
    save_model,
    select,
    sha256_file,
    synth_generate,
    synth_utterance,
    trj_bytes,
    write_afm,
    write_labels,
    write_manifest,
)
from a2a.errors import ConfigError, DataError, FormatError
from a2a.features import FeatureMatrix, Kind
from a2a.mlan import domain_gap
from a2a.neuralnet import MlpModel


def _minimal_afm_reader(buf):
    """Independent reader written straight from the byte layout."""
    assert buf[:4] == b"AFM1"
    version = int.from_bytes(buf[4:8], "little")
    rows = int.from_bytes(buf[8:12], "little")
    cols = int.from_bytes(buf[12:16], "little")
    (shift,) = struct.unpack("<f", buf[16:20])
    kind = buf[20]
    vals = [struct.unpack("<f", buf[21 + 4 * i:25 + 4 * i])[0] for i in range(rows * cols)]
    return version, shift, kind, np.array(vals).reshape(rows, cols)


class TestAfm:
    def test_golden_bytes(self):
        fm = FeatureMatrix(np.array([[1.0, -2.0], [0.5, 3.0]]), 10.0, Kind.FBK)
        expected = (b"AFM1" + bytes([1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0]) + struct.pack("<f", 10.0) + b"\x00"
                    + struct.pack("<4f", 1.0, -2.0, 0.5, 3.0))
        assert afm_bytes(fm) == expected
        assert AFM_HEADER.size == 21

    def test_independent_reader(self):
        x = np.random.default_rng(0).normal(size=(5, 3)).astype(np.float32).astype(np.float64)
        version, shift, kind, data = _minimal_afm_reader(afm_bytes(FeatureMatrix(x, 10.0, Kind.BOTTLENECK)))
        assert (version, shift, kind) == (1, 10.0, int(Kind.BOTTLENECK))
        np.testing.assert_array_equal(data, x)

    @settings(max_examples=30)
    @given(rows=st.integers(1, 20), cols=st.integers(1, 10), kind=st.sampled_from([k for k in Kind if k != Kind.ARTICULATORY]))
    def test_round_trip_within_float32(self, rows, cols, kind):
        x = np.random.default_rng(rows * 100 + cols).normal(size=(rows, cols))
        back = parse_afm(afm_bytes(FeatureMatrix(x, 10.0, kind)))
        assert back.kind == kind
        np.testing.assert_allclose(back.data, x, rtol=2 ** -23, atol=0)

    def test_write_read_file(self, tmp_path):
        fm = FeatureMatrix(np.ones((2, 40)), 10.0, Kind.FBK)
        write_afm(tmp_path / "x.afm", fm)
        np.testing.assert_array_equal(read_afm(tmp_path / "x.afm").data, fm.data)
        assert not [p for p in tmp_path.iterdir() if p.name.endswith(".tmp")]

    def test_truncated_payload(self):
        buf = afm_bytes(FeatureMatrix(np.ones((3, 4))))
        with pytest.raises(FormatError, match="offset 21"):
            parse_afm(buf[:-1])

    def test_truncated_header(self):
        with pytest.raises(FormatError, match="truncated header"):
            parse_afm(b"AFM1\x01")

    def test_bad_magic_and_version(self):
        buf = bytearray(afm_bytes(FeatureMatrix(np.ones((1, 1)))))
        with pytest.raises(FormatError, match="magic"):
            parse_afm(b"XXXX" + bytes(buf[4:]))
        buf[4] = 9
        with pytest.raises(FormatError, match="version"):
            parse_afm(bytes(buf))

    def test_unknown_kind(self):
        buf = bytearray(afm_bytes(FeatureMatrix(np.ones((1, 1)))))
        buf[20] = 99
        with pytest.raises(FormatError, match="kind"):
            parse_afm(bytes(buf))


class TestTrj:
    def test_round_trip(self):
        x = np.random.default_rng(1).normal(size=(7, 18)).astype(np.float32).astype(np.float64)
        np.testing.assert_array_equal(parse_trj(trj_bytes(x)), x)
        y = np.zeros((2, 54))
        assert parse_trj(trj_bytes(y)).shape == (2, 54)

    def test_header_layout(self):
        buf = trj_bytes(np.zeros((3, 18)))
        assert buf[:4] == b"TRJ1" and buf[16:18] == b"mm" and len(buf) == 18 + 3 * 18 * 4

    def test_rejects_bad_width(self):
        with pytest.raises(DataError):
            trj_bytes(np.zeros((3, 17)))

    def test_truncated(self):
        with pytest.raises(FormatError):
            parse_trj(trj_bytes(np.zeros((3, 18)))[:-4])


def test_labels_round_trip(tmp_path):
    lab = np.array([0, 39, 7, 7])
    write_labels(tmp_path / "a.lab", lab)
    assert (tmp_path / "a.lab").read_text() == "0\n39\n7\n7\n"
    np.testing.assert_array_equal(read_labels(tmp_path / "a.lab"), lab)
    (tmp_path / "b.lab").write_text("1\nx\n")
    with pytest.raises(FormatError):
        read_labels(tmp_path / "b.lab")


def _model():
    m = MlpModel.build(5, [4, 3], {"mdn": 6, "ce": 2}, lhuc=True, bottleneck_tap=1,
                       activations=["relu", "linear"], seed=3)
    m.init_lhuc("spk1")
    m.lhuc["spk1"][0][:] = 0.25
    m.meta = {"note": "x", "target_norm": {"mean": [0.0]}}
    return m


class TestModelContainer:
    def test_round_trip_exact(self, tmp_path):
        m = _model()
        save_model(tmp_path / "m.a2am", m)
        back = load_model(tmp_path / "m.a2am")
        assert back.topology() == m.topology()
        assert back.meta == m.meta
        for a, b in zip(back.all_arrays(), m.all_arrays()):
            np.testing.assert_array_equal(a, b)
        assert model_bytes(back) == model_bytes(m)

    def test_layout(self):
        buf = model_bytes(_model())
        assert buf[:4] == b"A2AM"
        version, meta_len = struct.unpack_from("<II", buf, 4)
        assert version == 1
        meta = json.loads(buf[12:12 + meta_len])
        assert set(meta) == {"topology", "info"}
        (n,) = struct.unpack_from("<Q", buf, 12 + meta_len)
        assert len(buf) == 12 + meta_len + 8 + 8 * n

    def test_newer_version_loads_with_warning(self, caplog):
        m = _model()
        buf = bytearray(model_bytes(m))
        meta_len = struct.unpack_from("<I", buf, 8)[0]
        meta = json.loads(buf[12:12 + meta_len])
        meta["future_field"] = {"a": 1}
        raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
        bumped = b"A2AM" + struct.pack("<II", 2, len(raw)) + raw + bytes(buf[12 + meta_len:])
        with caplog.at_level(logging.WARNING):
            back = parse_model(bumped)
        assert "newer" in caplog.text
        for a, b in zip(back.all_arrays(), m.all_arrays()):
            np.testing.assert_array_equal(a, b)
        # unknown keys are preserved on re-save
        assert b"future_field" in model_bytes(back)

    def test_version_zero_rejected(self):
        buf = bytearray(model_bytes(_model()))
        buf[4:8] = b"\x00\x00\x00\x00"
        with pytest.raises(FormatError, match="version"):
            parse_model(bytes(buf))

    @pytest.mark.parametrize("cut", [3, 11, 40, -1])
    def test_truncation(self, cut):
        buf = model_bytes(_model())
        with pytest.raises(FormatError, match="offset"):
            parse_model(buf[:cut])


class TestManifest:
    def _records(self, tmp_path):
        (tmp_path / "a.afm").write_bytes(afm_bytes(FeatureMatrix(np.ones((2, 3)))))
        return [Record("u1", "s1", "A", 2, {"features": "a.afm"}, "train", tmp_path),
                Record("u2", "s2", "B", 2, {"features": "a.afm"}, "test", tmp_path)]

    def test_round_trip_and_select(self, tmp_path):
        recs = self._records(tmp_path)
        write_manifest(tmp_path / "m.jsonl", recs)
        back = load_manifest(tmp_path / "m.jsonl")
        assert back == recs
        assert [r.utt_id for r in select(back, domain="B")] == ["u2"]
        assert [r.utt_id for r in select(back, split="train")] == ["u1"]
        assert back[0].path("features") == tmp_path / "a.afm"

    def test_duplicate_ids(self, tmp_path):
        recs = self._records(tmp_path)
        recs[1].utt_id = "u1"
        write_manifest(tmp_path / "m.jsonl", recs)
        with pytest.raises(DataError, match="duplicate"):
            load_manifest(tmp_path / "m.jsonl")

    def test_dangling_path(self, tmp_path):
        recs = self._records(tmp_path)
        recs[0].paths["features"] = "missing.afm"
        write_manifest(tmp_path / "m.jsonl", recs)
        with pytest.raises(DataError, match="u1"):
            load_manifest(tmp_path / "m.jsonl")

    def test_missing_and_malformed(self, tmp_path):
        with pytest.raises(DataError):
            load_manifest(tmp_path / "none.jsonl")
        (tmp_path / "bad.jsonl").write_text("{not json}\n")
        with pytest.raises(DataError, match=":1:"):
            load_manifest(tmp_path / "bad.jsonl")


SMALL = dict(n_speakers=2, utts_per_speaker=3, n_test_per_speaker=1, t_min=30, t_max=40)


class TestSynth:
    def test_deterministic_bytes(self, tmp_path):
        cfg = SynthConfig(**SMALL)
        a = synth_generate(cfg, tmp_path / "a")
        b = synth_generate(cfg, tmp_path / "b")
        for ra, rb in zip(a, b):
            for key in ra.paths:
                assert sha256_file(ra.path(key)) == sha256_file(rb.path(key))
        assert (tmp_path / "a/manifest.jsonl").read_bytes() == (tmp_path / "b/manifest.jsonl").read_bytes()

    def test_seed_changes_output(self, tmp_path):
        a = synth_generate(SynthConfig(**SMALL, seed=1), tmp_path / "a")
        b = synth_generate(SynthConfig(**SMALL, seed=2), tmp_path / "b")
        assert sha256_file(a[0].path("features")) != sha256_file(b[0].path("features"))

    def test_layout_and_shapes(self, tmp_path):
        recs = synth_generate(SynthConfig(**SMALL), tmp_path)
        assert len(recs) == 6
        assert {r.domain for r in recs} == {"A", "B"}
        assert [r.split for r in recs[:3]] == ["train", "train", "test"]
        u = load_utterance(load_manifest(tmp_path / "manifest.jsonl")[0])
        assert u.feats.shape[1] == 40 and u.traj.shape[1] == 18
        assert u.labels.min() >= 0 and u.labels.max() < 40
        assert u.feats.shape[0] == u.traj.shape[0] == u.labels.shape[0]

    def test_domain_gap_is_large(self):
        cfg = SynthConfig(n_speakers=2, utts_per_speaker=4)
        world = SynthWorld.create(cfg)
        a = np.concatenate([synth_utterance(world, 0, i)[2] for i in range(4)])
        b = np.concatenate([synth_utterance(world, 1, i)[2] for i in range(4)])
        assert domain_gap(a, b) > 0.5

    def test_speaker_changes_acoustics(self):
        world = SynthWorld.create(SynthConfig(n_speakers=3))
        clean = synth_utterance(world, 0, 0)[0]
        f0 = world.acoustics(clean, 0, "A")
        f2 = world.acoustics(clean, 2, "A")
        assert np.max(np.abs(f0 - f2)) > 0.1

    def test_acoustics_are_a_function_of_clean_trajectory(self):
        world = SynthWorld.create(SynthConfig())
        clean, measured, feats, _ = synth_utterance(world, 0, 0)
        np.testing.assert_allclose(feats, world.acoustics(clean, 0, "A"), atol=6 * world.cfg.noise_std)
        resid = measured - clean
        assert abs(resid.std() - world.cfg.traj_noise_std) < 0.05

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            SynthConfig(amplitude_split=(0.5, 0.5, 0.5))
        with pytest.raises(ConfigError):
            SynthConfig(n_test_per_speaker=20, utts_per_speaker=20)

    def test_unwritable_output(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(DataError):
            synth_generate(SynthConfig(**SMALL), blocker / "sub")
