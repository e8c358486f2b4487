"""Command-line entry point (``a2a``).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure. Logs go to stderr; machine-readable outputs go to files only.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import dataio
from .config import RunConfig, load_run_config, resolve_seed, write_resolved
from .dataio import Record, load_manifest, load_model, load_utterance, save_model, select
from .errors import A2AError, ConfigError, DataError, FormatError
from .features import FeatureMatrix, Kind, mel_filterbank, read_wav, speed_perturb
from .mlan import MlanStack, mlan_features, train_mlan
from .pipeline import adapt_inversion, evaluate, invert, score_fusion, train_inversion

log = logging.getLogger("a2a")


def _config(args) -> RunConfig:
    cfg = load_run_config(getattr(args, "config", None))
    return cfg.with_seed(resolve_seed(getattr(args, "seed", None)))


def _utterances(records: list[Record]):
    return [load_utterance(r) for r in records]


def _filtered(path, domain=None, split=None) -> list[Record]:
    records = select(load_manifest(path), domain, split)
    if not records:
        raise DataError(f"{path}: no utterances match domain={domain!r} split={split!r}")
    return records


def _parse_factors(text: str) -> list[float]:
    try:
        factors = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--speed-perturb expects comma-separated numbers, got {text!r}") from None
    if not factors:
        raise ConfigError("--speed-perturb needs at least one factor")
    return factors


def _relative(target: Path, start: Path) -> str:
    return os.path.relpath(target.resolve(), start.resolve())


def _factor_tag(f: float) -> str:
    return "" if f == 1.0 else f"_sp{f:g}"


def cmd_synth_gen(args) -> None:
    cfg = _config(args)
    out = Path(args.out)
    records = dataio.synth_generate(cfg.synth, out)
    write_resolved(cfg, out)
    log.info("wrote %d utterances to %s", len(records), out)


def cmd_extract(args) -> None:
    cfg = _config(args)
    factors = _parse_factors(args.speed_perturb) if args.speed_perturb else [1.0]
    out = Path(args.out)
    src = Path(args.wav_manifest)
    records = []
    for rec in load_manifest(src):
        wav = read_wav(rec.path("audio"))
        for f in factors:
            fm = mel_filterbank(speed_perturb(wav, f), cfg.features)
            utt = rec.utt_id + _factor_tag(f)
            rel = f"feats/{utt}.afm"
            dataio.write_afm(out / rel, fm)
            paths = {"features": rel}
            if f == 1.0:
                # perturbed copies change length, so frame-aligned targets are kept only for the original
                for key in ("trajectory", "labels"):
                    if key in rec.paths:
                        paths[key] = _relative(rec.path(key), out)
            records.append(Record(utt, rec.speaker_id, rec.domain, fm.n_frames, paths, rec.split, out))
    dataio.write_manifest(out / "manifest.jsonl", records)
    write_resolved(cfg, out)
    log.info("extracted %d feature files to %s", len(records), out)


def _train_inversion(args, front_end: str, stack: MlanStack | None) -> None:
    cfg = _config(args)
    utts = _utterances(_filtered(args.manifest, args.domain, args.split))
    model, report = train_inversion(utts, cfg.recipe(front_end), stack)
    out = Path(args.out)
    save_model(out, model)
    write_resolved(cfg, out.parent)
    log.info("final epoch loss %s; model written to %s",
             f"{report.epoch_losses[-1]:.6f}" if report.epoch_losses else "n/a", out)


def cmd_train_inversion(args) -> None:
    _train_inversion(args, "raw_spliced", None)


def cmd_train_inversion_xdom(args) -> None:
    _train_inversion(args, "mlan", MlanStack.load(args.stack))


def cmd_train_mlan(args) -> None:
    cfg = _config(args)
    a = _utterances(_filtered(args.in_domain, args.in_domain_tag, args.split))
    b = _utterances(_filtered(args.out_domain, args.out_domain_tag, args.split))
    for u in a + b:
        if u.labels is None:
            raise DataError(f"utterance {u.utt_id} has no frame labels; MLAN training needs them")
    stack = train_mlan(([u.feats for u in a], [u.labels for u in a]),
                       ([u.feats for u in b], [u.labels for u in b]), cfg.mlan)
    stack.save(args.out)
    write_resolved(cfg, args.out)
    log.info("MLAN stack %s written to %s", stack.stack_id, args.out)


def cmd_mlan_extract(args) -> None:
    stack = MlanStack.load(args.stack)
    out = Path(args.out)
    records = []
    for rec in load_manifest(args.manifest):
        fm = dataio.read_afm(rec.path("features"))
        bn = mlan_features(stack, fm.data)
        rel = f"feats/{rec.utt_id}.afm"
        dataio.write_afm(out / rel, FeatureMatrix(bn, fm.frame_shift, Kind.BOTTLENECK))
        paths = {k: _relative(rec.path(k), out) for k in rec.paths if k != "features"}
        paths["features"] = rel
        records.append(Record(rec.utt_id, rec.speaker_id, rec.domain, bn.shape[0], paths, rec.split, out))
    dataio.write_manifest(out / "manifest.jsonl", records)
    log.info("wrote %d bottleneck files (stack %s) to %s", len(records), stack.stack_id, out)


def cmd_invert(args) -> None:
    model = load_model(args.model)
    stack = MlanStack.load(args.stack) if args.stack else None
    out = Path(args.out)
    records = _filtered(args.manifest, args.domain, args.split)
    for rec in records:
        feats = dataio.read_afm(rec.path("features")).data
        speaker = rec.speaker_id if rec.speaker_id in model.lhuc else None
        traj = invert(model, feats, args.smoothing, stack, speaker)
        dataio.write_trj(out / f"{rec.utt_id}.trj", traj)
    log.info("wrote %d trajectories to %s", len(records), out)


def cmd_adapt_lhuc(args) -> None:
    model = load_model(args.model)
    stack = MlanStack.load(args.stack) if args.stack else None
    records = [r for r in _filtered(args.manifest, None, args.split) if r.speaker_id == args.speaker]
    if not records:
        raise DataError(f"{args.manifest}: no utterances for speaker {args.speaker!r}")
    utts = _utterances(records)
    report = adapt_inversion(model, args.speaker, utts, stack, None, args.unsupervised)
    save_model(args.out, model)
    log.info("adapted speaker %s over %d epochs; model written to %s", args.speaker, len(report.epoch_losses), args.out)


def cmd_evaluate(args) -> None:
    pred_dir, ref_dir = Path(args.pred), Path(args.ref)
    pred_files = sorted(pred_dir.glob("*.trj"))
    if not pred_files:
        raise DataError(f"{pred_dir}: no .trj files to evaluate")
    preds, refs = [], []
    for p in pred_files:
        r = ref_dir / p.name
        if not r.exists():
            raise DataError(f"reference trajectory {r} missing for prediction {p}")
        pred, ref = dataio.read_trj(p), dataio.read_trj(r)
        ref = ref[:, :pred.shape[1]]
        if pred.shape != ref.shape:
            raise DataError(f"{p.name}: prediction {pred.shape} vs reference {ref.shape}")
        preds.append(pred)
        refs.append(ref)
    report = evaluate(preds, refs)
    dataio.atomic_write_text(args.report, report.to_json())
    log.info("rmse %.4f mm, mean pearson %.4f over %d frames", report.rmse_mm, report.pearson_mean, report.n_frames)


def cmd_fuse_scores(args) -> None:
    a, b = dataio.read_afm(args.a), dataio.read_afm(args.b)
    for path, fm in ((args.a, a), (args.b, b)):
        if fm.kind != Kind.LOGPOST:
            raise FormatError(f"{path}: expected log-posterior scores, found kind {fm.kind.name}")
    fused = score_fusion(a.data, b.data, args.wa, args.wb)
    dataio.write_afm(args.out, FeatureMatrix(fused, a.frame_shift, Kind.LOGPOST))


def _add_seed(p):
    p.add_argument("--seed", type=int, default=None,
                   help="override every seed in the config (falls back to $A2A_SEED)")


def _add_filters(p):
    p.add_argument("--domain", default=None, help="use only utterances with this domain tag")
    p.add_argument("--split", default=None, help="use only utterances in this split (e.g. train)")


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show defaults only for options that actually have one."""

    def _get_help_string(self, action):
        if action.default is None or action.required:
            return action.help
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = argparse.ArgumentParser(prog="a2a", formatter_class=fmt,
                                     description="Acoustic-to-articulatory inversion toolkit.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more log output on stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("synth-gen", formatter_class=fmt, help="generate the synthetic parallel corpus")
    p.add_argument("--config", default=None, help="run configuration JSON")
    p.add_argument("--out", required=True, help="output corpus directory")
    _add_seed(p)
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("extract", formatter_class=fmt, help="log mel filterbank features from WAV audio")
    p.add_argument("--wav-manifest", required=True, help="manifest whose records carry an 'audio' path")
    p.add_argument("--out", required=True, help="output directory (feats/ and manifest.jsonl)")
    p.add_argument("--speed-perturb", default=None, metavar="F1,F2,...",
                   help="speed factors; one output utterance per factor")
    p.add_argument("--config", default=None, help="run configuration JSON")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train-inversion", formatter_class=fmt, help="train an inversion model on spliced features")
    p.add_argument("--config", default=None, help="run configuration JSON")
    p.add_argument("--manifest", required=True, help="parallel acoustic/articulatory manifest")
    p.add_argument("--out", required=True, help="output model file (.a2am)")
    _add_filters(p)
    _add_seed(p)
    p.set_defaults(func=cmd_train_inversion, split="train")

    p = sub.add_parser("train-mlan", formatter_class=fmt, help="train the two-level bottleneck cascade")
    p.add_argument("--config", default=None, help="run configuration JSON")
    p.add_argument("--in-domain", required=True, help="manifest of the in-domain (level 1) audio")
    p.add_argument("--out-domain", required=True, help="manifest of the out-of-domain (level 2) audio")
    p.add_argument("--in-domain-tag", default=None, help="domain tag filter for --in-domain")
    p.add_argument("--out-domain-tag", default=None, help="domain tag filter for --out-domain")
    p.add_argument("--split", default="train", help="split used from both manifests")
    p.add_argument("--out", required=True, help="output stack directory")
    _add_seed(p)
    p.set_defaults(func=cmd_train_mlan)

    p = sub.add_parser("mlan-extract", formatter_class=fmt, help="write MLAN bottleneck features")
    p.add_argument("--stack", required=True, help="MLAN stack directory")
    p.add_argument("--manifest", required=True, help="manifest of acoustic features")
    p.add_argument("--out", required=True, help="output directory (feats/ and manifest.jsonl)")
    p.set_defaults(func=cmd_mlan_extract)

    p = sub.add_parser("train-inversion-xdom", formatter_class=fmt,
                       help="train an inversion model on MLAN features")
    p.add_argument("--config", default=None, help="run configuration JSON")
    p.add_argument("--stack", required=True, help="MLAN stack directory")
    p.add_argument("--manifest", required=True, help="parallel acoustic/articulatory manifest")
    p.add_argument("--out", required=True, help="output model file (.a2am)")
    _add_filters(p)
    _add_seed(p)
    p.set_defaults(func=cmd_train_inversion_xdom, split="train")

    p = sub.add_parser("invert", formatter_class=fmt, help="generate articulatory trajectories")
    p.add_argument("--model", required=True, help="inversion model (.a2am)")
    p.add_argument("--manifest", required=True, help="manifest of acoustic features")
    p.add_argument("--smoothing", choices=["mlpg", "none"], default="mlpg", help="trajectory generation")
    p.add_argument("--stack", default=None, help="MLAN stack (required for MLAN-front-end models)")
    p.add_argument("--out", required=True, help="output directory of .trj files")
    _add_filters(p)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("adapt-lhuc", formatter_class=fmt, help="estimate LHUC vectors for one speaker")
    p.add_argument("--model", required=True, help="inversion model (.a2am)")
    p.add_argument("--speaker", required=True, help="speaker id to adapt")
    p.add_argument("--manifest", required=True, help="manifest containing the speaker's data")
    p.add_argument("--stack", default=None, help="MLAN stack (required for MLAN-front-end models)")
    p.add_argument("--split", default=None, help="use only utterances in this split")
    p.add_argument("--unsupervised", action="store_true", help="adapt to the model's own hypotheses")
    p.add_argument("--out", required=True, help="output adapted model (.a2am)")
    p.set_defaults(func=cmd_adapt_lhuc)

    p = sub.add_parser("evaluate", formatter_class=fmt, help="RMSE and Pearson of predicted trajectories")
    p.add_argument("--pred", required=True, help="directory of predicted .trj files")
    p.add_argument("--ref", required=True, help="directory of reference .trj files with matching names")
    p.add_argument("--report", required=True, help="output report JSON")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("fuse-scores", formatter_class=fmt, help="log-linear fusion of two score files")
    p.add_argument("--a", required=True, help="first system's log-posteriors (AFM1)")
    p.add_argument("--b", required=True, help="second system's log-posteriors (AFM1)")
    p.add_argument("--wa", type=float, default=0.5, help="weight of the first system")
    p.add_argument("--wb", type=float, default=0.5, help="weight of the second system")
    p.add_argument("--out", required=True, help="output fused log-posteriors (AFM1)")
    p.set_defaults(func=cmd_fuse_scores)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s", level=level)
    try:
        args.func(args)
    except A2AError as exc:
        print(f"a2a {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"a2a {args.command}: error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
