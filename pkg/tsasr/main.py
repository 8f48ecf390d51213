"""Command-line entry point: ``tsasr {synth,train,decode,score,stno}``."""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from tsasr.checkpoint import CheckpointManager, load_tensors, save_model
from tsasr.config import RunConfig, load_run_config
from tsasr.decoding import DecodeJob, decode_corpus, write_hypotheses
from tsasr.diarization import activity_matrix, binarize, group_by_recording, parse_rttm, stno_mask, stno_masks
from tsasr.events import BroadcastChannel, MetricLogWriter, log_event
from tsasr.exceptions import CheckpointError, ConfigError, TsasrError
from tsasr.metrics.report import WER_METRICS, format_rates, score_der_files, score_files
from tsasr.network import TargetSpeakerModel
from tsasr.synthdata import SynthRecording, load_recordings, reference_stnos, save_corpus, synth_corpus
from tsasr.training import Trainer
from tsasr.utils import configure_logging, configure_threads, seed_everything

logger = logging.getLogger(__name__)

EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsasr", description=__doc__)
    parser.add_argument("--config", type=Path, help="TOML run configuration")
    parser.add_argument("--seed", type=int, default=None, help="Overrides data.seed and the training seed")
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE"
    )
    parser.add_argument("-v", "--verbose", action="count", default=0)
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="Generate a synthetic corpus")
    synth.add_argument("--out", type=Path, required=True)

    train = commands.add_parser("train", help="Run the configured training phases")
    train.add_argument("--corpus", type=Path, required=True, help="Directory written by synth")
    train.add_argument("--out", type=Path, required=True, help="Checkpoint directory")
    train.add_argument("--init", type=Path, help="Start from an existing model file")

    decode = commands.add_parser("decode", help="Transcribe every speaker of a corpus split")
    decode.add_argument("--model", type=Path, required=True)
    decode.add_argument("--data", type=Path, required=True, help="A corpus split directory")
    decode.add_argument("--diarization", default="oracle", help="'oracle' or an RTTM file")
    decode.add_argument("--out", type=Path, required=True)

    score = commands.add_parser("score", help="Score hypotheses against references")
    score.add_argument("ref_file", nargs="?", type=Path, help="Reference transcripts JSON")
    score.add_argument("hyp_file", nargs="?", type=Path, help="Hypothesis transcripts JSON")
    score.add_argument("--ref", type=Path, help="Same as the first positional argument")
    score.add_argument("--hyp", type=Path, help="Same as the second positional argument")
    score.add_argument("--metrics", nargs="+", default=None)
    score.add_argument("--metric", action="append", default=None, help="One metric; repeatable")
    score.add_argument("--collar", type=float, default=None, help="Overrides metrics.collar")
    score.add_argument("--ref-rttm", type=Path)
    score.add_argument("--hyp-rttm", type=Path)
    score.add_argument("--out", type=Path, help="Write the full JSON report here")

    stno = commands.add_parser("stno", help="Print the STNO mask of one speaker of an RTTM")
    stno.add_argument("rttm", type=Path)
    stno.add_argument("--target", type=int, required=True, help="Speaker index (first-appearance order)")
    stno.add_argument("--recording", default=None)
    stno.add_argument(
        "--frame-rate", type=float, default=50.0, help="Mask rate in fps; the encoder runs at 25"
    )
    stno.add_argument("--duration", type=float, default=None)
    return parser


def _config(args: argparse.Namespace) -> RunConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"data.seed={args.seed}")
    if getattr(args, "collar", None) is not None:
        overrides.append(f"metrics.collar={args.collar}")
    return load_run_config(args.config, overrides)


def load_trained_model(path: Path) -> Tuple[TargetSpeakerModel, RunConfig]:
    tensors, metadata = load_tensors(path)
    if "config" not in metadata:
        raise CheckpointError(str(path), "model file carries no run configuration")
    config = RunConfig.model_validate(metadata["config"])
    model = TargetSpeakerModel(config.model, config.conditioning)
    model.load_state_dict(tensors)
    return model, config


def _diarized_jobs(recordings: Sequence[SynthRecording], diarization: str) -> List[DecodeJob]:
    if diarization == "oracle":
        return [
            DecodeJob(r.recording_id, r.features, tuple(reference_stnos(r)), r.speakers)
            for r in recordings
        ]
    system = group_by_recording(parse_rttm(Path(diarization).read_text(encoding="utf-8")))
    jobs = []
    for rec in recordings:
        segments = system.get(rec.recording_id, [])
        if not segments:
            logger.warning(f"No diarization for {rec.recording_id}; nothing to decode")
            continue
        activity = binarize(activity_matrix(segments, rec.encoder_rate, duration=rec.duration))
        jobs.append(
            DecodeJob(rec.recording_id, rec.features, tuple(stno_masks(activity)), activity.speaker_labels)
        )
    return jobs


def run_synth(args: argparse.Namespace, config: RunConfig) -> None:
    corpus = synth_corpus(config.data, threads=args.threads)
    save_corpus(corpus, args.out)
    for split, stats in corpus.stats().items():
        print(
            f"{split}: sil {stats.silence * 100:.4g}%  1-spk {stats.single * 100:.4g}%  "
            f"ov {stats.overlap * 100:.4g}%"
        )


def run_train(args: argparse.Namespace, config: RunConfig) -> None:
    seed_everything(config.data.seed)
    train_set = load_recordings(args.corpus / "train")
    dev_dir = args.corpus / "dev"
    dev_set = load_recordings(dev_dir) if (dev_dir / "features.pt").exists() else []
    if args.init is not None:
        model, _ = load_trained_model(args.init)
    else:
        model = TargetSpeakerModel(config.model, config.conditioning)

    channel = BroadcastChannel()
    channel.subscribe(log_event)
    writer = channel.subscribe(MetricLogWriter(args.out / "metrics.jsonl"))
    try:
        with CheckpointManager(args.out) as checkpoints:
            results = Trainer(
                model, train_set, dev_set, config, checkpoints, channel, config.data.seed, args.threads
            ).run()
    finally:
        writer.close()
    save_model(args.out / "model.pt", model, {"config": config.model_dump(mode="json")})
    for result in results:
        print(f"{result.phase}: {result.steps} steps, best {result.best_metric:.4g}")


def run_decode(args: argparse.Namespace, config: RunConfig) -> None:
    model, model_config = load_trained_model(args.model)
    recordings = load_recordings(args.data)
    jobs = _diarized_jobs(recordings, args.diarization)
    feature_rate = recordings[0].feature_rate if recordings else config.data.frame_rate
    decoded = decode_corpus(jobs, model, config.decode, feature_rate, args.threads)
    segments_json, nbest_json = write_hypotheses(decoded, model.tokenizer)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "hypotheses.json").write_text(segments_json, encoding="utf-8")
    (args.out / "nbest.json").write_text(nbest_json, encoding="utf-8")
    failed = sum(len(t.failed_windows) for rec in decoded for t in rec.values())
    if failed:
        logger.warning(f"{failed} decoding windows failed; see nbest.json")
    print(f"Decoded {len(jobs)} recordings into {args.out}")


def run_score(args: argparse.Namespace, config: RunConfig) -> None:
    report: Dict[str, Dict] = {"sessions": {}, "aggregate": {}}
    ref = args.ref if args.ref is not None else args.ref_file
    hyp = args.hyp if args.hyp is not None else args.hyp_file
    metrics = (args.metrics or []) + (args.metric or []) or list(WER_METRICS)
    unknown = [m for m in metrics if m not in WER_METRICS]
    if unknown:
        raise ConfigError("metric", f"unknown {unknown}; choose from {list(WER_METRICS)}")
    if ref is not None or hyp is not None:
        if ref is None or hyp is None:
            raise ConfigError("score", "references and hypotheses go together")
        report = score_files(ref, hyp, config.metrics, metrics)
    if args.ref_rttm is not None and args.hyp_rttm is not None:
        der_report = score_der_files(args.ref_rttm, args.hyp_rttm, config.metrics.der_collar)
        report["aggregate"].update(der_report["aggregate"])
        report["der_sessions"] = der_report["sessions"]
    if not report["aggregate"]:
        raise ConfigError("score", "give --ref/--hyp and/or --ref-rttm/--hyp-rttm")
    if args.out is not None:
        args.out.write_text(json.dumps(report, indent=2), encoding="utf-8")
    print(format_rates(report))


def run_stno(args: argparse.Namespace, config: RunConfig) -> None:
    by_recording = group_by_recording(parse_rttm(args.rttm.read_text(encoding="utf-8")))
    if not by_recording:
        raise ConfigError("rttm", f"{args.rttm} holds no segments")
    recording = args.recording if args.recording is not None else sorted(by_recording)[0]
    if recording not in by_recording:
        raise ConfigError("recording", f"'{recording}' not in {args.rttm}")
    activity = activity_matrix(by_recording[recording], args.frame_rate, duration=args.duration)
    mask = stno_mask(activity, args.target)
    np.savetxt(sys.stdout, mask.values, fmt="%.6g")


COMMANDS = {
    "synth": run_synth,
    "train": run_train,
    "decode": run_decode,
    "score": run_score,
    "stno": run_stno,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    configure_threads(args.threads)
    try:
        config = _config(args)
        COMMANDS[args.command](args, config)
    except (ConfigError, ValidationError) as e:
        logger.error(f"Configuration error: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TsasrError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
