"""Command-line front door.

Subcommands::

    gen-toy   seeded toy model, synthetic aligned dataset and a train config
    stream    chunked streaming decode of feature files -> timeline JSONL
    score     WER / RWER / ARWER / timestamp metrics for a timeline
    bench     MAC counts and wall clock for cached vs recomputed encoders
    finetune  adapter training on an aligned dataset -> adapters + loss CSV

Exit codes: 0 ok, 2 usage, 3 format, 4 numeric. ``CW_SEED`` overrides every
seed taken from flags or config files.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

from . import io
from .bench import STRATEGIES, BenchConfig, run_bench
from .errors import ChunkStreamError, FormatError, NumericError, UsageError
from .finetune import StepRecord, TrainConfig, finetune_run
from .masking import FRAME_MS, MaskSpec
from .metrics import ReferenceAlignment, RuntimeStats, rtf_stats, rwer, arwer, timestamp_metrics, tokenize, wer
from .model import ModelConfig, init_lora, init_weights
from .pipeline import DecodeOptions, stream_utterance
from .toy import ToySpec, make_dataset

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_NUMERIC = 0, 2, 3, 4


def effective_seed(seed: int) -> int:
    raw = os.environ.get("CW_SEED")
    if raw is None or raw == "":
        return seed
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"CW_SEED must be an integer, got {raw!r}") from None


@dataclass(frozen=True)
class RunConfig:
    model: Path
    tau_ms: int = 100
    tau0_ms: int = 600
    mode: str = "greedy"
    beam: int = 5
    n: int = 2
    self_cache: bool = False
    seed: int = 0
    adapters: Path | None = None

    def __post_init__(self):
        if self.beam < 1:
            raise UsageError("beam width must be >= 1")
        if self.n < 0:
            raise UsageError("stability window n must be >= 0")
        self.spec  # validates the ms values

    @property
    def spec(self) -> MaskSpec:
        return MaskSpec.from_ms(self.tau_ms, self.tau0_ms)


# ---------------------------------------------------------------------------
# gen-toy


def cmd_gen_toy(args: argparse.Namespace) -> int:
    seed = effective_seed(args.seed)
    config = ModelConfig(d=args.d, layers_enc=args.layers, layers_dec=args.layers, vocab=args.vocab, seed=seed)
    out = Path(args.out)
    io.save_weights(out / "model", init_weights(config))
    toy = ToySpec(frames=args.frames, words=args.words, end_quantum=max(1, args.tau_ms // FRAME_MS))
    io.save_dataset(out / "data", make_dataset(config, args.count, seed, toy))
    train = {
        "tau_ms": args.tau_ms,
        "tau0_ms": args.tau0_ms,
        "rank": 4,
        "scale": 1.0,
        "lr": 0.5,
        "clip_norm": 1.0,
        "epochs": 1,
        "max_steps": None,
        "f_hat": 1.0,
        "fd_epsilon": 1e-3,
        "seed": seed,
    }
    io.write_json(out / "train.json", train)
    return EXIT_OK


# ---------------------------------------------------------------------------
# stream


def _stream_one(cfg: RunConfig, options: DecodeOptions, weights, vocab, adapters, feat_path: Path, out_dir: Path, want_stamps: bool) -> None:
    features = io.read_tensor(feat_path)
    if features.shape[1] != weights.config.d:
        raise FormatError(f"{feat_path}: feature width {features.shape[1]} does not match model d={weights.config.d}")
    res = stream_utterance(weights, features, cfg.spec, vocab, options, adapters)
    stem = feat_path.stem
    io.write_timeline(out_dir / f"{stem}.timeline.jsonl", res.timeline)
    (out_dir / f"{stem}.txt").write_text(res.text + "\n", encoding="utf-8")
    runtime = {**rtf_stats(res.runtime), "chunks": len(res.timeline), "macs": res.counter.as_dict()}
    io.write_json(out_dir / f"{stem}.runtime.json", runtime)
    if want_stamps:
        io.write_timestamps(out_dir / f"{stem}.timestamps.json", res.timestamps)
    if options.dump_topk:
        with open(out_dir / f"{stem}.topk.jsonl", "w", encoding="utf-8") as fh:
            for rec in res.topk_dump:
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def cmd_stream(args: argparse.Namespace) -> int:
    cfg = RunConfig(
        Path(args.model),
        args.tau_ms,
        args.tau0_ms,
        args.mode,
        args.beam,
        args.n,
        args.self_cache,
        effective_seed(args.seed),
        Path(args.adapters) if args.adapters else None,
    )
    if args.timestamps and cfg.mode != "greedy":
        raise UsageError("--timestamps requires greedy decoding")
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    weights, vocab = io.load_weights(cfg.model)
    weights.config.check_spec(cfg.spec)
    adapters = io.load_adapters(cfg.adapters) if cfg.adapters else None
    options = DecodeOptions(cfg.mode, cfg.beam, cfg.n, cfg.self_cache, not args.no_timing, args.dump_topk)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [Path(p) for p in args.features]
    stems = [p.stem for p in paths]
    if len(set(stems)) != len(stems):
        raise UsageError("feature files must have distinct names")

    def job(p: Path) -> None:
        _stream_one(cfg, options, weights, vocab, adapters, p, out_dir, args.timestamps)

    if args.jobs == 1:
        for p in paths:
            job(p)
    else:
        # map() re-raises the first failure in input order
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            list(pool.map(job, paths))
    return EXIT_OK


# ---------------------------------------------------------------------------
# score


def score_report(
    timeline: list[dict],
    reference: str,
    alignment: ReferenceAlignment | None = None,
    stamps: list | None = None,
    *,
    threshold_ms: int = 240,
    initial_ms: int = 600,
    tau_ms: int | None = None,
) -> dict:
    events = io.timeline_events(timeline)
    ref = tokenize(reference)
    final = events[-1].words
    if tau_ms is None:
        if len(timeline) < 2:
            raise UsageError("a single-event timeline needs --tau-ms to compute RTF")
        tau_ms = int(timeline[1]["time_ms"]) - int(timeline[0]["time_ms"])
    runtime = RuntimeStats([float(r["latency_ms"]) / 1000.0 for r in timeline], tau_ms / 1000.0)
    report: dict = {
        "wer": wer(ref, list(final)),
        "rwer": rwer(ref, events),
        "arwer": None,
        "precision": None,
        "recall": None,
        "sd_ms": None,
        "ed_ms": None,
        **rtf_stats(runtime),
    }
    if alignment is not None:
        report["arwer"] = arwer(alignment, events)
        if stamps is not None:
            ts = timestamp_metrics(
                alignment,
                stamps,
                threshold_ms,
                initial_ms=initial_ms,
                stream_end_ms=int(timeline[-1]["time_ms"]),
            )
            report.update(precision=ts.precision, recall=ts.recall, sd_ms=ts.sd_ms, ed_ms=ts.ed_ms)
    return report


def cmd_score(args: argparse.Namespace) -> int:
    if (args.arwer or args.timestamps) and not args.alignment:
        raise UsageError("ARWER and timestamp metrics need --alignment")
    timeline = io.read_timeline(args.timeline)
    if args.reference_file:
        reference = Path(args.reference_file).read_text(encoding="utf-8")
    elif args.reference is not None:
        reference = args.reference
    else:
        raise UsageError("give --reference or --reference-file")
    alignment = io.read_alignment(args.alignment) if args.alignment else None
    stamps = io.read_timestamps(args.timestamps) if args.timestamps else None
    report = score_report(
        timeline,
        reference,
        alignment,
        stamps,
        threshold_ms=args.threshold_ms,
        initial_ms=args.initial_ms,
        tau_ms=args.tau_ms,
    )
    text = json.dumps(report, indent=1, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench


def cmd_bench(args: argparse.Namespace) -> int:
    spec = MaskSpec.from_ms(args.tau_ms, args.tau0_ms)
    cfg = BenchConfig(
        frames=args.frames,
        d=args.d,
        tau=spec.tau,
        tau0=spec.tau0,
        layers=args.layers,
        trials=args.trials,
        seed=effective_seed(args.seed),
        timing=not args.no_timing,
        strategies=tuple(args.strategies),
    )
    text = json.dumps(run_bench(cfg), indent=1, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# finetune

_TRAIN_KEYS = {"tau_ms", "tau0_ms", "rank", "scale", "lr", "clip_norm", "epochs", "max_steps", "f_hat", "fd_epsilon", "seed", "targets"}


def load_train_config(path: str | Path) -> tuple[TrainConfig, dict]:
    raw = io.read_json(path)
    if not isinstance(raw, dict):
        raise FormatError(f"{path}: train config must be a JSON object")
    unknown = set(raw) - _TRAIN_KEYS
    if unknown:
        raise UsageError(f"{path}: unknown train config keys {sorted(unknown)}")
    spec = MaskSpec.from_ms(int(raw.get("tau_ms", 100)), int(raw.get("tau0_ms", 600)))
    cfg = TrainConfig(
        spec,
        f_hat=float(raw.get("f_hat", 1.0)),
        lr=float(raw.get("lr", 0.5)),
        clip_norm=None if raw.get("clip_norm", 1.0) is None else float(raw.get("clip_norm", 1.0)),
        epochs=int(raw.get("epochs", 1)),
        max_steps=raw.get("max_steps"),
        fd_epsilon=float(raw.get("fd_epsilon", 1e-3)),
        seed=effective_seed(int(raw.get("seed", 0))),
    )
    lora = {"rank": int(raw.get("rank", 4)), "scale": float(raw.get("scale", 1.0)), "targets": raw.get("targets")}
    return cfg, lora


def cmd_finetune(args: argparse.Namespace) -> int:
    cfg, lora = load_train_config(args.config)
    weights, _ = io.load_weights(args.model)
    dataset = io.load_dataset(args.dataset)
    if args.init_adapters:
        adapters = io.load_adapters(args.init_adapters)
    else:
        adapters = init_lora(weights.config, lora["rank"], lora["targets"], cfg.seed, lora["scale"])
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "loss.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "utterance", "point_frame", "loss"])

        def log(rec: StepRecord) -> None:
            writer.writerow([rec.step, rec.uid, rec.point_frame, repr(rec.loss)])

        result = finetune_run(weights, adapters, dataset, cfg, on_step=log)
    io.save_adapters(out / "adapters", result.adapters)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chunkstream", description="Chunked streaming encoder-decoder toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-toy", help="write a seeded toy model, dataset and train config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=4)
    g.add_argument("--frames", type=int, default=150)
    g.add_argument("--words", type=int, default=3)
    g.add_argument("--d", type=int, default=16)
    g.add_argument("--layers", type=int, default=1)
    g.add_argument("--vocab", type=int, default=32)
    g.add_argument("--tau-ms", type=int, default=100)
    g.add_argument("--tau0-ms", type=int, default=200)
    g.set_defaults(func=cmd_gen_toy)

    s = sub.add_parser("stream", help="stream feature files through the model")
    s.add_argument("--model", required=True, help="weight manifest")
    s.add_argument("--features", nargs="+", required=True, help="CWTF feature files (frames x d)")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--tau-ms", type=int, default=100)
    s.add_argument("--tau0-ms", type=int, default=600)
    s.add_argument("--mode", choices=("greedy", "beam"), default="greedy")
    s.add_argument("--beam", type=int, default=5)
    s.add_argument("-n", type=int, default=2, help="stability window")
    s.add_argument("--self-cache", action="store_true")
    s.add_argument("--adapters", help="adapter manifest")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--timestamps", action="store_true", help="write per-word timestamps")
    s.add_argument("--dump-topk", type=int, default=0, metavar="K")
    s.add_argument("--no-timing", action="store_true", help="record zero latency for reproducible output")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_stream)

    c = sub.add_parser("score", help="compute metrics for a timeline")
    c.add_argument("--timeline", required=True)
    c.add_argument("--reference")
    c.add_argument("--reference-file")
    c.add_argument("--alignment")
    c.add_argument("--timestamps", help="timestamps JSON from stream --timestamps")
    c.add_argument("--arwer", action="store_true", help="require ARWER (fails without --alignment)")
    c.add_argument("--threshold-ms", type=int, default=240)
    c.add_argument("--initial-ms", type=int, default=600)
    c.add_argument("--tau-ms", type=int)
    c.add_argument("--out")
    c.set_defaults(func=cmd_score)

    b = sub.add_parser("bench", help="compare encoder serving strategies")
    b.add_argument("--frames", type=int, default=1500)
    b.add_argument("--d", type=int, default=64)
    b.add_argument("--layers", type=int, default=1)
    b.add_argument("--tau-ms", type=int, default=300)
    b.add_argument("--tau0-ms", type=int, default=300)
    b.add_argument("--trials", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--strategies", nargs="+", choices=STRATEGIES, default=list(STRATEGIES))
    b.add_argument("--no-timing", action="store_true", help="skip wall clock for reproducible output")
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    f = sub.add_parser("finetune", help="train adapters on an aligned dataset")
    f.add_argument("--config", required=True, help="train config JSON")
    f.add_argument("--model", required=True)
    f.add_argument("--dataset", required=True, help="dataset manifest")
    f.add_argument("--init-adapters")
    f.add_argument("--out-dir", required=True)
    f.set_defaults(func=cmd_finetune)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ChunkStreamError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
