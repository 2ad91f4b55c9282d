"""Command-line driver: corpus generation, training, conversion, streaming,
benchmarks, gradient checks, and metric evaluation.

Every run echoes its effective configuration in the same key = value form
the --config flag accepts, so any run can be reproduced from its own log
plus the master seed. bench / eval-mcd / grad-check additionally print one
machine-readable JSON summary line as their final output.

Exit codes: 0 success, 1 missing file, 2 bad usage, 3 invariant violation.
"""

from __future__ import annotations

import argparse
import json
import struct
import sys
import time

import numpy as np

from . import autodiff as ad
from .config import (
    ConfigError,
    ModelConfig,
    RunConfig,
    parse_config_text,
    seed_streams,
    subseed,
)
from .container import (
    ConfigMismatchError,
    FormatError,
    load_checkpoint,
    load_corpus,
    load_features,
    save_checkpoint,
    save_corpus,
    save_features,
)
from .corpus import split_corpus, synth_corpus_generate
from .gaussian_attention import attention_moments
from .melspec import load_wav, mel_extract, stack_frames, unstack_frames
from .metrics import mcd_dtw
from .models import StudentModel, TeacherModel
from .streaming import StreamConfig, run_stream, stream_init, write_timing_csv
from .training import (
    grad_check_student_loss,
    train_student,
    train_teacher,
    with_sos,
    write_loss_curve,
)

_INVARIANT_ERRORS = (
    ConfigError,
    FormatError,
    ConfigMismatchError,
    ad.ShapeError,
    ad.NonFiniteError,
    ValueError,
)


def _echo_config(cfg: RunConfig, file=None) -> None:
    file = file or sys.stdout
    print("# effective-config", file=file)
    for line in cfg.echo_lines():
        print(line, file=file)
    print("# end-config", file=file)


def _load_runconfig(args, overrides: dict | None = None, echo_file=None) -> RunConfig:
    mapping = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            mapping.update(parse_config_text(fh.read()))
    for key, val in (overrides or {}).items():
        if val is not None:
            mapping[key] = val
    if getattr(args, "seed", None) is not None:
        mapping["seed"] = args.seed
    cfg = RunConfig.from_mapping(mapping)
    _echo_config(cfg, file=echo_file)
    return cfg


def _summary(cmd: str, seed: int, metrics: dict) -> None:
    print(json.dumps({"cmd": cmd, "seed": seed, "metrics": metrics}))


# ---------------------------------------------------------------------------
# subcommand handlers


def _cmd_gen_corpus(args) -> int:
    cfg = _load_runconfig(args, {
        "n_classes": args.classes,
        "pairs_per_class_pair": args.pairs,
        "len_min": args.len_min,
        "len_max": args.len_max,
        "latent_dim": args.latent_dim,
    })
    corpus_seed = subseed(cfg.seed, 0)
    print(f"# corpus-seed {corpus_seed}")
    holdout = args.holdout or 0
    corpus = synth_corpus_generate(
        corpus_seed,
        cfg.model.n_classes,
        cfg.corpus.pairs_per_class_pair + holdout,
        base_len_range=(cfg.corpus.len_min, cfg.corpus.len_max),
        feature_dim=cfg.model.feature_dim,
        latent_dim=cfg.corpus.latent_dim,
    )
    if holdout:
        train, held = split_corpus(corpus, holdout)
        save_corpus(args.out, train)
        save_corpus(args.holdout_out or args.out + ".holdout", held)
        print(f"wrote {len(train)} training and {len(held)} held-out pairs")
    else:
        save_corpus(args.out, corpus)
        print(f"wrote {len(corpus)} pairs")
    return 0


def _cmd_train_teacher(args) -> int:
    cfg = _load_runconfig(args, {
        "teacher_iters": args.iters,
        "batch_size": args.batch_size,
        "lr": args.lr,
    })
    corpus = load_corpus(args.corpus)
    model, curve = train_teacher(corpus, cfg, log_every=args.log_every)
    save_checkpoint(args.out, model)
    if args.curve:
        write_loss_curve(args.curve, curve)
    print(f"teacher saved to {args.out}; final loss {curve[-1][1]:.4f}")
    return 0


def _cmd_train_student(args) -> int:
    cfg = _load_runconfig(args, {
        "student_iters": args.iters,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "cache_teacher_attention": args.cache_attn,
    })
    teacher = load_checkpoint(args.teacher, expect=cfg.model)
    if not isinstance(teacher, TeacherModel):
        raise ValueError("--teacher must point at a teacher checkpoint")
    corpus = load_corpus(args.corpus)
    student, curve = train_student(teacher, corpus, cfg, log_every=args.log_every)
    save_checkpoint(args.out, student)
    if args.curve:
        write_loss_curve(args.curve, curve)
    print(f"student saved to {args.out}; final loss {curve[-1][1]:.4f}")
    return 0


def _load_student(path, cfg: RunConfig) -> StudentModel:
    model = load_checkpoint(path, expect=cfg.model)
    if not isinstance(model, StudentModel):
        raise ValueError("this command drives the non-autoregressive student")
    return model


def _cmd_convert(args) -> int:
    cfg = _load_runconfig(args)
    model = _load_student(args.model, cfg)
    features, meta = load_features(args.features)
    noise = None
    if args.noise_mode == "sample":
        rng = seed_streams(cfg.seed)["noise"]
        noise = rng.standard_normal((cfg.model.noise_dim, features.shape[1]))
    with ad.no_grad():
        y, _, _ = model.forward(
            features, args.source_class, args.target_class,
            m_len=(features.shape[1] if args.identity else "auto"),
            noise=noise, identity=args.identity,
        )
    save_features(args.out, y.data, {"reduction": cfg.model.reduction,
                                     "hop_ms": cfg.mel.hop_ms,
                                     "mel_bands": cfg.model.mel_bands,
                                     "source": meta.get("kind", "features")})
    print(f"converted {features.shape[1]} -> {y.data.shape[1]} frames -> {args.out}")
    return 0


def _stdio_stream(model: StudentModel, cfg: RunConfig, stream_cfg: StreamConfig,
                  args) -> int:
    """Raw piped mode: per-frame header (frame_index u32, D u32) + f32 payload."""
    src = sys.stdin.buffer
    dst = sys.stdout.buffer
    d = cfg.model.feature_dim
    state = stream_init(model, stream_cfg)
    rng = seed_streams(cfg.seed)["noise"] if args.noise_mode == "sample" else None
    out_index = 0
    pending = []

    def flush(chunk_cols):
        nonlocal out_index
        if not chunk_cols:
            return
        chunk = np.stack(chunk_cols, axis=1)
        noise = None
        if rng is not None and not stream_cfg.identity:
            noise = rng.standard_normal((cfg.model.noise_dim, stream_cfg.window))
        out = state.push(chunk, args.source_class, args.target_class, noise)
        for col in out.T:
            dst.write(struct.pack("<II", out_index, d))
            dst.write(col.astype("<f4").tobytes())
            out_index += 1
        dst.flush()

    while True:
        head = src.read(8)
        if not head:
            break
        if len(head) != 8:
            raise FormatError("truncated frame header on stdin")
        _, frame_d = struct.unpack("<II", head)
        if frame_d != d:
            raise ad.ShapeError(f"stdin frame has {frame_d} channels, model wants {d}")
        payload = src.read(4 * d)
        if len(payload) != 4 * d:
            raise FormatError("truncated frame payload on stdin")
        pending.append(np.frombuffer(payload, dtype="<f4").astype(np.float64))
        if len(pending) == stream_cfg.window:
            flush(pending)
            pending = []
    flush(pending)
    return 0


def _cmd_stream(args) -> int:
    # in piped mode stdout carries binary frames; the echo goes to stderr
    cfg = _load_runconfig(args, {
        "window": args.window,
        "lookback": args.lookback,
        "identity": args.identity,
    }, echo_file=sys.stderr if args.stdio else None)
    model = _load_student(args.model, cfg)
    stream_cfg = StreamConfig(window=cfg.stream.window, lookback=cfg.stream.lookback,
                              identity=cfg.stream.identity, timing=True)
    if args.stdio:
        return _stdio_stream(model, cfg, stream_cfg, args)
    features, _ = load_features(args.features)
    rng = seed_streams(cfg.seed)["noise"] if args.noise_mode == "sample" else None
    converted, rows, summary = run_stream(
        model, stream_cfg, features, args.source_class, args.target_class,
        noise_rng=rng, hop_ms=cfg.mel.hop_ms,
    )
    save_features(args.out, converted, {"reduction": cfg.model.reduction,
                                        "hop_ms": cfg.mel.hop_ms,
                                        "mel_bands": cfg.model.mel_bands})
    if args.timing_csv:
        write_timing_csv(args.timing_csv, rows)
    print(f"streamed {summary['windows']} windows, mapping rtf {summary['rtf']:.4g}")
    return 0


def _cmd_bench(args) -> int:
    cfg = _load_runconfig(args)
    student = _load_student(args.student, cfg)
    teacher = load_checkpoint(args.teacher, expect=cfg.model)
    if not isinstance(teacher, TeacherModel):
        raise ValueError("--teacher must point at a teacher checkpoint")
    corpus = load_corpus(args.corpus)
    pairs = corpus.pairs[: args.limit] if args.limit else corpus.pairs
    if not pairs:
        raise ValueError("benchmark corpus is empty")
    sec_per_frame = cfg.model.reduction * cfg.mel.hop_ms / 1000.0
    student_s, teacher_s, audio_s = 0.0, 0.0, 0.0
    for src, tgt in pairs:
        n = src.features.shape[1]
        with ad.no_grad():
            t0 = time.perf_counter()
            student.forward(src.features, src.cls, tgt.cls, m_len="auto")
            t1 = time.perf_counter()
            teacher.infer_ar(src.features, src.cls, tgt.cls)
            t2 = time.perf_counter()
        student_s += t1 - t0
        teacher_s += t2 - t1
        audio_s += n * sec_per_frame
    metrics = {
        "pairs": len(pairs),
        "student_rtf": student_s / audio_s,
        "teacher_rtf": teacher_s / audio_s,
        "speedup": teacher_s / student_s,
    }
    _summary("bench", cfg.seed, metrics)
    return 0


def _cmd_grad_check(args) -> int:
    cfg = _load_runconfig(args)
    worst = grad_check_student_loss(cfg, n_src=args.frames, m_tgt=args.frames - 1,
                                    step=args.step)
    passed = bool(worst <= args.threshold)
    _summary("grad-check", cfg.seed, {"max_rel_error": worst,
                                      "threshold": args.threshold,
                                      "passed": passed})
    return 0 if passed else 3


def _cmd_eval_mcd(args) -> int:
    cfg = _load_runconfig(args)
    model = load_checkpoint(args.model, expect=cfg.model)
    corpus = load_corpus(args.corpus)
    pairs = corpus.pairs[: args.limit] if args.limit else corpus.pairs
    if not pairs:
        raise ValueError("evaluation corpus is empty")
    r = cfg.model.reduction
    rows = []
    for src, tgt in pairs:
        with ad.no_grad():
            if isinstance(model, TeacherModel):
                y, _ = model.forward_forced(src.features, src.cls,
                                            with_sos(tgt.features), tgt.cls)
                converted = y.data
            else:
                y, _, _ = model.forward(src.features, src.cls, tgt.cls, m_len="auto")
                converted = y.data
        value = mcd_dtw(unstack_frames(converted, r), unstack_frames(tgt.features, r))
        rows.append((src.uid, value))
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write("pair_id,mcd\n")
            for uid, value in rows:
                fh.write(f"{uid},{value:.6f}\n")
    mean = float(np.mean([v for _, v in rows]))
    _summary("eval-mcd", cfg.seed, {"pairs": len(rows), "mean_mcd": mean,
                                    "kind": "teacher_forced" if isinstance(model, TeacherModel)
                                    else "student"})
    return 0


def _cmd_extract_mel(args) -> int:
    cfg = _load_runconfig(args)
    samples = load_wav(args.wav, expect_rate=cfg.mel.sample_rate)
    mel = mel_extract(samples, cfg.mel)
    stacked = stack_frames(mel, cfg.model.reduction)
    save_features(args.out, stacked, {"reduction": cfg.model.reduction,
                                      "hop_ms": cfg.mel.hop_ms,
                                      "mel_bands": cfg.mel.n_bands})
    print(f"extracted {mel.shape[1]} mel frames -> {stacked.shape} stacked -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_common(p, with_seed: bool = True):
    p.add_argument("--config", help="key = value config file")
    if with_seed:
        p.add_argument("--seed", type=int, help="master seed (fans out per purpose)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="streamvc",
                                     description="streaming voice feature conversion")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-corpus", help="generate a synthetic parallel corpus")
    _add_common(p)
    p.add_argument("--classes", type=int)
    p.add_argument("--pairs", type=int, help="pairs per ordered class pair")
    p.add_argument("--holdout", type=int, default=0, help="held-out pairs per class pair")
    p.add_argument("--len-min", type=int, dest="len_min")
    p.add_argument("--len-max", type=int, dest="len_max")
    p.add_argument("--latent-dim", type=int, dest="latent_dim")
    p.add_argument("--out", required=True)
    p.add_argument("--holdout-out", dest="holdout_out")
    p.set_defaults(func=_cmd_gen_corpus)

    p = sub.add_parser("train-teacher", help="train the autoregressive teacher")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--curve", help="loss-curve CSV path")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=_cmd_train_teacher)

    p = sub.add_parser("train-student", help="distill the parallel student")
    _add_common(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--cache-attn", action="store_const", const=True, dest="cache_attn",
                   help="memoize teacher attention per pair")
    p.add_argument("--curve")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=_cmd_train_student)

    p = sub.add_parser("convert", help="batch non-autoregressive conversion")
    _add_common(p)
    p.add_argument("--model", required=True, help="student checkpoint")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--source-class", type=int, default=1, dest="source_class")
    p.add_argument("--target-class", type=int, default=2, dest="target_class")
    p.add_argument("--noise-mode", choices=("zeros", "sample"), default="zeros",
                   dest="noise_mode")
    p.add_argument("--identity", action="store_true")
    p.set_defaults(func=_cmd_convert)

    p = sub.add_parser("stream", help="sliding-window conversion")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--features")
    p.add_argument("--out")
    p.add_argument("--window", "--chunk", type=int, dest="window",
                   help="window length S in stacked frames")
    p.add_argument("--lookback", type=int)
    p.add_argument("--identity", action="store_const", const=True)
    p.add_argument("--source-class", type=int, default=1, dest="source_class")
    p.add_argument("--target-class", type=int, default=2, dest="target_class")
    p.add_argument("--noise-mode", choices=("zeros", "sample"), default="zeros",
                   dest="noise_mode")
    p.add_argument("--timing-csv", dest="timing_csv")
    p.add_argument("--stdio", action="store_true",
                   help="pipe raw f32 frames over stdin/stdout")
    p.set_defaults(func=_cmd_stream)

    p = sub.add_parser("bench", help="student vs teacher conversion speed")
    _add_common(p)
    p.add_argument("--student", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--limit", type=int)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("grad-check", help="finite-difference check of the student loss")
    _add_common(p)
    p.add_argument("--frames", type=int, default=5, help="source frames in the toy pair")
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--threshold", type=float, default=1e-3)
    p.set_defaults(func=_cmd_grad_check)

    p = sub.add_parser("eval-mcd", help="mel-cepstral distortion against references")
    _add_common(p)
    p.add_argument("--model", required=True, help="student or teacher checkpoint")
    p.add_argument("--corpus", required=True)
    p.add_argument("--limit", type=int)
    p.add_argument("--csv", help="per-pair CSV report")
    p.set_defaults(func=_cmd_eval_mcd)

    p = sub.add_parser("extract-mel", help="wav to stacked log-mel features")
    _add_common(p)
    p.add_argument("--wav", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_extract_mel)

    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return 1
    except _INVARIANT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
