"""Command-line interface.

Subcommands: vocab build, tokenize, byteprobs exact, byteprobs beam,
sweep, precompute, distill, byte-sft, naive-ctd, report. Every
subcommand honors --seed; config defaults come from --config or the
BLD_CONFIG environment variable.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys

import numpy as np

from . import beam as beam_mod
from . import distill as distill_mod
from . import exact as exact_mod
from . import pipeline as pipeline_mod
from . import report as report_mod
from .config import load_config
from .models import (
    BigramLM,
    StudentConfig,
    StudentModel,
    UniformLM,
    load_checkpoint,
    save_checkpoint,
)
from .tokenizer import (
    VocabTrie,
    build_vocab,
    decode,
    read_merges_file,
    read_vocab_file,
    tokenize,
    write_merges_file,
    write_vocab_file,
)


def load_vocab(spec: str):
    """Vocabulary from a file path, or the builtin ``toy`` vocabulary
    ({"a", "b", "ab"} first, then the injected single-byte tokens)."""
    if spec == "toy":
        return build_vocab([b"a", b"b", b"ab"], [])
    return read_vocab_file(spec)


def _resolve_teacher(teacher_spec: str, vocab_spec: str) -> str:
    # the builtin toy vocab pairs with the uniform-over-3-tokens teacher
    if vocab_spec == "toy" and teacher_spec == "uniform":
        return "uniform:0.0:3"
    return teacher_spec


def load_teacher(spec: str, vocab):
    """Teacher model from a spec string.

    Forms: ``uniform``, ``uniform:<eos weight>``,
    ``uniform:<eos weight>:<n>`` (mass restricted to the first n content
    tokens), ``bigram:<counts.json>``, or a ``.bldm`` checkpoint path.
    """
    if spec == "uniform":
        return UniformLM(vocab)
    if spec.startswith("uniform:"):
        parts = spec.split(":")
        support = range(int(parts[2])) if len(parts) > 2 else None
        return UniformLM(vocab, eos_weight=float(parts[1]), support=support)
    if spec.startswith("bigram:"):
        with open(spec.split(":", 1)[1]) as fh:
            counts = np.asarray(json.load(fh), dtype=np.float64)
        return BigramLM(vocab, counts)
    if spec.endswith(".bldm"):
        return load_checkpoint(spec, vocab)
    raise ValueError(f"unrecognized teacher spec {spec!r}")


def _print_byte_dist(position: int, context: bytes, dist: np.ndarray) -> None:
    parts = []
    for v in np.argsort(-dist)[:8]:
        if dist[v] <= 0:
            break
        label = "eos" if v == 256 else repr(bytes([v]))[1:]
        parts.append(f"{label}={dist[v]:.6g}")
    print(f"pos {position} after {context!r}: " + ", ".join(parts))


# --- subcommand handlers -----------------------------------------------------


def cmd_vocab_build(args) -> int:
    with open(args.tokens, encoding="utf-8") as fh:
        tokens = [line.rstrip("\n").encode("utf-8") for line in fh if line.rstrip("\n")]
    merges = []
    if args.merges_text:
        with open(args.merges_text, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                left, _, right = line.partition(" ")
                merges.append((left.encode("utf-8"), right.encode("utf-8")))
    vocab, _ = build_vocab(tokens, merges)
    write_vocab_file(args.out, vocab)
    if args.merges_out:
        write_merges_file(args.merges_out, merges)
    print(f"wrote {vocab.n_content} content tokens to {args.out}")
    return 0


def cmd_tokenize(args) -> int:
    vocab, _ = load_vocab(args.vocab)
    merges = read_merges_file(args.merges) if args.merges else []
    ids = tokenize(vocab, merges, args.input.encode("utf-8"))
    pieces = [vocab.entries[t] for t in ids]
    print(" ".join(str(t) for t in ids))
    print(" ".join(repr(p)[1:] for p in pieces))
    return 0


def cmd_byteprobs_exact(args) -> int:
    vocab, trie = load_vocab(args.vocab)
    teacher = load_teacher(_resolve_teacher(args.teacher, args.vocab), vocab)
    data = args.input.encode("utf-8")
    for i in range(len(data) + 1):
        dist = exact_mod.exact_next_byte_dist(teacher, data[:i], cap=args.cap, trie=trie)
        _print_byte_dist(i, data[:i], dist)
    return 0


def cmd_byteprobs_beam(args) -> int:
    vocab, trie = load_vocab(args.vocab)
    teacher = load_teacher(_resolve_teacher(args.teacher, args.vocab), vocab)
    data = args.input.encode("utf-8")
    lat = beam_mod.beam_init(teacher, args.k, args.eps, trie=trie)
    for i in range(len(data) + 1):
        dist = np.exp(beam_mod.logp_next(lat))
        _print_byte_dist(i, data[:i], dist)
        if i < len(data):
            lat = beam_mod.advance(lat, data[i])
    return 0


def cmd_sweep(args) -> int:
    vocab, trie = load_vocab(args.vocab)
    teacher = load_teacher(_resolve_teacher(args.teacher, args.vocab), vocab)
    corpus = pipeline_mod.ingest(args.corpus).samples[: args.limit]
    k_list = [int(x) for x in args.k.split(",")]
    eps_list = [float(x) for x in args.eps.split(",")]
    report = beam_mod.sweep(
        teacher, corpus, k_list, eps_list, reference_params=(args.ref_k, args.ref_eps),
        trie=trie,
    )
    beam_mod.write_sweep_report(args.out, report)
    print(report_mod.sweep_table(report), end="")
    return 0


def cmd_precompute(args) -> int:
    cfg = load_config(args.config)
    vocab, _ = load_vocab(args.vocab)
    teacher = load_teacher(_resolve_teacher(args.teacher, args.vocab), vocab)
    corpus = pipeline_mod.ingest(args.corpus).samples
    plan = pipeline_mod.make_shard_plan(
        len(corpus), args.n_shards or cfg.n_shards, args.workers or cfg.workers
    )
    paths = pipeline_mod.precompute(corpus, teacher, args.k, args.eps, plan, args.out)
    print("\n".join(paths))
    return 0


def _student_from_config(cfg, vocab, seed):
    return StudentModel(
        StudentConfig(
            vocab_size=vocab.n_content,
            d_model=cfg.d_model,
            n_layers=cfg.n_layers,
            max_seq_len=cfg.max_seq_len,
            byte_slots=cfg.byte_slots,
            byte_vocab=cfg.byte_vocab,
            seed=seed,
        ),
        vocab,
    )


def cmd_distill(args) -> int:
    cfg = load_config(args.config)
    if args.steps is not None:
        cfg.steps = args.steps
    if args.seed is not None:
        cfg.seed = args.seed
    student_vocab, _ = read_vocab_file(cfg.vocab)
    student_merges = read_merges_file(cfg.merges) if cfg.merges else []
    teacher_vocab, teacher_trie = (
        read_vocab_file(cfg.teacher_vocab) if cfg.teacher_vocab else (student_vocab, None)
    )
    teacher = load_teacher(cfg.teacher, teacher_vocab)
    samples = pipeline_mod.ingest(cfg.corpus).samples
    corpus = [tokenize(student_vocab, student_merges, s) for s in samples]
    student = _student_from_config(cfg, student_vocab, cfg.seed)
    if isinstance(teacher, StudentModel):
        student.params["embed"].data[:-1] = distill_mod.fvt_init(
            teacher.params["embed"].data[:-1], teacher_vocab, student_vocab, cfg.seed
        )

    use_bytes = cfg.lambda_byte > 0 or cfg.lambda_kl > 0
    targets_source = None
    if use_bytes:
        shard_paths = sorted(glob.glob(os.path.join(cfg.shards, "*.bldp"))) if cfg.shards else []
        if shard_paths:
            flat = pipeline_mod.load_shard_targets(shard_paths, teacher_vocab)

            def targets_source(idx):
                if idx not in flat:
                    raise OSError(f"sample {idx} missing from shards in {cfg.shards}")
                return distill_mod.build_byte_targets(
                    teacher, student_vocab, student_merges, samples[idx],
                    slots=cfg.byte_slots, flat_log_dists=flat[idx],
                )
        else:
            cache: dict[int, distill_mod.TeacherByteTargets] = {}

            def targets_source(idx):
                if idx not in cache:
                    cache[idx] = distill_mod.build_byte_targets(
                        teacher, student_vocab, student_merges, samples[idx],
                        K=cfg.k, epsilon=cfg.epsilon, slots=cfg.byte_slots,
                        teacher_trie=teacher_trie,
                    )
                return cache[idx]

    _, trace = distill_mod.train(student, corpus, targets_source, cfg.train_config())
    if cfg.checkpoint:
        save_checkpoint(student, cfg.checkpoint)
        print(f"checkpoint: {cfg.checkpoint}")
    if args.trace_out:
        distill_mod.write_metrics_trace(args.trace_out, trace)
        print(f"trace: {args.trace_out}")
    if trace:
        last = trace[-1]
        print(f"final step {last.step}: total={last.total:.6g} token_ce={last.token_ce:.6g}")
    else:
        print("0 steps requested; parameters unchanged")
    return 0


def cmd_byte_sft(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    vocab, _ = read_vocab_file(cfg.vocab)
    merges = read_merges_file(cfg.merges) if cfg.merges else []
    samples = pipeline_mod.ingest(cfg.corpus).samples
    corpus = [tokenize(vocab, merges, s) for s in samples]
    val = None
    if cfg.val_corpus:
        val = [tokenize(vocab, merges, s) for s in pipeline_mod.ingest(cfg.val_corpus).samples]
    student = _student_from_config(cfg, vocab, cfg.seed)
    _, records = distill_mod.byte_only_sft(student, corpus, cfg.train_config(), val)
    print(report_mod.sft_table(records), end="")
    if cfg.reports:
        for path in report_mod.emit_sft_report(records, cfg.reports):
            print(f"wrote {path}")
    if cfg.checkpoint:
        save_checkpoint(student, cfg.checkpoint)
    return 0


def cmd_naive_ctd(args) -> int:
    student_vocab, _ = load_vocab(args.vocab)
    teacher_vocab, teacher_trie = load_vocab(args.teacher_vocab)
    teacher = load_teacher(_resolve_teacher(args.teacher, args.teacher_vocab), teacher_vocab)
    merges = read_merges_file(args.merges) if args.merges else []
    data = args.input.encode("utf-8")
    token_prefix = tokenize(student_vocab, merges, data)

    lat_cache: dict[bytes, np.ndarray] = {}

    def byte_dists(ctx: bytes) -> np.ndarray:
        if ctx not in lat_cache:
            lat = beam_mod.beam_init(teacher, args.k, args.eps, trie=teacher_trie)
            for b in ctx:
                lat = beam_mod.advance(lat, b)
            lat_cache[ctx] = np.exp(beam_mod.logp_next(lat))
        return lat_cache[ctx]

    probs, mass = distill_mod.naive_ctd_token_probs(byte_dists, student_vocab, token_prefix)
    order = np.argsort(-probs)[: args.top]
    for tid in order:
        print(f"{tid}\t{student_vocab.entries[tid]!r}\t{probs[tid]:.6g}")
    print(f"# diagnostic mass over V_S: {mass:.6g} "
          f"(byte chains overlap; this need not be 1)")
    return 0


def cmd_report(args) -> int:
    wrote = []
    if args.sweep:
        report = beam_mod.read_sweep_report(args.sweep)
        wrote += report_mod.emit_sweep_report(report, args.out)
    if args.trace:
        trace = distill_mod.read_metrics_trace(args.trace)
        wrote += report_mod.emit_training_report(trace, args.out)
    if not wrote:
        raise ValueError("nothing to report: pass --sweep and/or --trace")
    for path in wrote:
        print(f"wrote {path}")
    return 0


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bld", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("vocab", help="vocabulary utilities")
    vsub = p.add_subparsers(dest="vocab_command", required=True)
    pb = vsub.add_parser("build", help="build a byte-complete vocabulary file")
    pb.add_argument("--tokens", required=True, help="text file, one token per line")
    pb.add_argument("--merges-text", help="text file, one 'left right' merge per line")
    pb.add_argument("--out", required=True)
    pb.add_argument("--merges-out")
    pb.add_argument("--seed", type=int, default=0)
    pb.set_defaults(func=cmd_vocab_build, stage="vocab build")

    p = sub.add_parser("tokenize", help="tokenize UTF-8 text")
    p.add_argument("--vocab", required=True)
    p.add_argument("--merges")
    p.add_argument("--input", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_tokenize, stage="tokenize")

    p = sub.add_parser("byteprobs", help="byte-level probability queries")
    bsub = p.add_subparsers(dest="byteprobs_command", required=True)
    pe = bsub.add_parser("exact", help="exact conditionals by covering enumeration")
    pe.add_argument("--vocab", required=True)
    pe.add_argument("--teacher", default="uniform")
    pe.add_argument("--input", required=True)
    pe.add_argument("--cap", type=int, default=10_000)
    pe.add_argument("--seed", type=int, default=0)
    pe.set_defaults(func=cmd_byteprobs_exact, stage="byteprobs exact")
    pm = bsub.add_parser("beam", help="beam-approximated conditionals")
    pm.add_argument("--vocab", required=True)
    pm.add_argument("--teacher", default="uniform")
    pm.add_argument("--input", required=True)
    pm.add_argument("--k", type=int, default=10)
    pm.add_argument("--eps", type=float, default=0.01)
    pm.add_argument("--seed", type=int, default=0)
    pm.set_defaults(func=cmd_byteprobs_beam, stage="byteprobs beam")

    p = sub.add_parser("sweep", help="K/epsilon accuracy and runtime sweep")
    p.add_argument("--vocab", required=True)
    p.add_argument("--teacher", default="uniform")
    p.add_argument("--corpus", required=True)
    p.add_argument("--k", required=True, help="comma-separated beam widths")
    p.add_argument("--eps", required=True, help="comma-separated pruning thresholds")
    p.add_argument("--ref-k", type=int, default=100)
    p.add_argument("--ref-eps", type=float, default=1e-6)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sweep, stage="sweep")

    p = sub.add_parser("precompute", help="precompute teacher byte log-probs into shards")
    p.add_argument("--vocab", required=True)
    p.add_argument("--teacher", default="uniform")
    p.add_argument("--corpus", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--eps", type=float, default=0.01)
    p.add_argument("--n-shards", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_precompute, stage="precompute")

    p = sub.add_parser("distill", help="train a student with the combined loss")
    p.add_argument("--config", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--trace-out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_distill, stage="distill")

    p = sub.add_parser("byte-sft", help="byte-level-only supervised fine-tuning")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_byte_sft, stage="byte-sft")

    p = sub.add_parser("naive-ctd", help="byte-chain token probability reconstruction")
    p.add_argument("--vocab", required=True, help="student vocabulary")
    p.add_argument("--merges")
    p.add_argument("--teacher", default="uniform")
    p.add_argument("--teacher-vocab", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--eps", type=float, default=0.01)
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_naive_ctd, stage="naive-ctd")

    p = sub.add_parser("report", help="render tables and figures")
    p.add_argument("--sweep")
    p.add_argument("--trace")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_report, stage="report")

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error in {args.stage}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
