"""Corpus ingestion and sharded offline precompute of teacher byte
log-probabilities, with bit-exact shard persistence.

Shard format (all little-endian):
    magic "BLDP" | version u32 | vocab fingerprint (32 bytes) |
    K u32 | epsilon f64 | sample count u32 |
    per sample: sample id u32, byte length u32, (length x 257) float32
    log probabilities.

Shard contents depend only on the samples assigned to the shard, so the
output is byte-identical for any worker count. Per-sample beam failures
go to a sidecar ``<shard>.errors`` log instead of voiding the shard.
"""

from __future__ import annotations

import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .beam import AdvanceError, DegenerateLatticeError, advance, beam_init, logp_next
from .models import LanguageModel
from .tokenizer import Vocabulary, VocabTrie, vocab_fingerprint

__all__ = [
    "IngestResult",
    "EmptyCorpusError",
    "ingest",
    "ShardPlan",
    "make_shard_plan",
    "ProbShard",
    "ShardMagicError",
    "ShardVersionError",
    "ShardFingerprintError",
    "ShardTruncatedError",
    "write_shard",
    "read_shard",
    "precompute",
    "load_shard_targets",
]

SHARD_MAGIC = b"BLDP"
SHARD_VERSION = 1


class EmptyCorpusError(ValueError):
    """The corpus contains no usable samples."""


@dataclass
class IngestResult:
    samples: list[bytes]
    skipped: int


def ingest(corpus_path) -> IngestResult:
    """Read a line-delimited corpus; each line's UTF-8 text is the raw
    sample bytes. Empty lines are skipped and counted."""
    samples: list[bytes] = []
    skipped = 0
    with open(corpus_path, "rb") as fh:
        for line in fh:
            line = line.rstrip(b"\n").rstrip(b"\r")
            if not line:
                skipped += 1
                continue
            samples.append(line)
    if not samples:
        raise EmptyCorpusError(f"{corpus_path} holds no non-empty samples")
    return IngestResult(samples, skipped)


@dataclass(frozen=True)
class ShardPlan:
    """Contiguous assignment of sample indices to shards."""

    ranges: tuple[tuple[int, int], ...]  # [start, end) per shard
    workers: int = 1

    @property
    def n_shards(self) -> int:
        return len(self.ranges)


def make_shard_plan(n_samples: int, n_shards: int, workers: int = 1) -> ShardPlan:
    """Partition ``n_samples`` into ``n_shards`` near-equal contiguous ranges."""
    if n_samples <= 0 or n_shards <= 0 or workers <= 0:
        raise ValueError("n_samples, n_shards and workers must be positive")
    n_shards = min(n_shards, n_samples)
    base, extra = divmod(n_samples, n_shards)
    ranges = []
    start = 0
    for i in range(n_shards):
        size = base + (1 if i < extra else 0)
        ranges.append((start, start + size))
        start += size
    return ShardPlan(tuple(ranges), workers)


@dataclass
class ProbShard:
    """Teacher byte log-probabilities for one corpus partition."""

    fingerprint: bytes
    K: int
    epsilon: float
    sample_ids: list[int]
    records: list[np.ndarray]  # per sample: (byte length, 257) float32 log probs

    def __post_init__(self):
        if len(self.fingerprint) != 32:
            raise ValueError("fingerprint must be 32 bytes")
        for rec in self.records:
            if rec.ndim != 2 or rec.shape[1] != 257:
                raise ValueError("records must have shape (length, 257)")
            sums = np.exp(rec.astype(np.float64)).sum(axis=1)
            if sums.size and np.max(np.abs(sums - 1.0)) > 1e-6:
                raise ValueError("shard record rows do not normalize")


class ShardMagicError(ValueError):
    pass


class ShardVersionError(ValueError):
    pass


class ShardFingerprintError(ValueError):
    pass


class ShardTruncatedError(ValueError):
    def __init__(self, offset: int):
        super().__init__(f"shard file truncated at offset {offset}")
        self.offset = offset


def write_shard(path, shard: ProbShard) -> None:
    with open(path, "wb") as fh:
        fh.write(SHARD_MAGIC)
        fh.write(struct.pack("<I", SHARD_VERSION))
        fh.write(shard.fingerprint)
        fh.write(struct.pack("<IdI", shard.K, shard.epsilon, len(shard.records)))
        for sid, rec in zip(shard.sample_ids, shard.records):
            fh.write(struct.pack("<II", sid, rec.shape[0]))
            fh.write(rec.astype("<f4").tobytes())


def read_shard(path, vocab: Vocabulary | None = None) -> ProbShard:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != SHARD_MAGIC:
        raise ShardMagicError(f"bad shard magic {raw[:4]!r}")
    if len(raw) < 56:
        raise ShardTruncatedError(len(raw))
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != SHARD_VERSION:
        raise ShardVersionError(f"unsupported shard version {version}")
    fingerprint = raw[8:40]
    if vocab is not None and fingerprint != vocab_fingerprint(vocab):
        raise ShardFingerprintError("shard fingerprint does not match the supplied vocabulary")
    K, epsilon, count = struct.unpack_from("<IdI", raw, 40)
    offset = 56
    sample_ids: list[int] = []
    records: list[np.ndarray] = []
    for _ in range(count):
        if offset + 8 > len(raw):
            raise ShardTruncatedError(offset)
        sid, length = struct.unpack_from("<II", raw, offset)
        offset += 8
        size = length * 257 * 4
        if offset + size > len(raw):
            raise ShardTruncatedError(offset)
        rec = np.frombuffer(raw, dtype="<f4", count=length * 257, offset=offset).reshape(
            length, 257
        )
        sample_ids.append(sid)
        records.append(rec.copy())
        offset += size
    if offset != len(raw):
        raise ShardTruncatedError(offset)
    return ProbShard(fingerprint, K, epsilon, sample_ids, records)


def _sample_logprobs(model, trie, sample: bytes, K: int, epsilon: float, batch_size: int):
    lat = beam_init(model, K, epsilon, trie=trie, batch_size=batch_size)
    out = np.empty((len(sample), 257), dtype=np.float32)
    for i, byte in enumerate(sample):
        out[i] = logp_next(lat).astype(np.float32)
        lat = advance(lat, byte)
    return out


def _build_shard(args):
    model, samples, start, end, K, epsilon, batch_size, fingerprint = args
    trie = VocabTrie(model.vocab)
    sample_ids: list[int] = []
    records: list[np.ndarray] = []
    errors: list[tuple[int, str]] = []
    for sid in range(start, end):
        try:
            records.append(_sample_logprobs(model, trie, samples[sid - start], K, epsilon, batch_size))
            sample_ids.append(sid)
        except (DegenerateLatticeError, AdvanceError) as exc:
            errors.append((sid, str(exc)))
    return ProbShard(fingerprint, K, epsilon, sample_ids, records), errors


def precompute(
    corpus: list[bytes],
    teacher: LanguageModel,
    K: int,
    epsilon: float,
    plan: ShardPlan,
    out_dir,
    batch_size: int = 256,
) -> list[str]:
    """Write one shard file per plan range; returns the shard paths.

    Every sample gets the full sequence of next-byte log distributions
    from a fresh beam lattice advanced byte by byte.
    """
    import os

    os.makedirs(out_dir, exist_ok=True)
    fingerprint = vocab_fingerprint(teacher.vocab)
    jobs = [
        (teacher, corpus[start:end], start, end, K, epsilon, batch_size, fingerprint)
        for start, end in plan.ranges
    ]
    if plan.workers > 1:
        with ProcessPoolExecutor(max_workers=plan.workers) as pool:
            results = list(pool.map(_build_shard, jobs))
    else:
        results = [_build_shard(j) for j in jobs]
    paths = []
    for i, (shard, errors) in enumerate(results):
        path = os.path.join(out_dir, f"shard_{i:05d}.bldp")
        write_shard(path, shard)
        if errors:
            with open(path + ".errors", "w", encoding="utf-8") as fh:
                for sid, msg in errors:
                    fh.write(f"{sid}\t{msg}\n")
        paths.append(path)
    return paths


def load_shard_targets(paths, vocab: Vocabulary | None = None) -> dict[int, np.ndarray]:
    """Map sample id -> (length, 257) float log-prob array across shards.

    Records are stored as float32; each row is renormalized in float64 on
    the way out so downstream consumers see proper distributions.
    """
    out: dict[int, np.ndarray] = {}
    for path in paths:
        shard = read_shard(path, vocab)
        for sid, rec in zip(shard.sample_ids, shard.records):
            rec = rec.astype(np.float64)
            m = rec.max(axis=1, keepdims=True)
            rec -= m + np.log(np.exp(rec - m).sum(axis=1, keepdims=True))
            out[sid] = rec
    return out
