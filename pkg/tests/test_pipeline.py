import numpy as np
import pytest

from bld.models import UniformLM, random_bigram_lm
from bld.pipeline import (
    EmptyCorpusError,
    ProbShard,
    ShardFingerprintError,
    ShardMagicError,
    ShardTruncatedError,
    ShardVersionError,
    ingest,
    load_shard_targets,
    make_shard_plan,
    precompute,
    read_shard,
    write_shard,
)
from bld.tokenizer import build_vocab, vocab_fingerprint


@pytest.fixture(scope="module")
def setup():
    vocab, trie = build_vocab([b"ab", b"abc"], [])
    teacher = UniformLM(vocab, eos_weight=0.1)
    return vocab, trie, teacher


def test_ingest(tmp_path):
    path = tmp_path / "corpus.txt"
    path.write_bytes(b"abc\n\nxy\r\n\xff\xfe\n")
    result = ingest(path)
    assert result.samples == [b"abc", b"xy", b"\xff\xfe"]
    assert result.skipped == 1
    empty = tmp_path / "empty.txt"
    empty.write_bytes(b"\n\n")
    with pytest.raises(EmptyCorpusError):
        ingest(empty)


def test_make_shard_plan():
    plan = make_shard_plan(10, 3, workers=2)
    assert plan.ranges == ((0, 4), (4, 7), (7, 10))
    assert plan.workers == 2
    # more shards than samples collapses
    assert make_shard_plan(2, 5).n_shards == 2
    with pytest.raises(ValueError):
        make_shard_plan(0, 1)


def test_shard_roundtrip(tmp_path, setup):
    vocab, _, _ = setup
    fp = vocab_fingerprint(vocab)
    rec = np.log(np.full((3, 257), 1.0 / 257, dtype=np.float32))
    shard = ProbShard(fp, 8, 0.01, [0, 2], [rec, rec[:1]])
    path = tmp_path / "s.bldp"
    write_shard(path, shard)
    loaded = read_shard(path, vocab)
    assert loaded.K == 8 and loaded.epsilon == 0.01
    assert loaded.sample_ids == [0, 2]
    assert np.array_equal(loaded.records[0], rec)
    assert np.array_equal(loaded.records[1], rec[:1])


def test_shard_validation(setup):
    vocab, _, _ = setup
    fp = vocab_fingerprint(vocab)
    with pytest.raises(ValueError, match="fingerprint"):
        ProbShard(b"short", 8, 0.01, [], [])
    bad = np.zeros((1, 257), dtype=np.float32)  # exp sums to 257
    with pytest.raises(ValueError, match="normalize"):
        ProbShard(fp, 8, 0.01, [0], [bad])
    with pytest.raises(ValueError, match="shape"):
        ProbShard(fp, 8, 0.01, [0], [np.zeros((1, 5), dtype=np.float32)])


def test_shard_corruption_errors(tmp_path, setup):
    vocab, _, _ = setup
    fp = vocab_fingerprint(vocab)
    rec = np.log(np.full((2, 257), 1.0 / 257, dtype=np.float32))
    path = tmp_path / "s.bldp"
    write_shard(path, ProbShard(fp, 8, 0.01, [0], [rec]))
    raw = path.read_bytes()

    (tmp_path / "magic.bldp").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ShardMagicError):
        read_shard(tmp_path / "magic.bldp")

    (tmp_path / "ver.bldp").write_bytes(raw[:4] + b"\x63\x00\x00\x00" + raw[8:])
    with pytest.raises(ShardVersionError):
        read_shard(tmp_path / "ver.bldp")

    (tmp_path / "trunc.bldp").write_bytes(raw[:-10])
    with pytest.raises(ShardTruncatedError) as e:
        read_shard(tmp_path / "trunc.bldp")
    assert e.value.offset > 0

    (tmp_path / "trail.bldp").write_bytes(raw + b"\x00")
    with pytest.raises(ShardTruncatedError):
        read_shard(tmp_path / "trail.bldp")

    other, _ = build_vocab([b"zz"], [])
    with pytest.raises(ShardFingerprintError):
        read_shard(path, other)


def test_precompute_and_load(tmp_path, setup):
    vocab, trie, teacher = setup
    corpus = [b"ab", b"abc", b"abab", b"aa"]
    plan = make_shard_plan(len(corpus), 2, workers=1)
    paths = precompute(corpus, teacher, 16, 0.0, plan, tmp_path / "shards")
    assert len(paths) == 2
    targets = load_shard_targets(paths, vocab)
    assert set(targets) == {0, 1, 2, 3}
    for sid, sample in enumerate(corpus):
        assert targets[sid].shape == (len(sample), 257)
        sums = np.exp(targets[sid]).sum(axis=1)
        assert np.max(np.abs(sums - 1.0)) < 1e-6


def test_precompute_matches_direct_beam(tmp_path, setup):
    vocab, trie, teacher = setup
    from bld.beam import advance, beam_init, logp_next

    sample = b"abcab"
    paths = precompute([sample], teacher, 16, 0.0, make_shard_plan(1, 1), tmp_path / "s")
    rec = load_shard_targets(paths, vocab)[0]
    lat = beam_init(teacher, 16, 0.0, trie=trie)
    for i, byte in enumerate(sample):
        ref = logp_next(lat).astype(np.float32).astype(np.float64)
        ref -= ref.max() + np.log(np.exp(ref - ref.max()).sum())
        assert np.array_equal(rec[i], ref)
        lat = advance(lat, byte)


def test_precompute_worker_invariance(tmp_path, setup):
    vocab, _, teacher = setup
    corpus = [bytes(f"ab{'c' * (i % 3)}ab", "ascii") for i in range(10)]
    p1 = precompute(corpus, teacher, 8, 0.01, make_shard_plan(10, 4, workers=1), tmp_path / "w1")
    p4 = precompute(corpus, teacher, 8, 0.01, make_shard_plan(10, 4, workers=4), tmp_path / "w4")
    assert len(p1) == len(p4) == 4
    for a, b in zip(p1, p4):
        assert open(a, "rb").read() == open(b, "rb").read()


def test_precompute_error_sidecar(tmp_path, setup):
    vocab, _, teacher = setup
    # "zz" is unreachable under this vocab+teacher support? z is a single
    # byte token with positive mass, so use an unreachable byte pair via a
    # support-restricted teacher instead.
    from bld.models import UniformLM

    support_teacher = UniformLM(vocab, eos_weight=0.0, support=[vocab.index[b"ab"]])
    corpus = [b"ab", b"zz"]
    paths = precompute(corpus, support_teacher, 8, 0.0, make_shard_plan(2, 1), tmp_path / "e")
    shard = read_shard(paths[0], vocab)
    assert shard.sample_ids == [0]
    errors = open(paths[0] + ".errors").read()
    assert errors.startswith("1\t")
