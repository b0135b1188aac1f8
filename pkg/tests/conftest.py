"""Shared fixtures and independent oracles for the test suite.

The brute-force routines here deliberately avoid the library's covering
and lattice machinery: they enumerate token sequences directly, so they
can serve as ground truth for the fast implementations.
"""

from __future__ import annotations

import collections
import re
import sys

import numpy as np
import pytest

from bld.models import BigramLM, UniformLM
from bld.tokenizer import Vocabulary, build_vocab


# --- independent brute-force oracle -------------------------------------------


def brute_prefix_prob(model, b: bytes) -> float:
    """P(model's byte stream starts with b), by direct token recursion."""
    entries = model.vocab.entries

    def rec(tokens: tuple[int, ...], pos: int) -> float:
        if pos >= len(b):
            return 1.0
        rest = b[pos:]
        dist = model.next_token_dist(tokens)
        total = 0.0
        for tid, bs in enumerate(entries):
            p = dist[tid]
            if p <= 0.0:
                continue
            if rest.startswith(bs):
                total += p * rec((*tokens, tid), pos + len(bs))
            elif bs.startswith(rest):
                total += p
        return total

    return rec((), 0)


def brute_next_byte_dist(model, prefix: bytes) -> np.ndarray:
    """257-way conditional next-byte distribution by brute force."""
    entries = model.vocab.entries
    eos = model.vocab.eos_id

    def stop_prob(tokens: tuple[int, ...], pos: int) -> float:
        # P(token stream decodes to exactly prefix, then eos)
        if pos == len(prefix):
            return model.next_token_dist(tokens)[eos]
        rest = prefix[pos:]
        dist = model.next_token_dist(tokens)
        total = 0.0
        for tid, bs in enumerate(entries):
            if dist[tid] > 0.0 and rest.startswith(bs):
                total += dist[tid] * stop_prob((*tokens, tid), pos + len(bs))
        return total

    denom = brute_prefix_prob(model, prefix)
    if denom <= 0.0:
        raise ValueError("zero-probability prefix")
    out = np.zeros(257)
    for v in range(256):
        out[v] = brute_prefix_prob(model, prefix + bytes([v])) / denom
    out[256] = stop_prob((), 0) / denom
    return out


# --- corpus-driven merge learning ----------------------------------------------


def learn_merges(samples: list[bytes], n_merges: int):
    """Greedy BPE merge learning: repeatedly merge the most frequent
    adjacent piece pair. Returns (vocabulary, merge rules)."""
    corpus = [[bytes([x]) for x in s] for s in samples]
    merges = []
    for _ in range(n_merges):
        counts = collections.Counter()
        for parts in corpus:
            for a, b in zip(parts, parts[1:]):
                counts[(a, b)] += 1
        if not counts:
            break
        # deterministic tie-break on the pair bytes
        (left, right), freq = max(counts.items(), key=lambda kv: (kv[1], kv[0]))
        if freq < 2:
            break
        merges.append((left, right))
        merged = left + right
        for i, parts in enumerate(corpus):
            out = []
            j = 0
            while j < len(parts):
                if j + 1 < len(parts) and parts[j] == left and parts[j + 1] == right:
                    out.append(merged)
                    j += 2
                else:
                    out.append(parts[j])
                    j += 1
            corpus[i] = out
    tokens = [left + right for left, right in merges]
    vocab, trie = build_vocab(tokens if tokens else [b"\x00"], merges)
    return vocab, trie, merges


# --- random instances for beam-vs-exact checks ---------------------------------


def random_instance(seed: int, max_hyps: int = 64, max_len: int = 12):
    """Seeded (teacher, trie, byte sequence) whose unpruned lattice never
    holds more than ``max_hyps`` positive-mass hypotheses.

    The teacher is a random bigram over a small token support (one
    single-byte token plus random multi-byte tokens over a 3-letter
    alphabet); sequences are sampled from the teacher itself so every
    prefix has positive probability.
    """
    from bld.beam import advance, beam_init

    rng = np.random.default_rng(seed)
    alphabet = bytes(rng.choice(256, size=3, replace=False))
    pieces = {bytes([alphabet[0]])}
    while len(pieces) < int(rng.integers(6, 14)):
        ln = int(rng.integers(2, 5))
        pieces.add(bytes(rng.choice(list(alphabet), size=ln)))
    support_tokens = sorted(pieces)
    vocab, trie = build_vocab(support_tokens, [])
    n = vocab.n_content
    support = [vocab.index[t] for t in support_tokens]

    counts = np.zeros((n + 1, n + 1))
    rows = support + [n]
    cols = support + [n]
    for r in rows:
        counts[r, cols] = rng.gamma(1.0, 1.0, size=len(cols)) + 1e-3
        counts[r, n] *= 0.15  # damp eos
    teacher = BigramLM(vocab, counts)

    # sample a byte sequence from the teacher
    tokens: list[int] = []
    data = b""
    while len(data) < max_len:
        dist = teacher.next_token_dist(tuple(tokens))
        tid = int(rng.choice(n + 1, p=dist))
        if tid == n:
            break
        tokens.append(tid)
        data += vocab.entries[tid]
    data = data[:max_len]
    if not data:
        data = support_tokens[0]

    # trim until the unpruned lattice stays within max_hyps live hypotheses
    while True:
        lat = beam_init(teacher, 10**6, 0.0, trie=trie)
        ok = True
        for byte in data:
            lat = advance(lat, byte)
            alive = sum(1 for h in lat.hypotheses if h.log_weight > float("-inf"))
            if alive > max_hyps:
                ok = False
                break
        if ok:
            return teacher, trie, data
        data = data[:-1]


# --- fixtures -------------------------------------------------------------------


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the one-line-per-criterion acceptance results after the run."""
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None) if mod else None
    if not results:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    key = lambda line: int(re.search(r"criterion\s+(\d+)", line).group(1))
    for line in sorted(results, key=key):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def toy():
    """The {"a","b","ab"} vocabulary with the uniform-over-3 teacher."""
    vocab, trie = build_vocab([b"a", b"b", b"ab"], [])
    teacher = UniformLM(vocab, eos_weight=0.0, support=range(3))
    return vocab, trie, teacher


@pytest.fixture(scope="session")
def char_vocab():
    """Vocabulary of exactly the 256 single-byte tokens."""
    return build_vocab([b"\x00"], [])
