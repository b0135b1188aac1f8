"""Ground-truth byte probabilities by full marginalization over coverings.

A covering of a byte sequence b is a token sequence whose first m-1
tokens decode to a strict prefix of b and whose last token's decode has
the remaining suffix of b as a prefix (the unconsumed tail is the
overhang). The prefix probability of b is the covering-sum of token
conditional products; conditional next-byte probabilities follow by
division. Everything accumulates in the log domain.

This path is a correctness oracle, not a fast one: enumeration is
bounded by a feasibility cap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .models import LanguageModel
from .tokenizer import Vocabulary, VocabTrie, decode

__all__ = [
    "CoveringElement",
    "FeasibilityError",
    "ConditioningError",
    "enumerate_coverings",
    "exact_prefix_prob",
    "exact_next_byte_dist",
    "DistCache",
]

NEG_INF = float("-inf")


@dataclass(frozen=True)
class CoveringElement:
    tokens: tuple[int, ...]
    overhang: bytes


class FeasibilityError(RuntimeError):
    """Covering/path enumeration exceeded the feasibility cap."""

    def __init__(self, cap: int):
        super().__init__(f"covering enumeration exceeded cap of {cap}")
        self.cap = cap


class ConditioningError(ValueError):
    """Conditioning byte prefix has zero probability under the model."""


class DistCache:
    """Memoizes model.next_token_dist per token prefix within a computation."""

    def __init__(self, model: LanguageModel):
        self.model = model
        self._cache: dict[tuple[int, ...], np.ndarray] = {}

    def dist(self, prefix: tuple[int, ...]) -> np.ndarray:
        d = self._cache.get(prefix)
        if d is None:
            d = self.model.next_token_dist(prefix)
            self._cache[prefix] = d
        return d

    def log_path_prob(self, tokens: tuple[int, ...]) -> float:
        total = 0.0
        for j, tid in enumerate(tokens):
            p = self.dist(tokens[:j])[tid]
            if p <= 0.0:
                return NEG_INF
            total += math.log(p)
        return total


def enumerate_coverings(
    vocab: Vocabulary,
    b: bytes,
    cap: int = 10_000,
    trie: VocabTrie | None = None,
) -> list[CoveringElement]:
    """All coverings of ``b``, in canonical order.

    Canonical order: shorter last-token overhang first, then token-id
    order on the token sequence. Raises FeasibilityError beyond ``cap``.
    """
    if trie is None:
        trie = VocabTrie(vocab)
    if not b:
        return [CoveringElement((), b"")]

    memo: dict[int, list[tuple[tuple[int, ...], bytes]]] = {}

    def suffix_coverings(i: int) -> list[tuple[tuple[int, ...], bytes]]:
        got = memo.get(i)
        if got is not None:
            return got
        results: list[tuple[tuple[int, ...], bytes]] = []
        node = trie.root
        j = i
        # walk the trie along b[i:]; tokens ending inside b recurse,
        # any token passing beyond b's end closes a covering
        while j < len(b):
            node = node.children.get(b[j])
            if node is None:
                break
            j += 1
            if node.token_id is not None and j < len(b):
                for rest, overhang in suffix_coverings(j):
                    results.append(((node.token_id, *rest), overhang))
        else:
            if node is not trie.root or i == len(b):
                for tid, suffix in _tokens_below(trie, node):
                    results.append(((tid,), suffix))
        memo[i] = results
        if sum(len(m) for m in memo.values()) > cap:
            raise FeasibilityError(cap)
        return results

    coverings = [CoveringElement(tokens, overhang) for tokens, overhang in suffix_coverings(0)]
    coverings.sort(key=lambda c: (len(c.overhang), c.tokens))
    if len(coverings) > cap:
        raise FeasibilityError(cap)
    return coverings


def _tokens_below(trie: VocabTrie, node) -> list[tuple[int, bytes]]:
    """(token id, remaining suffix) for every token ending at or below node."""
    found: list[tuple[int, bytes]] = []

    def visit(n, suffix: bytearray):
        if n.token_id is not None:
            found.append((n.token_id, bytes(suffix)))
        for byte in sorted(n.children):
            suffix.append(byte)
            visit(n.children[byte], suffix)
            suffix.pop()

    visit(node, bytearray())
    return found


def exact_prefix_prob(
    model: LanguageModel,
    b: bytes,
    cap: int = 10_000,
    trie: VocabTrie | None = None,
    cache: DistCache | None = None,
) -> float:
    """log P(model generates ``b`` as a prefix), via the covering sum."""
    if cache is None:
        cache = DistCache(model)
    coverings = enumerate_coverings(model.vocab, b, cap=cap, trie=trie)
    log_terms = [cache.log_path_prob(c.tokens) for c in coverings]
    finite = [t for t in log_terms if t > NEG_INF]
    if not finite:
        return NEG_INF
    m = max(finite)
    return m + math.log(sum(math.exp(t - m) for t in finite))


def _exact_paths(
    model: LanguageModel, trie: VocabTrie, b: bytes, cap: int, cache: DistCache
) -> list[list[tuple[tuple[int, ...], float]]]:
    """Exact tokenizations of every prefix b[:i], with log path probabilities.

    paths[i] lists (token tuple, log prob) pairs whose decode equals b[:i].
    """
    paths: list[list[tuple[tuple[int, ...], float]]] = [[] for _ in range(len(b) + 1)]
    paths[0].append(((), 0.0))
    total = 1
    for i in range(len(b)):
        if not paths[i]:
            continue
        node = trie.root
        j = i
        while j < len(b):
            node = node.children.get(b[j])
            if node is None:
                break
            j += 1
            if node.token_id is not None:
                tid = node.token_id
                for tokens, logp in paths[i]:
                    if logp == NEG_INF:
                        continue
                    p = cache.dist(tokens)[tid]
                    if p <= 0.0:
                        continue
                    paths[j].append(((*tokens, tid), logp + math.log(p)))
                    total += 1
                    if total > cap:
                        raise FeasibilityError(cap)
    return paths


def exact_next_byte_dist(
    model: LanguageModel,
    prefix: bytes,
    cap: int = 10_000,
    trie: VocabTrie | None = None,
) -> np.ndarray:
    """Exact 257-way next-byte distribution (256 bytes + eos) after ``prefix``.

    Entry v equals P(prefix ++ v) / P(prefix); the eos slot is the
    probability that generation terminates exactly at the prefix end.
    """
    if trie is None:
        trie = VocabTrie(model.vocab)
    cache = DistCache(model)
    paths = _exact_paths(model, trie, prefix, cap, cache)
    eos_slot = model.vocab.eos_id

    # collect (scaled weight, contribution target) in probability domain,
    # shifted by the max log weight for stability
    all_logps = [lp for bucket in paths for _, lp in bucket if lp > NEG_INF]
    if not all_logps:
        raise ConditioningError(f"prefix {prefix!r} has zero probability")
    shift = max(all_logps)
    probs = np.zeros(257)
    for i in range(len(prefix) + 1):
        start_node = trie.walk(prefix[i:]) if i < len(prefix) else trie.root
        for tokens, logp in paths[i]:
            if logp == NEG_INF:
                continue
            w = math.exp(logp - shift)
            dist = cache.dist(tokens)
            if i == len(prefix):
                probs[256] += w * dist[eos_slot]
                node = trie.root
            else:
                if start_node is None:
                    continue
                node = start_node
            for byte, child in node.children.items():
                mass = dist[child.subtree_ids].sum()
                if mass > 0.0:
                    probs[byte] += w * mass
    total = probs.sum()
    if total <= 0.0:
        raise ConditioningError(f"prefix {prefix!r} has zero continuation probability")
    return probs / total
