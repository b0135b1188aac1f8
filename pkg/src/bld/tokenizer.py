"""Byte-complete BPE tokenizer, decoder, and vocabulary trie.

Bytes are the only alphabet: there is no pre-tokenization or Unicode
normalization anywhere, so decode(tokenize(b)) == b holds exactly for
every byte string. A vocabulary always contains all 256 single-byte
tokens, which guarantees any input is tokenizable.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "VocabularyError",
    "Vocabulary",
    "MergeRules",
    "TrieNode",
    "VocabTrie",
    "build_vocab",
    "tokenize",
    "decode",
    "extensions",
    "read_vocab_file",
    "write_vocab_file",
    "read_merges_file",
    "write_merges_file",
    "vocab_fingerprint",
]


class VocabularyError(ValueError):
    """Raised for malformed vocabularies or merge rules."""


MergeRules = list[tuple[bytes, bytes]]


@dataclass(frozen=True)
class Vocabulary:
    """Dense token-id -> byte-string inventory, byte-complete by construction.

    Content token ids are 0..len(entries)-1; ``eos_id`` is the reserved
    end-of-sequence id (== len(entries)) with empty decode semantics.
    """

    entries: tuple[bytes, ...]
    index: dict[bytes, int] = field(repr=False)

    def __post_init__(self):
        seen = set()
        for i, bs in enumerate(self.entries):
            if not bs:
                raise VocabularyError(f"token {i} has an empty byte string")
            if bs in seen:
                raise VocabularyError(f"duplicate token byte string {bs!r}")
            seen.add(bs)
        for b in range(256):
            if bytes([b]) not in seen:
                raise VocabularyError(f"vocabulary is not byte-complete: missing byte {b}")

    @property
    def eos_id(self) -> int:
        return len(self.entries)

    @property
    def n_content(self) -> int:
        return len(self.entries)

    def __len__(self) -> int:
        return len(self.entries)


class TrieNode:
    """One node of the vocabulary trie.

    ``token_id`` is the token ending exactly here (or None);
    ``subtree_ids`` holds every token id ending at or below this node.
    """

    __slots__ = ("children", "token_id", "subtree_ids")

    def __init__(self):
        self.children: dict[int, TrieNode] = {}
        self.token_id: int | None = None
        self.subtree_ids: np.ndarray = np.empty(0, dtype=np.int64)


class VocabTrie:
    """Immutable prefix index over a vocabulary's byte strings."""

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab
        self.root = TrieNode()
        for tid, bs in enumerate(vocab.entries):
            node = self.root
            for b in bs:
                nxt = node.children.get(b)
                if nxt is None:
                    nxt = TrieNode()
                    node.children[b] = nxt
                node = nxt
            node.token_id = tid
        self._fill_subtrees(self.root)

    def _fill_subtrees(self, node: TrieNode) -> list[int]:
        ids = [] if node.token_id is None else [node.token_id]
        for child in node.children.values():
            ids.extend(self._fill_subtrees(child))
        ids.sort()
        node.subtree_ids = np.asarray(ids, dtype=np.int64)
        return ids

    def walk(self, prefix: bytes) -> TrieNode | None:
        """Node reached by following ``prefix`` from the root, or None."""
        node = self.root
        for b in prefix:
            node = node.children.get(b)
            if node is None:
                return None
        return node


def build_vocab(
    token_byte_strings: list[bytes], merges: MergeRules
) -> tuple[Vocabulary, VocabTrie]:
    """Build a byte-complete vocabulary and its trie.

    The 256 single-byte tokens are appended (after the user tokens) if
    absent; they carry no merge priority of their own, so user merges
    are never perturbed. Duplicate byte strings and merges referencing
    unknown tokens are construction errors.
    """
    if not token_byte_strings:
        raise VocabularyError("token list is empty")
    entries = list(token_byte_strings)
    seen = set()
    for bs in entries:
        if bs in seen:
            raise VocabularyError(f"duplicate token byte string {bs!r}")
        seen.add(bs)
    for b in range(256):
        single = bytes([b])
        if single not in seen:
            entries.append(single)
            seen.add(single)
    for left, right in merges:
        if left not in seen or right not in seen:
            raise VocabularyError(f"merge ({left!r}, {right!r}) references an unknown token")
        if left + right not in seen:
            raise VocabularyError(
                f"merge result {left + right!r} is not in the vocabulary"
            )
    vocab = Vocabulary(tuple(entries), {bs: i for i, bs in enumerate(entries)})
    return vocab, VocabTrie(vocab)


def tokenize(vocab: Vocabulary, merges: MergeRules, b: bytes) -> list[int]:
    """Deterministic greedy merge-order BPE segmentation of ``b``.

    Starts from single-byte pieces and applies each merge rule in
    priority order, replacing adjacent pairs left to right until the
    rule no longer applies.
    """
    parts = [bytes([x]) for x in b]
    for left, right in merges:
        i = 0
        out: list[bytes] = []
        while i < len(parts):
            if i + 1 < len(parts) and parts[i] == left and parts[i + 1] == right:
                out.append(left + right)
                i += 2
            else:
                out.append(parts[i])
                i += 1
        parts = out
    return [vocab.index[p] for p in parts]


def decode(vocab: Vocabulary, tokens: list[int]) -> bytes:
    """Concatenate the byte strings of ``tokens``."""
    out = bytearray()
    for tid in tokens:
        if not 0 <= tid < vocab.n_content:
            raise KeyError(f"unknown token id {tid}")
        out.extend(vocab.entries[tid])
    return bytes(out)


def extensions(trie: VocabTrie, partial: bytes) -> list[tuple[int, bytes]]:
    """All tokens whose decode has ``partial`` as a (possibly full) prefix.

    Returns (token id, unconsumed suffix) pairs sorted by token id.
    """
    node = trie.walk(partial)
    if node is None:
        return []
    found: list[tuple[int, bytes]] = []

    def visit(n: TrieNode, suffix: bytearray):
        if n.token_id is not None:
            found.append((n.token_id, bytes(suffix)))
        for b in sorted(n.children):
            suffix.append(b)
            visit(n.children[b], suffix)
            suffix.pop()

    visit(node, bytearray())
    found.sort()
    return found


# --- file formats -----------------------------------------------------------
# Vocabulary file: one `id<TAB>hex` line per token, in id order.
# Merges file: one `hexleft hexright` line per merge, in priority order.


def write_vocab_file(path, vocab: Vocabulary) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for i, bs in enumerate(vocab.entries):
            fh.write(f"{i}\t{bs.hex()}\n")


def read_vocab_file(path) -> tuple[Vocabulary, VocabTrie]:
    entries: list[bytes] = []
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh):
            line = line.rstrip("\n")
            if not line:
                continue
            ident, _, hexpart = line.partition("\t")
            if int(ident) != len(entries):
                raise VocabularyError(f"{path}:{lineno + 1}: non-dense token id {ident}")
            entries.append(bytes.fromhex(hexpart))
    vocab = Vocabulary(tuple(entries), {bs: i for i, bs in enumerate(entries)})
    return vocab, VocabTrie(vocab)


def write_merges_file(path, merges: MergeRules) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for left, right in merges:
            fh.write(f"{left.hex()} {right.hex()}\n")


def read_merges_file(path) -> MergeRules:
    merges: MergeRules = []
    with open(path, encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            left, _, right = line.partition(" ")
            merges.append((bytes.fromhex(left), bytes.fromhex(right)))
    return merges


def vocab_fingerprint(vocab: Vocabulary) -> bytes:
    """SHA-256 over the canonical vocabulary serialization (32 bytes)."""
    h = hashlib.sha256()
    for i, bs in enumerate(vocab.entries):
        h.update(f"{i}\t{bs.hex()}\n".encode("ascii"))
    return h.digest()
