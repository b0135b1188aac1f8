import pytest

from bld.tokenizer import (
    VocabularyError,
    VocabTrie,
    build_vocab,
    decode,
    extensions,
    read_merges_file,
    read_vocab_file,
    tokenize,
    vocab_fingerprint,
    write_merges_file,
    write_vocab_file,
)


def test_build_vocab_injects_singles():
    vocab, _ = build_vocab([b"a", b"b"], [])
    # 2 user tokens, 254 injected singles, eos on top
    assert vocab.n_content == 256
    assert vocab.eos_id == 256
    for b in range(256):
        assert bytes([b]) in vocab.index


def test_build_vocab_rejects_duplicates_and_bad_merges():
    with pytest.raises(VocabularyError):
        build_vocab([b"a", b"a"], [])
    with pytest.raises(VocabularyError):
        build_vocab([b"a"], [(b"a", b"zz")])
    with pytest.raises(VocabularyError):
        # merge result absent from the vocabulary
        build_vocab([b"a", b"b"], [(b"a", b"b")])
    with pytest.raises(VocabularyError):
        build_vocab([], [])


def test_tokenize_roundtrip_exact():
    vocab, _ = build_vocab([b"ab", b"abc"], [(b"a", b"b"), (b"ab", b"c")])
    for data in (b"abcab", b"", b"xyz", bytes(range(256)), "héllo".encode()):
        toks = tokenize(vocab, [(b"a", b"b"), (b"ab", b"c")], data)
        assert decode(vocab, toks) == data


def test_tokenize_merge_priority():
    merges = [(b"a", b"b"), (b"ab", b"c")]
    vocab, _ = build_vocab([b"ab", b"abc"], merges)
    toks = tokenize(vocab, merges, b"abcab")
    assert [vocab.entries[t] for t in toks] == [b"abc", b"ab"]


def test_tokenize_without_merges_is_bytes():
    vocab, _ = build_vocab([b"ab"], [])
    toks = tokenize(vocab, [], b"ab")
    assert [vocab.entries[t] for t in toks] == [b"a", b"b"]


def test_decode_unknown_id():
    vocab, _ = build_vocab([b"a"], [])
    with pytest.raises(KeyError):
        decode(vocab, [vocab.eos_id])


def test_trie_walk_and_subtrees():
    vocab, trie = build_vocab([b"ab", b"abc", b"ad"], [])
    node = trie.walk(b"ab")
    assert node is not None
    assert node.token_id == vocab.index[b"ab"]
    assert set(node.subtree_ids) == {vocab.index[b"ab"], vocab.index[b"abc"]}
    assert trie.walk(b"ab\x00") is None
    # root subtree holds every token
    assert len(trie.root.subtree_ids) == vocab.n_content


def test_extensions():
    vocab, trie = build_vocab([b"ab", b"abc"], [])
    exts = extensions(trie, b"a")
    byte_strings = {vocab.entries[t]: suffix for t, suffix in exts}
    assert byte_strings == {b"a": b"", b"ab": b"b", b"abc": b"bc"}
    assert extensions(trie, b"a\xff") == []
    # full-vocabulary case: single-byte partial that is itself a token
    assert (vocab.index[b"z"], b"") in extensions(trie, b"z")


def test_vocab_file_roundtrip(tmp_path):
    vocab, _ = build_vocab([b"ab", b"\xff\x00"], [])
    path = tmp_path / "vocab.tsv"
    write_vocab_file(path, vocab)
    loaded, _ = read_vocab_file(path)
    assert loaded.entries == vocab.entries
    assert vocab_fingerprint(loaded) == vocab_fingerprint(vocab)


def test_vocab_file_rejects_non_dense_ids(tmp_path):
    path = tmp_path / "vocab.tsv"
    path.write_text("0\t61\n2\t62\n")
    with pytest.raises(VocabularyError):
        read_vocab_file(path)


def test_merges_file_roundtrip(tmp_path):
    merges = [(b"a", b"b"), (b"ab", b"\x00")]
    path = tmp_path / "merges.txt"
    write_merges_file(path, merges)
    assert read_merges_file(path) == merges


def test_fingerprint_distinguishes_vocabs():
    v1, _ = build_vocab([b"ab"], [])
    v2, _ = build_vocab([b"ba"], [])
    assert vocab_fingerprint(v1) != vocab_fingerprint(v2)
