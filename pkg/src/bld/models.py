"""Language models: abstract next-token interface, toy teachers, and the
trainable tiny student with a detachable 10-slot byte-level head.

Token distributions are length ``n_content + 1`` with the end-of-sequence
probability in the last slot. The student is a small causal self-attention
network built on the autograd module; its parameters live in float64 and
serialize as little-endian float32.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .autograd import Tensor, log_softmax
from .tokenizer import Vocabulary

__all__ = [
    "LanguageModel",
    "UniformLM",
    "BigramLM",
    "random_bigram_lm",
    "StudentConfig",
    "StudentModel",
    "NonFiniteLossError",
    "compute_gradients",
    "detach_byte_head",
    "save_checkpoint",
    "load_checkpoint",
    "BYTE_BOS",
    "BYTE_EOS",
    "BYTE_PAD",
    "BYTE_OOV",
]

# Special slots of the 260-way byte head vocabulary (256 raw bytes first).
BYTE_BOS = 256
BYTE_EOS = 257
BYTE_PAD = 258
BYTE_OOV = 259

CHECKPOINT_MAGIC = b"BLDM"
CHECKPOINT_VERSION = 1


class LanguageModel:
    """Deterministic next-token model over a byte-complete vocabulary."""

    vocab: Vocabulary

    def next_token_dist(self, prefix: tuple[int, ...]) -> np.ndarray:
        """Distribution over content tokens + eos given a token-id prefix."""
        raise NotImplementedError

    def next_token_dists(self, prefixes: list[tuple[int, ...]]) -> list[np.ndarray]:
        """Batched variant; the default just loops."""
        return [self.next_token_dist(p) for p in prefixes]


class UniformLM(LanguageModel):
    """Context-free model: uniform over content tokens, fixed eos weight.

    ``support`` optionally restricts the uniform mass to a subset of
    content token ids; everything outside it gets probability zero.
    """

    def __init__(self, vocab: Vocabulary, eos_weight: float = 0.0, support=None):
        if not 0.0 <= eos_weight <= 1.0:
            raise ValueError("eos_weight must be in [0, 1]")
        self.vocab = vocab
        n = vocab.n_content
        if support is None:
            support = range(n)
        ids = sorted(set(support))
        if not ids or ids[0] < 0 or ids[-1] >= n:
            raise ValueError("support must be a non-empty subset of content token ids")
        dist = np.zeros(n + 1)
        dist[ids] = (1.0 - eos_weight) / len(ids)
        dist[-1] = eos_weight
        self._dist = dist

    def next_token_dist(self, prefix) -> np.ndarray:
        for tid in prefix:
            if not 0 <= tid < self.vocab.n_content:
                raise KeyError(f"unknown token id {tid}")
        return self._dist.copy()


class BigramLM(LanguageModel):
    """Renormalized count table conditioned on the previous token.

    ``counts`` has shape (n_content + 1, n_content + 1): row index is the
    previous token (last row = sequence start), column index the next
    token (last column = eos). Additive smoothing keeps rows proper.
    """

    def __init__(self, vocab: Vocabulary, counts: np.ndarray, smoothing: float = 0.0):
        n = vocab.n_content
        counts = np.asarray(counts, dtype=np.float64)
        if counts.shape != (n + 1, n + 1):
            raise ValueError(f"counts must have shape {(n + 1, n + 1)}, got {counts.shape}")
        if np.any(counts < 0) or smoothing < 0:
            raise ValueError("counts and smoothing must be non-negative")
        self.vocab = vocab
        rows = counts + smoothing
        totals = rows.sum(axis=1, keepdims=True)
        # rows with zero mass fall back to uniform over content tokens
        fallback = np.full(n + 1, 1.0 / n)
        fallback[-1] = 0.0
        self._table = np.where(totals > 0, rows / np.where(totals > 0, totals, 1.0), fallback)

    @classmethod
    def from_corpus(cls, vocab: Vocabulary, sequences: list[list[int]], smoothing: float = 0.5):
        n = vocab.n_content
        counts = np.zeros((n + 1, n + 1))
        for seq in sequences:
            prev = n  # start row
            for tid in seq:
                counts[prev, tid] += 1
                prev = tid
            counts[prev, n] += 1  # eos column
        return cls(vocab, counts, smoothing=smoothing)

    def next_token_dist(self, prefix) -> np.ndarray:
        n = self.vocab.n_content
        prev = n if not prefix else prefix[-1]
        if not 0 <= prev < n + 1:
            raise KeyError(f"unknown token id {prev}")
        return self._table[prev].copy()


def random_bigram_lm(vocab: Vocabulary, seed: int, eos_scale: float = 0.2) -> BigramLM:
    """Seeded random teacher: positive bigram weights, damped eos column."""
    rng = np.random.default_rng(seed)
    n = vocab.n_content
    counts = rng.gamma(1.0, 1.0, size=(n + 1, n + 1)) + 1e-3
    counts[:, n] *= eos_scale
    return BigramLM(vocab, counts)


# --- student model -----------------------------------------------------------


@dataclass
class StudentConfig:
    vocab_size: int  # number of content tokens
    d_model: int = 64
    n_layers: int = 2
    max_seq_len: int = 128
    byte_slots: int = 10
    byte_vocab: int = 260
    ff_mult: int = 2
    byte_head: bool = True
    seed: int = 0


class StudentModel(LanguageModel):
    """Tiny causal self-attention LM with a parallel byte-level head.

    The embedding has ``vocab_size + 1`` rows: the extra row is the
    eos id, fed as the sequence-start marker so that position 0 can
    predict the first real token. The byte head is ``byte_slots``
    independent d -> byte_vocab projections; the 10 slots at position
    l-1 predict the first bytes of token l. Heads are mutually
    non-autoregressive.
    """

    def __init__(self, config: StudentConfig, vocab: Vocabulary | None = None):
        if vocab is not None and vocab.n_content != config.vocab_size:
            raise ValueError("vocab size mismatch between config and vocabulary")
        self.config = config
        self.vocab = vocab
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(config.seed)
        d = config.d_model
        scale = 1.0 / np.sqrt(d)

        def param(name, shape, s=scale):
            self.params[name] = Tensor(rng.normal(0.0, s, size=shape), requires_grad=True)

        param("embed", (config.vocab_size + 1, d), 0.1)
        param("pos", (config.max_seq_len, d), 0.1)
        for i in range(config.n_layers):
            for w in ("wq", "wk", "wv", "wo"):
                param(f"layer{i}.{w}", (d, d))
            param(f"layer{i}.w1", (d, d * config.ff_mult))
            param(f"layer{i}.w2", (d * config.ff_mult, d))
        param("token_head", (d, config.vocab_size + 1))
        if config.byte_head:
            param("byte_head", (config.byte_slots, d, config.byte_vocab))

    # parameter order is the declaration order above, stable across runs
    def param_names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def forward(self, tokens) -> tuple[Tensor, Tensor | None]:
        """Causal forward pass.

        Returns token logits (N, vocab_size + 1) and, when the byte head
        is attached, byte logits (N, byte_slots, byte_vocab).
        """
        tokens = list(tokens)
        if not tokens:
            raise ValueError("token sequence is empty")
        n = len(tokens)
        if n > self.config.max_seq_len:
            raise ValueError(
                f"sequence length {n} exceeds max_seq_len={self.config.max_seq_len}"
            )
        for tid in tokens:
            if not 0 <= tid <= self.config.vocab_size:
                raise KeyError(f"unknown token id {tid}")
        d = self.config.d_model
        x = self.params["embed"].take_rows(tokens) + self.params["pos"][:n]
        mask = np.where(np.tril(np.ones((n, n), dtype=bool)), 0.0, -np.inf)
        for i in range(self.config.n_layers):
            q = x @ self.params[f"layer{i}.wq"]
            k = x @ self.params[f"layer{i}.wk"]
            v = x @ self.params[f"layer{i}.wv"]
            scores = (q @ k.transpose()) * (1.0 / np.sqrt(d)) + Tensor(mask)
            attn = log_softmax(scores, axis=-1).exp()
            x = x + (attn @ v) @ self.params[f"layer{i}.wo"]
            h = (x @ self.params[f"layer{i}.w1"]).tanh()
            x = x + h @ self.params[f"layer{i}.w2"]
        token_logits = x @ self.params["token_head"]
        byte_logits = None
        if self.config.byte_head:
            # (N, d) x (slots, d, bytes) -> (N, slots, bytes)
            bh = self.params["byte_head"]
            byte_logits = (x @ bh).transpose(1, 0, 2)
        return token_logits, byte_logits

    # --- LanguageModel interface ---------------------------------------------

    def next_token_dist(self, prefix) -> np.ndarray:
        bos = self.config.vocab_size
        token_logits, _ = self.forward([bos, *prefix])
        logits = token_logits.data[-1]
        p = np.exp(logits - logits.max())
        return p / p.sum()

    # --- parameter vector helpers (finite differences, optimizers) -----------

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.params.values()])

    def set_flat_params(self, flat: np.ndarray):
        offset = 0
        for p in self.params.values():
            size = p.data.size
            p.data = flat[offset : offset + size].reshape(p.data.shape).copy()
            offset += size
        if offset != flat.size:
            raise ValueError("flat parameter vector has the wrong size")

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())


class NonFiniteLossError(RuntimeError):
    def __init__(self, message, batch_index=None):
        super().__init__(message)
        self.batch_index = batch_index


def compute_gradients(model: StudentModel, loss_fn, batch) -> dict[str, np.ndarray]:
    """Gradients of the scalar ``loss_fn(model, batch)`` for every parameter.

    Parameters not touched by the loss get zero gradients.
    """
    model.zero_grad()
    loss = loss_fn(model, batch)
    value = float(loss.data)
    if not np.isfinite(value):
        bad = None
        if isinstance(batch, (list, tuple)):
            for i, item in enumerate(batch):
                try:
                    if not np.isfinite(float(loss_fn(model, [item]).data)):
                        bad = i
                        break
                except Exception:
                    bad = i
                    break
        raise NonFiniteLossError(f"non-finite loss {value} (batch index {bad})", bad)
    loss.backward()
    return {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in model.params.items()
    }


def detach_byte_head(model: StudentModel) -> StudentModel:
    """Copy of ``model`` without the byte head; token path is bit-identical."""
    cfg = StudentConfig(**{**asdict(model.config), "byte_head": False})
    out = StudentModel(cfg, model.vocab)
    for name, p in model.params.items():
        if name != "byte_head":
            out.params[name].data = p.data.copy()
    return out


# --- checkpoint format --------------------------------------------------------
# magic "BLDM" | version u32 LE | config-json length u32 LE | config json |
# parameter tensors in declaration order as little-endian float32.


def save_checkpoint(model: StudentModel, path) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg = json.dumps(asdict(model.config), sort_keys=True).encode("ascii")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    for p in model.params.values():
        buf.write(p.data.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, vocab: Vocabulary | None = None) -> StudentModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {raw[:4]!r}")
    version = struct.unpack_from("<I", raw, 4)[0]
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", raw, 8)
    cfg = StudentConfig(**json.loads(raw[12 : 12 + cfg_len].decode("ascii")))
    model = StudentModel(cfg, vocab)
    offset = 12 + cfg_len
    for p in model.params.values():
        size = p.data.size * 4
        if offset + size > len(raw):
            raise ValueError(f"truncated checkpoint at offset {offset}")
        p.data = (
            np.frombuffer(raw, dtype="<f4", count=p.data.size, offset=offset)
            .astype(np.float64)
            .reshape(p.data.shape)
        )
        offset += size
    if offset != len(raw):
        raise ValueError("trailing bytes in checkpoint")
    return model
