"""Training-side mathematics for byte-level distillation.

Covers same-tokenizer KD, the naive byte-to-token reconstruction, the
combined byte-level distillation loss (token CE + per-byte CE + per-byte
KL against teacher byte conditionals), FVT embedding initialization,
AdamW training with cosine schedule, and the byte-only SFT experiment.

Alignment convention: for a sequence of student tokens t_1..t_k the
model input is [start] + t_1..t_{k-1} (the eos id doubles as the start
marker), so output position l (0-based) predicts token t_{l+1} and its
first bytes. The teacher's byte distributions are 257-way (256 bytes +
eos); they map onto the student's 260-way head at the byte slots plus
the eos special, with the other specials masked out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .autograd import Tensor, log_softmax
from .beam import advance, beam_init, logp_next
from .models import BYTE_EOS, BYTE_PAD, LanguageModel, NonFiniteLossError, StudentModel
from .tokenizer import MergeRules, Vocabulary, VocabTrie, decode, tokenize

__all__ = [
    "LossWeights",
    "LossBreakdown",
    "SupervisionTargets",
    "TeacherByteTargets",
    "make_supervision",
    "build_byte_targets",
    "standard_kd_loss",
    "bld_loss",
    "naive_ctd_token_probs",
    "fvt_init",
    "TrainConfig",
    "TrainRecord",
    "AdamW",
    "train",
    "evaluate_ces",
    "SftEpochRecord",
    "byte_only_sft",
    "write_metrics_trace",
    "read_metrics_trace",
]

# teacher 257-way slot -> student 260-way slot (bytes map to themselves)
_TEACHER_TO_STUDENT = np.concatenate([np.arange(256), [BYTE_EOS]])


@dataclass(frozen=True)
class LossWeights:
    lambda_kl: float = 0.1
    lambda_byte: float = 1.0
    lambda_token: float = 1.0

    def __post_init__(self):
        for name in ("lambda_kl", "lambda_byte", "lambda_token"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


@dataclass
class LossBreakdown:
    """Unweighted loss components plus the weighted total.

    For ``standard_kd_loss`` the (token-level) KL is carried in the
    ``byte_kl`` slot, the only KL slot in the breakdown.
    """

    token_ce: float
    byte_ce: float
    byte_kl: float
    total: float
    loss: Tensor | None = field(default=None, compare=False, repr=False)


@dataclass
class SupervisionTargets:
    """Hard targets for one sequence: token ids (k,), byte ids (k, slots),
    and the mask marking byte slots beyond a token's length or the slot cap."""

    token_ids: np.ndarray
    byte_ids: np.ndarray
    byte_mask: np.ndarray
    byte_lengths: np.ndarray  # full byte length of each target token


@dataclass
class TeacherByteTargets:
    """Teacher byte conditionals re-indexed to (token position, byte slot).

    ``dists`` has shape (k, slots, 257); ``mask`` marks slots carrying a
    real target.
    """

    dists: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        sums = self.dists[self.mask].sum(axis=-1)
        if sums.size and np.max(np.abs(sums - 1.0)) > 1e-6:
            raise ValueError("unmasked teacher byte distributions are not normalized")


def make_supervision(vocab: Vocabulary, tokens: list[int], slots: int = 10) -> SupervisionTargets:
    k = len(tokens)
    token_ids = np.asarray(tokens, dtype=np.int64)
    byte_ids = np.full((k, slots), BYTE_PAD, dtype=np.int64)
    mask = np.zeros((k, slots), dtype=bool)
    lengths = np.zeros(k, dtype=np.int64)
    for l, tid in enumerate(tokens):
        bs = vocab.entries[tid]
        lengths[l] = len(bs)
        for j, byte in enumerate(bs[:slots]):
            byte_ids[l, j] = byte
            mask[l, j] = True
    return SupervisionTargets(token_ids, byte_ids, mask, lengths)


def build_byte_targets(
    teacher: LanguageModel,
    student_vocab: Vocabulary,
    student_merges: MergeRules,
    b: bytes,
    K: int = 10,
    epsilon: float = 0.01,
    slots: int = 10,
    teacher_trie: VocabTrie | None = None,
    flat_log_dists: np.ndarray | None = None,
) -> TeacherByteTargets:
    """Teacher byte conditionals for ``b`` under the student's segmentation.

    The flat per-byte conditional stream comes from the beam lattice
    (or from ``flat_log_dists``, e.g. a precomputed shard record) and is
    re-indexed to (token, slot); slots beyond ``slots`` are masked.
    """
    tokens = tokenize(student_vocab, student_merges, b)
    if flat_log_dists is None:
        lat = beam_init(teacher, K, epsilon, trie=teacher_trie)
        flat = np.empty((len(b), 257))
        for i, byte in enumerate(b):
            flat[i] = np.exp(logp_next(lat))
            lat = advance(lat, byte)
    else:
        if flat_log_dists.shape != (len(b), 257):
            raise ValueError(
                f"flat distributions have shape {flat_log_dists.shape}, "
                f"expected {(len(b), 257)}"
            )
        flat = np.exp(np.asarray(flat_log_dists, dtype=np.float64))
    k = len(tokens)
    dists = np.zeros((k, slots, 257))
    mask = np.zeros((k, slots), dtype=bool)
    offset = 0
    for l, tid in enumerate(tokens):
        n = len(student_vocab.entries[tid])
        for j in range(min(n, slots)):
            dists[l, j] = flat[offset + j]
            mask[l, j] = True
        offset += n
    return TeacherByteTargets(dists, mask)


# --- losses ---------------------------------------------------------------


def _token_ce_tensor(token_logits: Tensor, token_ids: np.ndarray) -> Tensor:
    k, width = token_logits.shape
    lp = log_softmax(token_logits, axis=-1)
    onehot = np.zeros((k, width))
    onehot[np.arange(k), token_ids] = 1.0
    return -(lp * Tensor(onehot)).sum() * (1.0 / k)


def _byte_terms_tensor(
    byte_logits: Tensor,
    sup: SupervisionTargets,
    teacher: TeacherByteTargets | None,
) -> tuple[Tensor, Tensor]:
    """Per-sequence byte CE and byte KL, each (1/k) sum_l (1/n_l) sum_j."""
    k, slots, width = byte_logits.shape
    lp = log_softmax(byte_logits, axis=-1)
    inv_n = np.where(sup.byte_lengths > 0, 1.0 / np.maximum(sup.byte_lengths, 1), 0.0)
    slot_w = sup.byte_mask * inv_n[:, None]  # (k, slots)

    ce_weights = np.zeros((k, slots, width))
    rows, cols = np.nonzero(sup.byte_mask)
    ce_weights[rows, cols, sup.byte_ids[rows, cols]] = slot_w[rows, cols]
    byte_ce = -(lp * Tensor(ce_weights)).sum() * (1.0 / k)

    if teacher is None:
        return byte_ce, Tensor(0.0)
    if teacher.dists.shape[:2] != (k, slots):
        raise ValueError("teacher byte targets are not aligned with the student outputs")
    kl_mask = sup.byte_mask & teacher.mask
    w = (kl_mask * inv_n[:, None])[:, :, None]  # (k, slots, 1)
    p = teacher.dists
    plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    # student log-probs at the 257 teacher-visible slots
    scatter = np.zeros((width, 257))
    scatter[_TEACHER_TO_STUDENT, np.arange(257)] = 1.0
    lq = lp @ Tensor(scatter)  # (k, slots, 257)
    byte_kl = ((Tensor(w * plogp) - lq * Tensor(w * p)).sum()) * (1.0 / k)
    return byte_ce, byte_kl


def bld_loss(
    student_outputs: tuple[Tensor, Tensor | None],
    targets: SupervisionTargets,
    teacher_targets: TeacherByteTargets | None,
    w: LossWeights = LossWeights(),
) -> LossBreakdown:
    """Combined loss for one sequence (Eq-style: token CE plus length-
    normalized byte CE and teacher-first byte KL), as a differentiable
    breakdown."""
    token_logits, byte_logits = student_outputs
    token_ce = _token_ce_tensor(token_logits, targets.token_ids)
    if byte_logits is not None and (w.lambda_byte > 0 or w.lambda_kl > 0):
        byte_ce, byte_kl = _byte_terms_tensor(byte_logits, targets, teacher_targets)
    else:
        byte_ce, byte_kl = Tensor(0.0), Tensor(0.0)
    total = token_ce * w.lambda_token + byte_ce * w.lambda_byte + byte_kl * w.lambda_kl
    for name, t in (("token_ce", token_ce), ("byte_ce", byte_ce), ("byte_kl", byte_kl)):
        if not np.isfinite(t.data):
            raise NonFiniteLossError(f"non-finite {name} term")
    return LossBreakdown(
        token_ce=float(token_ce.data),
        byte_ce=float(byte_ce.data),
        byte_kl=float(byte_kl.data),
        total=float(total.data),
        loss=total,
    )


def standard_kd_loss(
    teacher: LanguageModel,
    student: StudentModel,
    batch: list[list[int]],
    w: LossWeights = LossWeights(lambda_kl=1.0, lambda_byte=0.0, lambda_token=1.0),
) -> LossBreakdown:
    """Same-tokenizer distillation: per sequence, the position-mean of
    next-token CE plus token-level KL(teacher || student), summed over
    the batch. Teacher and student must share a vocabulary."""
    if student.vocab is None or teacher.vocab.entries != student.vocab.entries:
        raise ValueError(
            "standard KD requires teacher and student to share a vocabulary "
            "(this is exactly the limitation byte-level distillation removes)"
        )
    bos = student.config.vocab_size
    ce_total = Tensor(0.0)
    kl_total = Tensor(0.0)
    for seq in batch:
        if not seq:
            raise ValueError("empty sequence in batch")
        k = len(seq)
        token_logits, _ = student.forward([bos, *seq[:-1]])
        lp = log_softmax(token_logits, axis=-1)
        onehot = np.zeros((k, student.config.vocab_size + 1))
        onehot[np.arange(k), seq] = 1.0
        ce_total = ce_total + (-(lp * Tensor(onehot)).sum() * (1.0 / k))
        p = np.stack([teacher.next_token_dist(tuple(seq[:j])) for j in range(k)])
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
        kl_total = kl_total + ((Tensor(plogp) - lp * Tensor(p)).sum() * (1.0 / k))
    total = ce_total * w.lambda_token + kl_total * w.lambda_kl
    return LossBreakdown(
        token_ce=float(ce_total.data),
        byte_ce=0.0,
        byte_kl=float(kl_total.data),
        total=float(total.data),
        loss=total,
    )


def naive_ctd_token_probs(
    teacher_byte_dists,
    student_vocab: Vocabulary,
    token_prefix: list[int],
) -> tuple[np.ndarray, float]:
    """Byte-chain reconstruction of per-token probabilities.

    ``teacher_byte_dists`` maps a byte context to a 257-way next-byte
    distribution. Each student token's probability is the product of
    teacher byte conditionals along its bytes, costing
    O(|V_S| * max token byte length) distribution queries per position.
    Returns (probabilities over content tokens, their sum): byte chains
    of overlapping tokens share mass, so the sum is a diagnostic, not 1.
    """
    context = decode(student_vocab, token_prefix)
    cache: dict[bytes, np.ndarray] = {}

    def dist_at(ctx: bytes) -> np.ndarray:
        d = cache.get(ctx)
        if d is None:
            d = np.asarray(teacher_byte_dists(ctx), dtype=np.float64)
            if d.shape != (257,):
                raise ValueError("teacher byte distribution must be 257-way")
            cache[ctx] = d
        return d

    probs = np.zeros(student_vocab.n_content)
    for tid, bs in enumerate(student_vocab.entries):
        p = 1.0
        for j, byte in enumerate(bs):
            p *= dist_at(context + bs[:j])[byte]
            if p == 0.0:
                break
        probs[tid] = p
    return probs, float(probs.sum())


def fvt_init(
    source_embed: np.ndarray,
    source_vocab,
    target_vocab,
    seed: int,
) -> np.ndarray:
    """Fast Vocabulary Transfer embedding initialization.

    Shared byte strings copy their source row exactly; absent tokens are
    decomposed by greedy longest-match over the source inventory and set
    to the mean of the sub-token rows; undecomposable tokens get a
    seeded Gaussian draw matching the source matrix's per-dimension
    mean and standard deviation.
    """
    source_embed = np.asarray(source_embed, dtype=np.float64)
    if source_embed.ndim != 2 or source_embed.shape[0] == 0:
        raise ValueError("source embedding matrix is empty")
    src_index = source_vocab.index if isinstance(source_vocab, Vocabulary) else dict(source_vocab)
    if not src_index:
        raise ValueError("source vocabulary is empty")
    tgt_entries = (
        target_vocab.entries if isinstance(target_vocab, Vocabulary) else list(target_vocab)
    )
    max_len = max(len(bs) for bs in src_index)
    mean = source_embed.mean(axis=0)
    std = source_embed.std(axis=0)
    rng = np.random.default_rng(seed)

    def decompose(bs: bytes) -> list[int] | None:
        parts = []
        i = 0
        while i < len(bs):
            for ln in range(min(max_len, len(bs) - i), 0, -1):
                tid = src_index.get(bs[i : i + ln])
                if tid is not None:
                    parts.append(tid)
                    i += ln
                    break
            else:
                return None
        return parts

    out = np.empty((len(tgt_entries), source_embed.shape[1]))
    for row, bs in enumerate(tgt_entries):
        tid = src_index.get(bs)
        if tid is not None:
            out[row] = source_embed[tid]
            continue
        parts = decompose(bs)
        if parts is not None:
            out[row] = source_embed[parts].mean(axis=0)
        else:
            out[row] = rng.normal(mean, std)
    return out


# --- optimizer and training loops -------------------------------------------


@dataclass
class TrainConfig:
    steps: int | None = None  # cap on optimizer steps; None = full epochs
    epochs: int = 1
    batch_size: int = 8
    lr: float = 2e-5
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.95)
    clip_norm: float = 1.0
    warmup_steps: int = 100
    weights: LossWeights = field(default_factory=LossWeights)
    freeze: tuple[str, ...] = ()  # parameter-name prefixes kept fixed
    seed: int = 0
    shuffle: bool = True


@dataclass(frozen=True)
class TrainRecord:
    step: int
    token_ce: float
    byte_ce: float
    byte_kl: float
    total: float
    lr: float


class AdamW:
    """AdamW with decoupled weight decay and global-norm gradient clipping."""

    def __init__(self, model: StudentModel, config: TrainConfig, total_steps: int):
        self.model = model
        self.config = config
        self.total_steps = max(total_steps, 1)
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in model.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in model.params.items()}

    def lr_at(self, t: int) -> float:
        cfg = self.config
        warmup = min(cfg.warmup_steps, self.total_steps)
        if warmup > 0 and t < warmup:
            return cfg.lr * (t + 1) / warmup
        span = max(self.total_steps - warmup, 1)
        progress = min((t - warmup) / span, 1.0)
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))

    def _frozen(self, name: str) -> bool:
        return any(name.startswith(prefix) for prefix in self.config.freeze)

    def step(self, grads: dict[str, np.ndarray]) -> float:
        cfg = self.config
        lr = self.lr_at(self.t)
        active = [n for n in grads if not self._frozen(n)]
        norm = math.sqrt(sum(float((grads[n] ** 2).sum()) for n in active))
        scale = cfg.clip_norm / norm if cfg.clip_norm > 0 and norm > cfg.clip_norm else 1.0
        b1, b2 = cfg.betas
        self.t += 1
        for name in active:
            g = grads[name] * scale
            p = self.model.params[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / (1 - b1**self.t)
            vhat = self.v[name] / (1 - b2**self.t)
            p.data = p.data - lr * (mhat / (np.sqrt(vhat) + 1e-8) + cfg.weight_decay * p.data)
        return lr


def _sequence_loss(
    student: StudentModel,
    tokens: list[int],
    teacher_targets: TeacherByteTargets | None,
    weights: LossWeights,
) -> LossBreakdown:
    bos = student.config.vocab_size
    outputs = student.forward([bos, *tokens[:-1]])
    sup = make_supervision(student.vocab, tokens, slots=student.config.byte_slots)
    return bld_loss(outputs, sup, teacher_targets, weights)


def train(
    student: StudentModel,
    corpus: list[list[int]],
    teacher_targets_source,
    config: TrainConfig,
) -> tuple[StudentModel, list[TrainRecord]]:
    """Optimize the combined loss over ``corpus`` (token sequences).

    ``teacher_targets_source`` is None or a callable sample-index ->
    TeacherByteTargets (precomputed shards and on-the-fly construction
    both fit). Mutates and returns the student plus the metrics trace.
    Deterministic given the seed.
    """
    if student.vocab is None:
        raise ValueError("student has no vocabulary attached")
    rng = np.random.default_rng(config.seed)
    n_batches_per_epoch = max(1, math.ceil(len(corpus) / config.batch_size))
    total_steps = (
        config.steps if config.steps is not None else n_batches_per_epoch * config.epochs
    )
    optimizer = AdamW(student, config, total_steps)
    trace: list[TrainRecord] = []
    step = 0
    done = False
    for _ in range(config.epochs if config.steps is None else 10**9):
        order = np.arange(len(corpus))
        if config.shuffle:
            rng.shuffle(order)
        for start in range(0, len(order), config.batch_size):
            if step >= total_steps:
                done = True
                break
            batch_idx = order[start : start + config.batch_size]
            student.zero_grad()
            sums = np.zeros(4)
            loss = Tensor(0.0)
            for idx in batch_idx:
                tt = teacher_targets_source(int(idx)) if teacher_targets_source else None
                bd = _sequence_loss(student, corpus[int(idx)], tt, config.weights)
                sums += (bd.token_ce, bd.byte_ce, bd.byte_kl, bd.total)
                loss = loss + bd.loss
            if not np.isfinite(loss.data):
                raise NonFiniteLossError(f"diverging loss at step {step}", step)
            loss.backward()
            grads = {
                n: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for n, p in student.params.items()
            }
            lr = optimizer.step(grads)
            means = sums / len(batch_idx)
            trace.append(
                TrainRecord(step, float(means[0]), float(means[1]), float(means[2]),
                            float(means[3]), lr)
            )
            step += 1
        if done:
            break
    return student, trace


def evaluate_ces(student: StudentModel, corpus: list[list[int]]) -> tuple[float, float]:
    """Mean per-sequence token CE and byte CE over ``corpus`` (no grads)."""
    token_ces = []
    byte_ces = []
    for tokens in corpus:
        bd = _sequence_loss(student, tokens, None, LossWeights(0.0, 1.0, 1.0))
        token_ces.append(bd.token_ce)
        byte_ces.append(bd.byte_ce)
    return float(np.mean(token_ces)), float(np.mean(byte_ces))


@dataclass(frozen=True)
class SftEpochRecord:
    epoch: int
    train_byte_ce: float
    val_byte_ce: float
    train_token_ce: float
    val_token_ce: float


def byte_only_sft(
    student: StudentModel,
    corpus: list[list[int]],
    config: TrainConfig,
    val_corpus: list[list[int]] | None = None,
) -> tuple[StudentModel, list[SftEpochRecord]]:
    """Supervised fine-tuning with the byte CE term only.

    The token head stays frozen; backbone, embeddings and byte head are
    updated. Records train/validation byte and token CE per epoch (four
    curves), including the pre-training state as epoch 0.
    """
    if not student.config.byte_head:
        raise ValueError("byte-only SFT requires a student with a byte head")
    val = val_corpus if val_corpus is not None else corpus
    weights = LossWeights(lambda_kl=0.0, lambda_byte=1.0, lambda_token=0.0)
    cfg = replace(config, weights=weights, freeze=tuple(set(config.freeze) | {"token_head"}))
    rng = np.random.default_rng(cfg.seed)
    batches_per_epoch = max(1, math.ceil(len(corpus) / cfg.batch_size))
    optimizer = AdamW(student, cfg, batches_per_epoch * cfg.epochs)
    records = []

    def snapshot(epoch):
        tr_tok, tr_byte = evaluate_ces(student, corpus)
        va_tok, va_byte = evaluate_ces(student, val)
        records.append(SftEpochRecord(epoch, tr_byte, va_byte, tr_tok, va_tok))

    snapshot(0)
    for epoch in range(1, cfg.epochs + 1):
        order = np.arange(len(corpus))
        if cfg.shuffle:
            rng.shuffle(order)
        for start in range(0, len(order), cfg.batch_size):
            student.zero_grad()
            loss = Tensor(0.0)
            for idx in order[start : start + cfg.batch_size]:
                bd = _sequence_loss(student, corpus[int(idx)], None, weights)
                loss = loss + bd.loss
            if not np.isfinite(loss.data):
                raise NonFiniteLossError(f"diverging loss in epoch {epoch}")
            loss.backward()
            grads = {
                n: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for n, p in student.params.items()
            }
            optimizer.step(grads)
        snapshot(epoch)
    return student, records


# --- metrics trace files ------------------------------------------------------


def write_metrics_trace(path, trace: list[TrainRecord]) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("step\ttoken_ce\tbyte_ce\tbyte_kl\ttotal\tlr\n")
        for r in trace:
            fh.write(
                f"{r.step}\t{r.token_ce!r}\t{r.byte_ce!r}\t{r.byte_kl!r}\t"
                f"{r.total!r}\t{r.lr!r}\n"
            )


def read_metrics_trace(path) -> list[TrainRecord]:
    trace = []
    with open(path, encoding="ascii") as fh:
        header = fh.readline()
        if not header.startswith("step\t"):
            raise ValueError(f"{path} is not a metrics trace")
        for line in fh:
            step, tce, bce, bkl, total, lr = line.split("\t")
            trace.append(
                TrainRecord(int(step), float(tce), float(bce), float(bkl), float(total), float(lr))
            )
    return trace
