"""Pruned lattice of tokenization hypotheses for fast byte-probability queries.

A hypothesis is a completed token path plus the bytes consumed into an
in-flight token. Advancing by a byte splits every hypothesis into a
continue-in-flight branch and, when the bytes complete a full token, a
token-boundary branch; pruning keeps hypotheses within epsilon of the
best and at most K of them. Renormalization happens only inside
``logp_next`` so pruning-induced mass leakage stays measurable.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from statistics import median

import numpy as np

from .models import LanguageModel
from .tokenizer import TrieNode, VocabTrie

__all__ = [
    "Hypothesis",
    "BeamLattice",
    "BeamConfigError",
    "DegenerateLatticeError",
    "AdvanceError",
    "beam_init",
    "logp_next",
    "advance",
    "prune",
    "extend_token_boundaries",
    "surviving_mass",
    "jsd",
    "SweepRow",
    "SweepReport",
    "sweep",
    "write_sweep_report",
    "read_sweep_report",
]

NEG_INF = float("-inf")


class BeamConfigError(ValueError):
    """Invalid beam parameters."""


class DegenerateLatticeError(RuntimeError):
    """All hypotheses carry zero probability mass."""


class AdvanceError(RuntimeError):
    def __init__(self, byte: int, position: int):
        super().__init__(f"byte {byte} at position {position} unreachable from every hypothesis")
        self.byte = byte
        self.position = position


@dataclass(frozen=True)
class Hypothesis:
    """One weighted partial-tokenization path.

    ``log_base`` is the log probability of the completed tokens alone;
    ``log_weight`` additionally folds in the mass of tokens strictly
    extending ``partial`` (so in-flight and boundary variants never
    overlap). ``dist`` is the cached next-token distribution at the
    boundary after ``completed``.
    """

    completed: tuple[int, ...]
    partial: bytes
    node: TrieNode | None = field(compare=False)
    log_base: float
    log_weight: float
    dist: np.ndarray = field(compare=False, repr=False)

    def key(self) -> tuple:
        return (self.completed, self.partial)


def _strict_ext_logmass(dist: np.ndarray, node: TrieNode) -> float:
    """log mass of tokens ending strictly below ``node``."""
    mass = dist[node.subtree_ids].sum()
    if node.token_id is not None:
        mass -= dist[node.token_id]
    return math.log(mass) if mass > 0.0 else NEG_INF


def _boundary_hyp(completed: tuple[int, ...], log_base: float, dist: np.ndarray) -> Hypothesis:
    return Hypothesis(completed, b"", None, log_base, log_base, dist)


def _inflight_hyp(
    completed: tuple[int, ...],
    partial: bytes,
    node: TrieNode,
    log_base: float,
    dist: np.ndarray,
) -> Hypothesis:
    return Hypothesis(
        completed, partial, node, log_base, log_base + _strict_ext_logmass(dist, node), dist
    )


@dataclass
class BeamLattice:
    hypotheses: list[Hypothesis]
    K: int
    epsilon: float
    model: LanguageModel
    trie: VocabTrie
    consumed: bytes = b""
    batch_size: int = 256

    def __eq__(self, other):
        if not isinstance(other, BeamLattice):
            return NotImplemented
        return (
            self.K == other.K
            and self.epsilon == other.epsilon
            and self.consumed == other.consumed
            and [
                (h.completed, h.partial, h.log_base, h.log_weight) for h in self.hypotheses
            ]
            == [
                (h.completed, h.partial, h.log_base, h.log_weight) for h in other.hypotheses
            ]
        )


def beam_init(
    model: LanguageModel,
    K: int,
    epsilon: float,
    trie: VocabTrie | None = None,
    batch_size: int = 256,
) -> BeamLattice:
    """Fresh lattice: one empty hypothesis with unit weight."""
    if not (isinstance(K, int) and K >= 1):
        raise BeamConfigError(f"K must be a positive integer, got {K!r}")
    if not 0.0 <= epsilon < 1.0:
        raise BeamConfigError(f"epsilon must be in [0, 1), got {epsilon!r}")
    if trie is None:
        trie = VocabTrie(model.vocab)
    root_hyp = _boundary_hyp((), 0.0, model.next_token_dist(()))
    return BeamLattice([root_hyp], K, epsilon, model, trie, b"", batch_size)


def logp_next(lat: BeamLattice) -> np.ndarray:
    """257-way log distribution over the next byte (256 bytes + eos).

    Marginalizes over all live hypotheses, renormalizing by the total
    surviving mass. Does not mutate the lattice.
    """
    if not lat.hypotheses:
        raise DegenerateLatticeError("lattice has no hypotheses")
    eos_slot = lat.model.vocab.eos_id
    shift = max(h.log_base for h in lat.hypotheses)
    if shift == NEG_INF:
        raise DegenerateLatticeError("all hypotheses carry zero mass")
    probs = np.zeros(257)
    for h in lat.hypotheses:
        if h.log_base == NEG_INF:
            continue
        w = math.exp(h.log_base - shift)
        if h.partial:
            node = h.node
        else:
            node = lat.trie.root
            probs[256] += w * h.dist[eos_slot]
        for byte, child in node.children.items():
            probs[byte] += w * h.dist[child.subtree_ids].sum()
    total = probs.sum()
    if total <= 0.0:
        raise DegenerateLatticeError("total surviving mass is zero")
    with np.errstate(divide="ignore"):
        return np.log(probs / total)


def surviving_mass(lat: BeamLattice) -> float:
    """Total unnormalized hypothesis mass still alive.

    With no pruning this equals the exact prefix probability of the
    consumed bytes; the gap to it is the mass leaked by pruning.
    """
    weights = [h.log_weight for h in lat.hypotheses if h.log_weight > NEG_INF]
    if not weights:
        return 0.0
    m = max(weights)
    return math.exp(m) * sum(math.exp(w - m) for w in weights)


def advance(lat: BeamLattice, byte: int) -> BeamLattice:
    """Consume one byte: extend every hypothesis, split at token
    boundaries, then prune. Returns a new lattice."""
    if not 0 <= byte <= 255:
        raise ValueError(f"byte value {byte} out of range")
    staged: dict[tuple, dict] = {}

    def stage(kind, completed, partial, node, log_base, dist):
        key = (completed, partial)
        prev = staged.get(key)
        if prev is None:
            staged[key] = dict(
                kind=kind, completed=completed, partial=partial, node=node,
                log_base=log_base, dist=dist,
            )
        else:
            prev["log_base"] = np.logaddexp(prev["log_base"], log_base)

    for h in lat.hypotheses:
        node = h.node if h.partial else lat.trie.root
        child = node.children.get(byte)
        if child is None:
            continue
        # continue inside the in-flight token
        if child.children:
            stage("inflight", h.completed, h.partial + bytes([byte]), child, h.log_base, h.dist)
        # the consumed bytes complete a full token: token-boundary branch
        if child.token_id is not None:
            p = h.dist[child.token_id]
            log_base = h.log_base + (math.log(p) if p > 0.0 else NEG_INF)
            stage("boundary", (*h.completed, child.token_id), b"", None, log_base, None)

    if not staged:
        raise AdvanceError(byte, len(lat.consumed))

    # batch the next-token queries for the new token boundaries
    boundary = [s for s in staged.values() if s["kind"] == "boundary"]
    for start in range(0, len(boundary), lat.batch_size):
        chunk = boundary[start : start + lat.batch_size]
        dists = lat.model.next_token_dists([s["completed"] for s in chunk])
        for s, d in zip(chunk, dists):
            s["dist"] = d

    hyps = []
    for s in staged.values():
        if s["kind"] == "inflight":
            hyps.append(_inflight_hyp(s["completed"], s["partial"], s["node"], s["log_base"], s["dist"]))
        else:
            hyps.append(_boundary_hyp(s["completed"], s["log_base"], s["dist"]))

    if all(h.log_weight == NEG_INF for h in hyps):
        raise AdvanceError(byte, len(lat.consumed))
    out = replace(lat, hypotheses=hyps, consumed=lat.consumed + bytes([byte]))
    return prune(out)


def prune(lat: BeamLattice) -> BeamLattice:
    """Relative-epsilon prune, then top-K with lexicographic tie-break.

    Surviving weights are never renormalized; the best hypothesis always
    survives.
    """
    hyps = lat.hypotheses
    if not hyps:
        return lat
    max_w = max(h.log_weight for h in hyps)
    if lat.epsilon > 0.0 and max_w > NEG_INF:
        threshold = max_w + math.log(lat.epsilon)
        hyps = [h for h in hyps if h.log_weight >= threshold]
    hyps = sorted(hyps, key=lambda h: (-h.log_weight, h.completed, h.partial))
    hyps = hyps[: lat.K]
    return replace(lat, hypotheses=hyps)


def extend_token_boundaries(lat: BeamLattice) -> BeamLattice:
    """Spawn the completed-token variant for every hypothesis whose
    partial exactly matches a full token, keeping the in-flight variant.

    Lattices produced by ``advance`` are already boundary-extended, so
    this is idempotent: existing variants are not duplicated.
    """
    existing = {h.key() for h in lat.hypotheses}
    extra: list[Hypothesis] = []
    pending: list[tuple[tuple[int, ...], float]] = []
    for h in lat.hypotheses:
        if not h.partial or h.node is None or h.node.token_id is None:
            continue
        tid = h.node.token_id
        completed = (*h.completed, tid)
        if (completed, b"") in existing:
            continue
        p = h.dist[tid]
        log_base = h.log_base + (math.log(p) if p > 0.0 else NEG_INF)
        pending.append((completed, log_base))
    for start in range(0, len(pending), lat.batch_size):
        chunk = pending[start : start + lat.batch_size]
        dists = lat.model.next_token_dists([c for c, _ in chunk])
        for (completed, log_base), d in zip(chunk, dists):
            extra.append(_boundary_hyp(completed, log_base, d))
    if not extra:
        return lat
    hyps = sorted(
        lat.hypotheses + extra, key=lambda h: (-h.log_weight, h.completed, h.partial)
    )
    return replace(lat, hypotheses=hyps)


# --- divergence and sweeps -----------------------------------------------------


def jsd(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence (natural log), in [0, ln 2]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    for name, dist in (("p", p), ("q", q)):
        if abs(dist.sum() - 1.0) > 1e-6:
            raise ValueError(f"{name} is not normalized (sum={dist.sum()!r})")
        if np.any(dist < 0):
            raise ValueError(f"{name} has negative entries")
    m = 0.5 * (p + q)

    def kl(a, b):
        mask = a > 0
        return float(np.sum(a[mask] * (np.log(a[mask]) - np.log(b[mask]))))

    return max(0.0, 0.5 * kl(p, m) + 0.5 * kl(q, m))


@dataclass(frozen=True)
class SweepRow:
    K: int
    epsilon: float
    median_jsd: float
    mean_jsd: float
    seconds_per_sample: float
    n_errors: int = 0


@dataclass
class SweepReport:
    rows: list[SweepRow]
    reference: tuple[int, float]


def _run_sample(model, trie, sample: bytes, K: int, epsilon: float, batch_size: int):
    """Per-position byte distributions for one sample; may raise beam errors."""
    lat = beam_init(model, K, epsilon, trie=trie, batch_size=batch_size)
    dists = []
    for byte in sample:
        dists.append(np.exp(logp_next(lat)))
        lat = advance(lat, byte)
    dists.append(np.exp(logp_next(lat)))
    return dists


def sweep(
    model: LanguageModel,
    corpus: list[bytes],
    K_list: list[int],
    eps_list: list[float],
    reference_params: tuple[int, float] = (100, 1e-6),
    trie: VocabTrie | None = None,
    batch_size: int = 256,
) -> SweepReport:
    """Accuracy/runtime sweep over (K, epsilon) against a reference config.

    Per configuration: median and mean per-position JSD against the
    reference run, plus wall-clock seconds per sample. Pruning can strand
    a lattice mid-sample; such failures are counted per configuration,
    not fatal. To keep configurations comparable, the JSD aggregates
    cover only the samples that every configuration completed (timings
    cover each configuration's own successes).
    """
    if not corpus:
        raise ValueError("corpus is empty")
    if trie is None:
        trie = VocabTrie(model.vocab)
    ref_k, ref_eps = reference_params
    references: list[list[np.ndarray] | None] = []
    for sample in corpus:
        try:
            references.append(_run_sample(model, trie, sample, ref_k, ref_eps, batch_size))
        except (DegenerateLatticeError, AdvanceError):
            references.append(None)

    configs = [(K, eps) for K in K_list for eps in eps_list]
    per_config: dict[tuple[int, float], list[list[float] | None]] = {}
    timing: dict[tuple[int, float], tuple[float, int]] = {}
    error_counts: dict[tuple[int, float], int] = {}
    for key in configs:
        K, eps = key
        sample_jsds: list[list[float] | None] = []
        errors = 0
        elapsed = 0.0
        n_run = 0
        for sample, ref in zip(corpus, references):
            if ref is None:
                errors += 1
                sample_jsds.append(None)
                continue
            t0 = time.perf_counter()
            try:
                dists = _run_sample(model, trie, sample, K, eps, batch_size)
            except (DegenerateLatticeError, AdvanceError):
                errors += 1
                sample_jsds.append(None)
                continue
            elapsed += time.perf_counter() - t0
            n_run += 1
            sample_jsds.append([jsd(d, r) for d, r in zip(dists, ref)])
        per_config[key] = sample_jsds
        timing[key] = (elapsed, n_run)
        error_counts[key] = errors

    shared = [
        i for i in range(len(corpus))
        if all(per_config[key][i] is not None for key in configs)
    ]
    rows: list[SweepRow] = []
    for key in configs:
        jsds = [v for i in shared for v in per_config[key][i]]
        elapsed, n_run = timing[key]
        rows.append(
            SweepRow(
                K=key[0],
                epsilon=key[1],
                median_jsd=median(jsds) if jsds else float("nan"),
                mean_jsd=float(np.mean(jsds)) if jsds else float("nan"),
                seconds_per_sample=elapsed / n_run if n_run else float("nan"),
                n_errors=error_counts[key],
            )
        )
    return SweepReport(rows=rows, reference=(ref_k, ref_eps))


def write_sweep_report(path, report: SweepReport) -> None:
    """Line-delimited records: K, epsilon, median_jsd, mean_jsd, seconds_per_sample."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"# reference K={report.reference[0]} epsilon={report.reference[1]!r}\n")
        for r in report.rows:
            fh.write(
                f"{r.K}\t{r.epsilon!r}\t{r.median_jsd!r}\t{r.mean_jsd!r}\t"
                f"{r.seconds_per_sample!r}\t{r.n_errors}\n"
            )


def read_sweep_report(path) -> SweepReport:
    rows: list[SweepRow] = []
    reference = (0, 0.0)
    with open(path, encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = dict(p.split("=") for p in line[1:].split() if "=" in p)
                reference = (int(parts.get("K", 0)), float(parts.get("epsilon", 0.0)))
                continue
            k, eps, med, mean, secs, nerr = line.split("\t")
            rows.append(
                SweepRow(int(k), float(eps), float(med), float(mean), float(secs), int(nerr))
            )
    return SweepReport(rows=rows, reference=reference)
