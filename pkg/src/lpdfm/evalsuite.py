"""Family validity, novelty, diversity and length-stratified reporting."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numba
import numpy as np

from . import ALPHABET
from .errors import DomainError, ParseError
from .flow import SimplexState
from .lineage import PSSM, FamilyRegistry

NA = "NA"


@dataclass(frozen=True)
class GeneratedSample:
    sequence: str
    intended_family: str
    aligned_state: SimplexState | None = None

    def __post_init__(self):
        if not self.sequence:
            raise DomainError("generated sequence is empty")

    @property
    def length(self) -> int:
        return len(self.sequence)


def encode(sequence: str, alphabet: str = ALPHABET) -> np.ndarray:
    """Residue indices; letters outside ``alphabet`` become -1."""
    lut = np.full(256, -1, dtype=np.int64)
    for i, ch in enumerate(alphabet):
        lut[ord(ch)] = i
    return lut[np.frombuffer(sequence.encode("ascii"), dtype=np.uint8)]


# ---------------------------------------------------------------------------
# profile scoring


@numba.njit(cache=True)
def _best_placement(codes, log_odds):
    # returns (score, overlap) of the best ungapped placement; ties keep the
    # larger overlap, then the first offset scanned
    n = codes.size
    L = log_odds.shape[0]
    best = -np.inf
    best_overlap = 0
    for d in range(-(n - 1), L):
        # sequence position i sits on profile column i + d
        i0 = max(0, -d)
        i1 = min(n, L - d)
        s = 0.0
        for i in range(i0, i1):
            c = codes[i]
            if c >= 0:
                s += log_odds[i + d, c]
        ov = i1 - i0
        if s > best or (s == best and ov > best_overlap):
            best = s
            best_overlap = ov
    return best, best_overlap


def pssm_align_score(sequence: str, pssm: PSSM, alphabet: str = ALPHABET) -> tuple[float, float]:
    """Best ungapped placement against the profile: (log-odds score, coverage).

    Coverage is the overlap divided by the shorter of sequence and profile.
    Residues outside the alphabet score zero.
    """
    if not sequence:
        raise DomainError("cannot score an empty sequence")
    codes = encode(sequence, alphabet[:pssm.K])
    score, overlap = _best_placement(codes, pssm.log_probs - pssm.background)
    return float(score), overlap / min(len(sequence), pssm.L)


def family_scores(sequence: str, registry: FamilyRegistry) -> dict[str, float]:
    return {fid: pssm_align_score(sequence, e.pssm)[0] for fid, e in sorted(registry.entries.items())}


def _rank(scores: Mapping[str, float]) -> list[tuple[str, float]]:
    return sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))


def assign_family(sequence: str, registry: FamilyRegistry) -> tuple[str, float]:
    """Top-scoring family; ties go to the lexicographically smallest id."""
    if not registry.entries:
        raise DomainError("empty registry")
    return _rank(family_scores(sequence, registry))[0]


def family_accuracy(samples: Sequence[GeneratedSample], registry: FamilyRegistry) -> float:
    if not samples:
        raise DomainError("no samples")
    return float(np.mean([assign_family(s.sequence, registry)[0] == s.intended_family for s in samples]))


def hit_any(samples: Sequence[GeneratedSample], registry: FamilyRegistry, score_threshold: float) -> float:
    """Fraction whose best family score reaches ``score_threshold``."""
    if not samples:
        raise DomainError("no samples")
    if math.isnan(score_threshold):
        raise DomainError("threshold must not be NaN")
    return float(np.mean([assign_family(s.sequence, registry)[1] >= score_threshold for s in samples]))


def nearest_rank(values, q: float) -> float:
    """Nearest-rank quantile: the ``ceil(q N)``-th smallest value."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise DomainError("quantile of an empty set")
    k = min(max(math.ceil(q * v.size), 1), v.size)
    return float(v[k - 1])


def calibrate_threshold(registry: FamilyRegistry, quantile: float = 0.01) -> float:
    """Low quantile of held-out members' scores against their own family's PSSM."""
    scores = [pssm_align_score(seq, e.pssm)[0]
              for e in registry.entries.values() for seq in e.family.ungapped("test") if seq]
    if not scores:
        raise DomainError("no held-out sequences to calibrate on")
    return nearest_rank(scores, quantile)


# ---------------------------------------------------------------------------
# identity


@numba.njit(cache=True)
def _pair_identity(a, b, min_cov):
    # best identity over ungapped offsets with coverage >= min_cov on both;
    # -1 when no offset qualifies
    n = a.size
    m = b.size
    best = -1.0
    need = min_cov * max(n, m) - 1e-9
    for d in range(-(n - 1), m):
        i0 = max(0, -d)
        i1 = min(n, m - d)
        ov = i1 - i0
        if ov < need:
            continue
        same = 0
        for i in range(i0, i1):
            if a[i] == b[i + d]:
                same += 1
        ident = same / ov
        if ident > best:
            best = ident
    return best


@numba.njit(cache=True)
def _nn_identity(q, refs, offsets, min_cov):
    best = -1.0
    for r in range(offsets.size - 1):
        ident = _pair_identity(q, refs[offsets[r]:offsets[r + 1]], min_cov)
        if ident > best:
            best = ident
            if best >= 1.0:
                break
    return best


class ReferenceSet:
    """Concatenated encoded references for fast nearest-neighbour scans."""

    def __init__(self, sequences: Sequence[str]):
        seqs = [s for s in sequences if s]
        self.size = len(seqs)
        self.codes = np.frombuffer("".join(seqs).encode("ascii"), dtype=np.uint8).astype(np.int64)
        self.offsets = np.concatenate([[0], np.cumsum([len(s) for s in seqs])]).astype(np.int64)


def _as_refs(reference_set) -> ReferenceSet:
    return reference_set if isinstance(reference_set, ReferenceSet) else ReferenceSet(list(reference_set))


def _codes(seq: str) -> np.ndarray:
    return np.frombuffer(seq.encode("ascii"), dtype=np.uint8).astype(np.int64)


def pair_identity(a: str, b: str, min_coverage: float = 0.8) -> float | None:
    v = _pair_identity(_codes(a), _codes(b), min_coverage)
    return None if v < 0 else float(v)


def nn_identity(sequence: str, reference_set, min_coverage: float = 0.8) -> float | None:
    """Highest ungapped-offset identity to any reference; ``None`` when no hit."""
    if not 0.0 < min_coverage <= 1.0:
        raise DomainError("min_coverage must be in (0, 1]")
    refs = _as_refs(reference_set)
    if refs.size == 0 or not sequence:
        return None
    v = _nn_identity(_codes(sequence), refs.codes, refs.offsets, min_coverage)
    return None if v < 0 else float(v)


def novelty_from_identities(identities: Sequence[float | None], delta: float) -> float | None:
    hits = [v for v in identities if v is not None]
    if not hits:
        return None
    return float(np.mean([v < delta for v in hits]))


def novelty_at(samples: Sequence[GeneratedSample], reference_set, delta: float,
               min_coverage: float = 0.8) -> float | None:
    """Among samples with a hit, the fraction with NN identity below ``delta``."""
    if not 0.0 < delta < 1.0:
        raise DomainError("delta must be in (0, 1)")
    refs = _as_refs(reference_set)
    return novelty_from_identities([nn_identity(s.sequence, refs, min_coverage) for s in samples], delta)


def cluster_assignments(sequences: Sequence[str], identity_threshold: float = 0.8,
                        min_coverage: float = 0.8) -> list[int]:
    """Greedy clustering in input order against cluster representatives."""
    reps: list[np.ndarray] = []
    out = []
    for seq in sequences:
        c = _codes(seq)
        for k, r in enumerate(reps):
            if _pair_identity(c, r, min_coverage) >= identity_threshold:
                out.append(k)
                break
        else:
            out.append(len(reps))
            reps.append(c)
    return out


def diversity_clusters(samples: Sequence[GeneratedSample], identity_threshold: float = 0.8,
                       min_coverage: float = 0.8) -> int:
    if not samples:
        return 0
    return max(cluster_assignments([s.sequence for s in samples], identity_threshold, min_coverage)) + 1


# ---------------------------------------------------------------------------
# stratification


@dataclass
class LengthBin:
    index: int
    lo: int | None
    hi: int | None
    count: int
    family_validity: float
    fitness: float
    novelty: float


def length_bin_edges(lengths, n_bins: int) -> list[int]:
    """Upper edges of the first ``n_bins - 1`` bins by nearest rank."""
    v = np.sort(np.asarray(lengths))
    return [int(v[min(max(math.ceil(k * v.size / n_bins), 1), v.size) - 1]) for k in range(1, n_bins)]


def _mean(values) -> float:
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else float("nan")


def length_stratified_report(samples: Sequence[GeneratedSample], metrics: Sequence[Mapping[str, object]],
                             n_bins: int = 4) -> list[LengthBin]:
    """Per-bin means of family validity, fitness and novelty (``1 - NNId`` on hits).

    ``metrics[i]`` needs keys ``valid`` (bool), ``fitness`` (float) and
    ``nn_identity`` (float or None).  A length equal to an edge goes to the
    lower bin; empty bins carry NaN means.
    """
    if n_bins < 1:
        raise DomainError("n_bins must be at least 1")
    if len(samples) != len(metrics):
        raise DomainError("one metrics record per sample required")
    lengths = [s.length for s in samples]
    if not lengths:
        return []
    edges = length_bin_edges(lengths, n_bins)
    members: list[list[int]] = [[] for _ in range(n_bins)]
    for i, n in enumerate(lengths):
        b = next((k for k, e in enumerate(edges) if n <= e), n_bins - 1)
        members[b].append(i)
    out = []
    for b, idx in enumerate(members):
        m = [metrics[i] for i in idx]
        nn = [r["nn_identity"] for r in m]
        out.append(LengthBin(
            b,
            min((lengths[i] for i in idx), default=None),
            max((lengths[i] for i in idx), default=None),
            len(idx),
            _mean([float(bool(r["valid"])) for r in m]),
            _mean([float(r["fitness"]) for r in m]),
            _mean([None if v is None else 1.0 - v for v in nn]),
        ))
    return out


# ---------------------------------------------------------------------------
# reports


@dataclass
class SampleRecord:
    sample_id: int
    intended: str
    assigned: str
    length: int
    top_score: float
    second_score: float
    fitness: float
    passes_filter: bool
    nn_identity: float | None
    cluster: int | None

    @property
    def valid(self) -> bool:
        return self.assigned == self.intended


RECORD_COLUMNS = ("sample_id", "intended", "assigned", "length", "top_score", "second_score",
                  "fitness", "passes_filter", "nn_identity", "cluster")


@dataclass(frozen=True)
class EvalSettings:
    identity_threshold: float = 0.8
    min_coverage: float = 0.8
    novelty_deltas: tuple[float, ...] = (0.8, 0.6)
    n_bins: int = 4


FilterPredicate = Callable[[GeneratedSample, SampleRecord], bool]


def always(sample: GeneratedSample, record: SampleRecord) -> bool:
    return True


def self_score_filter(threshold: float) -> FilterPredicate:
    """Keep samples whose intended-family score reaches ``threshold``."""

    def keep(sample: GeneratedSample, record: SampleRecord) -> bool:
        return record.fitness * record.length >= threshold

    return keep


@dataclass
class MetricsReport:
    label: str
    records: list[SampleRecord]
    threshold: float
    settings: EvalSettings = EvalSettings()
    aggregates: dict[str, object] = field(default_factory=dict)
    bins: list[LengthBin] = field(default_factory=list)

    def __post_init__(self):
        if not self.aggregates:
            self.aggregates, self.bins = compute_aggregates(self.records, self.threshold, self.settings)


def compute_aggregates(records: Sequence[SampleRecord], threshold: float,
                       settings: EvalSettings) -> tuple[dict[str, object], list[LengthBin]]:
    """Summary statistics, computed from per-sample records only.

    Family validity and hit rate cover every sample; novelty, identity and
    diversity use the samples passing the filter.
    """
    n = len(records)
    if n == 0:
        raise DomainError("no records")
    kept = [r for r in records if r.passes_filter]
    nn = [r.nn_identity for r in kept]
    hits = [v for v in nn if v is not None]
    agg: dict[str, object] = {
        "n": n,
        "n_kept": len(kept),
        "acc_fam": float(np.mean([r.valid for r in records])),
        "hit_any": float(np.mean([r.top_score >= threshold for r in records])),
        "hit_threshold": float(threshold),
        "mean_fitness": float(np.mean([r.fitness for r in records])),
        "nnid_mean": float(np.mean(hits)) if hits else None,
        "nnid_std": float(np.std(hits)) if hits else None,
        "n_hits": len(hits),
    }
    for d in settings.novelty_deltas:
        agg[f"novelty_{d:g}"] = novelty_from_identities(nn, d)
    agg["diversity"] = len({r.cluster for r in kept})
    samples = [_Length(r.length) for r in records]
    metrics = [{"valid": r.valid, "fitness": r.fitness,
                "nn_identity": r.nn_identity if r.passes_filter else None} for r in records]
    bins = length_stratified_report(samples, metrics, settings.n_bins)
    return agg, bins


@dataclass(frozen=True)
class _Length:
    length: int


def build_report(label: str, samples: Sequence[GeneratedSample], registry: FamilyRegistry, reference_set,
                 threshold: float, settings: EvalSettings = EvalSettings(),
                 predicate: FilterPredicate = always) -> MetricsReport:
    """Score every sample and assemble the report."""
    refs = _as_refs(reference_set)
    records = []
    for i, s in enumerate(samples):
        ranked = _rank(family_scores(s.sequence, registry))
        second = ranked[1][1] if len(ranked) > 1 else float("-inf")
        intended = registry.entries.get(s.intended_family)
        if intended is None:
            raise DomainError(f"sample {i} names unknown family {s.intended_family!r}")
        fit = pssm_align_score(s.sequence, intended.pssm)[0] / s.length
        rec = SampleRecord(i, s.intended_family, ranked[0][0], s.length, ranked[0][1], second, fit,
                           True, None, None)
        rec.passes_filter = bool(predicate(s, rec))
        if rec.passes_filter:
            rec.nn_identity = nn_identity(s.sequence, refs, settings.min_coverage)
        records.append(rec)
    kept = [r for r in records if r.passes_filter]
    clusters = cluster_assignments([samples[r.sample_id].sequence for r in kept],
                                   settings.identity_threshold, settings.min_coverage)
    for r, c in zip(kept, clusters):
        r.cluster = c
    return MetricsReport(label, records, threshold, settings)


# ---------------------------------------------------------------------------
# persistence


def _fmt(v) -> str:
    if v is None:
        return NA
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_records(records: Sequence[SampleRecord], comments: Sequence[str] = ()) -> str:
    out = io.StringIO()
    for c in comments:
        out.write(f"# {c}\n")
    out.write("\t".join(RECORD_COLUMNS) + "\n")
    for r in records:
        out.write("\t".join(_fmt(getattr(r, c)) for c in RECORD_COLUMNS) + "\n")
    return out.getvalue()


def parse_records(text: str) -> list[SampleRecord]:
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    if not lines or tuple(lines[0].split("\t")) != RECORD_COLUMNS:
        raise ParseError("per-sample file has an unexpected header")
    out = []
    for k, ln in enumerate(lines[1:], start=2):
        f = ln.split("\t")
        if len(f) != len(RECORD_COLUMNS):
            raise ParseError(f"line {k}: expected {len(RECORD_COLUMNS)} fields")
        out.append(SampleRecord(int(f[0]), f[1], f[2], int(f[3]), float(f[4]), float(f[5]), float(f[6]),
                                f[7] == "1", None if f[8] == NA else float(f[8]),
                                None if f[9] == NA else int(f[9])))
    return out


def format_summary(report: MetricsReport, comments: Sequence[str] = ()) -> str:
    """``key = value`` summary; per-bin rows use ``bin<k>.<field>`` keys."""
    out = io.StringIO()
    for c in comments:
        out.write(f"# {c}\n")
    out.write(f"label = {report.label}\n")
    for k, v in report.aggregates.items():
        out.write(f"{k} = {_fmt(v)}\n")
    for b in report.bins:
        for name in ("lo", "hi", "count", "family_validity", "fitness", "novelty"):
            out.write(f"bin{b.index}.{name} = {_fmt(getattr(b, name))}\n")
    return out.getvalue()


def parse_summary(text: str) -> dict[str, str]:
    out = {}
    for ln in text.splitlines():
        if not ln.strip() or ln.startswith("#"):
            continue
        k, sep, v = ln.partition(" = ")
        if not sep:
            raise ParseError(f"malformed summary line {ln!r}")
        out[k] = v
    return out
