"""Family data model: aligned families, priors, gap statistics, PSSMs.

Text formats
------------
Aligned FASTA
    ``>`` header lines followed by sequence lines.  Lines starting with
    ``;`` or ``#`` are comments.  A ``split=train|test`` token in a header
    records the row's split.
Root posterior / family prior (tab separated)
    Optional ``#`` comment lines, then a header ``family_id<TAB>L<TAB>K``,
    then ``L`` rows of ``K`` values.  Prior files carry one extra trailing
    column with the per-column gap rate (``nan`` when unset).
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import ALPHABET, GAP, UNKNOWN
from .errors import DomainError, ParseError
from .specfun import RandomStream, sample_dirichlet

MISSING = (GAP, UNKNOWN)
TRAIN = "train"
TEST = "test"


# ---------------------------------------------------------------------------
# aligned families


@dataclass(frozen=True)
class AlignedFamily:
    """An alignment over ``alphabet`` plus the gap and unknown markers.

    ``columns`` holds the indices (into the raw alignment) of the columns
    that survived cleaning, so that externally supplied per-column data
    such as root posteriors can be subset consistently.
    """

    family_id: str
    names: tuple[str, ...]
    rows: tuple[str, ...]
    splits: tuple[str, ...] = ()
    columns: tuple[int, ...] = ()
    alphabet: str = ALPHABET

    def __post_init__(self):
        if not self.rows:
            raise DomainError(f"family {self.family_id!r} has no rows")
        width = len(self.rows[0])
        allowed = set(self.alphabet) | set(MISSING)
        for i, row in enumerate(self.rows):
            if len(row) != width:
                raise DomainError(f"row {i + 1} has length {len(row)}, expected {width}")
            bad = set(row) - allowed
            if bad:
                raise DomainError(f"row {i + 1} contains characters {sorted(bad)}")
        if len(self.names) != len(self.rows):
            raise DomainError("names and rows differ in length")
        if not self.splits:
            object.__setattr__(self, "splits", (TRAIN,) * len(self.rows))
        elif len(self.splits) != len(self.rows) or set(self.splits) - {TRAIN, TEST}:
            raise DomainError("split tags must be 'train' or 'test', one per row")
        if not self.columns:
            object.__setattr__(self, "columns", tuple(range(width)))
        elif len(self.columns) != width:
            raise DomainError("column index list does not match alignment width")

    @property
    def L(self) -> int:
        return len(self.rows[0])

    @property
    def K(self) -> int:
        return len(self.alphabet)

    @property
    def depth(self) -> int:
        return len(self.rows)

    def codes(self) -> np.ndarray:
        """Integer matrix of residue indices, ``-1`` for gap/unknown."""
        lut = np.full(256, -1, dtype=np.int16)
        for i, ch in enumerate(self.alphabet):
            lut[ord(ch)] = i
        raw = np.frombuffer("".join(self.rows).encode("ascii"), dtype=np.uint8)
        return lut[raw].reshape(self.depth, self.L).astype(np.int64)

    def split_mask(self, tag: str) -> np.ndarray:
        return np.array([s == tag for s in self.splits])

    def subset(self, mask_or_index) -> "AlignedFamily":
        idx = np.flatnonzero(mask_or_index) if np.asarray(mask_or_index).dtype == bool else mask_or_index
        return replace(
            self,
            names=tuple(self.names[i] for i in idx),
            rows=tuple(self.rows[i] for i in idx),
            splits=tuple(self.splits[i] for i in idx),
        )

    def train(self) -> "AlignedFamily":
        return self.subset(self.split_mask(TRAIN))

    def test(self) -> "AlignedFamily":
        return self.subset(self.split_mask(TEST))

    def ungapped(self, tag: str | None = None) -> list[str]:
        rows = self.rows if tag is None else [r for r, s in zip(self.rows, self.splits) if s == tag]
        return [r.replace(GAP, "").replace(UNKNOWN, "") for r in rows]


def _normalize_residues(seq: str, alphabet: str) -> str:
    out = []
    allowed = set(alphabet)
    for ch in seq.upper():
        if ch in ".-":
            out.append(GAP)
        elif ch in allowed:
            out.append(ch)
        elif ch.isalpha() or ch == "*":
            out.append(UNKNOWN)
        else:
            raise ParseError(f"illegal character {ch!r} in sequence")
    return "".join(out)


def parse_aligned_fasta(data, family_id: str | None = None, alphabet: str = ALPHABET) -> AlignedFamily:
    """Parse aligned FASTA text or bytes into an :class:`AlignedFamily`.

    '.' becomes '-', letters are uppercased and anything outside the
    alphabet becomes 'X'.  Rows must all have the same length.
    """
    if isinstance(data, (bytes, bytearray)):
        data = data.decode("ascii", errors="replace")
    names: list[str] = []
    splits: list[str] = []
    chunks: list[list[str]] = []
    for lineno, raw in enumerate(io.StringIO(data), start=1):
        line = raw.strip()
        if not line or line[0] in ";#":
            continue
        if line.startswith(">"):
            header = line[1:].strip()
            tokens = header.split()
            names.append(tokens[0] if tokens else f"seq{len(names) + 1}")
            tag = TRAIN
            for tok in tokens[1:]:
                if tok.startswith("split="):
                    tag = tok.split("=", 1)[1]
                    if tag not in (TRAIN, TEST):
                        raise ParseError(f"line {lineno}: unknown split tag {tag!r}")
            splits.append(tag)
            chunks.append([])
        else:
            if not chunks:
                raise ParseError(f"line {lineno}: sequence data before the first header")
            chunks[-1].append(line)
    if not chunks:
        raise ParseError("no FASTA records found")
    rows = [_normalize_residues("".join(c), alphabet) for c in chunks]
    width = len(rows[0])
    if width == 0:
        raise ParseError("row 1 is empty")
    for i, row in enumerate(rows):
        if len(row) != width:
            raise ParseError(f"row {i + 1} has length {len(row)}, expected {width} (row 1)")
    return AlignedFamily(
        family_id=family_id or names[0],
        names=tuple(names),
        rows=tuple(rows),
        splits=tuple(splits),
        alphabet=alphabet,
    )


def format_aligned_fasta(family: AlignedFamily, comments: Sequence[str] = (), with_splits: bool = False,
                         width: int = 80) -> str:
    out = io.StringIO()
    for c in comments:
        out.write(f"; {c}\n")
    for name, row, tag in zip(family.names, family.rows, family.splits):
        out.write(f">{name} split={tag}\n" if with_splits else f">{name}\n")
        for i in range(0, len(row), width):
            out.write(row[i:i + width] + "\n")
    return out.getvalue()


@dataclass(frozen=True)
class CleanFilters:
    min_len: int = 20
    max_len: int = 2000
    depth_cap: int = 5000
    col_missing_max: float = 0.95
    min_depth: int = 100


@dataclass(frozen=True)
class Rejection:
    """A family excluded by :func:`clean_family`."""

    family_id: str
    reason: str

    def __bool__(self):
        return False


def missing_fraction(family: AlignedFamily) -> np.ndarray:
    return (family.codes() < 0).mean(axis=0)


def clean_family(family: AlignedFamily, filters: CleanFilters = CleanFilters(),
                 stream: RandomStream | None = None) -> AlignedFamily | Rejection:
    """Length filter, depth cap, gappy-column filter, minimum depth.

    Columns dropped by the gap filter can push the length below
    ``min_len``; that is also a rejection, which keeps the operation
    idempotent.
    """
    fid = family.family_id
    if not filters.min_len <= family.L <= filters.max_len:
        return Rejection(fid, f"alignment length {family.L} outside [{filters.min_len}, {filters.max_len}]")
    if family.depth > filters.depth_cap:
        if stream is None:
            raise DomainError("a random stream is required to subsample rows")
        keep = np.sort(stream.generator.choice(family.depth, size=filters.depth_cap, replace=False))
        family = family.subset(keep)
    frac = missing_fraction(family)
    keep_cols = np.flatnonzero(frac <= filters.col_missing_max)
    if keep_cols.size < family.L:
        rows = tuple("".join(r[c] for c in keep_cols) for r in family.rows)
        if keep_cols.size == 0:
            return Rejection(fid, "every column exceeds the missing-fraction limit")
        family = replace(family, rows=rows, columns=tuple(family.columns[c] for c in keep_cols))
    if family.L < filters.min_len:
        return Rejection(fid, f"only {family.L} columns left after the column filter")
    if family.depth < filters.min_depth:
        return Rejection(fid, f"only {family.depth} sequences (< {filters.min_depth})")
    return family


def split_family(family: AlignedFamily, holdout_fraction: float, stream: RandomStream) -> AlignedFamily:
    """Tag ``clamp(round(f N), 1, N-1)`` randomly chosen rows as test."""
    n = family.depth
    if not 0.0 < holdout_fraction < 1.0:
        raise DomainError(f"holdout fraction must be in (0, 1), got {holdout_fraction}")
    if n < 2:
        raise DomainError(f"family {family.family_id!r} needs at least 2 rows to split, has {n}")
    n_test = min(max(math.floor(holdout_fraction * n + 0.5), 1), n - 1)
    test = set(stream.generator.permutation(n)[:n_test].tolist())
    return replace(family, splits=tuple(TEST if i in test else TRAIN for i in range(n)))


# ---------------------------------------------------------------------------
# posteriors and priors


def _check_rows_on_simplex(probs: np.ndarray, tol: float, what: str):
    if probs.ndim != 2:
        raise DomainError(f"{what} must be an L x K matrix")
    if not np.all(np.isfinite(probs)) or probs.min() < 0.0:
        raise DomainError(f"{what} has negative or non-finite entries")
    bad = np.flatnonzero(np.abs(probs.sum(axis=1) - 1.0) > tol)
    if bad.size:
        raise DomainError(f"{what} row {bad[0] + 1} does not sum to one")


@dataclass(frozen=True)
class RootPosterior:
    family_id: str
    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64)
        _check_rows_on_simplex(probs, 1e-9, "root posterior")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def L(self):
        return self.probs.shape[0]

    @property
    def K(self):
        return self.probs.shape[1]

    def select_columns(self, columns: Sequence[int]) -> "RootPosterior":
        return RootPosterior(self.family_id, self.probs[list(columns)])


@dataclass(frozen=True)
class FamilyPrior:
    """Per-site Dirichlet concentrations and per-column missing rates."""

    family_id: str
    alpha: np.ndarray
    gap_rates: np.ndarray | None = None

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=np.float64)
        if alpha.ndim != 2 or not np.all(np.isfinite(alpha)) or alpha.min() <= 0.0:
            raise DomainError("prior concentrations must be a positive L x K matrix")
        alpha.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        if self.gap_rates is not None:
            g = np.array(self.gap_rates, dtype=np.float64)
            if g.shape != (alpha.shape[0],) or np.any((g < 0.0) | (g > 1.0)):
                raise DomainError("gap rates must be L values in [0, 1]")
            g.setflags(write=False)
            object.__setattr__(self, "gap_rates", g)

    @property
    def L(self):
        return self.alpha.shape[0]

    @property
    def K(self):
        return self.alpha.shape[1]

    def mean(self) -> np.ndarray:
        return self.alpha / self.alpha.sum(axis=1, keepdims=True)

    def with_gap_rates(self, gap_rates) -> "FamilyPrior":
        return FamilyPrior(self.family_id, self.alpha, gap_rates)


def posterior_to_prior(posterior: RootPosterior, lam: float = 10.0, epsilon: float = 1e-3) -> FamilyPrior:
    """Mean-concentration map ``alpha = epsilon + lam * p_root``."""
    if not (lam > 0.0 and math.isfinite(lam)) or not (epsilon > 0.0 and math.isfinite(epsilon)):
        raise DomainError(f"lambda and epsilon must be positive, got {lam}, {epsilon}")
    return FamilyPrior(posterior.family_id, epsilon + lam * posterior.probs)


def mix_with_uniform(prior: FamilyPrior, rho: float) -> FamilyPrior:
    """Shift each site toward uniform while keeping its total concentration."""
    if not 0.0 <= rho <= 1.0:
        raise DomainError(f"rho must be in [0, 1], got {rho}")
    a = prior.alpha
    total = a.sum(axis=1, keepdims=True)
    mixed = (1.0 - rho) * a + rho * (total / prior.K)
    return FamilyPrior(prior.family_id, mixed, prior.gap_rates)


def uniform_prior(prior: FamilyPrior) -> FamilyPrior:
    """All-ones concentrations with the same shape and gap rates."""
    return FamilyPrior(prior.family_id, np.ones_like(prior.alpha), prior.gap_rates)


def estimate_gap_rates(family: AlignedFamily) -> np.ndarray:
    """Fraction of train rows with '-' or 'X' in each column."""
    train = family.split_mask(TRAIN)
    if not train.any():
        raise DomainError(f"family {family.family_id!r} has no training rows")
    return (family.codes()[train] < 0).mean(axis=0)


def _format_float(x: float) -> str:
    return repr(float(x))


def _write_matrix(family_id: str, rows: np.ndarray, extra: np.ndarray | None, comments: Sequence[str]) -> str:
    out = io.StringIO()
    for c in comments:
        out.write(f"# {c}\n")
    L, K = rows.shape
    out.write(f"{family_id}\t{L}\t{K}\n")
    for i in range(L):
        vals = [_format_float(v) for v in rows[i]]
        if extra is not None:
            vals.append(_format_float(extra[i]))
        out.write("\t".join(vals) + "\n")
    return out.getvalue()


def _read_matrix(text: str, extra_column: bool):
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise ParseError("empty table")
    head = lines[0].split()
    if len(head) != 3:
        raise ParseError("header must be 'family_id L K'")
    try:
        family_id, L, K = head[0], int(head[1]), int(head[2])
    except ValueError as exc:
        raise ParseError(f"bad header {lines[0]!r}") from exc
    if len(lines) - 1 != L:
        raise ParseError(f"expected {L} rows, found {len(lines) - 1}")
    width = K + (1 if extra_column else 0)
    mat = np.empty((L, width))
    for i, ln in enumerate(lines[1:]):
        parts = ln.split("\t")
        if len(parts) != width:
            raise ParseError(f"row {i + 1} has {len(parts)} fields, expected {width}")
        try:
            mat[i] = [float(p) for p in parts]
        except ValueError as exc:
            raise ParseError(f"row {i + 1}: {exc}") from exc
    return family_id, mat


def format_root_posterior(posterior: RootPosterior, comments: Sequence[str] = ()) -> str:
    return _write_matrix(posterior.family_id, posterior.probs, None, comments)


def parse_root_posterior(text: str) -> RootPosterior:
    family_id, mat = _read_matrix(text, extra_column=False)
    bad = np.flatnonzero(np.abs(mat.sum(axis=1) - 1.0) > 1e-6)
    if bad.size:
        raise ParseError(f"posterior row {bad[0] + 1} sums to {mat[bad[0]].sum():.8f}")
    if mat.min() < 0.0:
        raise ParseError("posterior has negative probabilities")
    return RootPosterior(family_id, mat / mat.sum(axis=1, keepdims=True))


def format_family_prior(prior: FamilyPrior, comments: Sequence[str] = ()) -> str:
    gaps = prior.gap_rates if prior.gap_rates is not None else np.full(prior.L, np.nan)
    return _write_matrix(prior.family_id, prior.alpha, gaps, comments)


def parse_family_prior(text: str) -> FamilyPrior:
    family_id, mat = _read_matrix(text, extra_column=True)
    gaps = mat[:, -1]
    return FamilyPrior(family_id, mat[:, :-1], None if np.all(np.isnan(gaps)) else gaps)


# ---------------------------------------------------------------------------
# synthetic families


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings for a synthetic family.

    Each site gets a consensus residue and a root categorical
    ``q ~ Dir(background * 1 + kappa * e_consensus)`` where ``kappa`` is
    ``conserved_concentration`` on a ``conserved_fraction`` of sites and
    ``variable_concentration`` elsewhere.  Rows draw each site from ``q``,
    replaced by a uniform residue with probability ``mutation_rate``; each
    cell is gapped with probability ``gap_rate``.
    """

    L: int
    K: int = 20
    depth: int = 500
    conserved_fraction: float = 0.5
    conserved_concentration: float = 50.0
    variable_concentration: float = 2.0
    background_concentration: float = 1.0
    mutation_rate: float = 0.1
    gap_rate: float = 0.0
    consensus: tuple[int, ...] | None = None

    def validate(self):
        if self.L < 1 or self.K < 2 or self.K > len(ALPHABET) or self.depth < 2:
            raise DomainError("synthetic family needs L >= 1, 2 <= K <= 20 and depth >= 2")
        for name in ("conserved_fraction", "mutation_rate", "gap_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DomainError(f"{name} must be in [0, 1], got {v}")
        if self.conserved_concentration < 0 or self.variable_concentration < 0 or self.background_concentration < 0:
            raise DomainError("concentrations must be non-negative")
        if self.consensus is not None and (len(self.consensus) != self.L
                                           or any(not 0 <= c < self.K for c in self.consensus)):
            raise DomainError("consensus must give one residue index per site")


def synth_family(family_id: str, config: SynthConfig, stream: RandomStream) -> tuple[AlignedFamily, RootPosterior]:
    """Sample a synthetic alignment together with its exact site categoricals."""
    config.validate()
    L, K, n = config.L, config.K, config.depth
    gen = stream.generator
    if config.consensus is None:
        consensus = gen.integers(K, size=L)
    else:
        consensus = np.asarray(config.consensus)
    conserved = np.zeros(L, dtype=bool)
    n_cons = int(round(config.conserved_fraction * L))
    conserved[gen.permutation(L)[:n_cons]] = True
    kappa = np.where(conserved, config.conserved_concentration, config.variable_concentration)
    conc = np.full((L, K), config.background_concentration)
    conc[np.arange(L), consensus] += kappa
    q = np.zeros((L, K))
    degenerate = conc.sum(axis=1) <= 0.0
    pos = conc > 0.0
    # sites with zero background reduce to a point mass when kappa is the only mass
    for l in range(L):
        if degenerate[l]:
            q[l, consensus[l]] = 1.0
        elif pos[l].sum() == 1:
            q[l, pos[l]] = 1.0
        else:
            q[l, pos[l]] = sample_dirichlet(conc[l, pos[l]], stream)
    cdf = np.cumsum(q, axis=1)
    u = gen.random((n, L))
    draws = (cdf[None, :, :] <= u[:, :, None] * cdf[None, :, -1:]).sum(axis=2)
    draws = np.minimum(draws, K - 1)
    mutate = gen.random((n, L)) < config.mutation_rate
    draws = np.where(mutate, gen.integers(K, size=(n, L)), draws)
    gapped = gen.random((n, L)) < config.gap_rate
    letters = np.frombuffer(ALPHABET[:K].encode(), dtype=np.uint8)
    chars = letters[draws]
    chars[gapped] = ord(GAP)
    rows = tuple(bytes(r).decode() for r in chars)
    names = tuple(f"{family_id}_{i:05d}" for i in range(n))
    family = AlignedFamily(family_id, names, rows, alphabet=ALPHABET[:K])
    return family, RootPosterior(family_id, q)


# ---------------------------------------------------------------------------
# PSSMs and the registry


@dataclass(frozen=True)
class PSSM:
    family_id: str
    log_probs: np.ndarray
    background: np.ndarray

    @property
    def L(self):
        return self.log_probs.shape[0]

    @property
    def K(self):
        return self.log_probs.shape[1]

    def consensus(self) -> np.ndarray:
        return np.argmax(self.log_probs, axis=1)


def build_pssm(family: AlignedFamily, pseudocount: float = 0.1) -> PSSM:
    """Pseudocount-smoothed column frequencies over the train rows."""
    if pseudocount <= 0.0:
        raise DomainError("pseudocount must be positive")
    codes = family.codes()[family.split_mask(TRAIN)]
    K = family.K
    counts = np.zeros((family.L, K))
    for a in range(K):
        counts[:, a] = (codes == a).sum(axis=0)
    n = counts.sum(axis=1, keepdims=True)
    probs = (counts + pseudocount) / (n + K * pseudocount)
    background = np.full(K, 1.0 / K)
    probs[n[:, 0] == 0] = background
    return PSSM(family.family_id, np.log(probs), np.log(background))


@dataclass(frozen=True)
class FamilyEntry:
    family: AlignedFamily
    prior: FamilyPrior
    pssm: PSSM


def family_weights(depths: Mapping[str, int], tau: float = 0.5, cap: int | None = 128) -> dict[str, float]:
    """Smoothed family distribution ``pi_h ~ n_h**tau`` on the top ``cap`` families.

    Truncation keeps the ``cap`` largest weights (ties broken by family id)
    and renormalizes, which preserves relative weights among the kept set.
    """
    if not depths:
        raise DomainError("no families to weight")
    if tau < 0:
        raise DomainError("tau must be non-negative")
    raw = {fid: float(n) ** tau for fid, n in depths.items()}
    order = sorted(raw, key=lambda f: (-raw[f], f))
    if cap is not None:
        if cap < 1:
            raise DomainError("family cap must be positive")
        order = order[:cap]
    total = math.fsum(raw[f] for f in order)
    return {f: raw[f] / total for f in sorted(order)}


@dataclass(frozen=True)
class FamilyRegistry:
    entries: Mapping[str, FamilyEntry]
    weights: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.entries:
            raise DomainError("empty registry")
        if not self.weights:
            object.__setattr__(self, "weights", family_weights(self.depths(), tau=0.5, cap=None))
        w = np.array(list(self.weights.values()))
        if w.min() <= 0.0 or abs(w.sum() - 1.0) > 1e-12:
            raise DomainError("family weights must be positive and sum to one")

    @classmethod
    def build(cls, entries: Iterable[FamilyEntry], tau: float = 0.5, cap: int | None = 128) -> "FamilyRegistry":
        entries = {e.family.family_id: e for e in entries}
        depths = {fid: int(e.family.split_mask(TRAIN).sum()) for fid, e in entries.items()}
        return cls(entries, family_weights(depths, tau, cap))

    def depths(self) -> dict[str, int]:
        return {fid: int(e.family.split_mask(TRAIN).sum()) for fid, e in self.entries.items()}

    def ids(self) -> list[str]:
        return sorted(self.entries)

    def pssms(self) -> dict[str, PSSM]:
        return {fid: e.pssm for fid, e in self.entries.items()}


def family_sampler(registry: FamilyRegistry, tau: float, cap: int, stream: RandomStream, size: int | None = None):
    """Draw family ids with probability proportional to ``n_h**tau``."""
    weights = family_weights(registry.depths(), tau, cap)
    ids = list(weights)
    p = np.array([weights[f] for f in ids])
    idx = stream.generator.choice(len(ids), size=size, p=p)
    if size is None:
        return ids[int(idx)]
    return [ids[i] for i in idx]


def standard_battery(stream: RandomStream, n_families: int = 8, config: SynthConfig | None = None,
                     holdout_fraction: float = 0.05) -> list[tuple[AlignedFamily, RootPosterior]]:
    """Split synthetic families ``fam00, fam01, ...`` with mixed conservation.

    Each family uses its own substream, so family ``h`` does not depend on
    how many families are generated.
    """
    config = config or SynthConfig(L=60, gap_rate=0.02)
    out = []
    for h in range(n_families):
        fid = f"fam{h:02d}"
        fam, post = synth_family(fid, config, stream.spawn("synth", fid))
        out.append((split_family(fam, holdout_fraction, stream.spawn("split", fid)), post))
    return out
