"""Mutate, select and amplify: the intermediate-time particle intervention."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy.special import softmax

from .errors import DomainError
from .flow import Denoiser, SimplexState
from .lineage import PSSM, FamilyPrior
from .specfun import RandomStream, entropy_rows, sample_categorical_array, sample_dirichlet

MULTINOMIAL = "multinomial"
SYSTEMATIC = "systematic"


@dataclass(frozen=True)
class MutationConfig:
    mu: float = 0.25
    gamma: float = 1.0
    rho: float = 0.8
    tau_tok: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.mu <= 1.0 and self.gamma >= 0.0 and 0.0 <= self.rho <= 1.0 and self.tau_tok > 0.0):
            raise DomainError(f"invalid mutation config {self}")


@dataclass(frozen=True)
class RerouteConfig:
    rounds: int = 3
    betas: tuple[float, ...] = (4.0, 4.0, 4.0)
    t_int: float = 0.5
    scheme: str = SYSTEMATIC
    population: int = 8

    def __post_init__(self):
        betas = tuple(float(b) for b in self.betas)
        if len(betas) == 1 and self.rounds > 1:
            betas = betas * self.rounds
        object.__setattr__(self, "betas", betas)
        if self.rounds < 1 or len(betas) != self.rounds or min(betas) < 0.0:
            raise DomainError("need rounds >= 1 and one non-negative beta per round")
        if not 0.0 <= self.t_int <= 1.0:
            raise DomainError(f"t_int must be in [0, 1], got {self.t_int}")
        if self.scheme not in (MULTINOMIAL, SYSTEMATIC):
            raise DomainError(f"unknown resampling scheme {self.scheme!r}")
        if self.population < 1:
            raise DomainError("population size must be positive")


@dataclass
class ParticlePopulation:
    particles: list[SimplexState]
    scores: np.ndarray | None = None
    weights: np.ndarray | None = None

    def __post_init__(self):
        if not self.particles:
            raise DomainError("population needs at least one particle")

    @property
    def M(self) -> int:
        return len(self.particles)


class FitnessScorer(Protocol):
    """Higher is better.  ``base`` is the pre-mutation state, when known."""

    def __call__(self, state: SimplexState, base: SimplexState | None = None) -> float: ...


# ---------------------------------------------------------------------------
# mutation


def mutation_probabilities(prior: FamilyPrior, mu: float, gamma: float, valid_sites) -> np.ndarray:
    """Per-site inclusion probabilities, zero off ``valid_sites``."""
    valid = np.asarray(valid_sites, dtype=bool)
    p = np.zeros(prior.L)
    if not valid.any() or mu == 0.0:
        return p
    gate = (entropy_rows(prior.mean()) / math.log(prior.K))[valid]
    gate = np.ones_like(gate) if gamma == 0.0 else np.clip(gate, 0.0, 1.0) ** gamma
    mean = gate.mean()
    if mean <= 0.0:
        return p
    p[valid] = np.clip(mu * gate / mean, 0.0, 1.0)
    return p


def mutation_mask(prior: FamilyPrior, mu: float, gamma: float, valid_sites, stream: RandomStream) -> np.ndarray:
    """Entropy-gated Bernoulli site selection (boolean mask of length L)."""
    p = mutation_probabilities(prior, mu, gamma, valid_sites)
    return stream.generator.random(prior.L) < p


def token_dirichlet_mutate(state: SimplexState, denoiser: Denoiser, prior: FamilyPrior, config: MutationConfig,
                           t_max: float, stream: RandomStream, probs: np.ndarray | None = None) -> SimplexState:
    """Redraw selected sites from the conditional path at the state's time.

    The token law mixes the tempered classifier with the prior mean.
    ``probs`` may carry precomputed classifier logits for the state.
    """
    mask = mutation_mask(prior, config.mu, config.gamma, ~state.gap_mask, stream)
    if not mask.any():
        return state
    if probs is None:
        logits = denoiser.logits(state.sites[None], state.gap_mask[None], state.t, [state.family_id])[0]
    else:
        logits = probs
    tok = config.rho * softmax(logits[mask] / config.tau_tok, axis=-1) + (1.0 - config.rho) * prior.mean()[mask]
    y = sample_categorical_array(tok, stream)
    a = prior.alpha[mask].copy()
    a[np.arange(a.shape[0]), y] += t_max * state.t
    sites = state.sites.copy()
    sites[mask] = sample_dirichlet(a, stream)
    return replace(state, sites=sites)


# ---------------------------------------------------------------------------
# fitness


def random_masks(valid, p_mask: float, n_masks: int, stream: RandomStream) -> np.ndarray:
    """``n_masks`` Bernoulli site masks over valid sites, each forced non-empty."""
    valid = np.asarray(valid, dtype=bool)
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        raise DomainError("no non-gap sites to score")
    if not 0.0 < p_mask < 1.0 or n_masks < 1:
        raise DomainError("need 0 < p_mask < 1 and at least one mask")
    gen = stream.generator
    masks = np.zeros((n_masks, valid.size), dtype=bool)
    masks[:, idx] = gen.random((n_masks, idx.size)) < p_mask
    forced = gen.integers(idx.size, size=n_masks)
    for g in range(n_masks):
        if not masks[g].any():
            masks[g, idx[forced[g]]] = True
    return masks


def site_log_scores(state: SimplexState, pssm: PSSM) -> np.ndarray:
    """Expected PSSM log-probability per site under the state's rows."""
    if pssm.log_probs.shape != state.sites.shape:
        raise DomainError(f"PSSM shape {pssm.log_probs.shape} does not match state {state.sites.shape}")
    return (state.sites * pssm.log_probs).sum(axis=1)


def masked_score(site_scores: np.ndarray, masks: np.ndarray) -> float:
    return float(np.mean([site_scores[m].mean() for m in masks]))


def pssm_soft_mask_score(state: SimplexState, pssm: PSSM, p_mask: float = 0.15, n_masks: int = 8,
                         stream: RandomStream | None = None, masks: np.ndarray | None = None) -> float:
    """Mean over random masks of the per-site expected PSSM log-probability."""
    if masks is None:
        if stream is None:
            raise DomainError("need a stream or explicit masks")
        masks = random_masks(~state.gap_mask, p_mask, n_masks, stream)
    return masked_score(site_log_scores(state, pssm), masks)


def changed_sites(state_mut: SimplexState, state_base: SimplexState, delta: float) -> np.ndarray:
    """Sites whose argmax changed or whose total variation moved by more than ``delta``."""
    if state_mut.sites.shape != state_base.sites.shape or not np.array_equal(state_mut.gap_mask, state_base.gap_mask):
        raise DomainError("states differ in shape or gap mask")
    moved = 0.5 * np.abs(state_mut.sites - state_base.sites).sum(axis=1) > delta
    flipped = np.argmax(state_mut.sites, axis=1) != np.argmax(state_base.sites, axis=1)
    return (moved | flipped) & ~state_mut.gap_mask


def hybrid_fitness(state_mut: SimplexState, state_base: SimplexState, pssm: PSSM, delta: float = 0.1,
                   p_mask: float = 0.15, n_masks: int = 8, stream: RandomStream | None = None,
                   masks: np.ndarray | None = None) -> float:
    """Global soft-mask score plus the score change restricted to changed sites."""
    changed = changed_sites(state_mut, state_base, delta)
    if masks is None:
        if stream is None:
            raise DomainError("need a stream or explicit masks")
        masks = random_masks(~state_mut.gap_mask, p_mask, n_masks, stream)
    s_mut = site_log_scores(state_mut, pssm)
    total = masked_score(s_mut, masks)
    if changed.any():
        total += float(s_mut[changed].mean() - site_log_scores(state_base, pssm)[changed].mean())
    return total


class PSSMFitness:
    """Hybrid PSSM fitness with masks fixed at construction.

    Sharing one mask set across all particles of a reroute call makes their
    scores directly comparable.
    """

    def __init__(self, pssm: PSSM, gap_mask, stream: RandomStream, delta: float = 0.1,
                 p_mask: float = 0.15, n_masks: int = 8):
        self.pssm = pssm
        self.delta = delta
        self.masks = random_masks(~np.asarray(gap_mask, bool), p_mask, n_masks, stream)

    def __call__(self, state: SimplexState, base: SimplexState | None = None) -> float:
        if base is None:
            return pssm_soft_mask_score(state, self.pssm, masks=self.masks)
        return hybrid_fitness(state, base, self.pssm, self.delta, masks=self.masks)


# ---------------------------------------------------------------------------
# selection


def select_weights(scores, beta: float) -> np.ndarray:
    """``w ~ exp(beta * J)`` via a max shift."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0 or not np.all(np.isfinite(s)):
        raise DomainError("scores must be a non-empty finite vector")
    if beta < 0:
        raise DomainError("beta must be non-negative")
    z = beta * s
    w = np.exp(z - z.max())
    return w / w.sum()


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=np.float64)
    return float(1.0 / np.sum(w * w))


def resample_indices(weights, scheme: str, stream: RandomStream, n: int | None = None) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.min() < 0.0 or abs(w.sum() - 1.0) > 1e-12:
        raise DomainError("resampling needs normalized non-negative weights")
    M = w.size if n is None else n
    cdf = np.cumsum(w)
    cdf[-1] = 1.0
    if scheme == MULTINOMIAL:
        u = stream.generator.random(M)
    elif scheme == SYSTEMATIC:
        u = (stream.generator.random() + np.arange(M)) / M
    else:
        raise DomainError(f"unknown resampling scheme {scheme!r}")
    return np.minimum(np.searchsorted(cdf, u, side="right"), w.size - 1)


def resample(population: ParticlePopulation, scheme: str, stream: RandomStream) -> ParticlePopulation:
    """Offspring drawn by ``scheme``; weights reset to uniform."""
    if population.weights is None:
        raise DomainError("population weights are not set")
    idx = resample_indices(population.weights, scheme, stream)
    scores = None if population.scores is None else np.asarray(population.scores)[idx]
    return ParticlePopulation([population.particles[i] for i in idx], scores,
                              np.full(population.M, 1.0 / population.M))


@dataclass
class RoundRecord:
    round: int
    min_score: float
    mean_score: float
    max_score: float
    ess: float


@dataclass
class RerouteResult:
    best: SimplexState
    best_score: float
    initial_scores: np.ndarray
    final_population: ParticlePopulation
    trace: list[RoundRecord] = field(default_factory=list)


def _batch_logits(denoiser: Denoiser, particles: Sequence[SimplexState]) -> np.ndarray:
    x = np.stack([p.sites for p in particles])
    gap = np.stack([p.gap_mask for p in particles])
    return denoiser.logits(x, gap, particles[0].t, [p.family_id for p in particles])


def reroute(population: ParticlePopulation, denoiser: Denoiser, scorer: FitnessScorer | Callable,
            prior: FamilyPrior, mconfig: MutationConfig, rconfig: RerouteConfig, t_max: float,
            stream: RandomStream) -> RerouteResult:
    """R rounds of mutate, score, tilt and resample; returns the top particle.

    Each round queries the denoiser once for the whole population.  The
    returned particle has the highest final-round score, ties going to the
    lowest index.
    """
    particles = list(population.particles)
    t0 = particles[0].t
    if any(abs(p.t - t0) > 1e-12 for p in particles):
        raise DomainError("all particles must share the same time")
    initial = np.array([scorer(p) for p in particles])
    trace = []
    scores = initial
    weights = np.full(len(particles), 1.0 / len(particles))
    for r in range(rconfig.rounds):
        rs = stream.spawn("round", r)
        logits = _batch_logits(denoiser, particles) if mconfig.mu > 0.0 else None
        mutated = []
        for m, p in enumerate(particles):
            lg = None if logits is None else logits[m]
            mutated.append(token_dirichlet_mutate(p, denoiser, prior, mconfig, t_max, rs.spawn("mutate", m), lg))
        scores = np.array([scorer(q, p) for q, p in zip(mutated, particles)])
        if not np.all(np.isfinite(scores)):
            raise DomainError(f"non-finite fitness in round {r}")
        weights = select_weights(scores, rconfig.betas[r])
        trace.append(RoundRecord(r, float(scores.min()), float(scores.mean()), float(scores.max()),
                                 effective_sample_size(weights)))
        pop = resample(ParticlePopulation(mutated, scores, weights), rconfig.scheme, rs.spawn("resample"))
        particles, scores = pop.particles, pop.scores
    best = int(np.argmax(scores))
    final = ParticlePopulation(particles, scores, np.full(len(particles), 1.0 / len(particles)))
    return RerouteResult(particles[best], float(scores[best]), initial, final, trace)


def format_reroute_trace(rows: Sequence[RoundRecord], comments: Sequence[str] = ()) -> str:
    out = io.StringIO()
    for c in comments:
        out.write(f"# {c}\n")
    out.write("round\tmin_score\tmean_score\tmax_score\tess\n")
    for r in rows:
        out.write(f"{r.round}\t{r.min_score!r}\t{r.mean_score!r}\t{r.max_score!r}\t{r.ess!r}\n")
    return out.getvalue()


# ---------------------------------------------------------------------------
# closed-form tilt


def tilted_distribution_oracle(support_probs, J_values, beta: float) -> np.ndarray:
    """``q_beta ~ exp(beta J) p`` on a finite support."""
    p = np.asarray(support_probs, dtype=np.float64)
    J = np.asarray(J_values, dtype=np.float64)
    if p.shape != J.shape or p.ndim != 1:
        raise DomainError("probabilities and J values must be matching vectors")
    if np.any(p < 0) or p.sum() <= 0:
        raise DomainError("support probabilities must be non-negative with positive mass")
    p = p / p.sum()
    with np.errstate(divide="ignore"):
        logq = np.log(p) + beta * J
    logq -= logq[p > 0].max()
    q = np.where(p > 0, np.exp(logq), 0.0)
    return q / q.sum()


def log_partition(support_probs, J_values, beta: float) -> float:
    """``ln Z_beta = ln E_p[exp(beta J)]``."""
    p = np.asarray(support_probs, dtype=np.float64)
    J = np.asarray(J_values, dtype=np.float64)
    p = p / p.sum()
    z = beta * J[p > 0]
    m = z.max()
    return float(m + math.log(np.sum(p[p > 0] * np.exp(z - m))))


def kl_divergence(q, p) -> float:
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if np.any((q > 0) & (p <= 0)):
        raise DomainError("q is not absolutely continuous with respect to p")
    nz = q > 0
    return float(np.sum(q[nz] * (np.log(q[nz]) - np.log(p[nz]))))


def kl_objective(q, p_mut, J_values, beta: float) -> float:
    """``E_q[J] - KL(q || p_mut) / beta``."""
    if beta <= 0:
        raise DomainError("beta must be positive")
    q = np.asarray(q, dtype=np.float64)
    J = np.asarray(J_values, dtype=np.float64)
    return float(np.sum(q[q > 0] * J[q > 0]) - kl_divergence(q, p_mut) / beta)
