"""Dirichlet transport on the product simplex.

The conditional path toward vertex ``e_i`` is ``Dir(alpha + t_max t e_i)``;
its generating field is ``c(x_i, t) (e_i - x)`` with the scalar speed
chosen so the Beta marginal of ``x_i`` satisfies the continuity equation.
The learned drift mixes these fields with classifier probabilities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Protocol, Sequence

import numba
import numpy as np

from . import ALPHABET
from .errors import DomainError, NumericError
from .lineage import FamilyPrior
from .specfun import (
    RandomStream,
    _d_a_reg_inc_beta,
    _lbeta,
    as_simplex,
    entropy_rows,
    sample_dirichlet,
)


@dataclass(frozen=True)
class FlowConfig:
    t_max: float = 6.0
    n_steps: int = 100
    z_clamp: float = 1e-6
    simplex_tolerance: float = 1e-9

    def __post_init__(self):
        if not self.t_max > 0 or self.n_steps < 1 or not 0.0 < self.z_clamp < 0.5:
            raise DomainError(f"invalid flow config {self}")

    @property
    def dt(self) -> float:
        return 1.0 / self.n_steps

    def step_index(self, t: float) -> int:
        """Grid index ``floor(t / dt)``, robust to rounding of ``t``."""
        return int(math.floor(t * self.n_steps + 1e-9))


@dataclass(frozen=True)
class SimplexState:
    """One sequence on the product simplex.  Gap rows are uniform and frozen."""

    family_id: str
    sites: np.ndarray
    gap_mask: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        sites = np.asarray(self.sites, dtype=np.float64)
        gap = np.asarray(self.gap_mask, dtype=bool)
        if sites.ndim != 2 or gap.shape != (sites.shape[0],):
            raise DomainError("sites must be L x K with one gap flag per row")
        object.__setattr__(self, "sites", sites)
        object.__setattr__(self, "gap_mask", gap)

    @property
    def L(self):
        return self.sites.shape[0]

    @property
    def K(self):
        return self.sites.shape[1]

    def validate(self, tol: float = 1e-9):
        rows = self.sites[~self.gap_mask]
        if rows.size:
            as_simplex(rows, tol)
        if self.gap_mask.any() and not np.all(self.sites[self.gap_mask] == 1.0 / self.K):
            raise DomainError("gap rows must be exactly uniform")


class Denoiser(Protocol):
    """Classifier over terminal residues, batched over sequences.

    ``x`` is ``(N, L, K)``, ``gap`` is ``(N, L)``; the result holds one
    categorical per site.  Gap rows of the output are ignored downstream.
    """

    def logits(self, x: np.ndarray, gap: np.ndarray, t: float, family_ids: Sequence[str]) -> np.ndarray: ...

    def predict_proba(self, x: np.ndarray, gap: np.ndarray, t: float, family_ids: Sequence[str]) -> np.ndarray: ...


def evaluate(denoiser: Denoiser, state: SimplexState, t: float | None = None) -> np.ndarray:
    """Single-state convenience wrapper around ``denoiser.predict_proba``."""
    t = state.t if t is None else t
    return denoiser.predict_proba(state.sites[None], state.gap_mask[None], t, [state.family_id])[0]


# ---------------------------------------------------------------------------
# conditional paths, speeds and fields


def sample_path_point(alpha_site, target: int, t: float, t_max: float, stream: RandomStream) -> np.ndarray:
    """Draw from ``Dir(alpha + t_max t e_target)``."""
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"t must be in [0, 1], got {t}")
    a = np.array(alpha_site, dtype=np.float64)
    if not 0 <= target < a.shape[-1]:
        raise DomainError(f"target {target} outside 0..{a.shape[-1] - 1}")
    a[..., target] += t_max * t
    return sample_dirichlet(a, stream)


@numba.njit(cache=True)
def _speed_kernel(z, a, b, t_max, clamp, out):
    log_t_max = math.log(t_max)
    for k in range(z.size):
        zc = min(max(z[k], clamp), 1.0 - clamp)
        d = _d_a_reg_inc_beta(zc, a[k], b[k])
        if d >= 0.0:
            out[k] = 0.0
            continue
        log_c = (log_t_max + math.log(-d) + _lbeta(a[k], b[k])
                 - (a[k] - 1.0) * math.log(zc) - b[k] * math.log1p(-zc))
        out[k] = math.exp(log_c)


def speed_array(z, a, b, t_max: float, z_clamp: float = 1e-6) -> np.ndarray:
    """Transport speed for target-coordinate values ``z`` and Beta params ``(a, b)``.

    ``a`` is the already time-shifted target concentration.  Evaluated in log
    space; raises :class:`NumericError` if any value is non-finite.
    """
    z, a, b = np.broadcast_arrays(np.asarray(z, float), np.asarray(a, float), np.asarray(b, float))
    shape = z.shape
    zf, af, bf = (np.ascontiguousarray(v).ravel() for v in (z, a, b))
    out = np.empty(zf.size)
    _speed_kernel(zf, af, bf, float(t_max), float(z_clamp), out)
    bad = ~np.isfinite(out)
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise NumericError("non-finite transport speed", z=zf[k], a=af[k], b=bf[k])
    return out.reshape(shape)


def conditional_speed(z: float, t: float, alpha_i: float, b: float, t_max: float = 6.0,
                      z_clamp: float = 1e-6) -> float:
    """Scalar speed ``c(z, t)`` for target concentration ``alpha_i`` and rest-mass ``b``."""
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"t must be in [0, 1], got {t}")
    if alpha_i <= 0 or b <= 0 or t_max <= 0:
        raise DomainError("alpha_i, b and t_max must be positive")
    return float(speed_array(z, alpha_i + t_max * t, b, t_max, z_clamp))


def conditional_field(x_site, target: int, t: float, alpha_site, t_max: float = 6.0,
                      z_clamp: float = 1e-6) -> np.ndarray:
    """``c(x_i, t) (e_i - x)`` for a single site."""
    x = np.asarray(x_site, dtype=np.float64)
    alpha = np.asarray(alpha_site, dtype=np.float64)
    b = alpha.sum() - alpha[target]
    c = conditional_speed(x[target], t, alpha[target], b, t_max, z_clamp)
    e = np.zeros_like(x)
    e[target] = 1.0
    return c * (e - x)


def drift_array(x: np.ndarray, probs: np.ndarray, alpha: np.ndarray, t: float, t_max: float,
                z_clamp: float = 1e-6) -> np.ndarray:
    """Classifier-weighted mixture of conditional fields, batched over leading axes.

    With ``w_i = p_i c_i`` the drift is ``w - x * sum(w)``.
    """
    a = alpha + t_max * t
    b = alpha.sum(axis=-1, keepdims=True) - alpha
    c = speed_array(x, a, b, t_max, z_clamp)
    w = probs * c
    return w - x * w.sum(axis=-1, keepdims=True)


def posterior_drift(x_site, classifier_probs, t: float, alpha_site, t_max: float = 6.0,
                    z_clamp: float = 1e-6) -> np.ndarray:
    """Drift at one site for a given classifier distribution over targets."""
    p = as_simplex(classifier_probs)
    return drift_array(np.asarray(x_site, float), p, np.asarray(alpha_site, float), t, t_max, z_clamp)


# ---------------------------------------------------------------------------
# integration


def project_rows(x: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] then renormalize each row (in place)."""
    np.clip(x, 0.0, 1.0, out=x)
    s = x.sum(axis=-1, keepdims=True)
    if np.any(s <= 0.0):
        raise NumericError("simplex row collapsed to zero during projection")
    x /= s
    return x


def euler_step_array(x: np.ndarray, gap: np.ndarray, drift: np.ndarray, dt: float) -> np.ndarray:
    """Batched Euler update with projection; gap rows are copied unchanged."""
    new = x + dt * np.where(gap[..., None], 0.0, drift)
    project_rows(new)
    new[gap] = x[gap]
    return new


def euler_step(state: SimplexState, drift, dt: float) -> SimplexState:
    if dt <= 0:
        raise DomainError("dt must be positive")
    drift = np.asarray(drift, dtype=np.float64)
    sites = euler_step_array(state.sites, state.gap_mask, drift, dt)
    return replace(state, sites=sites, t=state.t + dt)


def sample_gap_mask(prior: FamilyPrior, n: int, stream: RandomStream) -> np.ndarray:
    """``(n, L)`` independent Bernoulli(gap_rate) draws; no gaps when rates are unset."""
    rates = prior.gap_rates if prior.gap_rates is not None else np.zeros(prior.L)
    return stream.generator.random((n, prior.L)) < rates


def init_arrays(prior: FamilyPrior, n: int, stream: RandomStream,
                gap: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """``n`` initial states: Bernoulli gap masks and Dirichlet prior draws.

    A given ``gap`` (shape ``(L,)`` or ``(n, L)``) is used instead of drawing one.
    """
    L, K = prior.L, prior.K
    if gap is None:
        gap = sample_gap_mask(prior, n, stream)
    else:
        gap = np.array(np.broadcast_to(np.asarray(gap, bool), (n, L)))
    x = sample_dirichlet(np.broadcast_to(prior.alpha, (n, L, K)), stream)
    x[gap] = 1.0 / K
    return x, gap


def init_state(prior: FamilyPrior, stream: RandomStream) -> SimplexState:
    x, gap = init_arrays(prior, 1, stream)
    return SimplexState(prior.family_id, x[0], gap[0], 0.0)


TrajectoryHook = Callable[[int, float, np.ndarray, np.ndarray], None]


def integrate_arrays(x: np.ndarray, gap: np.ndarray, alpha: np.ndarray, family_ids: Sequence[str],
                     denoiser: Denoiser, t_from: float, t_to: float, config: FlowConfig,
                     hook: TrajectoryHook | None = None) -> np.ndarray:
    """Fixed-step Euler over grid steps ``floor(t_from/dt) .. floor(t_to/dt) - 1``.

    ``x`` is ``(N, L, K)``; ``alpha`` broadcasts against it.  One denoiser
    call per step covers the whole batch.
    """
    if not 0.0 <= t_from <= t_to <= 1.0:
        raise DomainError(f"need 0 <= t_from <= t_to <= 1, got {t_from}, {t_to}")
    dt = config.dt
    x = np.array(x, dtype=np.float64)
    live = ~np.asarray(gap, dtype=bool)
    alpha_live = np.broadcast_to(alpha, x.shape)[live]
    for n in range(config.step_index(t_from), config.step_index(t_to)):
        t = n * dt
        try:
            probs = denoiser.predict_proba(x, gap, t, family_ids)
        except Exception as exc:
            raise type(exc)(f"denoiser failed at step {n}: {exc}") from exc
        # gap rows are frozen, so their speeds are never needed
        drift = np.zeros_like(x)
        drift[live] = drift_array(x[live], probs[live], alpha_live, t, config.t_max, config.z_clamp)
        x = euler_step_array(x, gap, drift, dt)
        if hook is not None:
            hook(n, t + dt, x, gap)
    return x


def integrate(state: SimplexState, denoiser: Denoiser, prior: FamilyPrior, t_from: float, t_to: float,
              config: FlowConfig = FlowConfig(), hook: TrajectoryHook | None = None) -> SimplexState:
    if abs(state.t - t_from) > 1e-9:
        raise DomainError(f"state is at t={state.t}, integration starts at {t_from}")
    x = integrate_arrays(state.sites[None], state.gap_mask[None], prior.alpha[None], [state.family_id],
                         denoiser, t_from, t_to, config, hook)
    t_end = config.step_index(t_to) * config.dt if t_to > t_from else state.t
    return replace(state, sites=x[0], t=t_end)


def trajectory_summary(x: np.ndarray, gap: np.ndarray) -> tuple[float, float]:
    """Mean max-probability and mean entropy over non-gap sites."""
    rows = x[~gap]
    if rows.size == 0:
        return float("nan"), float("nan")
    return float(rows.max(axis=-1).mean()), float(entropy_rows(rows).mean())


def decode_indices(x: np.ndarray) -> np.ndarray:
    return np.argmax(x, axis=-1)


def decode(state: SimplexState, alphabet: str = ALPHABET) -> str:
    """Per-site argmax (ties to the lowest index) with gap sites removed."""
    idx = decode_indices(state.sites)
    return "".join(alphabet[i] for i, g in zip(idx, state.gap_mask) if not g)


class TargetDenoiser:
    """Degenerate classifier that always predicts a fixed target residue.

    Integrating with it follows the exact conditional field toward that
    vertex; useful for checking the transport itself.
    """

    def __init__(self, target: int, K: int):
        self.target = target
        self.K = K

    def predict_proba(self, x, gap, t, family_ids):
        p = np.zeros(x.shape)
        p[..., self.target] = 1.0
        return p

    def logits(self, x, gap, t, family_ids):
        return np.log(np.maximum(self.predict_proba(x, gap, t, family_ids), 1e-300))
