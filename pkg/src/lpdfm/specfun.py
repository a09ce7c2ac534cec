"""Special functions and seeded samplers.

The incomplete-beta kernels are compiled with numba because the transport
speed evaluates them for every (site, target residue) pair at every Euler
step.  Scalar entry points validate their arguments; the ``*_array``
variants assume the caller already did.
"""

from __future__ import annotations

import hashlib
import math

import numba
import numpy as np

from .errors import DomainError

SIMPLEX_TOL = 1e-9
NEG_TOL = 1e-12
TINY = float(np.finfo(np.float64).tiny)

_CF_EPS = 1e-15
_CF_FPMIN = 1e-300
_CF_MAXIT = 100_000


# ---------------------------------------------------------------------------
# random streams


class RandomStream:
    """Seeded, reproducible source of randomness.

    A stream is identified by ``(seed, stream_id)``.  Child streams derived
    with :meth:`spawn` depend only on that identity and the spawn keys, never
    on how many draws the parent has consumed, so any sub-computation can be
    regenerated in isolation.
    """

    __slots__ = ("seed", "stream_id", "_gen")

    def __init__(self, seed: int, stream_id: int = 0):
        for name, value in (("seed", seed), ("stream_id", stream_id)):
            if not isinstance(value, (int, np.integer)) or not 0 <= int(value) < 2**64:
                raise DomainError(f"{name} must be an unsigned 64-bit integer, got {value!r}")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        seq = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def __repr__(self):
        return f"RandomStream(seed={self.seed}, stream_id={self.stream_id})"

    def spawn(self, *keys) -> "RandomStream":
        """Child stream keyed by ``keys`` (strings or integers)."""
        h = hashlib.blake2b(digest_size=8)
        h.update(self.stream_id.to_bytes(8, "little"))
        for key in keys:
            h.update(b"\x1f")
            h.update(str(key).encode())
        return RandomStream(self.seed, int.from_bytes(h.digest(), "little"))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, size=None):
        """Uniform draws on the half-open interval (0, 1]."""
        return 1.0 - self._gen.random(size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)


# ---------------------------------------------------------------------------
# beta-function family


_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@numba.njit(cache=True)
def _stirling_remainder(x):
    # lgamma(x) - ((x - 1/2) ln x - x + ln(2 pi)/2), valid for x >= 10
    r = 1.0 / x
    r2 = r * r
    return r * (1.0 / 12.0 + r2 * (-1.0 / 360.0 + r2 * (1.0 / 1260.0 + r2 * (
        -1.0 / 1680.0 + r2 * (1.0 / 1188.0 + r2 * (-691.0 / 360360.0 + r2 / 156.0))))))


@numba.njit(cache=True)
def _lbeta(a, b):
    p = min(a, b)
    q = max(a, b)
    if q < 10.0:
        return math.lgamma(p) + math.lgamma(q) - math.lgamma(p + q)
    s = p + q
    corr = _stirling_remainder(q) - _stirling_remainder(s)
    if p < 10.0:
        # lgamma(q) - lgamma(p + q) without cancellation
        return math.lgamma(p) + corr + p - p * math.log(s) + (q - 0.5) * math.log1p(-p / s)
    return (_HALF_LOG_2PI - 0.5 * math.log(s) + _stirling_remainder(p) + corr
            + (p - 0.5) * math.log(p / s) + (q - 0.5) * math.log1p(-p / s))


@numba.njit(cache=True)
def _betacf(z, a, b):
    # modified Lentz evaluation of the incomplete-beta continued fraction
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * z / qap
    if abs(d) < _CF_FPMIN:
        d = _CF_FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAXIT):
        m2 = 2 * m
        aa = m * (b - m) * z / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_FPMIN:
            d = _CF_FPMIN
        c = 1.0 + aa / c
        if abs(c) < _CF_FPMIN:
            c = _CF_FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * z / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_FPMIN:
            d = _CF_FPMIN
        c = 1.0 + aa / c
        if abs(c) < _CF_FPMIN:
            c = _CF_FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            break
    return h


@numba.njit(cache=True)
def _lower_tail(z, a, b):
    # I_z(a, b) by the direct continued fraction
    log_front = a * math.log(z) + b * math.log1p(-z) - _lbeta(a, b)
    return math.exp(log_front) * _betacf(z, a, b) / a


@numba.njit(cache=True)
def _upper_tail(z, a, b):
    # 1 - I_z(a, b) = I_{1-z}(b, a)
    return _lower_tail(1.0 - z, b, a)


@numba.njit(cache=True)
def _reg_inc_beta(z, a, b):
    if z <= 0.0:
        return 0.0
    if z >= 1.0:
        return 1.0
    if z <= a / (a + b):
        return _lower_tail(z, a, b)
    return 1.0 - _upper_tail(z, a, b)


@numba.njit(cache=True)
def _d_a_reg_inc_beta(z, a, b):
    if z <= 0.0 or z >= 1.0:
        return 0.0
    h = max(1e-5, 1e-4 * a)
    if h > 0.5 * a:
        h = 0.5 * a
    # differentiate whichever tail is small so the difference keeps relative accuracy
    lower = z <= a / (a + b)
    if lower:
        d1 = (_lower_tail(z, a + h, b) - _lower_tail(z, a - h, b)) / (2.0 * h)
        d2 = (_lower_tail(z, a + 0.5 * h, b) - _lower_tail(z, a - 0.5 * h, b)) / h
    else:
        d1 = (_upper_tail(z, a - h, b) - _upper_tail(z, a + h, b)) / (2.0 * h)
        d2 = (_upper_tail(z, a - 0.5 * h, b) - _upper_tail(z, a + 0.5 * h, b)) / h
    return (4.0 * d2 - d1) / 3.0


@numba.njit(cache=True)
def _reg_inc_beta_vec(z, a, b, out):
    for k in range(z.size):
        out[k] = _reg_inc_beta(z[k], a[k], b[k])


@numba.njit(cache=True)
def _d_a_reg_inc_beta_vec(z, a, b, out):
    for k in range(z.size):
        out[k] = _d_a_reg_inc_beta(z[k], a[k], b[k])


@numba.njit(cache=True)
def _lbeta_vec(a, b, out):
    for k in range(a.size):
        out[k] = _lbeta(a[k], b[k])


def _check_positive(name, value):
    value = float(value)
    if not math.isfinite(value) or value <= 0.0:
        raise DomainError(f"{name} must be positive and finite, got {value!r}")
    return value


def _check_unit(z):
    z = float(z)
    if not 0.0 <= z <= 1.0:
        raise DomainError(f"z must lie in [0, 1], got {z!r}")
    return z


def log_beta(a: float, b: float) -> float:
    """Natural log of the Beta function B(a, b)."""
    a = _check_positive("a", a)
    b = _check_positive("b", b)
    return float(_lbeta(a, b))


def reg_inc_beta(z: float, a: float, b: float) -> float:
    """Regularized incomplete beta function I_z(a, b)."""
    z = _check_unit(z)
    a = _check_positive("a", a)
    b = _check_positive("b", b)
    return float(_reg_inc_beta(z, a, b))


def d_a_reg_inc_beta(z: float, a: float, b: float) -> float:
    """Partial derivative of I_z(a, b) with respect to ``a``.

    Central differences with step ``max(1e-5, 1e-4 a)`` and one Richardson
    level, taken on the smaller of the two tails.  Exactly zero at z=0 and
    z=1.
    """
    z = _check_unit(z)
    a = _check_positive("a", a)
    b = _check_positive("b", b)
    return float(_d_a_reg_inc_beta(z, a, b))


def _broadcast3(z, a, b):
    z, a, b = np.broadcast_arrays(
        np.asarray(z, dtype=np.float64),
        np.asarray(a, dtype=np.float64),
        np.asarray(b, dtype=np.float64),
    )
    shape = z.shape
    return (
        np.ascontiguousarray(z).ravel(),
        np.ascontiguousarray(a).ravel(),
        np.ascontiguousarray(b).ravel(),
        shape,
    )


def reg_inc_beta_array(z, a, b) -> np.ndarray:
    """Elementwise :func:`reg_inc_beta` over broadcast arrays (no validation)."""
    z, a, b, shape = _broadcast3(z, a, b)
    out = np.empty(z.size)
    _reg_inc_beta_vec(z, a, b, out)
    return out.reshape(shape)


def d_a_reg_inc_beta_array(z, a, b) -> np.ndarray:
    """Elementwise :func:`d_a_reg_inc_beta` over broadcast arrays (no validation)."""
    z, a, b, shape = _broadcast3(z, a, b)
    out = np.empty(z.size)
    _d_a_reg_inc_beta_vec(z, a, b, out)
    return out.reshape(shape)


def log_beta_array(a, b) -> np.ndarray:
    a, b = np.broadcast_arrays(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    shape = a.shape
    a = np.ascontiguousarray(a).ravel()
    b = np.ascontiguousarray(b).ravel()
    out = np.empty(a.size)
    _lbeta_vec(a, b, out)
    return out.reshape(shape)


# ---------------------------------------------------------------------------
# samplers


def _log_gamma_ge1(shape: np.ndarray, stream: RandomStream) -> np.ndarray:
    # Marsaglia-Tsang squeeze/rejection, vectorized over pending draws
    d = shape - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)
    out = np.empty(shape.size)
    pending = np.arange(shape.size)
    while pending.size:
        dp = d[pending]
        x = stream.normal(pending.size)
        v = 1.0 + c[pending] * x
        u = stream.uniform(pending.size)
        valid = v > 0.0
        v3 = np.where(valid, v, 1.0) ** 3
        log_v3 = np.log(v3)
        squeeze = u < 1.0 - 0.0331 * x**4
        accept = valid & (squeeze | (np.log(u) < 0.5 * x * x + dp * (1.0 - v3 + log_v3)))
        out[pending[accept]] = np.log(dp[accept]) + log_v3[accept]
        pending = pending[~accept]
    return out


def sample_log_gamma_array(shape, stream: RandomStream) -> np.ndarray:
    """Logarithms of independent Gamma(shape, 1) draws.

    Working in log space keeps draws for tiny shapes representable; shapes
    below one use the ``G(a+1) * U**(1/a)`` boost.
    """
    shape = np.asarray(shape, dtype=np.float64)
    flat = shape.ravel()
    if flat.size and not (np.all(np.isfinite(flat)) and flat.min() > 0.0):
        raise DomainError("gamma shape parameters must be positive and finite")
    small = flat < 1.0
    log_g = _log_gamma_ge1(np.where(small, flat + 1.0, flat), stream)
    if small.any():
        u = stream.uniform(int(small.sum()))
        log_g[small] += np.log(u) / flat[small]
    return log_g.reshape(shape.shape)


def sample_gamma_array(shape, stream: RandomStream) -> np.ndarray:
    """Independent Gamma(shape, 1) draws, floored at the smallest normal double."""
    return np.maximum(np.exp(sample_log_gamma_array(shape, stream)), TINY)


def sample_gamma(shape: float, stream: RandomStream) -> float:
    """One Gamma(shape, 1) draw; strictly positive."""
    shape = _check_positive("shape", shape)
    return float(sample_gamma_array(np.array([shape]), stream)[0])


def sample_dirichlet(alpha, stream: RandomStream) -> np.ndarray:
    """Draw from Dir(alpha); batched over leading axes of ``alpha``.

    Components are normalized in log space and floored at the smallest
    normal double, so every component is strictly positive.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim == 0 or alpha.shape[-1] < 1:
        raise DomainError("alpha must have at least one component")
    if not (np.all(np.isfinite(alpha)) and alpha.min() > 0.0):
        raise DomainError("Dirichlet concentrations must be positive and finite")
    if alpha.shape[-1] == 1:
        return np.ones_like(alpha)
    log_g = sample_log_gamma_array(alpha, stream)
    log_g -= log_g.max(axis=-1, keepdims=True)
    x = np.exp(log_g)
    x /= x.sum(axis=-1, keepdims=True)
    np.maximum(x, TINY, out=x)
    x /= x.sum(axis=-1, keepdims=True)
    return x


def as_simplex(probs, tol: float = SIMPLEX_TOL) -> np.ndarray:
    """Validate rows of ``probs`` against the simplex and renormalize them."""
    p = np.array(probs, dtype=np.float64)
    if p.ndim == 0 or p.shape[-1] == 0:
        raise DomainError("probability vector must be non-empty")
    if not np.all(np.isfinite(p)):
        raise DomainError("probability vector has non-finite entries")
    if p.min() < -NEG_TOL:
        raise DomainError(f"negative probability {p.min():.3e}")
    s = p.sum(axis=-1)
    if np.any(np.abs(s - 1.0) > tol):
        raise DomainError("probabilities do not sum to one within tolerance")
    np.clip(p, 0.0, None, out=p)
    return p / p.sum(axis=-1, keepdims=True)


def sample_categorical(probs, stream: RandomStream) -> int:
    """Index ``i`` (zero-based) drawn with probability ``probs[i]``."""
    p = as_simplex(probs)
    if p.ndim != 1:
        raise DomainError("sample_categorical expects a single probability vector")
    return int(sample_categorical_array(p, stream))


def sample_categorical_array(probs, stream: RandomStream) -> np.ndarray:
    """Inverse-CDF categorical draws, one per row of ``probs`` (no validation)."""
    p = np.asarray(probs, dtype=np.float64)
    cdf = np.cumsum(p, axis=-1)
    u = stream.generator.random(p.shape[:-1]) * cdf[..., -1]
    idx = (cdf <= u[..., None]).sum(axis=-1)
    # guard against u landing beyond the last positive-mass entry
    last = p.shape[-1] - 1 - np.argmax(p[..., ::-1] > 0.0, axis=-1)
    return np.minimum(idx, last)


def shannon_entropy(probs) -> float:
    """Shannon entropy in nats, with 0 ln 0 taken as 0."""
    p = as_simplex(probs)
    nz = p[p > 0.0]
    h = float(-np.sum(nz * np.log(nz)))
    return min(max(h, 0.0), math.log(p.shape[-1]))


def entropy_rows(probs) -> np.ndarray:
    """Row-wise entropy for an already-normalized matrix."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * np.log(p), 0.0)
    return np.clip(-terms.sum(axis=-1), 0.0, math.log(p.shape[-1]))


def log_sum_exp(values) -> float:
    """ln(sum(exp(values))) with a max shift."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise DomainError("log_sum_exp of an empty vector")
    m = v.max()
    if not np.isfinite(m):
        return float(m)
    return float(m + math.log(np.sum(np.exp(v - m))))
