"""Terminal-residue classifiers: an exact Bayes oracle and a small trainable MLP."""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import gammaln, log_softmax, softmax

from .errors import DomainError
from .lineage import AlignedFamily, FamilyPrior, TRAIN
from .specfun import RandomStream, as_simplex, sample_categorical_array, sample_dirichlet

PROB_FLOOR = 1e-12
LOG_FLOOR = math.log(PROB_FLOOR)
X_FLOOR = 1e-8
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# Bayes oracle


def oracle_log_posterior(x: np.ndarray, s, alpha: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Unnormalized log p(y=i | x) for the path ``Dir(alpha + s e_y)`` with ``y ~ q``.

    Everything broadcasts over leading axes; ``s`` may be an array matching
    them.  Zero-probability labels get ``-inf``.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim:
        s = s[..., None]
    with np.errstate(divide="ignore"):
        log_q = np.log(q)
        log_x = np.log(np.maximum(x, 1e-300))
    return log_q + s * log_x + gammaln(alpha) - gammaln(alpha + s)


def _normalize_logits(logp: np.ndarray) -> np.ndarray:
    m = np.max(logp, axis=-1, keepdims=True)
    p = np.exp(logp - m)
    return p / p.sum(axis=-1, keepdims=True)


def oracle_posterior(x_site, t: float, alpha_site, q_site, t_max: float = 6.0) -> np.ndarray:
    """Exact posterior over the terminal residue at one site."""
    q = np.asarray(q_site, dtype=np.float64)
    if not np.any(q > 0.0):
        raise DomainError("label distribution has no mass")
    q = as_simplex(q)
    return _normalize_logits(oracle_log_posterior(np.asarray(x_site, float), t_max * t,
                                                  np.asarray(alpha_site, float), q))


def mixture_log_posterior(x: np.ndarray, s: float, alphas: np.ndarray, qs: np.ndarray,
                          weights: np.ndarray) -> np.ndarray:
    """log p(y | x) when the family is unknown: ``x`` drawn from a family mixture.

    ``alphas`` and ``qs`` are ``(H, K)`` for one site; ``x`` is ``(n, K)``.
    """
    log_x = np.log(np.maximum(x, 1e-300))  # (n, K)
    with np.errstate(divide="ignore"):
        log_q = np.log(qs)
    # log Dir(x; alpha_h + s e_i) up to terms shared by all (h, i)
    a0 = alphas.sum(axis=1)  # (H,)
    base = ((alphas - 1.0)[None] * log_x[:, None, :]).sum(-1)  # (n, H)
    base = base + gammaln(a0 + s)[None] - gammaln(alphas).sum(1)[None]
    per = s * log_x[:, None, :] + gammaln(alphas)[None] - gammaln(alphas + s)[None]  # (n, H, K)
    joint = np.log(weights)[None, :, None] + log_q[None] + base[..., None] + per
    m = joint.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(joint - m).sum(axis=1, keepdims=True)))[:, 0, :]


class BayesOracleDenoiser:
    """Exact site posteriors for families whose true site laws are known."""

    def __init__(self, alphas: Mapping[str, np.ndarray], truths: Mapping[str, np.ndarray], t_max: float = 6.0):
        self.alphas = {k: np.asarray(v, float) for k, v in alphas.items()}
        self.truths = {k: np.asarray(v, float) for k, v in truths.items()}
        self.t_max = t_max

    def logits(self, x, gap, t, family_ids):
        out = np.empty(x.shape)
        s = self.t_max * t
        for n, fid in enumerate(family_ids):
            out[n] = oracle_log_posterior(x[n], s, self.alphas[fid], self.truths[fid])
        return out

    def predict_proba(self, x, gap, t, family_ids):
        return _normalize_logits(self.logits(x, gap, t, family_ids))


@dataclass(frozen=True)
class AccuracyPoint:
    t: float
    mean: float
    stderr: float


def bayes_accuracy_curve(prior: FamilyPrior, truth: np.ndarray, time_grid: Sequence[float], n_mc: int,
                         t_max: float, stream: RandomStream, label_prior: np.ndarray | None = None,
                         alpha_override: np.ndarray | None = None) -> list[AccuracyPoint]:
    """Monte-Carlo estimate of ``E[max_i p(y=i | x_t)]`` per grid time.

    Labels are drawn from ``truth`` at a uniformly chosen site and ``x_t``
    from the path ``Dir(alpha + t_max t e_y)``.  The decoder believes labels
    follow ``label_prior`` (default: ``truth``).  ``alpha_override`` swaps
    the path concentrations, e.g. all ones for the uniform-prior ablation.
    """
    alpha = prior.alpha if alpha_override is None else np.asarray(alpha_override, float)
    truth = np.asarray(truth, float)
    belief = truth if label_prior is None else np.asarray(label_prior, float)
    L, K = alpha.shape
    out = []
    for t in time_grid:
        s = t_max * t
        sites = stream.generator.integers(L, size=n_mc)
        y = sample_categorical_array(truth[sites], stream)
        a = alpha[sites].copy()
        a[np.arange(n_mc), y] += s
        x = sample_dirichlet(a, stream)
        p = _normalize_logits(oracle_log_posterior(x, s, alpha[sites], belief[sites]))
        m = p.max(axis=1)
        out.append(AccuracyPoint(float(t), float(m.mean()), float(m.std(ddof=1) / math.sqrt(n_mc))))
    return out


# ---------------------------------------------------------------------------
# loss


def cross_entropy_loss(predictions, targets, valid_mask) -> float:
    """Mean negative log-probability of the targets over valid sites."""
    p = np.asarray(predictions, dtype=np.float64)
    valid = np.asarray(valid_mask, dtype=bool)
    if not valid.any():
        raise DomainError("no valid sites")
    tgt = np.asarray(targets)
    if tgt.ndim == p.ndim:
        tgt = np.argmax(tgt, axis=-1)
    picked = np.take_along_axis(p, tgt[..., None], axis=-1)[..., 0]
    return float(-np.mean(np.log(np.maximum(picked[valid], PROB_FLOOR))))


# ---------------------------------------------------------------------------
# trainable classifier


@dataclass(frozen=True)
class ModelConfig:
    K: int = 20
    window: int = 5
    hidden: tuple[int, int] = (128, 128)
    n_freq: int = 8

    @property
    def row_features(self) -> int:
        return 2 * self.K + 1

    @property
    def input_dim(self) -> int:
        return (2 * self.window + 1) * self.row_features


def time_features(t: np.ndarray, n_freq: int) -> np.ndarray:
    """Sinusoidal embedding; frequencies pi * 2**(k-1) for k = 0..n_freq-1."""
    t = np.asarray(t, dtype=np.float64)
    w = math.pi * 2.0 ** (np.arange(n_freq) - 1.0)
    ang = t[..., None] * w
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def site_features(x: np.ndarray, gap: np.ndarray, window: int) -> np.ndarray:
    """Windowed per-site inputs ``(N, L, W * (2K+1))``.

    Each row contributes its simplex values, a scaled log of them and a
    missing flag.  Missing rows and positions past either end are the
    uniform vector with the flag set.
    """
    N, L, K = x.shape
    xr = np.where(gap[..., None], 1.0 / K, x)
    logs = 1.0 + np.log(np.maximum(xr, X_FLOOR)) / -math.log(X_FLOOR)
    rows = np.concatenate([xr, logs, gap[..., None].astype(np.float64)], axis=-1)
    pad_row = np.concatenate([np.full(K, 1.0 / K), np.full(K, 1.0 + math.log(1.0 / K) / -math.log(X_FLOOR)), [1.0]])
    padded = np.empty((N, L + 2 * window, rows.shape[-1]))
    padded[:, :window] = pad_row
    padded[:, L + window:] = pad_row
    padded[:, window:L + window] = rows
    views = [padded[:, j:j + L] for j in range(2 * window + 1)]
    return np.concatenate(views, axis=-1)


class TrainableDenoiser:
    """Windowed two-hidden-layer tanh network producing per-site logits.

    Time enters as a learned projection of sinusoidal features added to the
    first hidden pre-activation.
    """

    PARAM_NAMES = ("W1", "b1", "Wt", "W2", "b2", "W3", "b3")

    def __init__(self, config: ModelConfig, params: Mapping[str, np.ndarray] | None = None,
                 stream: RandomStream | None = None, step: int = 0):
        self.config = config
        self.step = step
        if params is None:
            if stream is None:
                raise DomainError("initializing parameters needs a random stream")
            params = self._init_params(stream)
        self.params = {k: np.array(params[k], dtype=np.float64) for k in self.PARAM_NAMES}

    def _init_params(self, stream: RandomStream) -> dict[str, np.ndarray]:
        c = self.config
        h1, h2 = c.hidden
        gen = stream.generator

        def glorot(n_in, n_out):
            lim = math.sqrt(6.0 / (n_in + n_out))
            return gen.uniform(-lim, lim, size=(n_in, n_out))

        return {
            "W1": glorot(c.input_dim, h1), "b1": np.zeros(h1),
            "Wt": glorot(2 * c.n_freq, h1),
            "W2": glorot(h1, h2), "b2": np.zeros(h2),
            "W3": glorot(h2, c.K), "b3": np.zeros(c.K),
        }

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    # forward / backward ---------------------------------------------------

    def _forward(self, x, gap, t):
        p = self.params
        N = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (N,))
        feats = site_features(x, gap, self.config.window)
        tf = time_features(t, self.config.n_freq)
        z1 = feats @ p["W1"] + p["b1"] + (tf @ p["Wt"])[:, None, :]
        h1 = np.tanh(z1)
        h2 = np.tanh(h1 @ p["W2"] + p["b2"])
        logits = h2 @ p["W3"] + p["b3"]
        return logits, (feats, tf, h1, h2)

    def logits(self, x, gap, t, family_ids=None):
        return self._forward(np.asarray(x, float), np.asarray(gap, bool), t)[0]

    def predict_proba(self, x, gap, t, family_ids=None):
        return softmax(self.logits(x, gap, t), axis=-1)

    def loss_and_grad(self, x, gap, t, targets, valid):
        """Sequence-averaged cross-entropy and its parameter gradients.

        Sequences without any valid site are excluded from the average.
        """
        logits, (feats, tf, h1, h2) = self._forward(x, gap, t)
        logp = log_softmax(logits, axis=-1)
        tgt = np.where(valid, targets, 0)
        picked = np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
        floored = picked < LOG_FLOOR
        picked = np.maximum(picked, LOG_FLOOR)
        n_valid = valid.sum(axis=1)
        used = n_valid > 0
        n_seq = int(used.sum())
        if n_seq == 0:
            raise DomainError("no valid sites in batch")
        w = np.where(valid, 1.0 / np.maximum(n_valid, 1)[:, None], 0.0) / n_seq
        loss = float(-(w * picked).sum())
        # d loss / d logits = w * (softmax - onehot), zero where the floor is active
        g = np.exp(logp)
        g[np.arange(g.shape[0])[:, None], np.arange(g.shape[1])[None, :], tgt] -= 1.0
        g *= np.where(floored, 0.0, w)[..., None]
        p = self.params
        grads = {}
        F = feats.shape[-1]
        H1, H2 = h1.shape[-1], h2.shape[-1]
        grads["W3"] = h2.reshape(-1, H2).T @ g.reshape(-1, g.shape[-1])
        grads["b3"] = g.sum(axis=(0, 1))
        d2 = (g @ p["W3"].T) * (1.0 - h2 * h2)
        grads["W2"] = h1.reshape(-1, H1).T @ d2.reshape(-1, H2)
        grads["b2"] = d2.sum(axis=(0, 1))
        d1 = (d2 @ p["W2"].T) * (1.0 - h1 * h1)
        grads["W1"] = feats.reshape(-1, F).T @ d1.reshape(-1, H1)
        grads["b1"] = d1.sum(axis=(0, 1))
        grads["Wt"] = tf.T @ d1.sum(axis=1)
        return loss, grads, logits

    # persistence ------------------------------------------------------------

    def save(self, path_or_file, metadata: Mapping[str, str] | None = None):
        meta = {"version": CHECKPOINT_VERSION, "config": asdict(self.config), "step": self.step}
        if metadata:
            meta["metadata"] = dict(metadata)
        arrays = {k: self.params[k] for k in self.PARAM_NAMES}
        arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
        np.savez(path_or_file, **arrays)

    @classmethod
    def load(cls, path_or_file) -> "TrainableDenoiser":
        with np.load(path_or_file) as data:
            meta = json.loads(bytes(data["__meta__"]).decode())
            if meta.get("version") != CHECKPOINT_VERSION:
                raise DomainError(f"unsupported checkpoint version {meta.get('version')}")
            cfg = meta["config"]
            cfg["hidden"] = tuple(cfg["hidden"])
            params = {k: data[k] for k in cls.PARAM_NAMES}
        return cls(ModelConfig(**cfg), params=params, step=int(meta["step"]))

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        self.save(buf)
        return buf.getvalue()


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    batch_size: int = 16
    steps: int = 2000
    t_max: float = 6.0
    log_every: int = 50
    hard_t: float = 0.2

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.steps < 0 or self.log_every < 1:
            raise DomainError(f"invalid training config {self}")


@dataclass
class TraceRow:
    step: int
    loss: float
    hard_accuracy: float


@dataclass
class TrainResult:
    model: TrainableDenoiser
    trace: list[TraceRow] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    skipped: int = 0


class TrainingSet:
    """Training rows of several families, padded to a common length."""

    def __init__(self, dataset: Sequence[tuple[AlignedFamily, FamilyPrior]]):
        if not dataset:
            raise DomainError("empty training set")
        self.L = max(f.L for f, _ in dataset)
        K = dataset[0][1].K
        codes, alphas = [], []
        for fam, prior in dataset:
            if prior.L != fam.L or prior.K != K:
                raise DomainError(f"prior shape does not match family {fam.family_id!r}")
            c = fam.codes()[fam.split_mask(TRAIN)]
            pad = self.L - fam.L
            c = np.pad(c, ((0, 0), (0, pad)), constant_values=-1)
            a = np.pad(prior.alpha, ((0, pad), (0, 0)), constant_values=1.0)
            codes.append(c)
            alphas.append(np.broadcast_to(a, (c.shape[0],) + a.shape))
        self.codes = np.concatenate(codes)
        self.alpha = np.concatenate(alphas)
        self.K = K

    def __len__(self):
        return self.codes.shape[0]


def make_batch(data: TrainingSet, idx: np.ndarray, t: np.ndarray, t_max: float, stream: RandomStream):
    """Noisy states for rows ``idx`` at times ``t`` (one per row)."""
    codes = data.codes[idx]
    valid = codes >= 0
    onehot = np.zeros(codes.shape + (data.K,))
    np.put_along_axis(onehot, np.where(valid, codes, 0)[..., None], 1.0, axis=-1)
    onehot *= valid[..., None]
    alpha_t = data.alpha[idx] + (t_max * t)[:, None, None] * onehot
    x = sample_dirichlet(alpha_t, stream)
    x[~valid] = 1.0 / data.K
    return x, ~valid, np.where(valid, codes, 0), valid


def train(dataset: Sequence[tuple[AlignedFamily, FamilyPrior]] | TrainingSet, model: TrainableDenoiser,
          config: TrainConfig, stream: RandomStream) -> TrainResult:
    """Plain SGD on the masked, sequence-averaged cross-entropy."""
    data = dataset if isinstance(dataset, TrainingSet) else TrainingSet(dataset)
    result = TrainResult(model)
    gen = stream.generator
    lr = config.learning_rate
    acc_loss, acc_n, hard_hits, hard_n = 0.0, 0, 0, 0
    for _ in range(config.steps):
        idx = gen.integers(len(data), size=config.batch_size)
        t = gen.random(config.batch_size)
        x, gap, targets, valid = make_batch(data, idx, t, config.t_max, stream)
        keep = valid.any(axis=1)
        if not keep.all():
            result.skipped += int((~keep).sum())
            if not keep.any():
                continue
            x, gap, targets, valid, t = x[keep], gap[keep], targets[keep], valid[keep], t[keep]
        loss, grads, logits = model.loss_and_grad(x, gap, t, targets, valid)
        for k, g in grads.items():
            model.params[k] -= lr * g
        model.step += 1
        result.losses.append(loss)
        acc_loss += loss
        acc_n += 1
        hard = (t <= config.hard_t)[:, None] & valid
        if hard.any():
            hard_hits += int((np.argmax(logits, axis=-1) == targets)[hard].sum())
            hard_n += int(hard.sum())
        if model.step % config.log_every == 0:
            result.trace.append(TraceRow(model.step, acc_loss / max(acc_n, 1),
                                         hard_hits / hard_n if hard_n else float("nan")))
            acc_loss, acc_n, hard_hits, hard_n = 0.0, 0, 0, 0
    return result


def format_trace(rows: Sequence[TraceRow], comments: Sequence[str] = ()) -> str:
    out = io.StringIO()
    for c in comments:
        out.write(f"# {c}\n")
    out.write("step\tloss\thard_accuracy\n")
    for r in rows:
        out.write(f"{r.step}\t{r.loss!r}\t{r.hard_accuracy!r}\n")
    return out.getvalue()


def parse_trace(text: str) -> list[TraceRow]:
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    return [TraceRow(int(a), float(b), float(c)) for a, b, c in (ln.split("\t") for ln in lines[1:])]
