"""Command-line pipeline: synthesis, priors, training, sampling, evaluation, oracle study.

Configuration is an INI file with the sections of :data:`DEFAULTS`; unknown
sections or keys are rejected.  ``--override section.key=value`` and
``--seed`` take precedence over the file, which takes precedence over the
defaults.  All randomness derives from the root seed through substreams
named by stage, family id and sequence index.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import ALPHABET, __version__
from .denoiser import (
    ModelConfig,
    TrainableDenoiser,
    TrainConfig,
    bayes_accuracy_curve,
    format_trace,
    train,
)
from .errors import ConfigError, DomainError, NumericError, ParseError
from .evalsuite import (
    EvalSettings,
    GeneratedSample,
    MetricsReport,
    ReferenceSet,
    always,
    build_report,
    calibrate_threshold,
    format_records,
    format_summary,
    self_score_filter,
)
from .flow import FlowConfig, SimplexState, decode, init_arrays, integrate_arrays, sample_gap_mask, trajectory_summary
from .lineage import (
    PSSM,
    TEST,
    AlignedFamily,
    CleanFilters,
    FamilyEntry,
    FamilyPrior,
    FamilyRegistry,
    Rejection,
    RootPosterior,
    SynthConfig,
    build_pssm,
    clean_family,
    estimate_gap_rates,
    family_sampler,
    format_aligned_fasta,
    format_family_prior,
    format_root_posterior,
    mix_with_uniform,
    parse_aligned_fasta,
    parse_family_prior,
    parse_root_posterior,
    posterior_to_prior,
    split_family,
    standard_battery,
    uniform_prior,
)
from .reroute import MutationConfig, PSSMFitness, ParticlePopulation, RerouteConfig, reroute
from .specfun import RandomStream

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS: dict[str, dict[str, str]] = {
    "run": {"seed": "0"},
    "paths": {
        "workdir": ".",
        "data": "data",
        "priors": "priors",
        "model": "model/model.npz",
        "samples": "samples",
        "reports": "reports",
        "oracle": "oracle",
    },
    "synth": {
        "n_families": "8", "L": "60", "K": "20", "depth": "500",
        "conserved_fraction": "0.5", "conserved_concentration": "50", "variable_concentration": "2",
        "background_concentration": "1", "mutation_rate": "0.1", "gap_rate": "0.02",
        "holdout_fraction": "0.05",
    },
    "clean": {
        "min_len": "20", "max_len": "2000", "depth_cap": "5000", "col_missing_max": "0.95",
        "min_depth": "100", "holdout_fraction": "0.05",
    },
    "prior": {"lambda": "10", "epsilon": "1e-3", "rho_max": "0", "mode": "lineage"},
    "train": {
        "steps": "3000", "batch_size": "16", "learning_rate": "0.05", "log_every": "50",
        "window": "5", "hidden": "128,128", "n_freq": "8", "resume": "false",
    },
    "flow": {"t_max": "6", "n_steps": "100", "z_clamp": "1e-6"},
    "sample": {"n_sequences": "512", "tau": "0.5", "cap": "128", "trajectory": "true", "tag": "samples"},
    "reroute": {
        "enabled": "true", "rounds": "3", "betas": "4.0", "t_int": "0.5", "population": "8",
        "scheme": "systematic", "mu": "0.25", "gamma": "1.0", "rho": "0.8", "tau_tok": "1.0",
        "delta": "0.1", "p_mask": "0.15", "n_masks": "8",
    },
    "eval": {
        "identity_threshold": "0.8", "min_coverage": "0.8", "n_bins": "4", "filter": "self_score",
        "calibration_quantile": "0.01", "heldout": "true",
    },
    "oracle": {
        "time_grid": "0,0.05,0.1,0.15,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0",
        "n_mc": "20000", "lambda": "10", "epsilon": "1e-3",
    },
}


# ---------------------------------------------------------------------------
# configuration


class RunConfig:
    """Validated view over the merged configuration."""

    def __init__(self, values: Mapping[str, Mapping[str, str]]):
        self.values = {s: dict(v) for s, v in values.items()}

    @classmethod
    def load(cls, path: str | None = None, overrides: Sequence[str] = (), seed: int | None = None) -> "RunConfig":
        values = {s: dict(v) for s, v in DEFAULTS.items()}
        base = Path(".")
        if path is not None:
            parser = configparser.ConfigParser(interpolation=None)
            parser.optionxform = str
            try:
                with open(path) as fh:
                    parser.read_file(fh)
            except configparser.Error as exc:
                raise ConfigError(f"cannot parse {path}: {exc}") from exc
            for section in parser.sections():
                for key, value in parser.items(section):
                    cls._set(values, section, key, value)
            base = Path(path).resolve().parent
        for item in overrides:
            name, sep, value = item.partition("=")
            section, dot, key = name.strip().partition(".")
            if not sep or not dot:
                raise ConfigError(f"override {item!r} is not section.key=value")
            cls._set(values, section, key, value.strip())
        if seed is not None:
            values["run"]["seed"] = str(seed)
        wd = Path(values["paths"]["workdir"])
        values["paths"]["workdir"] = str(wd if wd.is_absolute() else (base / wd).resolve())
        cfg = cls(values)
        cfg.validate()
        return cfg

    @staticmethod
    def _set(values, section, key, value):
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        values[section][key] = value

    # typed accessors
    def get(self, section: str, key: str) -> str:
        return self.values[section][key]

    def int(self, section: str, key: str) -> int:
        try:
            return int(self.get(section, key))
        except ValueError:
            raise ConfigError(f"{section}.{key} must be an integer, got {self.get(section, key)!r}") from None

    def float(self, section: str, key: str) -> float:
        try:
            v = float(self.get(section, key))
        except ValueError:
            raise ConfigError(f"{section}.{key} must be a number, got {self.get(section, key)!r}") from None
        if not math.isfinite(v):
            raise ConfigError(f"{section}.{key} must be finite")
        return v

    def bool(self, section: str, key: str) -> bool:
        v = self.get(section, key).strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{section}.{key} must be a boolean, got {v!r}")

    def floats(self, section: str, key: str) -> list[float]:
        try:
            return [float(x) for x in self.get(section, key).split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"{section}.{key} must be a comma-separated list of numbers") from None

    def path(self, key: str) -> Path:
        p = Path(self.get("paths", key))
        return p if p.is_absolute() else Path(self.get("paths", "workdir")) / p

    @property
    def seed(self) -> int:
        return self.int("run", "seed")

    def digest(self, command: str) -> str:
        """Digest of the command, package version and merged configuration.

        The working directory only says where a run lives, so it is left
        out; the same run in another directory gets the same digest.
        """
        values = {s: dict(v) for s, v in self.values.items()}
        values["paths"].pop("workdir")
        payload = json.dumps({"command": command, "version": __version__, "config": values}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def validate(self):
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        try:
            self.synth_config()
            self.flow_config()
            self.train_config()
            self.model_config()
            self.mutation_config()
            self.reroute_config()
            self.clean_filters()
        except DomainError as exc:
            raise ConfigError(str(exc)) from exc
        if self.get("prior", "mode") not in ("lineage", "uniform"):
            raise ConfigError("prior.mode must be 'lineage' or 'uniform'")
        if self.get("eval", "filter") not in ("self_score", "none"):
            raise ConfigError("eval.filter must be 'self_score' or 'none'")
        if not 0.0 <= self.float("prior", "rho_max") <= 1.0:
            raise ConfigError("prior.rho_max must be in [0, 1]")
        for sec, key in (("synth", "holdout_fraction"), ("clean", "holdout_fraction")):
            if not 0.0 < self.float(sec, key) < 1.0:
                raise ConfigError(f"{sec}.{key} must be in (0, 1)")
        if self.int("synth", "n_families") < 1 or self.int("sample", "n_sequences") < 1:
            raise ConfigError("need at least one family and one sequence")
        if self.int("sample", "cap") < 1 or self.float("sample", "tau") < 0:
            raise ConfigError("sample.cap must be positive and sample.tau non-negative")
        if self.int("oracle", "n_mc") < 2 or not self.floats("oracle", "time_grid"):
            raise ConfigError("oracle study needs n_mc >= 2 and a non-empty grid")
        if any(not 0.0 <= t <= 1.0 for t in self.floats("oracle", "time_grid")):
            raise ConfigError("oracle time grid must lie in [0, 1]")

    # structured views
    def synth_config(self) -> SynthConfig:
        cfg = SynthConfig(
            L=self.int("synth", "L"), K=self.int("synth", "K"), depth=self.int("synth", "depth"),
            conserved_fraction=self.float("synth", "conserved_fraction"),
            conserved_concentration=self.float("synth", "conserved_concentration"),
            variable_concentration=self.float("synth", "variable_concentration"),
            background_concentration=self.float("synth", "background_concentration"),
            mutation_rate=self.float("synth", "mutation_rate"), gap_rate=self.float("synth", "gap_rate"),
        )
        try:
            cfg.validate()
        except DomainError as exc:
            raise ConfigError(f"synth: {exc}") from exc
        return cfg

    def clean_filters(self) -> CleanFilters:
        return CleanFilters(self.int("clean", "min_len"), self.int("clean", "max_len"),
                            self.int("clean", "depth_cap"), self.float("clean", "col_missing_max"),
                            self.int("clean", "min_depth"))

    def flow_config(self) -> FlowConfig:
        return FlowConfig(t_max=self.float("flow", "t_max"), n_steps=self.int("flow", "n_steps"),
                          z_clamp=self.float("flow", "z_clamp"))

    def train_config(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.float("train", "learning_rate"),
                           batch_size=self.int("train", "batch_size"), steps=self.int("train", "steps"),
                           t_max=self.float("flow", "t_max"), log_every=self.int("train", "log_every"))

    def model_config(self) -> ModelConfig:
        hidden = tuple(int(h) for h in self.floats("train", "hidden"))
        if len(hidden) != 2 or min(hidden) < 1:
            raise ConfigError("train.hidden must be two positive widths")
        return ModelConfig(K=self.int("synth", "K"), window=self.int("train", "window"), hidden=hidden,
                           n_freq=self.int("train", "n_freq"))

    def mutation_config(self) -> MutationConfig:
        return MutationConfig(self.float("reroute", "mu"), self.float("reroute", "gamma"),
                              self.float("reroute", "rho"), self.float("reroute", "tau_tok"))

    def reroute_config(self) -> RerouteConfig:
        return RerouteConfig(rounds=self.int("reroute", "rounds"), betas=tuple(self.floats("reroute", "betas")),
                             t_int=self.float("reroute", "t_int"), scheme=self.get("reroute", "scheme"),
                             population=self.int("reroute", "population"))


# ---------------------------------------------------------------------------
# manifests and file helpers


class Run:
    """Tracks one command's outputs and writes its manifest."""

    def __init__(self, config: RunConfig, command: str):
        self.config = config
        self.command = command
        self.digest = config.digest(command)
        self.outputs: dict[str, str] = {}
        self.timings: dict[str, float] = {}
        self._t0 = time.perf_counter()

    @property
    def header(self) -> list[str]:
        return [f"lpdfm {__version__} {self.command} config={self.digest} seed={self.config.seed}"]

    def write_text(self, path: Path, text: str):
        self._write(path, text.encode())

    def write_bytes(self, path: Path, data: bytes):
        self._write(path, data)

    def _write(self, path: Path, data: bytes):
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        wd = Path(self.config.get("paths", "workdir"))
        key = path.relative_to(wd) if path.is_relative_to(wd) else path
        self.outputs[str(key)] = hashlib.sha256(data).hexdigest()

    def stage(self, name: str, start: float):
        self.timings[name] = time.perf_counter() - start

    def finish(self, extra: Mapping[str, object] | None = None) -> Path:
        manifest = {
            "command": self.command,
            "version": __version__,
            "config_digest": self.digest,
            "config": self.config.values,
            "outputs": dict(sorted(self.outputs.items())),
            "wall_clock_seconds": {**self.timings, "total": time.perf_counter() - self._t0},
        }
        if extra:
            manifest.update(extra)
        path = Path(self.config.get("paths", "workdir")) / "manifests" / f"{self.command}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path


def _read(path: Path) -> str:
    try:
        return path.read_text()
    except FileNotFoundError:
        raise FileNotFoundError(f"missing input file {path}") from None


# ---------------------------------------------------------------------------
# data loading


def load_families(config: RunConfig) -> dict[str, tuple[AlignedFamily, FamilyPrior]]:
    """Cleaned families and their priors as written by ``build-prior``."""
    pdir = config.path("priors")
    files = sorted(pdir.glob("*.prior.tsv"))
    if not files:
        raise FileNotFoundError(f"no prior files in {pdir}")
    out = {}
    for f in files:
        prior = parse_family_prior(_read(f))
        fam = parse_aligned_fasta(_read(pdir / f"{prior.family_id}.clean.fasta"), prior.family_id,
                                  ALPHABET[:prior.K])
        if fam.L != prior.L:
            raise ParseError(f"family {prior.family_id!r}: prior has {prior.L} sites, alignment {fam.L}")
        out[prior.family_id] = (fam, prior)
    return out


def build_registry(families: Mapping[str, tuple[AlignedFamily, FamilyPrior]], tau: float = 0.5,
                   cap: int | None = 128) -> FamilyRegistry:
    return FamilyRegistry.build([FamilyEntry(f, p, build_pssm(f)) for f, p in families.values()], tau, cap)


def generation_prior(prior: FamilyPrior, mode: str) -> FamilyPrior:
    return uniform_prior(prior) if mode == "uniform" else prior


# ---------------------------------------------------------------------------
# generation


@dataclass
class GeneratedRecord:
    index: int
    family_id: str
    state: SimplexState
    init_gap: np.ndarray
    init_gap_rows: np.ndarray
    reroute_trace: list | None = None

    @property
    def sequence(self) -> str:
        return decode(self.state, ALPHABET[:self.state.K])


TraceHook = Callable[[str, int, float, np.ndarray, np.ndarray], None]


def generate(priors: Mapping[str, FamilyPrior], pssms: Mapping[str, PSSM], family_ids: Sequence[str],
             denoiser, flow: FlowConfig, stream: RandomStream, rconfig: RerouteConfig | None = None,
             mconfig: MutationConfig = MutationConfig(), delta: float = 0.1, p_mask: float = 0.15,
             n_masks: int = 8, trace: TraceHook | None = None) -> list[GeneratedRecord]:
    """Generate one sequence per entry of ``family_ids``.

    Sequence ``n`` draws everything from ``stream.spawn("seq", n)``: a gap
    mask, then one prior draw per particle.  Without rerouting only
    particle 0 is used, so rerouted and plain runs share their first
    trajectory.  Sequences of one family are integrated as a batch.
    """
    streams = [stream.spawn("seq", n) for n in range(len(family_ids))]
    M = rconfig.population if rconfig is not None else 1
    t_int = rconfig.t_int if rconfig is not None else 1.0
    out: list[GeneratedRecord | None] = [None] * len(family_ids)
    for fid in sorted(set(family_ids)):
        prior = priors[fid]
        idx = [n for n, f in enumerate(family_ids) if f == fid]
        gaps, xs = [], []
        for n in idx:
            g = sample_gap_mask(prior, 1, streams[n].spawn("gap"))[0]
            gaps.append(g)
            xs.append(np.concatenate([init_arrays(prior, 1, streams[n].spawn("particle", m), g)[0]
                                      for m in range(M)]))
        x = np.concatenate(xs)
        gap = np.repeat(np.stack(gaps), M, axis=0)
        x0_gap_rows = [x[k * M][gaps[k]].copy() for k in range(len(idx))]
        ids = [fid] * x.shape[0]

        def hook(step, t, xx, gg, _fid=fid):
            if trace is not None:
                trace(_fid, step, t, xx, gg)

        x = integrate_arrays(x, gap, prior.alpha, ids, denoiser, 0.0, t_int, flow, hook)
        t_mid = flow.step_index(t_int) * flow.dt
        chosen, traces = [], []
        for k, n in enumerate(idx):
            block = x[k * M:(k + 1) * M]
            if rconfig is None:
                chosen.append(block[0])
                traces.append(None)
                continue
            particles = [SimplexState(fid, block[m], gaps[k], t_mid) for m in range(M)]
            scorer = PSSMFitness(pssms[fid], gaps[k], streams[n].spawn("masks"), delta, p_mask, n_masks)
            res = reroute(ParticlePopulation(particles), denoiser, scorer, prior, mconfig, rconfig, flow.t_max,
                          streams[n].spawn("reroute"))
            chosen.append(res.best.sites)
            traces.append(res.trace)
        x = np.stack(chosen)
        gap = np.stack(gaps)
        x = integrate_arrays(x, gap, prior.alpha, [fid] * len(idx), denoiser, t_mid, 1.0, flow, hook)
        for k, n in enumerate(idx):
            state = SimplexState(fid, x[k], gap[k], 1.0)
            out[n] = GeneratedRecord(n, fid, state, gaps[k], x0_gap_rows[k], traces[k])
    return out  # type: ignore[return-value]


def format_samples(records: Sequence[GeneratedRecord], seed: int, rerouted: bool, comments: Sequence[str]) -> str:
    lines = [f"; {c}" for c in comments]
    for r in records:
        lines.append(f">s{r.index:05d} family={r.family_id} seed={seed} reroute={int(rerouted)}")
        lines.append(r.sequence)
    return "\n".join(lines) + "\n"


def parse_samples(text: str) -> list[GeneratedSample]:
    out = []
    header = None
    for ln in text.splitlines():
        if not ln or ln.startswith(";") or ln.startswith("#"):
            continue
        if ln.startswith(">"):
            header = ln[1:].split()
            continue
        if header is None:
            raise ParseError("sequence line before any header")
        tags = dict(tok.split("=", 1) for tok in header[1:] if "=" in tok)
        if "family" not in tags:
            raise ParseError(f"sample {header[0]} has no family tag")
        out.append(GeneratedSample(ln.strip(), tags["family"]))
        header = None
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_make_synth(config: RunConfig) -> Path:
    run = Run(config, "make-synth")
    if config.int("synth", "depth") < 2:
        raise ConfigError("synth.depth must be at least 2 so families can be split")
    t0 = time.perf_counter()
    root = RandomStream(config.seed)
    battery = standard_battery(root, config.int("synth", "n_families"), config.synth_config(),
                               config.float("synth", "holdout_fraction"))
    ddir = config.path("data")
    for fam, post in battery:
        run.write_text(ddir / f"{fam.family_id}.fasta", format_aligned_fasta(fam, run.header, with_splits=True))
        run.write_text(ddir / f"{fam.family_id}.posterior.tsv", format_root_posterior(post, run.header))
    run.stage("synthesize", t0)
    return run.finish()


def cmd_build_prior(config: RunConfig) -> Path:
    run = Run(config, "build-prior")
    t0 = time.perf_counter()
    ddir = config.path("data")
    fastas = sorted(ddir.glob("*.fasta"))
    if not fastas:
        raise FileNotFoundError(f"no alignments in {ddir}")
    missing = [f.stem for f in fastas if not (ddir / f"{f.stem}.posterior.tsv").exists()]
    if missing:
        raise FileNotFoundError(f"missing root posteriors for families: {', '.join(missing)}")
    root = RandomStream(config.seed)
    lam, eps = config.float("prior", "lambda"), config.float("prior", "epsilon")
    rho_max = config.float("prior", "rho_max")
    rejected = {}
    for f in fastas:
        fid = f.stem
        post = parse_root_posterior(_read(ddir / f"{fid}.posterior.tsv"))
        fam = parse_aligned_fasta(_read(f), fid, ALPHABET[:post.K])
        if post.L != fam.L:
            raise ParseError(f"family {fid!r}: posterior has {post.L} sites, alignment {fam.L}")
        cleaned = clean_family(fam, config.clean_filters(), root.spawn("clean", fid))
        if isinstance(cleaned, Rejection):
            rejected[fid] = cleaned.reason
            continue
        if not cleaned.split_mask(TEST).any():
            cleaned = split_family(cleaned, config.float("clean", "holdout_fraction"), root.spawn("split", fid))
        prior = posterior_to_prior(post.select_columns(cleaned.columns), lam, eps)
        if rho_max > 0.0:
            rho = float(root.spawn("mix", fid).generator.uniform(0.0, rho_max))
            prior = mix_with_uniform(prior, rho)
        prior = prior.with_gap_rates(estimate_gap_rates(cleaned))
        pdir = config.path("priors")
        run.write_text(pdir / f"{fid}.prior.tsv", format_family_prior(prior, run.header))
        run.write_text(pdir / f"{fid}.clean.fasta", format_aligned_fasta(cleaned, run.header, with_splits=True))
    run.stage("build", t0)
    return run.finish({"rejected": rejected})


def _training_set(config: RunConfig, families):
    mode = config.get("prior", "mode")
    return [(fam, generation_prior(prior, mode)) for fam, prior in families.values()]


def cmd_train(config: RunConfig) -> Path:
    run = Run(config, "train")
    families = load_families(config)
    mpath = config.path("model")
    if config.bool("train", "resume") and mpath.exists():
        model = TrainableDenoiser.load(mpath)
        if model.config != config.model_config():
            raise ConfigError("checkpoint architecture differs from the configured one")
    else:
        model = TrainableDenoiser(config.model_config(), stream=RandomStream(config.seed).spawn("init"))
    start = model.step
    t0 = time.perf_counter()
    result = train(_training_set(config, families), model, config.train_config(),
                   RandomStream(config.seed).spawn("train", start))
    run.stage("train", t0)
    run.write_bytes(mpath, model.to_bytes())
    trace_path = mpath.with_name(mpath.stem + ".trace.tsv")
    comments = run.header + [f"resumed_from_step={start}", f"skipped_samples={result.skipped}",
                             f"prior_mode={config.get('prior', 'mode')}"]
    run.write_text(trace_path, format_trace(result.trace, comments))
    return run.finish({"start_step": start, "end_step": model.step})


def cmd_sample(config: RunConfig) -> Path:
    run = Run(config, "sample")
    families = load_families(config)
    mode = config.get("prior", "mode")
    registry = build_registry(families, config.float("sample", "tau"), config.int("sample", "cap"))
    model = TrainableDenoiser.load(config.path("model"))
    root = RandomStream(config.seed)
    n = config.int("sample", "n_sequences")
    fids = family_sampler(registry, config.float("sample", "tau"), config.int("sample", "cap"),
                          root.spawn("families"), size=n)
    enabled = config.bool("reroute", "enabled")
    rows: list[str] = []

    def trace(fid, step, t, x, gap):
        if config.bool("sample", "trajectory"):
            mx, h = trajectory_summary(x, gap)
            rows.append(f"{fid}\t{step}\t{t!r}\t{mx!r}\t{h!r}")

    t0 = time.perf_counter()
    priors = {fid: generation_prior(families[fid][1], mode) for fid in families}
    records = generate(priors, registry.pssms(), fids, model, config.flow_config(), root.spawn("generate"),
                       config.reroute_config() if enabled else None, config.mutation_config(),
                       config.float("reroute", "delta"), config.float("reroute", "p_mask"),
                       config.int("reroute", "n_masks"), trace)
    run.stage("generate", t0)
    sdir = config.path("samples")
    tag = config.get("sample", "tag")
    empty = [r.index for r in records if not r.sequence]
    comments = run.header + [f"prior_mode={mode}", f"dropped_empty={len(empty)}"]
    run.write_text(sdir / f"{tag}.fasta", format_samples([r for r in records if r.sequence], config.seed,
                                                         enabled, comments))
    if rows:
        run.write_text(sdir / f"{tag}.trajectory.tsv",
                       "\n".join([f"# {c}" for c in run.header] + ["family_id\tstep\tt\tmean_max\tmean_entropy"]
                                 + rows) + "\n")
    if enabled:
        lines = [f"# {c}" for c in run.header] + ["sample\tround\tmin_score\tmean_score\tmax_score\tess"]
        for r in records:
            for rr in r.reroute_trace or []:
                lines.append(f"s{r.index:05d}\t{rr.round}\t{rr.min_score!r}\t{rr.mean_score!r}\t"
                             f"{rr.max_score!r}\t{rr.ess!r}")
        run.write_text(sdir / f"{tag}.reroute.tsv", "\n".join(lines) + "\n")
    # the family cap keeps the highest-weight families and renormalizes
    return run.finish({"family_cap": {"rule": "top_weight_renormalized", "cap": config.int("sample", "cap")}})


def heldout_sample(registry: FamilyRegistry, family_ids: Sequence[str], stream: RandomStream) -> list[GeneratedSample]:
    """One held-out natural sequence per requested family label (with replacement)."""
    out = []
    for n, fid in enumerate(family_ids):
        pool = [s for s in registry.entries[fid].family.ungapped(TEST) if s]
        if not pool:
            raise DomainError(f"family {fid!r} has no held-out sequences")
        out.append(GeneratedSample(pool[int(stream.spawn(n).generator.integers(len(pool)))], fid))
    return out


def evaluate_samples(samples: Sequence[GeneratedSample], registry: FamilyRegistry, config: RunConfig,
                     label: str, threshold: float | None = None, refs: ReferenceSet | None = None) -> MetricsReport:
    if threshold is None:
        threshold = calibrate_threshold(registry, config.float("eval", "calibration_quantile"))
    if refs is None:
        refs = ReferenceSet([s for e in registry.entries.values() for s in e.family.ungapped("train")])
    settings = EvalSettings(config.float("eval", "identity_threshold"), config.float("eval", "min_coverage"),
                            (0.8, 0.6), config.int("eval", "n_bins"))
    predicate = self_score_filter(threshold) if config.get("eval", "filter") == "self_score" else always
    return build_report(label, samples, registry, refs, threshold, settings, predicate)


def cmd_eval(config: RunConfig) -> Path:
    run = Run(config, "eval")
    families = load_families(config)
    registry = build_registry(families, config.float("sample", "tau"), config.int("sample", "cap"))
    tag = config.get("sample", "tag")
    samples = parse_samples(_read(config.path("samples") / f"{tag}.fasta"))
    if not samples:
        raise DomainError("no samples to evaluate")
    t0 = time.perf_counter()
    threshold = calibrate_threshold(registry, config.float("eval", "calibration_quantile"))
    refs = ReferenceSet([s for e in registry.entries.values() for s in e.family.ungapped("train")])
    reports = [evaluate_samples(samples, registry, config, tag, threshold, refs)]
    if config.bool("eval", "heldout") and all(e.family.split_mask(TEST).any() for e in registry.entries.values()):
        natural = heldout_sample(registry, [s.intended_family for s in samples],
                                 RandomStream(config.seed).spawn("heldout"))
        reports.append(evaluate_samples(natural, registry, config, "heldout", threshold, refs))
    run.stage("evaluate", t0)
    rdir = config.path("reports")
    for rep in reports:
        run.write_text(rdir / f"{rep.label}.samples.tsv", format_records(rep.records, run.header))
        run.write_text(rdir / f"{rep.label}.summary.txt", format_summary(rep, run.header))
    return run.finish()


@dataclass
class OracleRow:
    t: float
    lineage: float
    lineage_se: float
    uniform: float
    uniform_se: float

    @property
    def diff_se(self) -> float:
        return math.hypot(self.lineage_se, self.uniform_se)


def oracle_study(battery: Sequence[tuple[AlignedFamily, RootPosterior]], time_grid: Sequence[float], n_mc: int,
                 t_max: float, stream: RandomStream, lam: float = 10.0, epsilon: float = 1e-3) -> list[OracleRow]:
    """Family-averaged Bayes-oracle accuracy under lineage and uniform priors.

    The uniform-prior decoder does not know the family, so its label
    belief is the equal-weight mixture of the families' site laws.
    """
    truths = {fam.family_id: post.probs for fam, post in battery}
    mixture = np.mean(list(truths.values()), axis=0)
    lin, uni = [], []
    for fam, post in battery:
        fid = fam.family_id
        prior = posterior_to_prior(post, lam, epsilon)
        lin.append(bayes_accuracy_curve(prior, post.probs, time_grid, n_mc, t_max, stream.spawn("lineage", fid)))
        uni.append(bayes_accuracy_curve(prior, post.probs, time_grid, n_mc, t_max, stream.spawn("uniform", fid),
                                        label_prior=mixture, alpha_override=np.ones_like(prior.alpha)))
    H = len(battery)
    rows = []
    for k, t in enumerate(time_grid):
        rows.append(OracleRow(
            float(t),
            float(np.mean([c[k].mean for c in lin])), math.sqrt(sum(c[k].stderr ** 2 for c in lin)) / H,
            float(np.mean([c[k].mean for c in uni])), math.sqrt(sum(c[k].stderr ** 2 for c in uni)) / H,
        ))
    return rows


def cmd_oracle_study(config: RunConfig) -> Path:
    run = Run(config, "oracle-study")
    ddir = config.path("data")
    battery = []
    for f in sorted(ddir.glob("*.posterior.tsv")):
        post = parse_root_posterior(_read(f))
        fam = parse_aligned_fasta(_read(ddir / f"{post.family_id}.fasta"), post.family_id, ALPHABET[:post.K])
        battery.append((fam, post))
    if not battery:
        raise FileNotFoundError(f"no root posteriors in {ddir}")
    t0 = time.perf_counter()
    grid = config.floats("oracle", "time_grid")
    rows = oracle_study(battery, grid, config.int("oracle", "n_mc"), config.float("flow", "t_max"),
                        RandomStream(config.seed).spawn("oracle"), config.float("oracle", "lambda"),
                        config.float("oracle", "epsilon"))
    run.stage("oracle", t0)
    hard = [r for r in rows if r.t <= 0.2 + 1e-12]
    comments = run.header
    if hard:
        comments = comments + [f"hard_regime_lineage_mean={float(np.mean([r.lineage for r in hard]))!r}",
                               f"hard_regime_uniform_mean={float(np.mean([r.uniform for r in hard]))!r}"]
    lines = [f"# {c}" for c in comments] + ["t\tlineage\tlineage_se\tuniform\tuniform_se\tdiff\tdiff_se"]
    for r in rows:
        lines.append(f"{r.t!r}\t{r.lineage!r}\t{r.lineage_se!r}\t{r.uniform!r}\t{r.uniform_se!r}\t"
                     f"{r.lineage - r.uniform!r}\t{r.diff_se!r}")
    run.write_text(config.path("oracle") / "ceiling.tsv", "\n".join(lines) + "\n")
    return run.finish()


COMMANDS = {
    "make-synth": cmd_make_synth,
    "build-prior": cmd_build_prior,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "oracle-study": cmd_oracle_study,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lpdfm", description="Lineage-prior Dirichlet flow matching at desk scale.")
    p.add_argument("--version", action="version", version=f"lpdfm {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sp = sub.add_parser(name, help=(fn.__doc__ or "").strip().splitlines()[0] if fn.__doc__ else None)
        sp.add_argument("--config", help="INI configuration file")
        sp.add_argument("--seed", type=int, help="root seed (overrides the file)")
        sp.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration value; repeatable")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = RunConfig.load(args.config, args.override, args.seed)
        manifest = COMMANDS[args.command](config)
    except (ConfigError, DomainError) as exc:
        print(f"lpdfm {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ParseError) as exc:
        print(f"lpdfm {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, ArithmeticError) as exc:
        print(f"lpdfm {args.command}: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(manifest)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
