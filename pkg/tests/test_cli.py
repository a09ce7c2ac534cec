import hashlib
import json
from pathlib import Path

import pytest

from lpdfm import __version__
from lpdfm.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, RunConfig, main, parse_samples
from lpdfm.denoiser import TrainableDenoiser, parse_trace
from lpdfm.errors import ConfigError
from lpdfm.evalsuite import parse_records, parse_summary

SMALL = """\
[synth]
n_families = 2
L = 24
depth = 120
[train]
steps = 20
log_every = 10
window = 2
hidden = 16,16
n_freq = 3
[flow]
n_steps = 20
[sample]
n_sequences = 4
[reroute]
rounds = 1
population = 2
n_masks = 2
[oracle]
time_grid = 0,0.1
n_mc = 200
"""

PIPELINE = ("make-synth", "build-prior", "train", "sample", "eval", "oracle-study")


def write_config(tmp_path: Path, extra: str = "") -> Path:
    path = tmp_path / "run.ini"
    path.write_text(SMALL + extra)
    return path


def run_pipeline(workdir: Path, seed: int = 3) -> Path:
    cfg = write_config(workdir)
    for cmd in PIPELINE:
        assert main([cmd, "--config", str(cfg), "--seed", str(seed)]) == EXIT_OK, cmd
    return workdir


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("run"))


def test_pipeline_outputs(pipeline):
    for rel in ("data/fam00.fasta", "data/fam01.posterior.tsv", "priors/fam00.prior.tsv",
                "priors/fam01.clean.fasta", "model/model.npz", "model/model.trace.tsv", "samples/samples.fasta",
                "samples/samples.trajectory.tsv", "samples/samples.reroute.tsv", "reports/samples.samples.tsv",
                "reports/samples.summary.txt", "reports/heldout.summary.txt", "oracle/ceiling.tsv"):
        assert (pipeline / rel).exists(), rel
    samples = parse_samples((pipeline / "samples/samples.fasta").read_text())
    assert 1 <= len(samples) <= 4
    recs = parse_records((pipeline / "reports/samples.samples.tsv").read_text())
    summary = parse_summary((pipeline / "reports/samples.summary.txt").read_text())
    assert int(summary["n"]) == len(recs) == len(samples)
    trace = parse_trace((pipeline / "model/model.trace.tsv").read_text())
    assert [r.step for r in trace] == [10, 20]


def test_every_text_output_carries_the_digest(pipeline):
    for cmd in PIPELINE:
        manifest = json.loads((pipeline / "manifests" / f"{cmd}.json").read_text())
        digest = manifest["config_digest"]
        assert manifest["version"] == __version__
        assert "wall_clock_seconds" in manifest
        for rel in manifest["outputs"]:
            if rel.endswith(".npz"):
                continue
            first = (pipeline / rel).read_text().splitlines()[0]
            assert f"config={digest}" in first and "seed=3" in first, rel


def test_manifest_hashes_match_files(pipeline):
    manifest = json.loads((pipeline / "manifests" / "sample.json").read_text())
    assert manifest["family_cap"] == {"rule": "top_weight_renormalized", "cap": 128}
    for rel, sha in manifest["outputs"].items():
        assert hashlib.sha256((pipeline / rel).read_bytes()).hexdigest() == sha


def test_pipeline_is_byte_reproducible(pipeline, tmp_path):
    again = run_pipeline(tmp_path)
    for cmd in PIPELINE:
        a = json.loads((pipeline / "manifests" / f"{cmd}.json").read_text())["outputs"]
        b = json.loads((again / "manifests" / f"{cmd}.json").read_text())["outputs"]
        assert a == b, cmd


def test_resume_continues_step_counter(tmp_path):
    cfg = write_config(tmp_path)
    for cmd in ("make-synth", "build-prior", "train"):
        assert main([cmd, "--config", str(cfg)]) == EXIT_OK
    assert main(["train", "--config", str(cfg), "--override", "train.resume=true"]) == EXIT_OK
    model = TrainableDenoiser.load(tmp_path / "model/model.npz")
    assert model.step == 40
    manifest = json.loads((tmp_path / "manifests/train.json").read_text())
    assert manifest["start_step"] == 20 and manifest["end_step"] == 40


def test_unknown_key_exits_config_error(tmp_path, capsys):
    cfg = write_config(tmp_path, "[clean]\nbogus = 1\n")
    assert main(["make-synth", "--config", str(cfg)]) == EXIT_CONFIG
    assert "clean.bogus" in capsys.readouterr().err
    assert main(["make-synth", "--override", "nosuch.key=1"]) == EXIT_CONFIG


def test_bad_values_exit_config_error(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["make-synth", "--config", str(cfg), "--override", "synth.depth=1"]) == EXIT_CONFIG
    assert main(["make-synth", "--config", str(cfg), "--override", "prior.mode=fancy"]) == EXIT_CONFIG
    assert main(["make-synth", "--config", str(cfg), "--override", "flow.n_steps=x"]) == EXIT_CONFIG


def test_missing_inputs_exit_io_error(tmp_path):
    cfg = write_config(tmp_path)
    for cmd in ("build-prior", "train", "sample", "eval", "oracle-study"):
        assert main([cmd, "--config", str(cfg)]) == EXIT_IO, cmd


def test_config_precedence(tmp_path):
    cfg = write_config(tmp_path, "[run]\nseed = 5\n")
    c = RunConfig.load(str(cfg), ["train.steps=7"], seed=None)
    assert c.seed == 5 and c.int("train", "steps") == 7 and c.int("synth", "L") == 24
    assert RunConfig.load(str(cfg), [], seed=9).seed == 9
    assert c.path("model") == tmp_path / "model" / "model.npz"
    assert c.digest("train") != c.digest("sample")
    with pytest.raises(ConfigError):
        RunConfig.load(None, ["noequals"])
