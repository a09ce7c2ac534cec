import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from lpdfm.errors import DomainError, ParseError
from lpdfm.lineage import (
    TEST,
    TRAIN,
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
    family_weights,
    format_aligned_fasta,
    format_family_prior,
    format_root_posterior,
    mix_with_uniform,
    parse_aligned_fasta,
    parse_family_prior,
    parse_root_posterior,
    posterior_to_prior,
    split_family,
    synth_family,
)
from lpdfm.specfun import RandomStream


def family_from_rows(rows, fid="f", splits=()):
    return AlignedFamily(fid, tuple(f"s{i}" for i in range(len(rows))), tuple(rows), tuple(splits))


# parsing


def test_parse_maps_dots_and_case():
    fam = parse_aligned_fasta(b">a\nAC.gt\n>b\nac-GT\n", "fam")
    assert fam.L == 5
    assert fam.rows == ("AC-GT", "AC-GT")
    assert fam.family_id == "fam"


def test_parse_nonstandard_to_x():
    fam = parse_aligned_fasta(">a\nABCDE\n")
    assert fam.rows[0] == "AXCDE"


def test_parse_unequal_rows_names_row():
    with pytest.raises(ParseError, match="row 2"):
        parse_aligned_fasta(">a\nACDEF\n>b\nACDEFG\n")


def test_parse_empty_and_orphan():
    with pytest.raises(ParseError):
        parse_aligned_fasta("")
    with pytest.raises(ParseError):
        parse_aligned_fasta("ACDE\n>a\nACDE\n")


def test_parse_multiline_and_comments_roundtrip():
    fam = split_family(family_from_rows(["ACDEFGHIKL" * 9, "LKIHGFEDCA" * 9, "A" * 90]), 0.3, RandomStream(1))
    text = format_aligned_fasta(fam, ["made by a test"], with_splits=True)
    back = parse_aligned_fasta(text, "f")
    assert back.rows == fam.rows and back.splits == fam.splits and back.names == fam.names


# cleaning


def gappy_family(n_rows=100, L=30, gappy_rows=96):
    rows = []
    for i in range(n_rows):
        r = list("A" * L)
        if i < gappy_rows:
            r[3] = "-"
        rows.append("".join(r))
    return family_from_rows(rows)


def test_clean_drops_gappy_column():
    out = clean_family(gappy_family(), CleanFilters(min_depth=100))
    assert out.L == 29
    assert 3 not in out.columns


def test_clean_keeps_column_at_threshold():
    out = clean_family(gappy_family(gappy_rows=95), CleanFilters(min_depth=100))
    assert out.L == 30


def test_clean_rejects_shallow():
    out = clean_family(gappy_family(n_rows=99), CleanFilters())
    assert isinstance(out, Rejection) and not out


def test_clean_rejects_long():
    fam = family_from_rows(["A" * 2500] * 120)
    assert isinstance(clean_family(fam), Rejection)


def test_clean_depth_cap_and_idempotence():
    fam, _ = synth_family("f", SynthConfig(L=80, K=20, depth=300, gap_rate=0.3), RandomStream(1))
    once = clean_family(fam, CleanFilters(depth_cap=200, col_missing_max=0.3, min_depth=50), RandomStream(2))
    assert once.depth == 200
    assert 20 <= once.L < 80
    twice = clean_family(once, CleanFilters(depth_cap=200, col_missing_max=0.3, min_depth=50), RandomStream(3))
    assert twice == once


# splitting


def test_split_counts():
    fam = family_from_rows(["ACDEF"] * 100)
    out = split_family(fam, 0.05, RandomStream(0))
    assert sum(s == TEST for s in out.splits) == 5
    two = split_family(family_from_rows(["ACDEF"] * 2), 0.05, RandomStream(0))
    assert sum(s == TEST for s in two.splits) == 1


def test_split_deterministic_and_errors():
    fam = family_from_rows(["ACDEF"] * 50)
    assert split_family(fam, 0.2, RandomStream(4)).splits == split_family(fam, 0.2, RandomStream(4)).splits
    with pytest.raises(DomainError):
        split_family(family_from_rows(["ACDEF"]), 0.5, RandomStream(0))
    with pytest.raises(DomainError):
        split_family(fam, 1.0, RandomStream(0))


# priors


def test_posterior_to_prior_one_hot():
    probs = np.zeros((1, 20))
    probs[0, 0] = 1
    prior = posterior_to_prior(RootPosterior("f", probs), 10, 1e-3)
    assert prior.alpha[0, 0] == pytest.approx(10.001)
    assert np.allclose(prior.alpha[0, 1:], 1e-3)
    assert prior.gap_rates is None


def test_posterior_to_prior_uniform_and_sums():
    probs = np.full((3, 20), 1 / 20)
    prior = posterior_to_prior(RootPosterior("f", probs), 10, 1e-3)
    assert np.allclose(prior.alpha, 1e-3 + 10 / 20)
    with pytest.raises(DomainError):
        posterior_to_prior(RootPosterior("f", probs), 0, 1e-3)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.1, 100), st.floats(1e-5, 1.0))
def test_prior_mean_is_mixture_with_uniform(seed, lam, eps):
    K = 6
    p = np.random.default_rng(seed).dirichlet(np.ones(K), size=4)
    prior = posterior_to_prior(RootPosterior("f", p), lam, eps)
    assert np.allclose(prior.alpha.sum(axis=1), K * eps + lam, rtol=0, atol=1e-12 * (K * eps + lam))
    w = K * eps / (K * eps + lam)
    assert np.allclose(prior.mean(), (1 - w) * p + w / K, atol=1e-12)


def test_mix_with_uniform():
    alpha = np.array([[10.001, 0.001, 0.001, 0.001], [1, 2, 3, 4.0]])
    prior = FamilyPrior("f", alpha)
    assert np.array_equal(mix_with_uniform(prior, 0).alpha, alpha)
    full = mix_with_uniform(prior, 1).alpha
    assert np.allclose(full, alpha.sum(1, keepdims=True) / 4 * np.ones(4))
    half = mix_with_uniform(prior, 0.5).alpha
    assert np.allclose(half, 0.5 * (alpha + full))
    assert np.allclose(half.sum(1), alpha.sum(1), atol=1e-12)
    with pytest.raises(DomainError):
        mix_with_uniform(prior, 1.5)


def test_gap_rates_train_only():
    rows = ["AAAA", "A-AA", "AAAA", "A-AX"]
    fam = family_from_rows(rows, splits=(TRAIN, TRAIN, TEST, TEST))
    assert np.allclose(estimate_gap_rates(fam), [0, 0.5, 0, 0])
    fam_all_train = family_from_rows(rows[:2], splits=(TRAIN, TRAIN))
    assert np.array_equal(estimate_gap_rates(fam_all_train), estimate_gap_rates(fam))
    with pytest.raises(DomainError):
        estimate_gap_rates(family_from_rows(rows, splits=(TEST,) * 4))


def test_prior_file_roundtrip():
    prior = FamilyPrior("fam7", np.random.default_rng(0).gamma(1, size=(5, 20)) + 1e-3, np.linspace(0, 1, 5))
    back = parse_family_prior(format_family_prior(prior, ["comment"]))
    assert back.family_id == "fam7"
    assert np.array_equal(back.alpha, prior.alpha)
    assert np.array_equal(back.gap_rates, prior.gap_rates)
    assert parse_family_prior(format_family_prior(FamilyPrior("x", prior.alpha))).gap_rates is None


def test_posterior_file_roundtrip_and_check():
    post = RootPosterior("p", np.random.default_rng(1).dirichlet(np.ones(20), size=7))
    back = parse_root_posterior(format_root_posterior(post))
    assert np.allclose(back.probs, post.probs, atol=1e-15)
    bad = format_root_posterior(post).replace("\t", "\t9", 1)
    with pytest.raises(ParseError):
        parse_root_posterior(bad)


# synthetic families


def test_synth_degenerate_consensus():
    cfg = SynthConfig(L=12, K=4, depth=30, conserved_fraction=1.0, background_concentration=0.0,
                      mutation_rate=0.0, consensus=tuple(range(4)) * 3)
    fam, post = synth_family("f", cfg, RandomStream(0))
    assert set(fam.rows) == {"ACDE" * 3}
    assert np.array_equal(post.probs, np.eye(4)[list(range(4)) * 3])


def test_synth_column_frequencies_match_truth():
    cfg = SynthConfig(L=6, K=5, depth=5000, mutation_rate=0.0)
    fam, post = synth_family("f", cfg, RandomStream(3))
    codes = fam.codes()
    for l in range(cfg.L):
        freq = np.bincount(codes[:, l], minlength=5) / cfg.depth
        se = np.sqrt(post.probs[l] * (1 - post.probs[l]) / cfg.depth)
        assert np.all(np.abs(freq - post.probs[l]) <= 3 * se + 1e-12)


def test_synth_pssm_separation():
    a, _ = synth_family("a", SynthConfig(L=40, depth=300, consensus=(0,) * 40), RandomStream(1))
    b, _ = synth_family("b", SynthConfig(L=40, depth=300, consensus=(5,) * 40), RandomStream(2))
    pa, pb = build_pssm(a), build_pssm(b)

    def score(row, p):
        return sum(p.log_probs[l, c] for l, c in enumerate(row) if c >= 0)

    self_scores = [score(r, pa) for r in a.codes()[:50]]
    cross = [score(r, pb) for r in a.codes()[:50]]
    assert min(self_scores) > max(cross)


def test_synth_config_errors():
    with pytest.raises(DomainError):
        synth_family("f", SynthConfig(L=0), RandomStream(0))
    with pytest.raises(DomainError):
        synth_family("f", SynthConfig(L=5, depth=1), RandomStream(0))


# sampler and PSSM


def test_family_weights_closed_form():
    w = family_weights({"a": 100, "b": 400}, 0.5, 128)
    assert w["a"] == pytest.approx(1 / 3) and w["b"] == pytest.approx(2 / 3)
    assert family_weights({"a": 100, "b": 400}, 0.0, 128) == {"a": 0.5, "b": 0.5}
    assert family_weights({"a": 100, "b": 400}, 0.5, 1) == {"b": 1.0}


def make_registry(depths):
    entries = []
    for fid, n in depths.items():
        fam = family_from_rows(["ACDEF"] * n, fid)
        prior = FamilyPrior(fid, np.ones((5, 20)))
        entries.append(FamilyEntry(fam, prior, build_pssm(fam)))
    return FamilyRegistry.build(entries, tau=0.5, cap=None)


def test_family_sampler_frequencies():
    reg = make_registry({"a": 4, "b": 9, "c": 25})
    n = 100000
    draws = family_sampler(reg, 0.5, 128, RandomStream(0), size=n)
    pi = np.array([2, 3, 5]) / 10
    freq = np.array([draws.count(f) for f in "abc"]) / n
    assert np.all(np.abs(freq - pi) <= 3 * np.sqrt(pi * (1 - pi) / n))
    assert set(family_sampler(reg, 0.5, 1, RandomStream(1), size=200)) == {"c"}
    assert family_sampler(reg, 0.5, 128, RandomStream(2)) in "abc"


def test_registry_weights_valid():
    reg = make_registry({"a": 4, "b": 9})
    assert sum(reg.weights.values()) == pytest.approx(1.0, abs=1e-12)


def test_build_pssm_arithmetic():
    fam = family_from_rows(["AC", "AD", "A-"])
    p = build_pssm(fam, 0.1)
    probs = np.exp(p.log_probs)
    assert probs[0, 0] == pytest.approx(3.1 / 5.0)
    assert probs[1, 1] == pytest.approx(1.1 / 4.0)
    assert np.allclose(probs.sum(axis=1), 1, atol=1e-12)
    uniform = family_from_rows(["ACDEFGHIKLMNPQRSTVWY"[i] for i in range(20)])
    assert np.allclose(np.exp(build_pssm(uniform).log_probs), 1 / 20)
    empty = build_pssm(family_from_rows(["-A", "XA"]))
    assert np.allclose(np.exp(empty.log_probs[0]), 1 / 20)


def test_build_pssm_uses_train_rows():
    fam = family_from_rows(["A", "C"], splits=(TRAIN, TEST))
    p = np.exp(build_pssm(fam).log_probs[0])
    assert p[0] > p[1]


def test_family_validation():
    with pytest.raises(DomainError):
        family_from_rows(["AC", "A"])
    with pytest.raises(DomainError):
        FamilyPrior("f", np.zeros((2, 3)))
    with pytest.raises(DomainError):
        FamilyPrior("f", np.ones((2, 3)), [0.5, 2.0])
    with pytest.raises(DomainError):
        RootPosterior("f", [[0.5, 0.6]])


def test_gap_frequency_statistics():
    cfg = SynthConfig(L=5, K=4, depth=4000, gap_rate=0.2)
    fam, _ = synth_family("f", cfg, RandomStream(9))
    rate = (fam.codes() < 0).mean()
    assert stats.binomtest(int(rate * fam.depth * 5), fam.depth * 5, 0.2).pvalue > 1e-3
