import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from histoexpr.downstream import (
    DownstreamError, SurvivalRecord, cox_fit, cox_partial_loglik, enrichment_score, gsea_significance,
    permutation_null, rank_genes_for_gsea, read_gmt, read_gsea_results, read_survival,
    signature_score, write_cox_results, write_gmt, write_gsea_results, write_survival,
)
from histoexpr.stats import TranscriptEvaluation, spearman_rho

from oracles import brute_es

# ---------------------------------------------------------------- signature


def test_signature_single_member_is_its_standardized_value():
    x = np.array([[1.0, 9.0], [2.0, 7.0], [6.0, 8.0]])
    s = signature_score(x, ["a", "b"], ["a"])
    np.testing.assert_allclose(s.scores, (x[:, 0] - x[:, 0].mean()) / x[:, 0].std(ddof=1))


def test_signature_member_order_irrelevant_and_errors():
    x = np.random.default_rng(0).normal(size=(10, 4))
    ids = list("abcd")
    a = signature_score(x, ids, ["a", "c", "d"]).scores
    b = signature_score(x, ids, ["d", "a", "c"]).scores
    np.testing.assert_allclose(a, b, atol=1e-15)
    with pytest.raises(DownstreamError):
        signature_score(x, ids, [])
    with pytest.raises(DownstreamError):
        signature_score(x, ids, ["z"])


def test_signature_mean_over_subset():
    x = np.random.default_rng(1).normal(size=(12, 31))
    ids = [f"g{i}" for i in range(31)]
    keep = ids[2:]
    z = (x - x.mean(0)) / x.std(0, ddof=1)
    np.testing.assert_allclose(signature_score(x, ids, keep).scores, z[:, 2:].mean(axis=1))


# ---------------------------------------------------------------- Cox

def grid_beta(x, events, times):
    grid = np.round(np.arange(-5.0, 5.0 + 1e-9, 1e-4), 4)
    ll = np.array([cox_partial_loglik(b, x, events, times) for b in grid[::100]])
    # coarse pass then fine pass around the best coarse point
    b0 = grid[::100][int(np.argmax(ll))]
    fine = grid[(grid >= b0 - 0.02) & (grid <= b0 + 0.02)]
    llf = np.array([cox_partial_loglik(b, x, events, times) for b in fine])
    return fine[int(np.argmax(llf))]


def random_survival(rng, n):
    x = rng.normal(size=n)
    times = rng.exponential(np.exp(-0.7 * x)).round(1) + 0.1
    events = rng.random(n) < 0.7
    events[0] = True
    return x, events, times


def test_cox_matches_grid_oracle():
    rng = np.random.default_rng(0)
    done = 0
    while done < 15:
        x, e, t = random_survival(rng, int(rng.integers(6, 21)))
        try:
            fit = cox_fit(x, e, t)
        except DownstreamError:
            continue
        if abs(fit.beta) > 4.9:
            continue
        assert fit.beta == pytest.approx(grid_beta(x, e, t), abs=1e-3)
        done += 1


def test_cox_loglik_by_hand():
    # Breslow with a tie at t=1 between x=1 and x=0; x=2 at risk only at t=1
    x = np.array([1.0, 0.0, 2.0])
    e = np.array([True, True, False])
    t = np.array([1.0, 1.0, 3.0])
    b = 0.3
    xc = x - x.mean()
    w = np.exp(b * xc)
    want = b * (xc[0] + xc[1]) - 2 * np.log(w.sum())
    assert cox_partial_loglik(b, x, e, t) == pytest.approx(want, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_cox_invariances(seed):
    rng = np.random.default_rng(seed)
    x, e, t = random_survival(rng, 15)
    try:
        fit = cox_fit(x, e, t)
    except DownstreamError:
        return
    shifted = cox_fit(x + 3.0, e, t)
    flipped = cox_fit(-x, e, t)
    scaled = cox_fit(2.0 * x, e, t)
    assert shifted.beta == pytest.approx(fit.beta, abs=1e-7)
    assert flipped.beta == pytest.approx(-fit.beta, abs=1e-7)
    assert scaled.beta == pytest.approx(fit.beta / 2, abs=1e-7)
    assert fit.ci_low < fit.hazard_ratio < fit.ci_high


def test_cox_degenerate_and_separation():
    with pytest.raises(DownstreamError, match="degenerate covariate"):
        cox_fit([1.0, 1.0, 1.0], [True, False, True], [1.0, 2.0, 3.0])
    with pytest.raises(DownstreamError, match="separation detected"):
        cox_fit([1.0, 0.0], [True, False], [1.0, 2.0])
    with pytest.raises(DownstreamError, match="no events"):
        cox_fit([1.0, 0.0], [False, False], [1.0, 2.0])


def test_cox_results_and_survival_io(tmp_path):
    recs = [SurvivalRecord("a", 0.5, True, 100.0), SurvivalRecord("b", -0.2, False, 300.0)]
    write_survival(tmp_path / "s.tsv", recs)
    assert read_survival(tmp_path / "s.tsv") == recs
    fit = cox_fit([0.1, 0.5, -0.3, 0.9, 0.0], [True, True, False, True, True], [5, 8, 3, 1, 9])
    write_cox_results(tmp_path / "c.tsv", {"rna": fit})
    assert (tmp_path / "c.tsv").read_text().startswith("name\tbeta")


# ---------------------------------------------------------------- GSEA

def _ledger(p, rho):
    return [TranscriptEvaluation(f"g{i}", r, q, q) for i, (q, r) in enumerate(zip(p, rho))]


def test_rank_tie_rules():
    led = _ledger([0.2, 0.01, 0.2, 0.2], [0.1, 0.5, -0.6, math.nan])
    assert rank_genes_for_gsea(led) == ["g1", "g2", "g0", "g3"]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([0.01, 0.05, 0.5, 1.0]), st.sampled_from([-0.4, 0.0, 0.2, 0.4])),
                min_size=1, max_size=15))
def test_rank_matches_sort_oracle(rows):
    led = _ledger([p for p, _ in rows], [r for _, r in rows])
    want = [e.transcript_id for e in sorted(led, key=lambda e: (e.p_cv, -abs(e.rho_cv), e.transcript_id))]
    assert rank_genes_for_gsea(led) == want


def test_enrichment_basic_cases(backend):
    ranked = list("abcde")
    assert enrichment_score(ranked, {"a"}, backend) == 1.0
    assert enrichment_score(ranked, {"b", "c"}, backend) == pytest.approx(brute_es(ranked, {"b", "c"}), abs=1e-15)
    with pytest.raises(DownstreamError):
        enrichment_score(ranked, set(ranked), backend)
    with pytest.raises(DownstreamError):
        enrichment_score(ranked, {"zz"}, backend)


@settings(max_examples=150, deadline=None)
@given(st.integers(2, 30).flatmap(lambda n: st.tuples(st.just(n), st.sets(st.integers(0, n - 1), min_size=1,
                                                                             max_size=n - 1))),
       st.sampled_from(["python", "cython"]))
def test_enrichment_matches_running_sum(case, backend):
    from histoexpr.kernels import BACKENDS
    if backend not in BACKENDS:
        backend = "python"
    n, idx = case
    ranked = [f"g{i}" for i in range(n)]
    members = {ranked[i] for i in idx}
    assert enrichment_score(ranked, members, backend) == pytest.approx(brute_es(ranked, members), abs=1e-12)


def test_permutation_null_covers_positions():
    rng = np.random.default_rng(0)
    null = permutation_null(40, 5, 2000, rng)
    assert null.shape == (2000,) and np.abs(null).max() <= 1.0


def test_gsea_p_bounds_and_determinism(backend):
    ranked = [f"g{i}" for i in range(60)]
    sets = {"top": ranked[:6], "mid": ranked[27:33], "odd": ranked[::7]}
    res = gsea_significance(ranked, sets, n_perm=1000, seed=4, backend=backend)
    assert [r.set_id for r in res] == ["mid", "odd", "top"]
    for r in res:
        assert 1 / 1001 <= r.p <= 1.0 and r.p_adj >= r.p
    top = {r.set_id: r for r in res}["top"]
    assert top.p == 1 / 1001
    again = gsea_significance(ranked, dict(reversed(list(sets.items()))), n_perm=1000, seed=4, backend=backend)
    assert [(r.set_id, r.p) for r in again] == [(r.set_id, r.p) for r in res]
    with pytest.raises(DownstreamError):
        gsea_significance(ranked, sets, n_perm=999)


def test_gsea_p_is_one_when_null_matches_observed():
    # a single-gene set in a two-gene universe: every subset has |ES| = 1
    res = gsea_significance(["a", "b"], {"s": ["a"]}, n_perm=1000)
    assert res[0].p == 1.0


def test_gsea_skips_and_intersects():
    ranked = [f"g{i}" for i in range(10)]
    res = gsea_significance(ranked, {"full": ranked + ["x"], "small": ["g1", "zz"], "ok": ["g2", "g3"]},
                            n_perm=1000, min_size=2)
    assert [r.set_id for r in res] == ["ok"]


def test_gmt_and_results_roundtrip(tmp_path):
    sets = {"A": ["x", "y"], "B": ["z"]}
    write_gmt(tmp_path / "s.gmt", sets)
    assert read_gmt(tmp_path / "s.gmt") == sets
    res = gsea_significance([f"g{i}" for i in range(20)], {"A": ["g0", "g1"]}, n_perm=1000)
    write_gsea_results(tmp_path / "r.tsv", res)
    assert read_gsea_results(tmp_path / "r.tsv") == res


def test_signature_identity_gives_rho_one():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(40, 8))
    ids = [f"g{i}" for i in range(8)]
    a = signature_score(x, ids, ids).scores
    b = signature_score(x.copy(), ids, ids).scores
    assert spearman_rho(a, b) == 1.0
