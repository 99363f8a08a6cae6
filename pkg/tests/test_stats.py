import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from histoexpr.expression import PatientRecord
from histoexpr.stats import (
    StatsError, aggregate_test_predictions, bh_adjust, bootstrap_ci, evaluate_transcripts,
    ks_two_sample, make_cv_plan, make_dev_test_split, nested_allocations, read_fold_plan,
    read_ledger, roc_auc, spearman_columns, spearman_pvalue, spearman_rho, split_candidates,
    stratum_test_counts, write_fold_plan, write_ledger,
)

from oracles import brute_auc, brute_bh, brute_exact_p, brute_ks, brute_spearman

small_floats = st.integers(-5, 5).map(float)


@settings(max_examples=150, deadline=None)
@given(st.integers(3, 12).flatmap(lambda n: st.tuples(st.lists(small_floats, min_size=n, max_size=n),
                                                      st.lists(small_floats, min_size=n, max_size=n))))
def test_spearman_matches_brute(xy):
    x, y = xy
    if len(set(x)) == 1 or len(set(y)) == 1:
        with pytest.raises(StatsError):
            spearman_rho(x, y)
        return
    assert spearman_rho(x, y) == pytest.approx(brute_spearman(x, y), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(4, 7), st.integers(0, 1000))
def test_exact_pvalue_matches_enumeration(n, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.permutation(n), rng.permutation(n)
    r = spearman_rho(x, y)
    assert spearman_pvalue(r, n) == pytest.approx(brute_exact_p(r, n), abs=1e-12)


def test_pvalue_t_branch_and_bounds():
    assert spearman_pvalue(0.0, 30) == pytest.approx(1.0)
    assert spearman_pvalue(1.0, 30) == 0.0
    assert spearman_pvalue(0.5, 30) < spearman_pvalue(0.3, 30)
    with pytest.raises(StatsError):
        spearman_pvalue(0.2, 3)


@settings(max_examples=150, deadline=None)
@given(st.lists(small_floats, min_size=1, max_size=12), st.lists(small_floats, min_size=1, max_size=12))
def test_ks_matches_brute(a, b):
    assert ks_two_sample(a, b) == pytest.approx(brute_ks(a, b), abs=1e-12)


@settings(max_examples=150, deadline=None)
@given(st.lists(st.tuples(small_floats, st.booleans()), min_size=2, max_size=16))
def test_auc_matches_brute(pairs):
    scores = [s for s, _ in pairs]
    labels = [l for _, l in pairs]
    if all(labels) or not any(labels):
        with pytest.raises(StatsError):
            roc_auc(scores, labels)
        return
    assert roc_auc(scores, labels) == pytest.approx(brute_auc(scores, labels), abs=1e-12)


@settings(max_examples=150, deadline=None)
@given(st.lists(st.sampled_from([0.0, 0.001, 0.01, 0.02, 0.04, 0.05, 0.3, 0.7, 1.0]) | st.floats(0, 1),
                min_size=1, max_size=20))
def test_bh_matches_brute(p):
    np.testing.assert_allclose(bh_adjust(p), brute_bh(p), atol=1e-12, rtol=0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=30))
def test_bh_properties(p):
    q = bh_adjust(p)
    assert (q >= np.asarray(p) - 1e-15).all() and (q <= 1).all()
    order = np.argsort(p, kind="mergesort")
    assert (np.diff(q[order]) >= -1e-15).all()


def test_bh_rejects_out_of_range():
    with pytest.raises(StatsError):
        bh_adjust([0.5, 1.5])
    assert bh_adjust([]).size == 0


def test_spearman_columns_nan_for_constant():
    pred = np.array([[1.0, 2.0], [2.0, 2.0], [3.0, 2.0], [4.0, 2.0]])
    truth = np.array([[1.0, 1.0], [3.0, 2.0], [2.0, 3.0], [4.0, 4.0]])
    r = spearman_columns(pred, truth)
    assert r[0] == pytest.approx(0.8) and math.isnan(r[1])


def test_bootstrap_ci():
    rng = np.random.default_rng(0)
    x = rng.normal(size=60)
    y = x + rng.normal(size=60)
    ci = bootstrap_ci(spearman_rho, x, y, n_boot=1000, seed=3)
    assert ci.lower < ci.estimate < ci.upper
    assert ci == bootstrap_ci(spearman_rho, x, y, n_boot=1000, seed=3)
    with pytest.raises(StatsError):
        bootstrap_ci(spearman_rho, x, y, n_boot=100)


def test_bootstrap_redraws_undefined_resamples():
    x = np.array([0.0] * 18 + [1.0, 2.0])
    ci = bootstrap_ci(lambda v: float(np.std(v)) if np.std(v) > 0 else math.nan, x, n_boot=1000, seed=1)
    assert ci.n_redrawn > 0 and ci.lower > 0


def _cohort(n, seed=0):
    rng = np.random.default_rng(seed)
    grades = rng.choice([1, 2, 3, 4, 5], size=n, p=[0.1, 0.3, 0.3, 0.15, 0.15])
    return [PatientRecord(f"P{i:03d}", int(g), age=float(rng.integers(45, 80))) for i, g in enumerate(grades)]


@settings(max_examples=30, deadline=None)
@given(st.dictionaries(st.integers(1, 5), st.integers(2, 40), min_size=1), st.sampled_from([0.2, 0.25, 0.3, 0.5]))
def test_stratum_counts(strata, f):
    alloc = stratum_test_counts(strata, f)
    n = sum(strata.values())
    assert sum(alloc.values()) == math.floor(f * n + 0.5)
    for g, s in strata.items():
        assert math.floor(f * s) <= alloc[g] <= math.ceil(f * s)
        assert alloc[g] < s


def test_split_is_minimal_ks_candidate():
    pts = _cohort(90)
    split = make_dev_test_split(pts, 0.3, n_candidates=60, seed=5)
    ages = {p.patient_id: p.age for p in pts}
    ds = []
    for test in split_candidates(pts, 0.3, 60, seed=5):
        t = set(test)
        ds.append(ks_two_sample([ages[p] for p in ages if p not in t], [ages[p] for p in test]))
    assert split.ks_d == min(ds)
    assert split.candidate == ds.index(min(ds))
    assert len(split.test) == round(0.3 * 90)
    assert set(split.dev).isdisjoint(split.test) and len(split.dev) + len(split.test) == 90


@settings(max_examples=25, deadline=None)
@given(st.integers(10, 60), st.integers(4, 10), st.integers(0, 100))
def test_folds_balanced_and_partitioning(n, k, seed):
    dev = [f"p{i}" for i in range(n)]
    plan = make_cv_plan(dev, k, seed=seed)
    sizes = [len(f) for f in plan.folds]
    assert max(sizes) - min(sizes) <= 1
    assert sorted(p for f in plan.folds for p in f) == sorted(dev)


@pytest.mark.parametrize("k", [4, 6, 10])
def test_nested_allocations_disjoint(k):
    allocs = nested_allocations(k)
    assert len(allocs) == k // 2
    for a in allocs:
        parts = [{a.outer}, set(a.inner), set(a.train)]
        assert set().union(*parts) == set(range(k))
        assert sum(map(len, parts)) == k
    assert [a.outer for a in allocs] == list(range(0, 2 * (k // 2), 2))


def test_fold_plan_roundtrip(tmp_path):
    plan = make_cv_plan([f"p{i}" for i in range(23)], 5, seed=1, test=["t1", "t2"])
    write_fold_plan(tmp_path / "f.tsv", plan)
    back = read_fold_plan(tmp_path / "f.tsv")
    assert back.folds == plan.folds and back.test == plan.test


def test_evaluate_two_gates_and_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    n, t = 60, 5
    truth = rng.normal(size=(n, t))
    pred = truth.copy()
    pred[:, 3:] = rng.normal(size=(n, 2))
    pats = [f"p{i}" for i in range(n)]
    tt = rng.normal(size=(20, t))
    tp = tt.copy()
    tp[:, 2] = rng.normal(size=20)
    ledger = evaluate_transcripts([f"g{j}" for j in range(t)], pats, pred, truth,
                                  [f"q{i}" for i in range(20)], tp, tt)
    assert [e.significant_cv for e in ledger] == [True, True, True, False, False]
    assert [e.validated_test for e in ledger] == [True, True, False, False, False]
    assert math.isnan(ledger[3].rho_test)
    write_ledger(tmp_path / "l.tsv", ledger)
    back = read_ledger(tmp_path / "l.tsv")
    assert [e.transcript_id for e in back] == [e.transcript_id for e in ledger]
    assert back[0].p_adj_cv == ledger[0].p_adj_cv and back[1].validated_test


def test_evaluate_requires_each_patient_once():
    truth = np.zeros((4, 1)) + np.arange(4)[:, None]
    with pytest.raises(StatsError, match="twice"):
        evaluate_transcripts(["g"], ["a", "a", "b", "c"], truth, truth, truth_patients=["a", "b", "c", "d"])


def test_constant_prediction_gives_nan_and_p_one():
    truth = np.arange(10.0)[:, None]
    ledger = evaluate_transcripts(["g"], [str(i) for i in range(10)], np.ones((10, 1)), truth)
    assert math.isnan(ledger[0].rho_cv) and ledger[0].p_cv == 1.0


def test_aggregate_test_predictions():
    preds = {"10X": np.array([[[1.0, 5.0], [3.0, 7.0], [10.0, 0.0]],
                              [[3.0, 5.0], [5.0, 7.0], [10.0, 2.0]]])}
    slides, out = aggregate_test_predictions(preds, {"10X": ["a", "a", "b"]}, ["10X", "10X"])
    assert slides == ["a", "b"]
    np.testing.assert_allclose(out, [[3.0, 6.0], [10.0, 1.0]])
