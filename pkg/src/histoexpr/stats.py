"""Rank statistics, multiple testing, splits and the per-transcript ledger."""
from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import asdict, dataclass, fields
from functools import lru_cache
from pathlib import Path
from typing import Callable, Iterator, Mapping, NamedTuple, Sequence

import numpy as np
from scipy import stats as sps

logger = logging.getLogger(__name__)


class StatsError(ValueError):
    pass


# ---------------------------------------------------------------- correlation

def midranks(x) -> np.ndarray:
    """Ranks starting at 1 with ties given their average rank."""
    return sps.rankdata(np.asarray(x, dtype=np.float64), method="average")


def spearman_rho(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise StatsError("spearman_rho needs two 1-d vectors of equal length")
    if x.size < 3:
        raise StatsError("spearman_rho needs at least 3 observations")
    rx, ry = midranks(x), midranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    sxx, syy = rx @ rx, ry @ ry
    if sxx == 0 or syy == 0:
        raise StatsError("spearman_rho undefined for a constant vector")
    r = float(rx @ ry / math.sqrt(sxx * syy))
    return min(1.0, max(-1.0, r))


def spearman_columns(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Column-wise Spearman correlation; NaN where either column is constant."""
    rp = np.apply_along_axis(midranks, 0, pred)
    rt = np.apply_along_axis(midranks, 0, truth)
    rp -= rp.mean(axis=0)
    rt -= rt.mean(axis=0)
    num = (rp * rt).sum(axis=0)
    den = np.sqrt((rp * rp).sum(axis=0) * (rt * rt).sum(axis=0))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)
    return np.clip(r, -1.0, 1.0)


EXACT_MAX_N = 8


@lru_cache(maxsize=None)
def _exact_null(n: int) -> np.ndarray:
    base = np.arange(1, n + 1)
    denom = n * (n * n - 1)
    vals = [1.0 - 6.0 * float(((base - np.array(p)) ** 2).sum()) / denom
            for p in itertools.permutations(range(1, n + 1))]
    return np.sort(np.abs(np.array(vals)))


def spearman_pvalue(rho: float, n: int) -> float:
    """Two-sided p-value: exact permutation null for n <= 8, else Student t."""
    if n < 4:
        raise StatsError("spearman_pvalue needs n >= 4")
    a = abs(float(rho))
    if n <= EXACT_MAX_N:
        null = _exact_null(n)
        count = null.size - np.searchsorted(null, a - 1e-12, side="left")
        return float(count) / null.size
    if a >= 1.0:
        return 0.0
    t = a * math.sqrt((n - 2) / (1.0 - a * a))
    return float(min(1.0, 2.0 * sps.t.sf(t, n - 2)))


def bh_adjust(pvalues) -> np.ndarray:
    """Benjamini-Hochberg step-up adjusted p-values in input order."""
    p = np.asarray(pvalues, dtype=np.float64)
    if p.size == 0:
        return p.copy()
    if ((p < 0) | (p > 1)).any():
        raise StatsError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="mergesort")
    scaled = p[order] * m / np.arange(1, m + 1)
    q = np.minimum.accumulate(scaled[::-1])[::-1]
    out = np.empty(m)
    out[order] = np.minimum(q, 1.0)
    return out


def ks_two_sample(a, b) -> float:
    """Sup-norm distance between the two empirical CDFs."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise StatsError("ks_two_sample needs two nonempty samples")
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.abs(fa - fb).max())


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied positive/negative pairs count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise StatsError("roc_auc needs both classes present")
    r = midranks(scores)
    u = r[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


class BootstrapCI(NamedTuple):
    lower: float
    upper: float
    estimate: float
    n_redrawn: int


def bootstrap_ci(metric: Callable[..., float], x, y=None, n_boot: int = 2000,
                 level: float = 0.95, seed: int = 0, max_redraws: int | None = None
                 ) -> BootstrapCI:
    """Percentile interval from resampling patients (pairs) with replacement.

    Resamples on which ``metric`` raises ``ValueError`` or returns NaN are
    redrawn; after ``max_redraws`` (default ``n_boot``) redraws it gives up.
    """
    if n_boot < 1000:
        raise StatsError("n_boot must be at least 1000")
    x = np.asarray(x)
    y = None if y is None else np.asarray(y)
    n = x.shape[0]
    rng = np.random.default_rng(seed)
    cap = n_boot if max_redraws is None else max_redraws

    def call(idx):
        return metric(x[idx]) if y is None else metric(x[idx], y[idx])

    estimate = float(call(np.arange(n)))
    values = np.empty(n_boot)
    redrawn = 0
    i = 0
    while i < n_boot:
        idx = rng.integers(0, n, size=n)
        try:
            v = float(call(idx))
        except ValueError:
            v = math.nan
        if math.isnan(v):
            redrawn += 1
            if redrawn > cap:
                raise StatsError(f"metric undefined on more than {cap} bootstrap resamples")
            continue
        values[i] = v
        i += 1
    if redrawn:
        logger.info("bootstrap redrew %d undefined resamples", redrawn)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(values, [alpha, 1.0 - alpha])
    return BootstrapCI(float(lo), float(hi), estimate, redrawn)


# ---------------------------------------------------------------- splits

@dataclass(frozen=True)
class NestedAllocation:
    outer: int
    inner: tuple[int, int]
    train: tuple[int, ...]


@dataclass(frozen=True)
class DevTestSplit:
    dev: tuple[str, ...]
    test: tuple[str, ...]
    ks_d: float
    candidate: int


@dataclass(frozen=True)
class FoldPlan:
    dev: tuple[str, ...]
    test: tuple[str, ...]
    folds: tuple[tuple[str, ...], ...]
    allocations: tuple[NestedAllocation, ...]

    def fold_of(self) -> dict[str, int]:
        return {p: f for f, members in enumerate(self.folds) for p in members}

    def patients_in(self, fold_ids) -> list[str]:
        return [p for f in sorted(fold_ids) for p in self.folds[f]]


def stratum_test_counts(strata: Mapping[int, int], fraction: float) -> dict[int, int]:
    """Largest-remainder allocation of round(fraction * n) over strata.

    Every stratum gets floor or ceil of ``fraction * size``; a stratum is never
    emptied into the test set.
    """
    n = sum(strata.values())
    total = int(math.floor(fraction * n + 0.5))
    exact = {g: fraction * s for g, s in strata.items()}
    alloc = {g: int(math.floor(e + 1e-9)) for g, e in exact.items()}
    remaining = total - sum(alloc.values())
    order = sorted(strata, key=lambda g: (-(exact[g] - alloc[g]), g))
    for g in order:
        if remaining <= 0:
            break
        if exact[g] - alloc[g] > 1e-9 and alloc[g] + 1 < strata[g]:
            alloc[g] += 1
            remaining -= 1
    if remaining > 0:
        raise StatsError("stratum too small to split at the requested test fraction")
    for g, s in strata.items():
        if s > 1 and alloc[g] >= s:
            raise StatsError(f"stratum ISUP {g} too small to split")
    return alloc


def split_candidates(patients, test_fraction: float, n_candidates: int = 500,
                     seed: int = 0) -> Iterator[tuple[str, ...]]:
    """Yield ISUP-stratified candidate test sets in a seeded, fixed order."""
    strata: dict[int, list[str]] = {}
    for p in patients:
        strata.setdefault(p.isup, []).append(p.patient_id)
    if not strata:
        raise StatsError("no patients to split")
    alloc = stratum_test_counts({g: len(v) for g, v in strata.items()}, test_fraction)
    rng = np.random.default_rng(seed)
    grades = sorted(strata)
    for _ in range(n_candidates):
        test = []
        for g in grades:
            members = strata[g]
            pick = rng.permutation(len(members))[: alloc[g]]
            test.extend(members[i] for i in sorted(pick))
        yield tuple(test)


def make_dev_test_split(patients, test_fraction: float, n_candidates: int = 500,
                        seed: int = 0) -> DevTestSplit:
    """Pick, among stratified candidates, the split whose age distributions match best.

    Missing ages are ignored in the KS comparison; the first candidate with
    the minimal distance wins.
    """
    patients = list(patients)
    ages = {p.patient_id: p.age for p in patients}
    best = None
    for i, test in enumerate(split_candidates(patients, test_fraction, n_candidates, seed)):
        tset = set(test)
        a_test = [ages[p] for p in test if ages[p] is not None]
        a_dev = [ages[p.patient_id] for p in patients
                 if p.patient_id not in tset and ages[p.patient_id] is not None]
        d = ks_two_sample(a_dev, a_test) if a_test and a_dev else 0.0
        if best is None or d < best[0]:
            best = (d, i, test)
    d, i, test = best
    tset = set(test)
    dev = tuple(p.patient_id for p in patients if p.patient_id not in tset)
    return DevTestSplit(dev=dev, test=tuple(test), ks_d=d, candidate=i)


def nested_allocations(k: int = 10) -> tuple[NestedAllocation, ...]:
    """``k // 2`` allocations: outer fold 2a, inner folds 2a+1 and 2a+2 (mod k)."""
    if k < 4:
        raise StatsError("nested allocations need at least 4 folds")
    out = []
    for a in range(k // 2):
        outer = 2 * a
        inner = ((2 * a + 1) % k, (2 * a + 2) % k)
        train = tuple(f for f in range(k) if f != outer and f not in inner)
        out.append(NestedAllocation(outer, inner, train))
    return tuple(out)


def make_cv_plan(dev: Sequence[str], k: int = 10, seed: int = 0,
                 test: Sequence[str] = ()) -> FoldPlan:
    dev = list(dev)
    if k > len(dev):
        raise StatsError(f"cannot make {k} folds from {len(dev)} patients")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dev))
    folds = [[] for _ in range(k)]
    for pos, i in enumerate(order):
        folds[pos % k].append(dev[i])
    folds = tuple(tuple(sorted(f)) for f in folds)
    return FoldPlan(dev=tuple(dev), test=tuple(test), folds=folds, allocations=nested_allocations(k))


def write_fold_plan(path: str | Path, plan: FoldPlan) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["patient_id", "role", "fold"])
        fold_of = plan.fold_of()
        for p in plan.dev:
            w.writerow([p, "dev", fold_of[p]])
        for p in plan.test:
            w.writerow([p, "test", ""])


def read_fold_plan(path: str | Path) -> FoldPlan:
    dev, test, fold = [], [], {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            if row["role"] == "dev":
                dev.append(row["patient_id"])
                fold[row["patient_id"]] = int(row["fold"])
            else:
                test.append(row["patient_id"])
    k = max(fold.values()) + 1
    folds = tuple(tuple(sorted(p for p in dev if fold[p] == f)) for f in range(k))
    return FoldPlan(tuple(dev), tuple(test), folds, nested_allocations(k))


# ---------------------------------------------------------------- ledger

@dataclass
class TranscriptEvaluation:
    transcript_id: str
    rho_cv: float
    p_cv: float
    p_adj_cv: float
    rho_test: float = math.nan
    p_test: float = math.nan
    p_adj_test: float = math.nan
    resolution: str = ""
    significant_cv: bool = False
    validated_test: bool = False


def _rho_p(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    try:
        r = spearman_rho(pred, truth)
    except StatsError:
        return math.nan, 1.0
    return r, spearman_pvalue(r, pred.size)


def _aligned(ids: Sequence[str], values: np.ndarray, order: Sequence[str], what: str) -> np.ndarray:
    pos: dict[str, int] = {}
    for i, p in enumerate(ids):
        if p in pos:
            raise StatsError(f"patient {p!r} predicted twice in {what}")
        pos[p] = i
    missing = [p for p in order if p not in pos]
    if missing:
        raise StatsError(f"{len(missing)} patient(s) lack a {what} prediction, e.g. {missing[0]!r}")
    return values[[pos[p] for p in order]]


def evaluate_transcripts(transcript_ids: Sequence[str],
                         cv_patients: Sequence[str], cv_pred: np.ndarray, cv_truth: np.ndarray,
                         test_patients: Sequence[str] | None = None, test_pred: np.ndarray | None = None,
                         test_truth: np.ndarray | None = None,
                         resolutions: Sequence[str] | None = None,
                         cv_alpha: float = 1e-4, test_alpha: float = 0.01,
                         truth_patients: Sequence[str] | None = None,
                         test_truth_patients: Sequence[str] | None = None,
                         ) -> list[TranscriptEvaluation]:
    """Two-gate evaluation: BH over all transcripts in CV, then BH over the passing set on test.

    ``cv_pred`` rows are labelled by ``cv_patients`` (concatenated validation
    folds); ``cv_truth`` rows by ``truth_patients`` (defaults to the same
    order). Each dev patient must be predicted exactly once.
    """
    transcript_ids = list(transcript_ids)
    truth_patients = list(truth_patients if truth_patients is not None else cv_patients)
    cv_pred = _aligned(cv_patients, np.asarray(cv_pred, dtype=float), truth_patients, "cross-validation")
    cv_truth = np.asarray(cv_truth, dtype=float)
    n = cv_truth.shape[0]
    rho = np.empty(len(transcript_ids))
    p = np.empty(len(transcript_ids))
    for j in range(len(transcript_ids)):
        rho[j], p[j] = _rho_p(cv_pred[:, j], cv_truth[:, j])
    p_adj = bh_adjust(p)
    res = list(resolutions) if resolutions is not None else [""] * len(transcript_ids)
    ledger = [
        TranscriptEvaluation(t, float(rho[j]), float(p[j]), float(p_adj[j]), resolution=res[j],
                             significant_cv=bool(p_adj[j] < cv_alpha))
        for j, t in enumerate(transcript_ids)
    ]
    logger.info("%d of %d transcripts pass the CV gate (n=%d)",
                sum(e.significant_cv for e in ledger), len(ledger), n)
    if test_pred is None:
        return ledger
    test_truth_patients = list(test_truth_patients if test_truth_patients is not None else test_patients)
    test_pred = _aligned(test_patients, np.asarray(test_pred, dtype=float), test_truth_patients, "test")
    test_truth = np.asarray(test_truth, dtype=float)
    passing = [j for j, e in enumerate(ledger) if e.significant_cv]
    tp = np.array([_rho_p(test_pred[:, j], test_truth[:, j]) for j in passing]).reshape(-1, 2)
    tadj = bh_adjust(tp[:, 1]) if passing else np.array([])
    for k, j in enumerate(passing):
        e = ledger[j]
        e.rho_test, e.p_test, e.p_adj_test = float(tp[k, 0]), float(tp[k, 1]), float(tadj[k])
        e.validated_test = bool(tadj[k] < test_alpha)
    return ledger


LEDGER_FIELDS = [f.name for f in fields(TranscriptEvaluation)]


def _cell(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def write_ledger(path: str | Path, ledger: Sequence[TranscriptEvaluation]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(LEDGER_FIELDS)
        for e in ledger:
            d = asdict(e)
            w.writerow([_cell(d[k]) for k in LEDGER_FIELDS])


def read_ledger(path: str | Path) -> list[TranscriptEvaluation]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            kw = {}
            for f in fields(TranscriptEvaluation):
                v = row[f.name]
                if f.type in ("float",):
                    kw[f.name] = math.nan if v == "" else float(v)
                elif f.type == "bool":
                    kw[f.name] = v == "1"
                else:
                    kw[f.name] = v
            out.append(TranscriptEvaluation(**kw))
    return out


def aggregate_test_predictions(tile_predictions: Mapping[str, np.ndarray],
                               tile_slides: Mapping[str, Sequence[str]],
                               selected: Sequence[str],
                               slide_order: Sequence[str] | None = None) -> tuple[list[str], np.ndarray]:
    """Average CV models per tile, then tiles per slide, at each transcript's resolution.

    ``tile_predictions[res]`` has shape (n_models, n_tiles, n_transcripts) and
    ``tile_slides[res]`` names the slide of each tile at that resolution.
    Returns slide ids and a slides x transcripts matrix.
    """
    selected = list(selected)
    slides = list(slide_order) if slide_order is not None else sorted(
        {s for r in set(selected) for s in tile_slides[r]})
    out = np.full((len(slides), len(selected)), np.nan)
    for res in sorted(set(selected)):
        if res not in tile_predictions:
            raise StatsError(f"missing model output at resolution {res}")
        pred = np.asarray(tile_predictions[res], dtype=float)
        if pred.ndim != 3 or np.isnan(pred).any():
            raise StatsError(f"missing model output at resolution {res}")
        per_tile = pred.mean(axis=0)
        cols = [j for j, r in enumerate(selected) if r == res]
        tslides = np.asarray(tile_slides[res])
        for i, s in enumerate(slides):
            rows = np.flatnonzero(tslides == s)
            if rows.size == 0:
                raise StatsError(f"slide {s} has no tiles at {res}")
            out[i, cols] = per_tile[rows][:, cols].mean(axis=0)
    return slides, out
