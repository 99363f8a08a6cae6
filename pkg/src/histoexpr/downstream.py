"""Signature scores, univariate Cox regression and preranked enrichment."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .kernels import get_backend
from .stats import TranscriptEvaluation, bh_adjust

logger = logging.getLogger(__name__)


class DownstreamError(ValueError):
    pass


# ---------------------------------------------------------------- signatures

@dataclass(frozen=True)
class SignatureScore:
    name: str
    members: tuple[str, ...]
    patients: tuple[str, ...]
    scores: np.ndarray


def signature_score(values: np.ndarray, transcript_ids: Sequence[str], members: Sequence[str],
                    patients: Sequence[str] | None = None, name: str = "signature") -> SignatureScore:
    """Per-patient mean of the member columns after z-scoring each column (ddof=1)."""
    members = list(members)
    if not members:
        raise DownstreamError("signature has no members")
    pos = {t: j for j, t in enumerate(transcript_ids)}
    missing = [m for m in members if m not in pos]
    if missing:
        raise DownstreamError(f"signature member {missing[0]!r} not in matrix")
    x = np.asarray(values, dtype=np.float64)[:, [pos[m] for m in members]]
    sd = x.std(axis=0, ddof=1)
    if (sd == 0).any():
        raise DownstreamError(f"signature member {members[int(np.argmin(sd))]!r} is constant")
    z = (x - x.mean(axis=0)) / sd
    patients = tuple(patients) if patients is not None else tuple(str(i) for i in range(x.shape[0]))
    return SignatureScore(name, tuple(members), patients, z.mean(axis=1))


# ---------------------------------------------------------------- Cox

@dataclass(frozen=True)
class CoxResult:
    beta: float
    hazard_ratio: float
    ci_low: float
    ci_high: float
    log_partial_likelihood: float
    n_events: int
    n_subjects: int
    iterations: int


SEPARATION_BETA = 20.0


def _risk_structure(times: np.ndarray, events: np.ndarray):
    """Distinct event times with, per time, the event indices and a risk-set mask row."""
    order = np.argsort(times, kind="mergesort")
    ev_times = np.unique(times[events])
    groups = [np.flatnonzero(events & (times == t)) for t in ev_times]
    at_risk = times[None, :] >= ev_times[:, None]
    return order, groups, at_risk


def cox_partial_loglik(beta: float, x, events, times) -> float:
    """Breslow log partial likelihood at ``beta``."""
    x = np.asarray(x, dtype=np.float64)
    events = np.asarray(events).astype(bool)
    times = np.asarray(times, dtype=np.float64)
    _, groups, at_risk = _risk_structure(times, events)
    return _loglik(beta, x - x.mean(), groups, at_risk)[0]


def _loglik(beta, xc, groups, at_risk):
    eta = beta * xc
    shift = eta.max()
    w = np.exp(eta - shift)
    s0 = at_risk @ w
    s1 = at_risk @ (w * xc)
    s2 = at_risk @ (w * xc * xc)
    d = np.array([len(g) for g in groups], dtype=np.float64)
    xsum = np.array([xc[g].sum() for g in groups])
    ll = float((beta * xsum).sum() - (d * (np.log(s0) + shift)).sum())
    mean = s1 / s0
    score = float((xsum - d * mean).sum())
    info = float((d * (s2 / s0 - mean * mean)).sum())
    return ll, score, info


def cox_fit(x, events, times, tol: float = 1e-8, max_iter: int = 50) -> CoxResult:
    """Univariate Cox model, Breslow ties, Newton-Raphson from beta = 0.

    Stops when |score| / information < ``tol`` or after ``max_iter`` steps.
    """
    x = np.asarray(x, dtype=np.float64)
    events = np.asarray(events).astype(bool)
    times = np.asarray(times, dtype=np.float64)
    if not (x.shape == events.shape == times.shape) or x.ndim != 1:
        raise DownstreamError("x, events and times must be 1-d and equally long")
    if not np.isfinite(x).all() or not np.isfinite(times).all():
        raise DownstreamError("non-finite covariate or time")
    if not events.any():
        raise DownstreamError("no events")
    xc = x - x.mean()
    _, groups, at_risk = _risk_structure(times, events)
    ll, score, info = _loglik(0.0, xc, groups, at_risk)
    if info <= 1e-12 * max(1.0, float((xc * xc).sum())):
        raise DownstreamError("degenerate covariate")
    beta = 0.0
    it = 0
    for it in range(1, max_iter + 1):
        if info <= 0:
            raise DownstreamError("separation detected")
        step = score / info
        new = beta + step
        nll, nscore, ninfo = _loglik(new, xc, groups, at_risk)
        halvings = 0
        while nll < ll - 1e-12 and halvings < 30:
            step /= 2.0
            new = beta + step
            nll, nscore, ninfo = _loglik(new, xc, groups, at_risk)
            halvings += 1
        beta, ll, score, info = new, nll, nscore, ninfo
        if abs(beta) > SEPARATION_BETA:
            raise DownstreamError("separation detected")
        if info > 0 and abs(score) / info < tol:
            break
    if info <= 0:
        raise DownstreamError("separation detected")
    se = 1.0 / math.sqrt(info)
    return CoxResult(beta=beta, hazard_ratio=math.exp(beta),
                     ci_low=math.exp(beta - 1.96 * se), ci_high=math.exp(beta + 1.96 * se),
                     log_partial_likelihood=ll, n_events=int(events.sum()),
                     n_subjects=int(x.size), iterations=it)


@dataclass(frozen=True)
class SurvivalRecord:
    patient_id: str
    covariate: float
    event: bool
    time_days: float


def read_survival(path: str | Path) -> list[SurvivalRecord]:
    with open(path, newline="") as fh:
        return [SurvivalRecord(r["patient_id"], float(r["covariate"]), r["event"].strip() == "1",
                               float(r["time_days"]))
                for r in csv.DictReader(fh, delimiter="\t")]


def write_survival(path: str | Path, records: Sequence[SurvivalRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["patient_id", "covariate", "event", "time_days"])
        for r in records:
            w.writerow([r.patient_id, repr(float(r.covariate)), int(r.event), repr(float(r.time_days))])


COX_FIELDS = ["name", "beta", "hazard_ratio", "ci_low", "ci_high", "log_partial_likelihood",
              "n_events", "n_subjects", "iterations"]


def write_cox_results(path: str | Path, results: Mapping[str, CoxResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(COX_FIELDS)
        for name in sorted(results):
            r = results[name]
            w.writerow([name] + [repr(getattr(r, f)) if isinstance(getattr(r, f), float)
                                 else getattr(r, f) for f in COX_FIELDS[1:]])


# ---------------------------------------------------------------- GSEA

def rank_genes_for_gsea(ledger: Sequence[TranscriptEvaluation]) -> list[str]:
    """Ascending CV p-value, then descending |rho_cv|, then transcript id."""
    for e in ledger:
        if e.p_cv is None or math.isnan(e.p_cv):
            raise DownstreamError(f"missing CV p-value for {e.transcript_id}")

    def key(e):
        r = 0.0 if math.isnan(e.rho_cv) else abs(e.rho_cv)
        return (e.p_cv, -r, e.transcript_id)

    return [e.transcript_id for e in sorted(ledger, key=key)]


def _hit_positions(ranked: Sequence[str], gene_set) -> tuple[np.ndarray, int]:
    pos: dict[str, int] = {}
    for i, g in enumerate(ranked):
        if g in pos:
            raise DownstreamError(f"gene {g!r} appears twice in the ranking")
        pos[g] = i
    members = set(gene_set)
    if not members:
        raise DownstreamError("empty gene set")
    outside = sorted(members - pos.keys())
    if outside:
        raise DownstreamError(f"gene {outside[0]!r} not in the ranked universe")
    if len(members) == len(pos):
        raise DownstreamError("gene set equals the universe")
    return np.sort(np.fromiter((pos[g] for g in members), dtype=np.int64)), len(pos)


def enrichment_score(ranked: Sequence[str], gene_set, backend: str | None = None) -> float:
    """Unweighted running-sum enrichment score (signed extreme deviation)."""
    hits, n = _hit_positions(ranked, gene_set)
    return float(get_backend(backend).es_from_positions(hits[None, :], n)[0])


@dataclass(frozen=True)
class GseaResult:
    set_id: str
    size: int
    es: float
    p: float
    p_adj: float


def permutation_null(n_total: int, size: int, n_perm: int, rng: np.random.Generator,
                     backend: str | None = None) -> np.ndarray:
    """ES of ``n_perm`` uniformly random ``size``-subsets of rank positions."""
    keys = rng.random((n_perm, n_total))
    pos = np.sort(np.argpartition(keys, size - 1, axis=1)[:, :size], axis=1).astype(np.int64)
    return get_backend(backend).es_from_positions(np.ascontiguousarray(pos), n_total)


def gsea_significance(ranked: Sequence[str], gene_sets: Mapping[str, Sequence[str]],
                      n_perm: int = 2000, seed: int = 0, min_size: int = 1,
                      backend: str | None = None) -> list[GseaResult]:
    """Permutation p-values and BH across sets, with gene-label permutation nulls.

    Sets are intersected with the ranked universe first; sets left with fewer
    than ``min_size`` members, or covering the whole universe, are skipped.
    Each set draws from its own child of ``SeedSequence(seed)``, in sorted
    set-id order, so results do not depend on dict ordering.
    """
    if n_perm < 1000:
        raise DownstreamError("n_perm must be at least 1000")
    universe = set(ranked)
    kept: list[tuple[str, list[str]]] = []
    for sid in sorted(gene_sets):
        members = sorted(set(gene_sets[sid]) & universe)
        if len(members) < max(1, min_size) or len(members) == len(universe):
            logger.info("skipping gene set %s (%d members in universe)", sid, len(members))
            continue
        kept.append((sid, members))
    children = np.random.SeedSequence(seed).spawn(len(kept))
    es_obs, pvals = [], []
    for (sid, members), child in zip(kept, children):
        hits, n = _hit_positions(ranked, members)
        kern = get_backend(backend)
        es = float(kern.es_from_positions(hits[None, :], n)[0])
        null = permutation_null(n, hits.size, n_perm, np.random.default_rng(child), backend)
        exceed = int((np.abs(null) >= abs(es) - 1e-12).sum())
        es_obs.append(es)
        pvals.append((1 + exceed) / (n_perm + 1))
    padj = bh_adjust(pvals) if pvals else np.array([])
    return [GseaResult(sid, len(m), es, p, float(q))
            for (sid, m), es, p, q in zip(kept, es_obs, pvals, padj)]


def read_gmt(path: str | Path) -> dict[str, list[str]]:
    """Tab-separated: set id, description, members."""
    sets: dict[str, list[str]] = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.rstrip("\n\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) < 3:
                raise DownstreamError(f"{path}:{ln}: GMT line needs id, description and members")
            if parts[0] in sets:
                raise DownstreamError(f"{path}:{ln}: duplicate gene set {parts[0]!r}")
            sets[parts[0]] = [g for g in parts[2:] if g]
    return sets


def write_gmt(path: str | Path, gene_sets: Mapping[str, Sequence[str]]) -> None:
    with open(path, "w") as fh:
        for sid in sorted(gene_sets):
            fh.write("\t".join([sid, "na", *gene_sets[sid]]) + "\n")


def write_gsea_results(path: str | Path, results: Sequence[GseaResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["set_id", "size", "es", "p", "p_adj"])
        for r in results:
            w.writerow([r.set_id, r.size, repr(r.es), repr(r.p), repr(r.p_adj)])


def read_gsea_results(path: str | Path) -> list[GseaResult]:
    with open(path, newline="") as fh:
        return [GseaResult(r["set_id"], int(r["size"]), float(r["es"]), float(r["p"]), float(r["p_adj"]))
                for r in csv.DictReader(fh, delimiter="\t")]
