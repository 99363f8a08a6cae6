"""Brute-force reference implementations used by the equivalence tests."""
from fractions import Fraction
import itertools

import numpy as np


def brute_midranks(x):
    x = list(x)
    out = []
    for v in x:
        less = sum(1 for u in x if u < v)
        equal = sum(1 for u in x if u == v)
        out.append(less + (equal + 1) / 2.0)
    return np.array(out)


def brute_spearman(x, y):
    rx, ry = brute_midranks(x), brute_midranks(y)
    rx, ry = rx - rx.mean(), ry - ry.mean()
    return float((rx * ry).sum() / np.sqrt((rx * rx).sum() * (ry * ry).sum()))


def brute_exact_p(rho, n):
    base = np.arange(1, n + 1)
    count = 0
    total = 0
    for perm in itertools.permutations(base):
        r = 1 - 6 * ((base - np.array(perm)) ** 2).sum() / (n * (n * n - 1))
        count += abs(r) >= abs(rho) - 1e-12
        total += 1
    return count / total


def brute_ks(a, b):
    best = 0.0
    for t in list(a) + list(b):
        fa = sum(1 for v in a if v <= t) / len(a)
        fb = sum(1 for v in b if v <= t) / len(b)
        best = max(best, abs(fa - fb))
    return best


def brute_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    total = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return total / (len(pos) * len(neg))


def brute_bh(p):
    m = len(p)
    order = sorted(range(m), key=lambda i: (p[i], i))
    rank = {i: r + 1 for r, i in enumerate(order)}
    out = []
    for i in range(m):
        vals = [p[j] * m / rank[j] for j in range(m) if rank[j] >= rank[i]]
        out.append(min(1.0, min(vals)))
    return np.array(out)


def brute_otsu(hist):
    """Maximize between-class variance with exact rationals; smallest t wins ties."""
    n = sum(hist)
    best_t, best = None, Fraction(-1)
    for t in range(255):
        n0 = sum(hist[: t + 1])
        n1 = n - n0
        if n0 == 0 or n1 == 0:
            continue
        mu0 = Fraction(sum(i * hist[i] for i in range(t + 1)), n0)
        mu1 = Fraction(sum(i * hist[i] for i in range(t + 1, 256)), n1)
        var = Fraction(n0 * n1, n * n) * (mu0 - mu1) ** 2
        if var > best:
            best_t, best = t, var
    return best_t


def brute_es(ranked, gene_set):
    """Walk the ranking in exact rationals, +1/s on hits and -1/(N-s) on misses."""
    s = len(set(gene_set))
    n = len(ranked)
    run, top, bottom = Fraction(0), Fraction(0), Fraction(0)
    for g in ranked:
        run += Fraction(1, s) if g in gene_set else -Fraction(1, n - s)
        top = max(top, run)
        bottom = min(bottom, run)
    return float(top if top >= -bottom else bottom)
