import numpy as np
import pytest

from histoexpr.kernels import BACKENDS


@pytest.fixture(params=sorted(BACKENDS))
def backend(request):
    return request.param


def naive_ward(d: np.ndarray):
    """Full-matrix Lance-Williams Ward.D; ties go to the smallest (left, right) ids."""
    n = d.shape[0]
    dist = {(i, j): float(d[i, j]) for i in range(n) for j in range(i + 1, n)}
    size = {i: 1 for i in range(n)}
    merges = []
    for s in range(n - 1):
        best = min(dist.items(), key=lambda kv: (kv[1], kv[0]))
        (a, b), h = best
        new = n + s
        na, nb = size.pop(a), size.pop(b)
        for k in list(size):
            dak = dist[(min(a, k), max(a, k))]
            dbk = dist[(min(b, k), max(b, k))]
            nk = size[k]
            dist[(k, new)] = ((na + nk) * dak + (nb + nk) * dbk - nk * h) / (na + nb + nk)
        dist = {key: v for key, v in dist.items() if a not in key and b not in key}
        size[new] = na + nb
        merges.append((a, b, h))
    return merges


def random_distance(rng, n):
    pts = rng.normal(size=(n, 4))
    d = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
    return d


ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for a numbered criterion; the assertion is up to the test."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
