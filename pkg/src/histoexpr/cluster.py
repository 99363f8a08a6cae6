"""Co-expression distance, Ward.D agglomeration, tree cutting and random baselines."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .stats import midranks


class ClusterError(ValueError):
    pass


@dataclass(frozen=True)
class Dendrogram:
    """Merge list over ``n`` leaves.

    Leaves are nodes ``0..n-1``; merge ``s`` creates node ``n + s`` from
    ``left[s] < right[s]`` at ``heights[s]``.
    """

    leaf_ids: tuple[str, ...]
    left: np.ndarray
    right: np.ndarray
    heights: np.ndarray
    sizes: np.ndarray

    @property
    def n_leaves(self) -> int:
        return len(self.leaf_ids)

    def merges(self) -> list[tuple[int, int, float]]:
        return [(int(a), int(b), float(h)) for a, b, h in zip(self.left, self.right, self.heights)]

    def to_scipy(self) -> np.ndarray:
        return np.column_stack([self.left, self.right, self.heights, self.sizes]).astype(float)


@dataclass(frozen=True)
class ClusterAssignment:
    k: int
    transcript_ids: tuple[str, ...]
    labels: np.ndarray  # cluster id in 1..k per transcript
    provenance: str = "correlation"

    def __post_init__(self):
        if len(self.transcript_ids) != len(self.labels):
            raise ClusterError("one label per transcript required")
        present = set(np.unique(self.labels).tolist())
        if present != set(range(1, self.k + 1)):
            raise ClusterError(f"assignment must use every cluster id 1..{self.k}")

    def members(self, cluster: int) -> list[str]:
        return [t for t, c in zip(self.transcript_ids, self.labels) if c == cluster]

    def groups(self) -> list[list[str]]:
        return [self.members(c) for c in range(1, self.k + 1)]

    def sizes(self) -> list[int]:
        return np.bincount(self.labels, minlength=self.k + 1)[1:].tolist()

    def as_dict(self) -> dict[str, int]:
        return {t: int(c) for t, c in zip(self.transcript_ids, self.labels)}


def spearman_matrix(matrix: np.ndarray, transcript_ids: Sequence[str] | None = None) -> np.ndarray:
    """Pairwise Spearman correlation between the columns of a patients x transcripts matrix."""
    matrix = np.asarray(matrix, dtype=np.float64)
    n, m = matrix.shape
    if n < 3:
        raise ClusterError("spearman_matrix needs at least 3 patients")
    ranks = np.apply_along_axis(midranks, 0, matrix)
    ranks -= ranks.mean(axis=0)
    norm = np.sqrt((ranks * ranks).sum(axis=0))
    flat = np.flatnonzero(norm == 0)
    if flat.size:
        ids = transcript_ids or [str(j) for j in range(m)]
        raise ClusterError(f"constant transcript(s), correlation undefined: {[ids[j] for j in flat[:5]]}")
    z = ranks / norm
    rho = np.clip(z.T @ z, -1.0, 1.0)
    np.fill_diagonal(rho, 1.0)
    return (rho + rho.T) / 2.0


def correlation_distance(rho):
    """``1 - |rho|``; works elementwise on arrays."""
    d = 1.0 - np.abs(rho)
    return float(d) if np.ndim(d) == 0 else d


def squareform_condensed(square: np.ndarray) -> np.ndarray:
    square = np.asarray(square, dtype=np.float64)
    n = square.shape[0]
    if square.shape != (n, n):
        raise ClusterError("distance matrix must be square")
    if not np.allclose(square, square.T):
        raise ClusterError("distance matrix must be symmetric")
    if np.any(np.diag(square) != 0):
        raise ClusterError("distance matrix must have a zero diagonal")
    return square[np.triu_indices(n, k=1)].copy()


def ward_linkage(dist: np.ndarray, leaf_ids: Sequence[str] | None = None,
                 backend: str | None = None) -> Dendrogram:
    """Ward.D agglomeration on unsquared input dissimilarities.

    ``dist`` is a square matrix or a condensed upper-triangle vector. Among
    equal minimal distances the pair with the smallest (left, right) node
    ids merges first.
    """
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim == 2:
        condensed = squareform_condensed(dist)
        n = dist.shape[0]
    else:
        condensed = np.ascontiguousarray(dist)
        n = int(round((1 + np.sqrt(1 + 8 * condensed.size)) / 2))
        if n * (n - 1) // 2 != condensed.size:
            raise ClusterError("condensed distance vector has invalid length")
    if not np.all(np.isfinite(condensed)):
        raise ClusterError("distances must be finite")
    if (condensed < 0).any():
        raise ClusterError("distances must be nonnegative")
    if n < 1:
        raise ClusterError("need at least one leaf")
    ids = tuple(leaf_ids) if leaf_ids is not None else tuple(str(i) for i in range(n))
    if len(ids) != n:
        raise ClusterError("leaf id count does not match the distance matrix")
    left, right, heights, sizes = kernels.get_backend(backend).ward_linkage(condensed, n)
    return Dendrogram(ids, np.asarray(left), np.asarray(right), np.asarray(heights), np.asarray(sizes))


def cut_dendrogram(tree: Dendrogram, k: int) -> ClusterAssignment:
    """Undo the last ``k - 1`` merges; clusters are numbered by first leaf in leaf order."""
    n = tree.n_leaves
    if not 1 <= k <= n:
        raise ClusterError(f"k={k} outside 1..{n}")
    parent = list(range(2 * n - 1))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for s in range(n - k):
        new = n + s
        parent[find(int(tree.left[s]))] = new
        parent[find(int(tree.right[s]))] = new
    labels = np.empty(n, dtype=np.int64)
    seen: dict[int, int] = {}
    for i in range(n):
        r = find(i)
        if r not in seen:
            seen[r] = len(seen) + 1
        labels[i] = seen[r]
    return ClusterAssignment(k, tree.leaf_ids, labels, "correlation")


@dataclass(frozen=True)
class ClusterCorrelationStats:
    within: dict[int, float | None]
    between: np.ndarray  # k x k mean |rho| over inter-cluster pairs; diagonal holds within values


def cluster_correlation_stats(assign: ClusterAssignment, rho: np.ndarray) -> ClusterCorrelationStats:
    rho = np.abs(np.asarray(rho, dtype=np.float64))
    if rho.shape != (len(assign.transcript_ids),) * 2:
        raise ClusterError("correlation matrix does not cover the assignment")
    k = assign.k
    idx = [np.flatnonzero(assign.labels == c) for c in range(1, k + 1)]
    between = np.full((k, k), np.nan)
    within: dict[int, float | None] = {}
    for a in range(k):
        ia = idx[a]
        if ia.size > 1:
            block = rho[np.ix_(ia, ia)]
            within[a + 1] = float(block[np.triu_indices(ia.size, k=1)].mean())
            between[a, a] = within[a + 1]
        else:
            within[a + 1] = None
        for b in range(a + 1, k):
            v = float(rho[np.ix_(ia, idx[b])].mean())
            between[a, b] = between[b, a] = v
    return ClusterCorrelationStats(within, between)


def random_reassignment(assign: ClusterAssignment, seed: int = 0) -> ClusterAssignment:
    """Shuffle membership while keeping every cluster's size."""
    rng = np.random.default_rng(seed)
    labels = assign.labels[rng.permutation(len(assign.labels))]
    return ClusterAssignment(assign.k, assign.transcript_ids, labels, "random")


def write_dendrogram(path: str | Path, tree: Dendrogram) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# leaves\t" + "\t".join(tree.leaf_ids) + "\n")
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["left", "right", "height"])
        for a, b, h in tree.merges():
            w.writerow([a, b, repr(h)])


def read_dendrogram(path: str | Path) -> Dendrogram:
    with open(path, newline="") as fh:
        first = fh.readline().rstrip("\n").split("\t")
        leaves = tuple(first[1:])
        rows = list(csv.DictReader(fh, delimiter="\t"))
    left = np.array([int(r["left"]) for r in rows], dtype=np.int64)
    right = np.array([int(r["right"]) for r in rows], dtype=np.int64)
    heights = np.array([float(r["height"]) for r in rows])
    n = len(leaves)
    size = np.ones(2 * n - 1, dtype=np.int64)
    for s in range(len(rows)):
        size[n + s] = size[left[s]] + size[right[s]]
    return Dendrogram(leaves, left, right, heights, size[n:])


def write_assignment(path: str | Path, assign: ClusterAssignment) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["transcript_id", "cluster_id"])
        for t, c in zip(assign.transcript_ids, assign.labels):
            w.writerow([t, int(c)])


def read_assignment(path: str | Path, provenance: str = "correlation") -> ClusterAssignment:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    labels = np.array([int(r["cluster_id"]) for r in rows], dtype=np.int64)
    return ClusterAssignment(int(labels.max()), tuple(r["transcript_id"] for r in rows), labels, provenance)
