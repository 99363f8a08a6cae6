"""Cancer-region decisions from tile-level malignancy scores."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy import ndimage

from .wsi import MAGNIFICATIONS, TileRecord, open_close, rgb_to_hsv

CANCER_THRESHOLD = 0.863
MIN_TUMOR_AREA_MM2 = 1.0


class RoiError(ValueError):
    pass


class TileClassifier(Protocol):
    def score(self, tile: np.ndarray) -> float:
        """Malignancy probability in [0, 1]."""


class SaturationStubClassifier:
    """Deterministic stand-in: a logistic ramp on mean tile saturation.

    Only meant to drive pipeline tests; real classifiers implement
    ``TileClassifier``.
    """

    def __init__(self, midpoint: float = 40.0, width: float = 6.0):
        self.midpoint = midpoint
        self.width = width

    def score(self, tile: np.ndarray) -> float:
        sat = rgb_to_hsv(tile)[..., 1].mean()
        return float(1.0 / (1.0 + np.exp(-(sat - self.midpoint) / self.width)))


@dataclass(frozen=True)
class RoiDecision:
    slide_id: str
    slide_score: float
    largest_component_area_mm2: float
    included: bool


def slide_score(tile_scores: Sequence[float]) -> float:
    """99th percentile of tile scores, linear interpolation between order statistics."""
    s = np.asarray(tile_scores, dtype=np.float64)
    if s.size == 0:
        raise RoiError("slide_score needs at least one tile score")
    return float(np.quantile(s, 0.99, method="linear"))


def score_grid(tiles: Sequence[TileRecord], stride: int) -> tuple[np.ndarray, dict[tuple[int, int], int]]:
    """Lay tile scores on the tiling lattice; lattice cells without a tile hold NaN.

    Returns the grid and a map from (row, col) to tile index.
    """
    if not tiles:
        return np.full((0, 0), np.nan), {}
    rows = [t.y // stride for t in tiles]
    cols = [t.x // stride for t in tiles]
    grid = np.full((max(rows) + 1, max(cols) + 1), np.nan)
    where = {}
    for i, (r, c, t) in enumerate(zip(rows, cols, tiles)):
        if t.malignancy_score is None:
            raise RoiError(f"tile at {t.x},{t.y} of {t.slide_id} has no malignancy score")
        grid[r, c] = t.malignancy_score
        where[(r, c)] = i
    return grid, where


def binarize_and_clean(scores: np.ndarray, threshold: float = CANCER_THRESHOLD, kernel: int = 3) -> np.ndarray:
    """``score > threshold`` then opening and closing; NaN cells count as background."""
    s = np.asarray(scores, dtype=np.float64)
    mask = np.where(np.isnan(s), False, s > threshold)
    return open_close(mask, kernel)


CROSS = ndimage.generate_binary_structure(2, 1)


def largest_component_area(mask: np.ndarray, mpp: float, stride_px: int) -> float:
    """Area in mm^2 of the largest 4-connected component of a lattice mask."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return 0.0
    labels, n = ndimage.label(mask, structure=CROSS)
    biggest = np.bincount(labels.ravel())[1:].max()
    cell = stride_px * mpp / 1000.0
    return float(biggest * cell * cell)


def decide_roi(slide_id: str, tiles: Sequence[TileRecord], stride: int,
               threshold: float = CANCER_THRESHOLD, kernel: int = 3,
               min_area_mm2: float = MIN_TUMOR_AREA_MM2) -> tuple[RoiDecision, list[TileRecord]]:
    """Slide decision plus the tiles that lie inside the cleaned cancer mask."""
    if not tiles:
        return RoiDecision(slide_id, 0.0, 0.0, False), []
    mags = {t.magnification for t in tiles}
    if len(mags) != 1:
        raise RoiError("decide_roi expects tiles of a single magnification")
    mpp = MAGNIFICATIONS[mags.pop()]
    grid, where = score_grid(tiles, stride)
    mask = binarize_and_clean(grid, threshold, kernel)
    area = largest_component_area(mask, mpp, stride)
    score = slide_score([t.malignancy_score for t in tiles])
    kept = [tiles[i] for (r, c), i in sorted(where.items(), key=lambda kv: kv[1]) if mask[r, c]]
    included = area >= min_area_mm2
    return RoiDecision(slide_id, score, area, included), kept


def write_roi_report(path: str | Path, decisions: Sequence[RoiDecision]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["slide_id", "slide_score", "area_mm2", "included"])
        for d in decisions:
            w.writerow([d.slide_id, repr(d.slide_score), repr(d.largest_component_area_mm2), int(d.included)])


def read_roi_report(path: str | Path) -> list[RoiDecision]:
    with open(path, newline="") as fh:
        return [RoiDecision(r["slide_id"], float(r["slide_score"]), float(r["area_mm2"]), r["included"] == "1")
                for r in csv.DictReader(fh, delimiter="\t")]
