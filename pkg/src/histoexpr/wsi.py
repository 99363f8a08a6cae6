"""Tissue detection, tiling and Macenko stain normalization for slide rasters."""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, PngImagePlugin
from scipy import ndimage

logger = logging.getLogger(__name__)

# microns per pixel per magnification level
MAGNIFICATIONS = {"40X": 0.252, "20X": 0.504, "10X": 0.904}

LAPLACIAN_KERNEL = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float64)


class PreprocessError(ValueError):
    pass


@dataclass(frozen=True)
class TissueMaskConfig:
    hue_min: float = 125.0
    laplacian_var_min: float = 20.0
    morphology_kernel: int = 3
    variance_window: int = 15

    def __post_init__(self):
        if not 0 <= self.hue_min < 180:
            raise PreprocessError("hue_min must lie in [0, 180)")
        if self.laplacian_var_min < 0:
            raise PreprocessError("laplacian_var_min must be nonnegative")
        if self.morphology_kernel < 1 or self.morphology_kernel % 2 == 0:
            raise PreprocessError("morphology_kernel must be a positive odd size")


# ---------------------------------------------------------------- colour

def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """8-bit RGB to HSV with hue in [0, 180) and saturation, value in [0, 255]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    delta = v - mn
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(v > 0, 255.0 * delta / v, 0.0)
        safe = np.where(delta > 0, delta, 1.0)
        h = np.where(v == r, 60.0 * (g - b) / safe,
                     np.where(v == g, 120.0 + 60.0 * (b - r) / safe, 240.0 + 60.0 * (r - g) / safe))
    h = np.where(delta > 0, np.mod(h, 360.0), 0.0) / 2.0
    return np.stack([h, s, v], axis=-1)


def to_gray(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    return rgb[..., 0] * 0.299 + rgb[..., 1] * 0.587 + rgb[..., 2] * 0.114


# ---------------------------------------------------------------- thresholds

def otsu_threshold(histogram: Sequence[int]) -> int:
    """Otsu level ``t`` for a 256-bin histogram; class 0 is bins ``<= t``.

    Exact integer arithmetic, so the smallest maximizing ``t`` wins ties.
    """
    hist = [int(v) for v in histogram]
    if len(hist) != 256:
        raise PreprocessError("otsu_threshold expects 256 bins")
    if any(v < 0 for v in hist):
        raise PreprocessError("histogram counts must be nonnegative")
    if sum(1 for v in hist if v > 0) < 2:
        raise PreprocessError("degenerate histogram")
    n_tot = sum(hist)
    s_tot = sum(i * v for i, v in enumerate(hist))
    # between-class variance is proportional to (s0*n1 - s1*n0)^2 / (n0*n1)
    best_t, best_num, best_den = 0, 0, 1
    n0 = s0 = 0
    for t in range(255):
        n0 += hist[t]
        s0 += t * hist[t]
        n1 = n_tot - n0
        if n0 == 0 or n1 == 0:
            continue
        s1 = s_tot - s0
        num = (s0 * n1 - s1 * n0) ** 2
        den = n0 * n1
        if num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t


def laplacian(gray: np.ndarray) -> np.ndarray:
    """3x3 Laplacian response over valid interior pixels."""
    g = np.asarray(gray, dtype=np.float64)
    return g[:-2, 1:-1] + g[2:, 1:-1] + g[1:-1, :-2] + g[1:-1, 2:] - 4.0 * g[1:-1, 1:-1]


def variance_of_laplacian(gray_patch: np.ndarray) -> float:
    g = np.asarray(gray_patch, dtype=np.float64)
    if g.ndim != 2 or min(g.shape) < 3:
        raise PreprocessError("patch must be at least 3x3")
    return float(laplacian(g).var())


def local_laplacian_variance(gray: np.ndarray, window: int) -> np.ndarray:
    g = np.asarray(gray, dtype=np.float64)
    lap = ndimage.convolve(g, LAPLACIAN_KERNEL, mode="reflect")
    mean = ndimage.uniform_filter(lap, size=window, mode="reflect")
    sq = ndimage.uniform_filter(lap * lap, size=window, mode="reflect")
    return np.maximum(sq - mean * mean, 0.0)


# ---------------------------------------------------------------- morphology

def _square(k: int) -> np.ndarray:
    return np.ones((k, k), dtype=bool)


def binary_open(mask: np.ndarray, kernel: int = 3) -> np.ndarray:
    """Opening on an unbounded false background."""
    st = _square(kernel)
    er = ndimage.binary_erosion(mask, structure=st, border_value=0)
    return ndimage.binary_dilation(er, structure=st, border_value=0)


def binary_close(mask: np.ndarray, kernel: int = 3) -> np.ndarray:
    """Closing on an unbounded false background; padding keeps the erosion from eating the edge."""
    st = _square(kernel)
    r = kernel // 2
    padded = np.pad(np.asarray(mask, dtype=bool), r)
    di = ndimage.binary_dilation(padded, structure=st, border_value=0)
    er = ndimage.binary_erosion(di, structure=st, border_value=1)
    return er[r:er.shape[0] - r, r:er.shape[1] - r]


def open_close(mask: np.ndarray, kernel: int = 3) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if kernel <= 1:
        return mask.copy()
    return binary_close(binary_open(mask, kernel), kernel)


def tissue_mask(rgb_image: np.ndarray, cfg: TissueMaskConfig | None = None) -> np.ndarray:
    """Saturation-Otsu AND hue AND local Laplacian variance, then opening and closing."""
    cfg = cfg or TissueMaskConfig()
    rgb = np.asarray(rgb_image)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise PreprocessError("tissue_mask expects an RGB image")
    hsv = rgb_to_hsv(rgb)
    sat = np.clip(np.rint(hsv[..., 1]), 0, 255).astype(np.int64)
    hist = np.bincount(sat.ravel(), minlength=256)
    try:
        level = otsu_threshold(hist)
    except PreprocessError:
        warnings.warn("degenerate saturation histogram; returning an empty tissue mask", stacklevel=2)
        return np.zeros(rgb.shape[:2], dtype=bool)
    mask = sat > level
    mask &= hsv[..., 0] > cfg.hue_min
    mask &= local_laplacian_variance(to_gray(rgb), cfg.variance_window) > cfg.laplacian_var_min
    return open_close(mask, cfg.morphology_kernel)


# ---------------------------------------------------------------- tiling

@dataclass(frozen=True)
class TileRecord:
    slide_id: str
    x: int
    y: int
    magnification: str
    size: int
    tissue_fraction: float
    malignancy_score: float | None = None

    def __post_init__(self):
        if self.magnification not in MAGNIFICATIONS:
            raise PreprocessError(f"unknown magnification {self.magnification!r}")

    @property
    def mpp(self) -> float:
        return MAGNIFICATIONS[self.magnification]


def grid_offsets(length: int, tile_size: int, stride: int) -> list[int]:
    if stride <= 0:
        raise PreprocessError("stride must be positive")
    if length < tile_size:
        return []
    return list(range(0, length - tile_size + 1, stride))


def tile_grid(slide_dims: tuple[int, int], mask: np.ndarray, magnification: str,
              tile_size: int, stride: int, min_tissue: float = 0.5, slide_id: str = "",
              mask_downsample: int = 1) -> list[TileRecord]:
    """Axis-aligned tiles from the origin, keeping those with enough tissue.

    ``slide_dims`` is (height, width) at the tile level; ``mask`` may be
    stored at ``1 / mask_downsample`` of that resolution.
    """
    h, w = slide_dims
    mask = np.asarray(mask, dtype=bool)
    out = []
    for y in grid_offsets(h, tile_size, stride):
        for x in grid_offsets(w, tile_size, stride):
            y0, x0 = y // mask_downsample, x // mask_downsample
            y1 = max(y0 + 1, -(-(y + tile_size) // mask_downsample))
            x1 = max(x0 + 1, -(-(x + tile_size) // mask_downsample))
            frac = float(mask[y0:y1, x0:x1].mean()) if mask.size else 0.0
            if frac >= min_tissue:
                out.append(TileRecord(slide_id, x, y, magnification, tile_size, frac))
    return out


def extract_tile(image: np.ndarray, rec: TileRecord) -> np.ndarray:
    return np.asarray(image)[rec.y:rec.y + rec.size, rec.x:rec.x + rec.size]


MANIFEST_COLUMNS = ["slide_id", "x", "y", "magnification", "size", "tissue_fraction", "malignancy_score"]


def write_tile_manifest(path: str | Path, tiles: Iterable[TileRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for t in tiles:
            score = "" if t.malignancy_score is None else repr(float(t.malignancy_score))
            w.writerow([t.slide_id, t.x, t.y, t.magnification, t.size, repr(float(t.tissue_fraction)), score])


def read_tile_manifest(path: str | Path) -> list[TileRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            score = row.get("malignancy_score") or ""
            out.append(TileRecord(row["slide_id"], int(row["x"]), int(row["y"]), row["magnification"],
                                  int(row.get("size") or 0), float(row["tissue_fraction"]),
                                  float(score) if score else None))
    return out


def read_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def write_png(path: str | Path, rgb: np.ndarray) -> None:
    Image.fromarray(np.asarray(rgb, dtype=np.uint8)).save(path, format="PNG")


def write_mask_png(path: str | Path, mask: np.ndarray, downsample: int = 1) -> None:
    info = PngImagePlugin.PngInfo()
    info.add_text("downsample", str(int(downsample)))
    Image.fromarray(np.asarray(mask, dtype=bool)).save(path, format="PNG", pnginfo=info)


def read_mask_png(path: str | Path) -> tuple[np.ndarray, int]:
    with Image.open(path) as im:
        ds = int(im.text.get("downsample", "1")) if hasattr(im, "text") else 1
        return np.asarray(im.convert("1"), dtype=bool), ds


# ---------------------------------------------------------------- Macenko

@dataclass(frozen=True)
class StainProfile:
    """Stain basis (3 x 2 optical-density unit columns, H then E) and concentration ceilings."""

    stain_basis: np.ndarray
    max_concentrations: np.ndarray
    od_floor: float = 0.15
    angle_percentile: float = 1.0

    def __post_init__(self):
        b = np.asarray(self.stain_basis, dtype=np.float64)
        c = np.asarray(self.max_concentrations, dtype=np.float64)
        if b.shape != (3, 2) or c.shape != (2,):
            raise PreprocessError("stain basis must be 3x2 and ceilings a 2-vector")
        if not np.allclose(np.linalg.norm(b, axis=0), 1.0, atol=1e-6):
            raise PreprocessError("stain basis columns must be unit vectors")
        if (b < -1e-12).any():
            raise PreprocessError("stain basis entries must be nonnegative")
        if not (c > 0).all():
            raise PreprocessError("max concentrations must be positive")

    def to_dict(self) -> dict:
        return {"stain_basis": np.asarray(self.stain_basis).tolist(),
                "max_concentrations": np.asarray(self.max_concentrations).tolist(),
                "od_floor": self.od_floor, "angle_percentile": self.angle_percentile}

    @classmethod
    def from_dict(cls, d: dict) -> "StainProfile":
        return cls(np.asarray(d["stain_basis"]), np.asarray(d["max_concentrations"]),
                   float(d["od_floor"]), float(d["angle_percentile"]))


def rgb_to_od(rgb: np.ndarray) -> np.ndarray:
    return -np.log10((np.asarray(rgb, dtype=np.float64) + 1.0) / 256.0)


def od_to_rgb(od: np.ndarray) -> np.ndarray:
    rgb = 256.0 * np.power(10.0, -np.asarray(od, dtype=np.float64)) - 1.0
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def _unit_nonneg(v: np.ndarray) -> np.ndarray:
    if v.sum() < 0:
        v = -v
    v = np.clip(v, 0.0, None)
    return v / np.linalg.norm(v)


def _pixels(tiles) -> np.ndarray:
    if isinstance(tiles, np.ndarray) and tiles.ndim == 3:
        tiles = [tiles]
    return np.concatenate([np.asarray(t).reshape(-1, 3) for t in tiles], axis=0)


def macenko_fit(reference_tiles, beta: float = 0.15, alpha: float = 1.0) -> StainProfile:
    """Estimate H/E optical-density directions and 99th-percentile concentrations.

    Percentiles use the inverted empirical CDF, so duplicating the input
    leaves the profile unchanged.
    """
    od = rgb_to_od(_pixels(reference_tiles))
    tissue = od[(od >= beta).all(axis=1)]
    if tissue.shape[0] < 3:
        raise PreprocessError("no stainable pixels")
    cov = np.cov(tissue.T, bias=True)
    _, vecs = np.linalg.eigh(cov)
    plane = vecs[:, [2, 1]]
    if plane[:, 0].sum() < 0:
        plane[:, 0] *= -1
    if plane[:, 1].sum() < 0:
        plane[:, 1] *= -1
    proj = tissue @ plane
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo = np.percentile(phi, alpha, method="inverted_cdf")
    hi = np.percentile(phi, 100.0 - alpha, method="inverted_cdf")
    v1 = _unit_nonneg(plane @ np.array([np.cos(lo), np.sin(lo)]))
    v2 = _unit_nonneg(plane @ np.array([np.cos(hi), np.sin(hi)]))
    # haematoxylin carries the larger blue-channel optical density
    basis = np.column_stack([v1, v2] if v1[2] >= v2[2] else [v2, v1])
    conc = np.linalg.lstsq(basis, od.T, rcond=None)[0]
    maxc = np.percentile(conc, 99, axis=1, method="inverted_cdf")
    if not (maxc > 0).all():
        raise PreprocessError("no stainable pixels")
    return StainProfile(basis, maxc, beta, alpha)


def stain_concentrations(tile: np.ndarray, profile: StainProfile) -> np.ndarray:
    """Least-squares H/E concentrations per pixel, shape (H, W, 2)."""
    tile = np.asarray(tile)
    od = rgb_to_od(tile.reshape(-1, 3))
    basis = np.asarray(profile.stain_basis)
    if np.linalg.matrix_rank(basis) < 2:
        raise PreprocessError("singular stain basis")
    conc = np.linalg.lstsq(basis, od.T, rcond=None)[0].T
    return conc.reshape(tile.shape[:2] + (2,))


def macenko_apply(tile: np.ndarray, source: StainProfile, reference: StainProfile) -> np.ndarray:
    """Re-express a tile's stain concentrations in the reference basis and scale."""
    tile = np.asarray(tile)
    conc = stain_concentrations(tile, source)
    conc = conc * (np.asarray(reference.max_concentrations) / np.asarray(source.max_concentrations))
    od = conc @ np.asarray(reference.stain_basis).T
    return od_to_rgb(od).reshape(tile.shape)


def average_profile(profiles: Sequence[StainProfile]) -> StainProfile:
    """Mean stain directions (renormalized) and mean ceilings of several profiles."""
    basis = np.mean([p.stain_basis for p in profiles], axis=0)
    basis = basis / np.linalg.norm(basis, axis=0)
    maxc = np.mean([p.max_concentrations for p in profiles], axis=0)
    return replace(profiles[0], stain_basis=basis, max_concentrations=maxc)


def angle_between(u: np.ndarray, v: np.ndarray) -> float:
    """Angle in degrees between two vectors."""
    c = float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


__all__ = [
    "MAGNIFICATIONS", "TissueMaskConfig", "TileRecord", "StainProfile", "PreprocessError",
    "rgb_to_hsv", "otsu_threshold", "variance_of_laplacian", "local_laplacian_variance",
    "tissue_mask", "open_close", "tile_grid", "extract_tile", "macenko_fit", "macenko_apply",
    "stain_concentrations", "rgb_to_od", "od_to_rgb", "write_tile_manifest", "read_tile_manifest",
    "write_png", "read_png", "write_mask_png", "read_mask_png", "average_profile",
]
