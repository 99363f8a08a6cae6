"""Per-cluster multi-output training on tiles with slide-level targets.

Every tile of a slide is regressed onto that slide's standardized expression
vector. Tiles are drawn with replacement, weighted by ``log(1 + m)`` for a
slide with ``m`` tiles, then rotated, mirrored and cropped. Slide predictions
are the mean over tile predictions.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from .cluster import ClusterAssignment, random_reassignment
from .expression import apply_standardization, fit_standardization
from .stats import spearman_columns
from .wsi import MAGNIFICATIONS

logger = logging.getLogger(__name__)

MODES = ("corr_clusters", "rnd_clusters", "all_gene", "per_gene")


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 25
    tiles_per_epoch: int = 24000
    batch_size: int = 144
    crop_size: int = 440
    learning_rate: float = 1e-3
    lr_decay: float = 0.95
    loss: str = "mse"
    mode: str = "corr_clusters"

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainingError("epochs must be at least 1")
        if self.mode not in MODES:
            raise TrainingError(f"unknown training mode {self.mode!r}")
        if self.loss != "mse":
            raise TrainingError("only the mean-squared-error loss is supported")
        if self.batch_size < 1 or self.tiles_per_epoch < 1:
            raise TrainingError("batch_size and tiles_per_epoch must be positive")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------- sampling

def tile_sampling_weights(m):
    """Weight ``log(1 + m)`` (natural log) carried by each tile of a slide with ``m`` tiles."""
    m = np.asarray(m, dtype=np.float64)
    if (m < 0).any():
        raise TrainingError("tile counts must be nonnegative")
    w = np.log1p(m)
    return float(w) if w.ndim == 0 else w


def sample_training_epoch(tiles, weights, m_total: int, seed) -> np.ndarray:
    """Draw ``m_total`` tiles with replacement, probability proportional to weight.

    ``tiles`` is a sequence (or a count); the result holds positions into it.
    """
    n = tiles if isinstance(tiles, (int, np.integer)) else len(tiles)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise TrainingError("one weight per tile required")
    total = w.sum()
    if not total > 0:
        raise TrainingError("all sampling weights are zero")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.choice(n, size=m_total, replace=True, p=w / total)


def augment_params(rng: np.random.Generator, tile_size: int, crop_size: int) -> tuple[int, bool, int, int]:
    if tile_size < crop_size:
        raise TrainingError(f"tile of {tile_size}px is smaller than crop {crop_size}px")
    k = int(rng.integers(4))
    flip = bool(rng.random() < 0.5)
    slack = tile_size - crop_size
    oy = int(rng.integers(slack + 1))
    ox = int(rng.integers(slack + 1))
    return k, flip, oy, ox


def apply_augment(tile: np.ndarray, params: tuple[int, bool, int, int], crop_size: int) -> np.ndarray:
    k, flip, oy, ox = params
    out = np.rot90(tile, k)
    if flip:
        out = out[:, ::-1]
    return out[oy:oy + crop_size, ox:ox + crop_size]


def augment_tile(tile: np.ndarray, seed, crop_size: int) -> np.ndarray:
    """Random 90-degree rotation, horizontal mirror (p = 1/2) and crop."""
    tile = np.asarray(tile)
    if min(tile.shape[:2]) < crop_size:
        raise TrainingError("tile smaller than crop size")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return np.ascontiguousarray(apply_augment(tile, augment_params(rng, min(tile.shape[:2]), crop_size), crop_size))


def center_crop(tiles: np.ndarray, crop_size: int) -> np.ndarray:
    h = tiles.shape[-3]
    o = (h - crop_size) // 2
    return tiles[..., o:o + crop_size, o:o + crop_size, :]


# ---------------------------------------------------------------- features and predictor

def tile_features(tiles: np.ndarray) -> np.ndarray:
    """Summary statistics per tile, shape (B, 14).

    Channel means and standard deviations, grey-level deciles, Laplacian
    energy at two scales, and saturation mean, spread and skew.
    """
    t = np.asarray(tiles, dtype=np.float32)
    if t.ndim == 3:
        t = t[None]
    b = t.shape[0]
    ch = np.ascontiguousarray(np.moveaxis(t, -1, 1)).reshape(b, 3, -1)
    mean = ch.mean(axis=2, dtype=np.float64)
    std = ch.std(axis=2, dtype=np.float64)
    r, gr, bl = ch[:, 0], ch[:, 1], ch[:, 2]
    gray = (r * 0.299 + gr * 0.587 + bl * 0.114).reshape(t.shape[:3])
    g = gray.reshape(b, -1)
    npx = g.shape[1]
    ranks = [int(round(f * (npx - 1))) for f in (0.1, 0.5, 0.9)]
    q = np.partition(g, ranks, axis=1)[:, ranks].astype(np.float64)
    lap = (gray[:, :-2, 1:-1] + gray[:, 2:, 1:-1] + gray[:, 1:-1, :-2] + gray[:, 1:-1, 2:]
           - 4.0 * gray[:, 1:-1, 1:-1])
    e1 = np.log1p((lap ** 2).reshape(b, -1).mean(axis=1, dtype=np.float64))
    h2 = gray.shape[1] // 2 * 2
    w2 = gray.shape[2] // 2 * 2
    coarse = gray[:, :h2, :w2].reshape(b, h2 // 2, 2, w2 // 2, 2).mean(axis=(2, 4))
    lap2 = (coarse[:, :-2, 1:-1] + coarse[:, 2:, 1:-1] + coarse[:, 1:-1, :-2] + coarse[:, 1:-1, 2:]
            - 4.0 * coarse[:, 1:-1, 1:-1])
    e2 = np.log1p((lap2 ** 2).reshape(b, -1).mean(axis=1, dtype=np.float64))
    hi = np.maximum(np.maximum(r, gr), bl)
    lo = np.minimum(np.minimum(r, gr), bl)
    # HSV saturation on the 0-255 scale
    sat = np.where(hi > 0, 255.0 * (hi - lo) / np.maximum(hi, 1e-9), 0.0).astype(np.float64)
    smean = sat.mean(axis=1)
    ssd = sat.std(axis=1)
    skew = ((sat - smean[:, None]) ** 3).mean(axis=1) / np.maximum(ssd, 1e-9) ** 3
    return np.column_stack([mean, std, q, e1, e2, smean, ssd, skew])


class Predictor(Protocol):
    """Model trained by the harness; ``features`` come from the harness featurizer."""

    def initialize(self, features: np.ndarray, n_outputs: int, seed: int) -> None: ...

    def step(self, features: np.ndarray, targets: np.ndarray, lr: float) -> float: ...

    def predict(self, features: np.ndarray) -> np.ndarray: ...

    def state(self) -> dict[str, np.ndarray]: ...

    def load_state(self, state: Mapping[str, np.ndarray]) -> None: ...


class ReferenceRegressor:
    """One tanh hidden layer with a linear multi-output head, Adam updates on MSE."""

    def __init__(self, hidden: int = 3, weight_decay: float = 1e-4):
        self.hidden = hidden
        self.weight_decay = weight_decay
        self.params: dict[str, np.ndarray] = {}

    def initialize(self, features, n_outputs, seed):
        rng = np.random.default_rng(seed)
        f = features.shape[1]
        sd = features.std(axis=0)
        self.params = {
            "x_mean": features.mean(axis=0),
            "x_sd": np.where(sd > 0, sd, 1.0),
            "w1": rng.normal(0.0, 1.0 / math.sqrt(f), size=(f, self.hidden)),
            "b1": np.zeros(self.hidden),
            "w2": rng.normal(0.0, 1.0 / math.sqrt(self.hidden), size=(self.hidden, n_outputs)),
            "b2": np.zeros(n_outputs),
        }
        self._m = {k: np.zeros_like(self.params[k]) for k in ("w1", "b1", "w2", "b2")}
        self._v = {k: np.zeros_like(self.params[k]) for k in ("w1", "b1", "w2", "b2")}
        self._t = 0

    def _forward(self, features):
        p = self.params
        x = (features - p["x_mean"]) / p["x_sd"]
        h = np.tanh(x @ p["w1"] + p["b1"])
        return x, h, h @ p["w2"] + p["b2"]

    def step(self, features, targets, lr):
        p = self.params
        x, h, out = self._forward(features)
        err = out - targets
        loss = float((err ** 2).mean())
        g_out = 2.0 * err / err.size
        grads = {
            "w2": h.T @ g_out + self.weight_decay * p["w2"],
            "b2": g_out.sum(axis=0),
        }
        g_h = (g_out @ p["w2"].T) * (1.0 - h * h)
        grads["w1"] = x.T @ g_h + self.weight_decay * p["w1"]
        grads["b1"] = g_h.sum(axis=0)
        self._t += 1
        b1, b2, eps = 0.9, 0.999, 1e-8
        for k, g in grads.items():
            self._m[k] = b1 * self._m[k] + (1 - b1) * g
            self._v[k] = b2 * self._v[k] + (1 - b2) * g * g
            mhat = self._m[k] / (1 - b1 ** self._t)
            vhat = self._v[k] / (1 - b2 ** self._t)
            p[k] = p[k] - lr * mhat / (np.sqrt(vhat) + eps)
        return loss

    def predict(self, features):
        return self._forward(features)[2]

    def state(self):
        return {k: v.copy() for k, v in self.params.items()}

    def load_state(self, state):
        self.params = {k: np.asarray(v, dtype=np.float64).copy() for k, v in state.items()}
        self.hidden = self.params["w1"].shape[1]


PredictorFactory = Callable[[], Predictor]
Featurizer = Callable[[np.ndarray], np.ndarray]


# ---------------------------------------------------------------- tile bank

@dataclass
class TileBank:
    """Tiles of many slides at one magnification, stacked as (N, H, W, 3) uint8."""

    slide_ids: list[str]
    tiles: np.ndarray
    slide_index: np.ndarray  # position in slide_ids for each tile
    magnification: str = "10X"

    @classmethod
    def from_mapping(cls, per_slide: Mapping[str, np.ndarray], magnification: str = "10X") -> "TileBank":
        slide_ids = list(per_slide)
        stacks = [np.asarray(per_slide[s]) for s in slide_ids]
        empty = [s for s, t in zip(slide_ids, stacks) if len(t) == 0]
        if empty:
            raise TrainingError(f"slide {empty[0]} has zero tiles")
        index = np.concatenate([np.full(len(t), i) for i, t in enumerate(stacks)])
        return cls(slide_ids, np.concatenate(stacks, axis=0), index, magnification)

    @property
    def tile_size(self) -> int:
        return self.tiles.shape[1]

    def tiles_of(self, slide_id: str) -> np.ndarray:
        return self.tiles[self.slide_index == self.slide_ids.index(slide_id)]

    def select(self, slide_ids: Sequence[str]) -> np.ndarray:
        """Positions of all tiles belonging to ``slide_ids``."""
        want = np.array([self.slide_ids.index(s) for s in slide_ids])
        return np.flatnonzero(np.isin(self.slide_index, want))


# ---------------------------------------------------------------- training

def groups_for_mode(mode: str, assignment: ClusterAssignment, seed: int = 0) -> list[list[str]]:
    """Transcript groups trained as one multi-output model each."""
    if mode == "corr_clusters":
        return assignment.groups()
    if mode == "rnd_clusters":
        return random_reassignment(assignment, seed).groups()
    if mode == "all_gene":
        return [list(assignment.transcript_ids)]
    if mode == "per_gene":
        return [[t] for t in assignment.transcript_ids]
    raise TrainingError(f"unknown mode {mode!r}")


def _featurize_in_chunks(featurizer: Featurizer, tiles: np.ndarray, chunk: int = 512) -> np.ndarray:
    return np.concatenate([featurizer(tiles[i:i + chunk]) for i in range(0, len(tiles), chunk)], axis=0)


def train_cluster_models(groups: Sequence[Sequence[int]], bank: TileBank, train_slides: Sequence[str],
                         slide_targets: np.ndarray, config: TrainingConfig,
                         predictor_factory: PredictorFactory | None = None,
                         featurizer: Featurizer = tile_features, seed: int = 0,
                         ) -> list[Predictor]:
    """Fit one predictor per group of target columns on a shared tile stream.

    ``slide_targets`` rows follow ``train_slides`` and hold standardized
    expression. All models see the same sampled, augmented batches; each
    keeps its own parameters and output subset.
    """
    predictor_factory = predictor_factory or ReferenceRegressor
    if not groups:
        raise TrainingError("no groups to train")
    for g in groups:
        if len(g) == 0:
            raise TrainingError("empty cluster")
    slide_targets = np.asarray(slide_targets, dtype=np.float64)
    if slide_targets.shape[0] != len(train_slides):
        raise TrainingError("one target row per training slide required")
    crop = config.crop_size
    if bank.tile_size < crop:
        raise TrainingError(f"crop {crop} exceeds tile size {bank.tile_size}")

    pos = bank.select(train_slides)
    local = {bank.slide_ids.index(s): i for i, s in enumerate(train_slides)}
    tile_slide = np.array([local[k] for k in bank.slide_index[pos]])
    counts = np.bincount(tile_slide, minlength=len(train_slides))
    if (counts == 0).any():
        raise TrainingError(f"slide {train_slides[int(np.argmin(counts))]} has zero tiles")
    weights = tile_sampling_weights(counts[tile_slide])

    ss = np.random.SeedSequence(seed)
    init_seed, *epoch_seeds = ss.spawn(config.epochs + 1)
    base_features = _featurize_in_chunks(featurizer, center_crop(bank.tiles[pos], crop))
    models: list[Predictor] = []
    for gi, g in enumerate(groups):
        m = predictor_factory()
        m.initialize(base_features, len(g), int(init_seed.generate_state(1)[0]) + gi)
        models.append(m)
    cols = [np.asarray(g, dtype=int) for g in groups]

    for epoch in range(config.epochs):
        rng = np.random.default_rng(epoch_seeds[epoch])
        lr = config.learning_rate * config.lr_decay ** epoch
        draws = sample_training_epoch(len(pos), weights, config.tiles_per_epoch, rng)
        losses = np.zeros(len(models))
        for start in range(0, len(draws), config.batch_size):
            batch = draws[start:start + config.batch_size]
            views = np.stack([apply_augment(bank.tiles[pos[i]], augment_params(rng, bank.tile_size, crop), crop)
                              for i in batch])
            x = featurizer(views)
            y = slide_targets[tile_slide[batch]]
            for j, m in enumerate(models):
                losses[j] += m.step(x, y[:, cols[j]], lr) * len(batch)
        logger.debug("epoch %d lr %.2e mean loss %.4f", epoch, lr, losses.mean() / len(draws))
    return models


def train_cluster_model(cluster: Sequence[int], bank: TileBank, train_slides: Sequence[str],
                        slide_targets: np.ndarray, config: TrainingConfig,
                        predictor_factory: PredictorFactory | None = None,
                        featurizer: Featurizer = tile_features, seed: int = 0) -> Predictor:
    return train_cluster_models([cluster], bank, train_slides, slide_targets, config,
                                predictor_factory, featurizer, seed)[0]


def predict_tiles(models: Sequence[Predictor], tiles: np.ndarray, crop_size: int,
                  featurizer: Featurizer = tile_features) -> list[np.ndarray]:
    """Per-model tile predictions on centre crops."""
    x = _featurize_in_chunks(featurizer, center_crop(np.asarray(tiles), crop_size))
    return [m.predict(x) for m in models]


@dataclass(frozen=True)
class SlidePrediction:
    slide_id: str
    transcript_ids: tuple[str, ...]
    values: np.ndarray
    magnification: str


def predict_slide(tile_predictions: np.ndarray) -> np.ndarray:
    """Unweighted mean of per-tile prediction vectors."""
    p = np.asarray(tile_predictions, dtype=np.float64)
    if p.ndim == 1:
        p = p[None]
    if p.shape[0] == 0:
        raise TrainingError("cannot predict a slide with zero tiles")
    return p.mean(axis=0)


def slide_means(tile_pred: np.ndarray, tile_slide: np.ndarray, n_slides: int) -> np.ndarray:
    out = np.zeros((n_slides, tile_pred.shape[1]))
    for s in range(n_slides):
        out[s] = predict_slide(tile_pred[tile_slide == s])
    return out


# resolutions ordered coarsest first for tie-breaking
_COARSE_FIRST = sorted(MAGNIFICATIONS, key=lambda m: -MAGNIFICATIONS[m])


def select_resolution(rho_by_resolution: Mapping[str, Sequence[float]],
                      required: Sequence[str] = ("40X", "20X", "10X")) -> list[str]:
    """Per transcript, the resolution with the highest inner-validation rho; ties go to the coarsest."""
    missing = [r for r in required if r not in rho_by_resolution]
    if missing:
        raise TrainingError(f"missing resolution(s) {missing}")
    order = [r for r in _COARSE_FIRST if r in rho_by_resolution]
    mat = np.array([np.asarray(rho_by_resolution[r], dtype=np.float64) for r in order])
    mat = np.where(np.isnan(mat), -np.inf, mat)
    return [order[i] for i in np.argmax(mat, axis=0)]


# ---------------------------------------------------------------- cross-validation

@dataclass
class CVResult:
    """Held-out slide predictions concatenated over validation folds."""

    patients: list[str]
    transcript_ids: list[str]
    predictions: np.ndarray
    models: dict[int, list[Predictor]] = field(default_factory=dict)


def fold_targets(values: np.ndarray, patients: Sequence[str], train: Sequence[str],
                 transcript_ids: Sequence[str]) -> np.ndarray:
    """Training targets standardized with statistics of the training patients only."""
    pos = {p: i for i, p in enumerate(patients)}
    rows = [pos[p] for p in train]
    stats = fit_standardization(values[rows], transcript_ids)
    return apply_standardization(values[rows], stats)


def cross_validate(bank: TileBank, values: np.ndarray, patients: Sequence[str],
                   transcript_ids: Sequence[str], folds: Sequence[Sequence[str]],
                   groups_by_mode: Mapping[str, Sequence[Sequence[str]]], config: TrainingConfig,
                   predictor_factory: PredictorFactory | None = None,
                   featurizer: Featurizer = tile_features, seed: int = 0,
                   keep_models: bool = False) -> dict[str, CVResult]:
    """Train on all-but-one fold, predict the held-out fold, for every mode at once.

    Slides are named by patient id. ``values`` is patients x transcripts on the
    log scale; targets are standardized per training split.
    """
    transcript_ids = list(transcript_ids)
    tpos = {t: j for j, t in enumerate(transcript_ids)}
    flat_groups, owner = [], []
    for mode, groups in groups_by_mode.items():
        for g in groups:
            flat_groups.append([tpos[t] for t in g])
            owner.append(mode)
    held = [p for f in folds for p in f]
    out = {m: CVResult(held, transcript_ids, np.full((len(held), len(transcript_ids)), np.nan))
           for m in groups_by_mode}
    row = {p: i for i, p in enumerate(held)}
    fold_seeds = np.random.SeedSequence(seed).spawn(len(folds))
    for f, val in enumerate(folds):
        train = [p for g, fold in enumerate(folds) if g != f for p in fold]
        targets = fold_targets(values, patients, train, transcript_ids)
        models = train_cluster_models(flat_groups, bank, train, targets, config, predictor_factory,
                                      featurizer, int(fold_seeds[f].generate_state(1)[0]))
        vpos = bank.select(val)
        vlocal = {bank.slide_ids.index(s): i for i, s in enumerate(val)}
        vslide = np.array([vlocal[k] for k in bank.slide_index[vpos]])
        preds = predict_tiles(models, bank.tiles[vpos], config.crop_size, featurizer)
        for m, g, p in zip(owner, flat_groups, preds):
            block = slide_means(p, vslide, len(val))
            for i, v in enumerate(val):
                out[m].predictions[row[v], g] = block[i]
        if keep_models:
            for m in groups_by_mode:
                out[m].models[f] = [mdl for mdl, o in zip(models, owner) if o == m]
        logger.info("fold %d/%d done", f + 1, len(folds))
    return out


def heldout_rho(result: CVResult, values: np.ndarray, patients: Sequence[str]) -> np.ndarray:
    pos = {p: i for i, p in enumerate(patients)}
    truth = values[[pos[p] for p in result.patients]]
    return spearman_columns(result.predictions, truth)


# ---------------------------------------------------------------- persistence

MODEL_MAGIC = b"HXMODEL\x00"
MODEL_FORMAT_VERSION = 1


def save_models(path: str | Path, states: Sequence[Mapping[str, np.ndarray]], meta: Mapping) -> None:
    """Versioned binary blob: magic, version, JSON header with config digest, raw float64 arrays."""
    arrays, index = [], []
    for i, st in enumerate(states):
        for k in sorted(st):
            a = np.ascontiguousarray(st[k], dtype="<f8")
            index.append({"model": i, "name": k, "shape": list(a.shape)})
            arrays.append(a.tobytes())
    header = json.dumps({"meta": dict(meta), "arrays": index, "n_models": len(states)},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<II", MODEL_FORMAT_VERSION, len(header)))
        fh.write(header)
        for b in arrays:
            fh.write(b)


def load_models(path: str | Path, expect_digest: str | None = None) -> tuple[list[dict[str, np.ndarray]], dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(MODEL_MAGIC):
        raise TrainingError(f"{path}: not a model file")
    version, hlen = struct.unpack_from("<II", data, len(MODEL_MAGIC))
    if version != MODEL_FORMAT_VERSION:
        raise TrainingError(f"{path}: unsupported model format version {version}")
    off = len(MODEL_MAGIC) + 8
    header = json.loads(data[off:off + hlen])
    meta = header["meta"]
    if expect_digest is not None and meta.get("config_digest") != expect_digest:
        raise TrainingError(f"{path}: config digest mismatch")
    buf = io.BytesIO(data[off + hlen:])
    states: list[dict[str, np.ndarray]] = [dict() for _ in range(header["n_models"])]
    for entry in header["arrays"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        a = np.frombuffer(buf.read(8 * n), dtype="<f8").reshape(entry["shape"])
        states[entry["model"]][entry["name"]] = a.copy()
    return states, meta


def write_predictions(path: str | Path, predictions: Sequence[SlidePrediction]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["slide_id", "transcript_id", "value", "magnification"])
        for sp in predictions:
            mags = sp.magnification if isinstance(sp.magnification, (list, tuple)) else [sp.magnification] * len(sp.transcript_ids)
            for t, v, m in zip(sp.transcript_ids, sp.values, mags):
                w.writerow([sp.slide_id, t, repr(float(v)), m])


def read_predictions(path: str | Path) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh, delimiter="\t"):
            out.setdefault(r["slide_id"], {})[r["transcript_id"]] = float(r["value"])
    return out
