"""Block-structured synthetic cohorts with a known image-to-expression signal.

Encoding map (per tile, before per-tile jitter):

* latent factor 0 -> nuclear density (haematoxylin blobs)
* latent factor 1 -> texture coarseness of the eosin field
* latent factor 2 -> fraction of pale lumen area

With more than three blocks, the three image channels are driven by a fixed
random unit-norm mixture of all block factors. Noise transcripts do not
enter the images. Expression of block ``b`` is ``sign * (sqrt(r) z_b +
sqrt(1 - r) eps)`` on the log2 scale, so the pairwise correlation inside a
block is ``r``.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .expression import ExpressionDataset, PatientRecord, write_clinical, write_matrix
from .wsi import MAGNIFICATIONS, write_png

logger = logging.getLogger(__name__)

H_VECTOR = np.array([0.55, 0.75, 0.37]) / np.linalg.norm([0.55, 0.75, 0.37])
E_VECTOR = np.array([0.07, 0.99, 0.11]) / np.linalg.norm([0.07, 0.99, 0.11])

# nucleus radius in pixels and signal attenuation per magnification
_MAG_RENDER = {"10X": (1.6, 1.0), "20X": (2.4, 0.85), "40X": (3.4, 0.7)}


class SyntheticError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    n_patients: int = 150
    n_blocks: int = 3
    block_size: int = 20
    intra_block_rho: float = 0.8
    n_noise: int = 60
    n_low_expressed: int = 0
    n_noncoding: int = 0
    tiles_per_slide: int = 30
    tile_size: int = 64
    magnifications: tuple[str, ...] = ("10X",)
    image_signal: float = 1.0
    tile_jitter: float = 0.6
    bcr_log_hazard: float = 0.8
    signature_block: int = 0
    missing_age_fraction: float = 0.0
    n_random_gene_sets: int = 5

    def __post_init__(self):
        if not 0 < self.intra_block_rho < 1:
            raise SyntheticError("infeasible intra-block correlation target (need 0 < rho < 1)")
        if self.n_patients < 10:
            raise SyntheticError("need at least 10 patients")
        for m in self.magnifications:
            if m not in MAGNIFICATIONS:
                raise SyntheticError(f"unknown magnification {m}")
        if self.n_blocks < 1 or self.block_size < 1:
            raise SyntheticError("need at least one block with one gene")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        if "magnifications" in d:
            mags = d["magnifications"]
            d["magnifications"] = tuple(mags.split(",") if isinstance(mags, str) else mags)
        kw = {}
        for k, f in cls.__dataclass_fields__.items():
            if k in d:
                typ = f.type
                v = d[k]
                if typ == "int":
                    v = int(v)
                elif typ == "float":
                    v = float(v)
                kw[k] = v
        return cls(**kw)


@dataclass
class SyntheticData:
    spec: SyntheticSpec
    dataset: ExpressionDataset
    fpkm_uq: np.ndarray
    annotation: dict[str, bool]
    latent: np.ndarray
    block_of: dict[str, int]
    tiles: dict[str, dict[str, np.ndarray]]
    gene_sets: dict[str, list[str]]
    signature: list[str]
    all_transcripts: list[str] = field(default_factory=list)
    all_counts: np.ndarray | None = None
    all_fpkm: np.ndarray | None = None


def _image_drive(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.n_blocks <= 3:
        a = np.zeros((3, spec.n_blocks))
        a[np.arange(spec.n_blocks), np.arange(spec.n_blocks)] = 1.0
        return a
    a = rng.normal(size=(3, spec.n_blocks))
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def _unit_field(rng, size, sigma):
    f = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma, mode="wrap")
    return (f - f.mean()) / (f.std() + 1e-12)


def render_tile(enc: np.ndarray, size: int, magnification: str, rng: np.random.Generator,
                stain_scale: float = 1.0) -> np.ndarray:
    """Render one H&E-like tile from its three image encodings."""
    radius, _ = _MAG_RENDER[magnification]
    density = 0.04 + 0.30 / (1.0 + math.exp(-1.2 * enc[0]))
    n_nuc = rng.poisson(density * size * size / (math.pi * radius * radius))
    nuc = np.zeros((size, size))
    ys = rng.integers(0, size, n_nuc)
    xs = rng.integers(0, size, n_nuc)
    np.add.at(nuc, (ys, xs), 1.0)
    nuc = ndimage.gaussian_filter(nuc, radius / 1.5, mode="wrap") * (2 * math.pi * (radius / 1.5) ** 2)
    c_h = 0.15 + 0.9 * np.clip(nuc, 0.0, 1.2)

    coarse = 0.5 * math.exp(0.55 * enc[1])
    c_e = 0.55 + 0.22 * _unit_field(rng, size, coarse)

    lumen_frac = 0.02 + 0.30 / (1.0 + math.exp(-1.2 * enc[2]))
    field_ = _unit_field(rng, size, 4.0)
    lumen = field_ > np.quantile(field_, 1.0 - lumen_frac)
    pale = np.where(lumen, 0.12, 1.0)

    conc = np.stack([np.clip(c_h * pale, 0, None), np.clip(c_e * pale, 0, None)], axis=-1) * stain_scale
    od = conc @ np.stack([H_VECTOR, E_VECTOR])
    od = od + rng.normal(0.0, 0.01, size=od.shape)
    rgb = 256.0 * np.power(10.0, -od) - 1.0
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def generate_synthetic(spec: SyntheticSpec | None = None, seed: int = 0, render: bool = True) -> SyntheticData:
    spec = spec or SyntheticSpec()
    ss = np.random.SeedSequence(seed)
    r_expr, r_img, r_clin, r_sets = (np.random.default_rng(s) for s in ss.spawn(4))
    n = spec.n_patients
    z = r_expr.normal(size=(n, spec.n_blocks))
    r = spec.intra_block_rho

    ids, cols, block_of = [], [], {}
    for b in range(spec.n_blocks):
        for g in range(spec.block_size):
            sign = 1.0 if b == spec.signature_block else (1.0 if r_expr.random() < 0.5 else -1.0)
            x = sign * (math.sqrt(r) * z[:, b] + math.sqrt(1 - r) * r_expr.normal(size=n))
            tid = f"B{b}_G{g:02d}"
            ids.append(tid)
            cols.append(x)
            block_of[tid] = b
    for g in range(spec.n_noise):
        ids.append(f"N{g:03d}")
        cols.append(r_expr.normal(size=n))
    x = np.column_stack(cols)
    base = r_expr.uniform(4.0, 8.0, size=x.shape[1])
    scale = r_expr.uniform(0.6, 1.2, size=x.shape[1])
    log_level = base + scale * x

    extra_ids, extra_levels, coding = [], [], {t: True for t in ids}
    for g in range(spec.n_low_expressed):
        extra_ids.append(f"LOW{g:02d}")
        extra_levels.append(r_expr.uniform(0.0, 0.2, size=n))
    for g in range(spec.n_noncoding):
        extra_ids.append(f"NC{g:02d}")
        extra_levels.append(5.0 + r_expr.normal(size=n))
    for t in extra_ids:
        coding[t] = not t.startswith("NC")
    all_ids = ids + extra_ids
    all_levels = np.column_stack([log_level, *extra_levels]) if extra_levels else log_level
    fpkm = np.power(2.0, all_levels) - 1.0
    counts = r_expr.poisson(np.power(2.0, all_levels - 1.0) * np.where(
        np.array([t.startswith("LOW") for t in all_ids]), 0.02, 1.0))

    patients = _clinical(spec, z, r_clin)
    keep = [j for j, t in enumerate(all_ids) if coding[t]]
    ds = ExpressionDataset(
        patients=tuple(patients),
        transcript_ids=tuple(all_ids[j] for j in keep),
        counts=counts[:, keep],
        normalized=np.log2(fpkm[:, keep] + 1.0),
        protein_coding=np.ones(len(keep), dtype=bool),
    )

    tiles: dict[str, dict[str, np.ndarray]] = {}
    if render:
        drive = _image_drive(spec, r_img) @ z.T  # 3 x n
        for mag in spec.magnifications:
            _, atten = _MAG_RENDER[mag]
            mrng = np.random.default_rng(np.random.SeedSequence([seed, list(MAGNIFICATIONS).index(mag), 7]))
            per = {}
            for i, p in enumerate(patients):
                stain = mrng.uniform(0.85, 1.15)
                stack = []
                for _ in range(spec.tiles_per_slide):
                    enc = spec.image_signal * atten * drive[:, i] + spec.tile_jitter * mrng.normal(size=3)
                    stack.append(render_tile(enc, spec.tile_size, mag, mrng, stain))
                per[p.patient_id] = np.stack(stack)
            tiles[mag] = per

    gene_sets = {}
    for b in range(spec.n_blocks):
        members = [t for t in ids if block_of.get(t) == b]
        gene_sets[f"BLOCK{b}"] = members[: max(1, len(members) // 2)]
    for k in range(spec.n_random_gene_sets):
        size = min(10, len(ids) - 1)
        gene_sets[f"RANDOM{k}"] = sorted(r_sets.choice(ids, size=size, replace=False).tolist())
    signature = [t for t in ids if block_of.get(t) == spec.signature_block]
    return SyntheticData(spec, ds, fpkm[:, keep], coding, z, block_of, tiles, gene_sets, signature,
                         all_transcripts=all_ids, all_counts=counts, all_fpkm=fpkm)


def _clinical(spec: SyntheticSpec, z: np.ndarray, rng: np.random.Generator) -> list[PatientRecord]:
    n = spec.n_patients
    drive = z[:, spec.signature_block] if spec.signature_block < spec.n_blocks else np.zeros(n)
    risk = drive + rng.normal(0, 1.0, n)
    cuts = np.quantile(risk, [0.2, 0.5, 0.7, 0.85])
    isup = 1 + np.searchsorted(cuts, risk, side="right")
    hazard = 4e-4 * np.exp(spec.bcr_log_hazard * drive)
    t_event = rng.exponential(1.0 / hazard)
    t_cens = rng.uniform(500.0, 4000.0, n)
    event = t_event <= t_cens
    time = np.round(np.minimum(t_event, t_cens), 1)
    age = np.round(rng.normal(61.0, 7.0, n), 1)
    missing = rng.random(n) < spec.missing_age_fraction
    psa = np.round(np.exp(rng.normal(2.0, 0.6, n)), 2)
    return [PatientRecord(f"P{i:03d}", int(isup[i]), bool(event[i]), float(time[i]),
                          None if missing[i] else float(age[i]), float(psa[i]))
            for i in range(n)]


def slide_raster(tiles: np.ndarray) -> np.ndarray:
    """Lay tiles on a white canvas with a one-tile margin, row-major."""
    t, s = tiles.shape[0], tiles.shape[1]
    cols = int(math.ceil(math.sqrt(t)))
    rows = int(math.ceil(t / cols))
    canvas = np.full(((rows + 2) * s, (cols + 2) * s, 3), 255, dtype=np.uint8)
    for i in range(t):
        r, c = divmod(i, cols)
        canvas[(r + 1) * s:(r + 2) * s, (c + 1) * s:(c + 2) * s] = tiles[i]
    return canvas


def write_synthetic(data: SyntheticData, outdir: str | Path) -> dict[str, str]:
    """Write the cohort as the on-disk tables, GMT, signature list and slide PNGs."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    ds = data.dataset
    pids = ds.patient_ids
    all_ids = data.all_transcripts or list(ds.transcript_ids)
    counts = data.all_counts if data.all_counts is not None else ds.counts
    fpkm_all = data.all_fpkm if data.all_fpkm is not None else data.fpkm_uq
    write_matrix(out / "counts.tsv", pids, all_ids, counts)
    write_matrix(out / "fpkm_uq.tsv", pids, all_ids, fpkm_all)
    write_clinical(out / "clinical.tsv", ds.patients)
    with open(out / "annotation.tsv", "w") as fh:
        fh.write("transcript_id\tprotein_coding\n")
        for t in all_ids:
            fh.write(f"{t}\t{'true' if data.annotation[t] else 'false'}\n")
    with open(out / "gene_sets.gmt", "w") as fh:
        for name, members in data.gene_sets.items():
            fh.write("\t".join([name, "synthetic", *members]) + "\n")
    with open(out / "signature.txt", "w") as fh:
        fh.write("\n".join(data.signature) + "\n")
    with open(out / "truth.json", "w") as fh:
        json.dump({"spec": asdict(data.spec), "block_of": data.block_of}, fh, sort_keys=True, indent=1)
    paths = {"counts": "counts.tsv", "normalized": "fpkm_uq.tsv", "clinical": "clinical.tsv",
             "annotation": "annotation.tsv", "gene_sets": "gene_sets.gmt", "signature": "signature.txt"}
    for mag, per in data.tiles.items():
        d = out / "slides" / mag
        d.mkdir(parents=True, exist_ok=True)
        for pid, stack in per.items():
            write_png(d / f"{pid}.png", slide_raster(stack))
    paths["slides"] = "slides"
    return paths

