"""Stage orchestration with a content-addressed run manifest.

Every stage writes under ``<work_dir>/<stage>/`` and may only read artifacts of
the stages it declares in ``DEPENDS``. The manifest records the sha256 of
every input and output so a rerun or a hand-edited artifact is detected.
Wall-clock timestamps go to ``run.log``; the manifest itself stays
byte-identical across identical runs.
"""
from __future__ import annotations

import csv
import functools
import hashlib
import json
import logging
import math
import shutil
import time
from dataclasses import replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import downstream as dsa
from .cluster import (ClusterAssignment, cluster_correlation_stats, correlation_distance,
                      cut_dendrogram, read_assignment, spearman_matrix, ward_linkage,
                      write_assignment, write_dendrogram)
from .config import STAGES, PipelineConfig
from .expression import (drop_constant_transcripts, filter_transcripts, load_expression,
                         log2_transform, read_clinical, write_clinical, write_matrix)
from .roi import (SaturationStubClassifier, binarize_and_clean, decide_roi, read_roi_report,
                  score_grid, write_roi_report)
from .stats import (aggregate_test_predictions, bh_adjust, bootstrap_ci, evaluate_transcripts,
                    make_cv_plan, make_dev_test_split, read_fold_plan, read_ledger,
                    spearman_columns, spearman_pvalue, spearman_rho, write_fold_plan,
                    write_ledger)
from .synthetic import generate_synthetic, write_synthetic
from .train import (ReferenceRegressor, SlidePrediction, TileBank, cross_validate,
                    groups_for_mode, load_models, predict_tiles, read_predictions, save_models,
                    select_resolution, write_predictions)
from .wsi import (MAGNIFICATIONS, PreprocessError, StainProfile, TileRecord, extract_tile,
                  macenko_apply, macenko_fit, read_png, read_tile_manifest, tile_grid,
                  tissue_mask, write_tile_manifest)

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
RUN_LOG_NAME = "run.log"
MANIFEST_FORMAT = 1

DEPENDS: dict[str, tuple[str, ...]] = {
    "ingest": (),
    "filter": ("ingest",),
    "cluster": ("ingest", "filter"),
    "split": ("ingest",),
    "preprocess": ("ingest", "split"),
    "roi": ("preprocess",),
    "train": ("ingest", "filter", "cluster", "split", "preprocess", "roi"),
    "predict": ("ingest", "filter", "split", "preprocess", "roi", "train"),
    "evaluate": ("ingest", "filter", "train", "predict"),
    "ccp": ("ingest", "filter", "predict", "evaluate"),
    "cox": ("ingest", "ccp"),
    "gsea": ("ingest", "evaluate"),
    "report": ("cluster", "evaluate", "ccp", "cox", "gsea"),
}


class PipelineError(RuntimeError):
    pass


class MissingArtifactError(PipelineError):
    pass


class DigestMismatchError(PipelineError):
    pass


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def downstream_of(stage: str) -> list[str]:
    out: list[str] = []
    frontier = {stage}
    for s in STAGES:
        if any(d in frontier for d in DEPENDS[s]):
            frontier.add(s)
            out.append(s)
    return out


class Run:
    """One work directory: manifest bookkeeping and guarded artifact access."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.root = Path(cfg.work_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.root / MANIFEST_NAME
        self.manifest = self._load_manifest()
        self.current: str | None = None
        self._inputs: dict[str, str] = {}
        self._outputs: list[Path] = []

    def _load_manifest(self) -> dict:
        digest = self.cfg.digest()
        if not self.manifest_path.exists():
            return {"format": MANIFEST_FORMAT, "config_digest": digest, "stages": {}}
        with open(self.manifest_path) as fh:
            m = json.load(fh)
        if m.get("config_digest") != digest:
            raise DigestMismatchError(
                f"config digest {digest[:12]} differs from the manifest's "
                f"{str(m.get('config_digest'))[:12]} in {self.root}; use a fresh work_dir or --reset")
        return m

    def _write_manifest(self) -> None:
        tmp = self.manifest_path.with_suffix(".tmp")
        with open(tmp, "w") as fh:
            json.dump(self.manifest, fh, sort_keys=True, indent=1)
            fh.write("\n")
        tmp.replace(self.manifest_path)

    def _log(self, stage: str, status: str, seconds: float) -> None:
        stamp = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        with open(self.root / RUN_LOG_NAME, "a") as fh:
            fh.write(f"{stamp}\t{stage}\t{status}\t{seconds:.2f}s\n")

    def status(self, stage: str) -> str:
        return self.manifest["stages"].get(stage, {}).get("status", "pending")

    # artifact access -------------------------------------------------------

    def input(self, stage: str, rel: str) -> Path:
        if self.current is None or stage not in DEPENDS[self.current]:
            raise PipelineError(f"stage {self.current} reads undeclared input {stage}/{rel}")
        key = f"{stage}/{rel}"
        rec = self.manifest["stages"].get(stage, {})
        if rec.get("status") != "complete":
            raise MissingArtifactError(f"{self.current} needs stage {stage} to complete first")
        if key not in rec.get("outputs", {}):
            raise MissingArtifactError(f"artifact {key} missing from the manifest")
        path = self.root / key
        if not path.exists():
            raise MissingArtifactError(f"artifact {key} missing on disk")
        digest = sha256_file(path)
        if digest != rec["outputs"][key]:
            raise MissingArtifactError(f"artifact {key} changed since stage {stage} wrote it")
        self._inputs[key] = digest
        return path

    def inputs_under(self, stage: str, prefix: str) -> list[Path]:
        rec = self.manifest["stages"].get(stage, {})
        keys = sorted(k for k in rec.get("outputs", {}) if k.startswith(f"{stage}/{prefix}"))
        return [self.input(stage, k[len(stage) + 1:]) for k in keys]

    def output(self, rel: str) -> Path:
        path = self.root / self.current / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        self._outputs.append(path)
        return path

    # execution ---------------------------------------------------------------

    def run_stage(self, stage: str) -> None:
        if stage not in STAGES:
            raise PipelineError(f"unknown stage {stage!r}")
        for dep in DEPENDS[stage]:
            if self.status(dep) != "complete":
                raise MissingArtifactError(f"stage {stage} needs {dep} to complete first")
        for later in [stage, *downstream_of(stage)]:
            self.manifest["stages"].pop(later, None)
        stage_dir = self.root / stage
        if stage_dir.exists():
            shutil.rmtree(stage_dir)
        self.current, self._inputs, self._outputs = stage, {}, []
        t0 = time.perf_counter()
        try:
            STAGE_FUNCS[stage](self)
        except Exception:
            self.manifest["stages"][stage] = {"status": "failed"}
            self._write_manifest()
            self._log(stage, "failed", time.perf_counter() - t0)
            self.current = None
            raise
        outputs = {}
        for p in sorted(set(self._outputs)):
            if not p.exists():
                raise PipelineError(f"stage {stage} declared {p} but did not write it")
            outputs[p.relative_to(self.root).as_posix()] = sha256_file(p)
        self.manifest["stages"][stage] = {"status": "complete", "inputs": dict(sorted(self._inputs.items())),
                                          "outputs": outputs}
        self._write_manifest()
        self._log(stage, "complete", time.perf_counter() - t0)
        logger.info("stage %s complete (%d artifacts)", stage, len(outputs))
        self.current = None

    def run_all(self) -> None:
        for stage in STAGES:
            self.run_stage(stage)

    def audit(self) -> list[str]:
        """Problems found by re-hashing every recorded artifact."""
        problems = []
        for stage, rec in sorted(self.manifest["stages"].items()):
            for key, digest in sorted(rec.get("outputs", {}).items()):
                p = self.root / key
                if not p.exists():
                    problems.append(f"{key}: missing")
                elif sha256_file(p) != digest:
                    problems.append(f"{key}: modified")
            for key in rec.get("inputs", {}):
                if key.split("/", 1)[0] not in DEPENDS[stage]:
                    problems.append(f"{stage} read undeclared {key}")
        return problems


def reset_work_dir(work_dir: Path) -> None:
    work_dir = Path(work_dir)
    for stage in STAGES:
        if (work_dir / stage).exists():
            shutil.rmtree(work_dir / stage)
    for name in (MANIFEST_NAME, RUN_LOG_NAME):
        if (work_dir / name).exists():
            (work_dir / name).unlink()


# ---------------------------------------------------------------- helpers

def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _read_json(path: Path):
    with open(path) as fh:
        return json.load(fh)


def _write_lines(path: Path, lines: Sequence[str]) -> None:
    with open(path, "w") as fh:
        for line in lines:
            fh.write(f"{line}\n")


def _read_lines(path: Path) -> list[str]:
    with open(path) as fh:
        return [ln.strip() for ln in fh if ln.strip()]


def _external(run: Run, key: str, synthetic_name: str) -> Path | None:
    """A raw input: the generated copy under ingest/inputs or the configured path."""
    if run.cfg.synthetic is not None:
        return run.input("ingest", f"inputs/{synthetic_name}") if run.current != "ingest" \
            else run.root / "ingest" / "inputs" / synthetic_name
    return getattr(run.cfg, key)


def _dataset(run: Run, stage: str):
    return load_expression(run.input(stage, "counts.tsv"), run.input(stage, "expression.tsv"),
                           run.input("ingest", "clinical.tsv"))


def _matrix_tsv(path: Path, row_ids: Sequence[str], col_ids: Sequence[str], values: np.ndarray,
                corner: str = "id") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow([corner, *col_ids])
        for r, row in zip(row_ids, values):
            w.writerow([r, *[repr(float(v)) for v in row]])


def _read_matrix_tsv(path: Path) -> tuple[list[str], list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    cols = rows[0][1:]
    ids = [r[0] for r in rows[1:]]
    vals = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64).reshape(len(ids), len(cols))
    return ids, cols, vals


def _predictor_factory(cfg: PipelineConfig) -> Callable[[], ReferenceRegressor]:
    return functools.partial(ReferenceRegressor, hidden=cfg.hidden, weight_decay=cfg.weight_decay)


# ---------------------------------------------------------------- stages

def stage_ingest(run: Run) -> None:
    cfg = run.cfg
    if cfg.synthetic is not None:
        data = generate_synthetic(cfg.synthetic, seed=cfg.seeds.synthetic)
        inputs = run.root / "ingest" / "inputs"
        write_synthetic(data, inputs)
        for p in sorted(inputs.rglob("*")):
            if p.is_file():
                run.output(p.relative_to(run.root / "ingest").as_posix())
    ds = load_expression(_external(run, "counts", "counts.tsv"),
                         _external(run, "normalized", "fpkm_uq.tsv"),
                         _external(run, "clinical", "clinical.tsv"),
                         _external(run, "annotation", "annotation.tsv"))
    if (ds.normalized < 0).any():
        raise PipelineError("normalized expression must be nonnegative before the log transform")
    write_matrix(run.output("counts.tsv"), ds.patient_ids, ds.transcript_ids, ds.counts)
    write_matrix(run.output("expression.tsv"), ds.patient_ids, ds.transcript_ids,
                 log2_transform(ds.normalized))
    write_clinical(run.output("clinical.tsv"), ds.patients)


def stage_filter(run: Run) -> None:
    ds = _dataset(run, "ingest")
    kept = drop_constant_transcripts(filter_transcripts(ds, run.cfg.min_count, run.cfg.min_fraction))
    write_matrix(run.output("counts.tsv"), kept.patient_ids, kept.transcript_ids, kept.counts)
    write_matrix(run.output("expression.tsv"), kept.patient_ids, kept.transcript_ids, kept.normalized)


def stage_cluster(run: Run) -> None:
    cfg = run.cfg
    ds = _dataset(run, "filter")
    rho = spearman_matrix(ds.normalized, ds.transcript_ids)
    tree = ward_linkage(correlation_distance(rho), ds.transcript_ids)
    k = min(cfg.k_clusters, len(ds.transcript_ids))
    if k < cfg.k_clusters:
        logger.warning("only %d transcripts; cutting into %d clusters", k, k)
    assign = cut_dendrogram(tree, k)
    write_dendrogram(run.output("dendrogram.txt"), tree)
    write_assignment(run.output("assignment.tsv"), assign)
    stats = cluster_correlation_stats(assign, rho)
    with open(run.output("cluster_stats.tsv"), "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["cluster", "size", "within_mean_abs_rho", "between_mean_abs_rho"])
        for c in range(1, k + 1):
            within = stats.within[c]
            others = [stats.between[c - 1, d - 1] for d in range(1, k + 1) if d != c]
            w.writerow([c, len(assign.members(c)), "" if within is None else repr(within),
                        repr(float(np.mean(others))) if others else ""])


def stage_split(run: Run) -> None:
    cfg = run.cfg
    patients = read_clinical(run.input("ingest", "clinical.tsv"))
    split = make_dev_test_split(patients, cfg.test_fraction, cfg.n_split_candidates, cfg.seeds.split)
    plan = make_cv_plan(split.dev, cfg.n_folds, cfg.seeds.folds, test=split.test)
    write_fold_plan(run.output("folds.tsv"), plan)
    _write_json(run.output("split.json"), {"ks_d": split.ks_d, "candidate": split.candidate,
                                           "n_dev": len(split.dev), "n_test": len(split.test)})


def _reference_sample(tiles: np.ndarray, owners: np.ndarray, dev: set[str], slide_ids: list[str],
                      n: int) -> np.ndarray:
    pool = np.flatnonzero([slide_ids[o] in dev for o in owners])
    if pool.size == 0:
        raise PipelineError("no development tiles to fit the stain reference")
    pick = np.unique(np.linspace(0, pool.size - 1, min(n, pool.size)).round().astype(int))
    return tiles[pool[pick]]


def stage_preprocess(run: Run) -> None:
    cfg = run.cfg
    patients = [p.patient_id for p in read_clinical(run.input("ingest", "clinical.tsv"))]
    plan = read_fold_plan(run.input("split", "folds.tsv"))
    slides_dir = run.root / "ingest" / "inputs" / "slides" if cfg.synthetic is not None else cfg.slides
    profiles = {}
    for mag in cfg.resolutions:
        records: list[TileRecord] = []
        stacks: list[np.ndarray] = []
        for pid in patients:
            src = Path(slides_dir) / mag / f"{pid}.png"
            if cfg.synthetic is not None:
                src = run.input("ingest", f"inputs/slides/{mag}/{pid}.png")
            elif not src.exists():
                logger.warning("no %s slide for %s", mag, pid)
                continue
            image = read_png(src)
            mask = tissue_mask(image)
            recs = tile_grid(image.shape[:2], mask, mag, cfg.tile_size, cfg.stride(mag),
                             cfg.min_tissue, slide_id=pid)
            records.extend(recs)
            stacks.extend(extract_tile(image, r) for r in recs)
        if not records:
            raise PipelineError(f"no tissue tiles at {mag}")
        tiles = np.stack(stacks).astype(np.uint8)
        owners = np.array([patients.index(r.slide_id) for r in records])
        reference = macenko_fit(_reference_sample(tiles, owners, set(plan.dev), patients,
                                                  cfg.stain_reference_tiles))
        profiles[mag] = reference.to_dict()
        for s in np.unique(owners):
            idx = np.flatnonzero(owners == s)
            try:
                source = macenko_fit(tiles[idx])
            except PreprocessError as e:
                logger.warning("%s at %s left unnormalized: %s", patients[s], mag, e)
                continue
            for i in idx:
                tiles[i] = macenko_apply(tiles[i], source, reference)
        np.save(run.output(f"{mag}/tiles.npy"), tiles, allow_pickle=False)
        write_tile_manifest(run.output(f"{mag}/tiles.tsv"), records)
    _write_json(run.output("stain_reference.json"), profiles)


def _load_tiles(run: Run, mag: str) -> tuple[list[TileRecord], np.ndarray]:
    records = read_tile_manifest(run.input("preprocess", f"{mag}/tiles.tsv"))
    tiles = np.load(run.input("preprocess", f"{mag}/tiles.npy"), allow_pickle=False)
    return records, tiles


def stage_roi(run: Run) -> None:
    cfg = run.cfg
    classifier = SaturationStubClassifier()
    rmag = cfg.roi_magnification
    records, tiles = _load_tiles(run, rmag)
    scored = [replace(r, malignancy_score=classifier.score(t)) for r, t in zip(records, tiles)]
    write_tile_manifest(run.output(f"{rmag}/scores.tsv"), scored)
    by_slide: dict[str, list[int]] = {}
    for i, r in enumerate(scored):
        by_slide.setdefault(r.slide_id, []).append(i)
    decisions, masks = [], {}
    stride = cfg.stride(rmag)
    for sid in by_slide:
        recs = [scored[i] for i in by_slide[sid]]
        dec, _ = decide_roi(sid, recs, stride, cfg.roi_threshold, cfg.roi_kernel, cfg.min_area_mm2)
        decisions.append(dec)
        grid, _ = score_grid(recs, stride)
        masks[sid] = binarize_and_clean(grid, cfg.roi_threshold, cfg.roi_kernel)
    write_roi_report(run.output("report.tsv"), decisions)
    included = {d.slide_id for d in decisions if d.included}
    cell_um = stride * MAGNIFICATIONS[rmag]
    for mag in cfg.resolutions:
        recs = scored if mag == rmag else _load_tiles(run, mag)[0]
        keep = []
        for i, r in enumerate(recs):
            if r.slide_id not in included:
                continue
            mpp = MAGNIFICATIONS[mag]
            row = int(((r.y + r.size / 2.0) * mpp) // cell_um)
            col = int(((r.x + r.size / 2.0) * mpp) // cell_um)
            m = masks[r.slide_id]
            if 0 <= row < m.shape[0] and 0 <= col < m.shape[1] and m[row, col]:
                keep.append(i)
        _write_lines(run.output(f"{mag}/keep.txt"), [str(i) for i in keep])


def _tile_banks(run: Run, slides: Sequence[str]) -> dict[str, TileBank]:
    """Kept tiles per resolution for ``slides`` (slides without kept tiles are skipped)."""
    banks = {}
    want = set(slides)
    for mag in run.cfg.resolutions:
        records, tiles = _load_tiles(run, mag)
        keep = [int(v) for v in _read_lines(run.input("roi", f"{mag}/keep.txt"))]
        per: dict[str, list[int]] = {}
        for i in keep:
            if records[i].slide_id in want:
                per.setdefault(records[i].slide_id, []).append(i)
        ordered = {s: tiles[per[s]] for s in slides if s in per}
        banks[mag] = TileBank.from_mapping(ordered, mag) if ordered else None
    return banks


def _comparison_assignment(assign: ClusterAssignment, n: int, seed: int) -> ClusterAssignment:
    """A random subset of ``n`` correlation clusters, relabelled 1..n."""
    n = min(n, assign.k)
    chosen = np.sort(np.random.default_rng(seed).choice(np.arange(1, assign.k + 1), n, replace=False))
    ids, labels = [], []
    for new, c in enumerate(chosen, start=1):
        for t in assign.members(int(c)):
            ids.append(t)
            labels.append(new)
    return ClusterAssignment(n, tuple(ids), np.array(labels), "correlation")


def stage_train(run: Run) -> None:
    cfg = run.cfg
    ds = _dataset(run, "filter")
    plan = read_fold_plan(run.input("split", "folds.tsv"))
    assign = read_assignment(run.input("cluster", "assignment.tsv"))
    included = {d.slide_id for d in read_roi_report(run.input("roi", "report.tsv")) if d.included}
    dev = [p for p in plan.dev if p in included]
    banks = _tile_banks(run, dev)
    with_tiles = set(dev)
    for bank in banks.values():
        with_tiles &= set(bank.slide_ids) if bank is not None else set()
    folds = [[p for p in f if p in with_tiles] for f in plan.folds]
    if any(len(f) == 0 for f in folds):
        raise PipelineError("a cross-validation fold has no patient with usable tiles")
    dropped = sorted(set(plan.dev) - with_tiles)
    if dropped:
        logger.info("excluding %d development patients without ROI tiles", len(dropped))
    kept = [p for f in folds for p in f]
    banks = {m: TileBank.from_mapping({s: b.tiles_of(s) for s in kept}, m) for m, b in banks.items()}

    sub = _comparison_assignment(assign, cfg.compare_clusters, cfg.seeds.clustering)
    groups_by_mode = {"corr_clusters": assign.groups()}
    for mode in cfg.modes:
        if mode != "corr_clusters":
            groups_by_mode[mode] = groups_for_mode(mode, sub, seed=cfg.seeds.clustering)
    _write_json(run.output("groups.json"), {"comparison_transcripts": list(sub.transcript_ids),
                                            "groups": groups_by_mode})
    _write_lines(run.output("patients.txt"), kept)

    tpos = {t: j for j, t in enumerate(ds.transcript_ids)}
    for mag in cfg.resolutions:
        results = cross_validate(banks[mag], ds.normalized, ds.patient_ids, ds.transcript_ids, folds,
                                 groups_by_mode, cfg.training, _predictor_factory(cfg),
                                 seed=cfg.seeds.training, keep_models=True)
        for mode, res in results.items():
            cols = sorted({tpos[t] for g in groups_by_mode[mode] for t in g})
            ids = [ds.transcript_ids[j] for j in cols]
            _matrix_tsv(run.output(f"cv/{mode}_{mag}.tsv"), res.patients, ids,
                        res.predictions[:, cols], corner="patient_id")
        corr = results["corr_clusters"]
        states, meta = [], []
        for f in sorted(corr.models):
            for g, m in zip(groups_by_mode["corr_clusters"], corr.models[f]):
                states.append(m.state())
                meta.append({"fold": f, "transcripts": g})
        save_models(run.output(f"models_{mag}.bin"), states,
                    {"config_digest": cfg.training.digest(), "magnification": mag,
                     "hidden": cfg.hidden, "models": meta})


def _fold_of(folds: Sequence[Sequence[str]]) -> dict[str, int]:
    return {p: f for f, members in enumerate(folds) for p in members}


def stage_predict(run: Run) -> None:
    cfg = run.cfg
    plan = read_fold_plan(run.input("split", "folds.tsv"))
    kept = _read_lines(run.input("train", "patients.txt"))
    groups = _read_json(run.input("train", "groups.json"))["groups"]
    k = len(plan.folds)
    fold_of = plan.fold_of()
    folds = [[p for p in kept if fold_of[p] == f] for f in range(k)]

    cv: dict[str, dict[str, tuple[list[str], list[str], np.ndarray]]] = {}
    for mode in groups:
        cv[mode] = {}
        for mag in cfg.resolutions:
            pats, ids, vals = _read_matrix_tsv(run.input("train", f"cv/{mode}_{mag}.tsv"))
            order = [pats.index(p) for p in kept]
            cv[mode][mag] = (kept, ids, vals[order])
    ids = cv["corr_clusters"][cfg.resolutions[0]][1]
    ref = cv["corr_clusters"]
    ds = _dataset(run, "filter")
    truth = ds.subset(patient_ids=kept, transcript_ids=ids).normalized

    # per fold, the resolution is chosen on the two following folds
    row = {p: i for i, p in enumerate(kept)}
    selected_by_fold = {}
    for f in range(k):
        inner = [row[p] for g in ((f + 1) % k, (f + 2) % k) for p in folds[g]]
        rhos = {m: spearman_columns(ref[m][2][inner], truth[inner]) for m in cfg.resolutions}
        selected_by_fold[f] = select_resolution(rhos, required=cfg.resolutions)
    pooled = {m: spearman_columns(ref[m][2], truth) for m in cfg.resolutions}
    final = select_resolution(pooled, required=cfg.resolutions)
    with open(run.output("resolution.tsv"), "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["transcript_id", "selected", *[f"rho_{m}" for m in cfg.resolutions]])
        for j, t in enumerate(ids):
            w.writerow([t, final[j], *[repr(float(pooled[m][j])) for m in cfg.resolutions]])

    for mode in groups:
        mids = cv[mode][cfg.resolutions[0]][1]
        jpos = [ids.index(t) for t in mids]
        out = np.empty((len(kept), len(mids)))
        for f in range(k):
            for p in folds[f]:
                i = row[p]
                for c, j in enumerate(jpos):
                    out[i, c] = cv[mode][selected_by_fold[f][j]][2][i, c]
        _matrix_tsv(run.output(f"cv_{mode}.tsv"), kept, mids, out, corner="patient_id")

    # test set: average the fold models per tile, then tiles per slide
    included = {d.slide_id for d in read_roi_report(run.input("roi", "report.tsv")) if d.included}
    test = [p for p in plan.test if p in included]
    banks = _tile_banks(run, test)
    test = [p for p in test if all(b is not None and p in b.slide_ids for b in banks.values())]
    tile_pred, tile_slides = {}, {}
    tpos = {t: j for j, t in enumerate(ids)}
    for mag in cfg.resolutions:
        if not test:
            break
        bank = TileBank.from_mapping({p: banks[mag].tiles_of(p) for p in test}, mag)
        states, meta = load_models(run.input("train", f"models_{mag}.bin"),
                                   expect_digest=cfg.training.digest())
        models = []
        for st in states:
            m = _predictor_factory(cfg)()
            m.load_state(st)
            models.append(m)
        preds = predict_tiles(models, bank.tiles, cfg.training.crop_size)
        stack = np.zeros((k, len(bank.tiles), len(ids)))
        for info, p in zip(meta["models"], preds):
            stack[info["fold"]][:, [tpos[t] for t in info["transcripts"]]] = p
        tile_pred[mag] = stack
        tile_slides[mag] = [bank.slide_ids[s] for s in bank.slide_index]
    if test:
        slides, matrix = aggregate_test_predictions(tile_pred, tile_slides, final, slide_order=test)
    else:
        slides, matrix = [], np.zeros((0, len(ids)))
    _matrix_tsv(run.output("test.tsv"), slides, ids, matrix, corner="patient_id")


def stage_evaluate(run: Run) -> None:
    cfg = run.cfg
    ds = _dataset(run, "filter")
    resolution = {}
    with open(run.input("predict", "resolution.tsv"), newline="") as fh:
        for r in csv.DictReader(fh, delimiter="\t"):
            resolution[r["transcript_id"]] = r["selected"]
    cv_pat, ids, cv_pred = _read_matrix_tsv(run.input("predict", "cv_corr_clusters.tsv"))
    test_pat, tids, test_pred = _read_matrix_tsv(run.input("predict", "test.tsv"))
    if tids != ids:
        raise PipelineError("test and cross-validation predictions cover different transcripts")
    cv_truth = ds.subset(patient_ids=cv_pat, transcript_ids=ids).normalized
    kw = {}
    if len(test_pat) >= 4:
        kw = dict(test_patients=test_pat, test_pred=test_pred,
                  test_truth=ds.subset(patient_ids=test_pat, transcript_ids=ids).normalized)
    else:
        logger.warning("only %d test patients; skipping the test gate", len(test_pat))
    ledger = evaluate_transcripts(ids, cv_pat, cv_pred, cv_truth, resolutions=[resolution[t] for t in ids],
                                  cv_alpha=cfg.cv_alpha, test_alpha=cfg.test_alpha, **kw)
    write_ledger(run.output("ledger.tsv"), ledger)

    groups = _read_json(run.input("train", "groups.json"))
    subset = groups["comparison_transcripts"]
    with open(run.output("modes.tsv"), "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["mode", "transcript_id", "rho_cv", "p_cv", "p_adj_cv"])
        for mode in groups["groups"]:
            pats, mids, vals = _read_matrix_tsv(run.input("predict", f"cv_{mode}.tsv"))
            cols = [mids.index(t) for t in subset]
            truth = ds.subset(patient_ids=pats, transcript_ids=subset).normalized
            rho = spearman_columns(vals[:, cols], truth)
            p = np.array([1.0 if math.isnan(r) else spearman_pvalue(r, len(pats)) for r in rho])
            padj = bh_adjust(p)
            for t, r, pv, q in zip(subset, rho, p, padj):
                w.writerow([mode, t, "" if math.isnan(r) else repr(float(r)), repr(float(pv)), repr(float(q))])


def stage_ccp(run: Run) -> None:
    cfg = run.cfg
    ledger = read_ledger(run.input("evaluate", "ledger.tsv"))
    evaluated = {e.transcript_id for e in ledger}
    sig_path = _external(run, "signature", "signature.txt")
    if sig_path is None:
        raise PipelineError("no signature file configured")
    members = [m for m in _read_lines(Path(sig_path)) if m in evaluated]
    if not members:
        raise PipelineError("no signature member survived filtering")
    validated = [e.transcript_id for e in ledger if e.validated_test and e.transcript_id in set(members)]
    if not validated:
        raise PipelineError("no signature member passed the test gate")
    pats, ids, pred = _read_matrix_tsv(run.input("predict", "test.tsv"))
    truth = _dataset(run, "filter").subset(patient_ids=pats, transcript_ids=ids).normalized
    rna = dsa.signature_score(truth, ids, members, pats, name="rna")
    cnn = dsa.signature_score(pred, ids, validated, pats, name="cnn")
    with open(run.output("scores.tsv"), "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["patient_id", "rna_score", "cnn_score"])
        for p, a, b in zip(pats, rna.scores, cnn.scores):
            w.writerow([p, repr(float(a)), repr(float(b))])
    ci = bootstrap_ci(spearman_rho, cnn.scores, rna.scores, n_boot=cfg.n_boot, seed=cfg.seeds.bootstrap)
    _write_json(run.output("summary.json"), {
        "members": members, "validated_members": validated,
        "rho": ci.estimate, "ci_low": ci.lower, "ci_high": ci.upper, "n_patients": len(pats),
        "n_redrawn": ci.n_redrawn})


def stage_cox(run: Run) -> None:
    clinical = {p.patient_id: p for p in read_clinical(run.input("ingest", "clinical.tsv"))}
    with open(run.input("ccp", "scores.tsv"), newline="") as fh:
        rows = [r for r in csv.DictReader(fh, delimiter="\t")
                if clinical[r["patient_id"]].bcr_time is not None]
    covariates = {}
    for col, name in (("rna_score", "rna"), ("cnn_score", "cnn")):
        x = np.array([float(r[col]) for r in rows])
        covariates[name] = x
        covariates[f"{name}_high"] = (x > np.median(x)).astype(float) if x.size else x
    events = np.array([clinical[r["patient_id"]].bcr_event for r in rows], dtype=bool)
    times = np.array([clinical[r["patient_id"]].bcr_time for r in rows], dtype=float)
    results, errors = {}, {}
    for name, x in covariates.items():
        dsa.write_survival(run.output(f"survival_{name}.tsv"),
                           [dsa.SurvivalRecord(r["patient_id"], float(v), bool(e), float(t))
                            for r, v, e, t in zip(rows, x, events, times)])
        try:
            results[name] = dsa.cox_fit(x, events, times)
        except dsa.DownstreamError as e:
            errors[name] = str(e)
    dsa.write_cox_results(run.output("results.tsv"), results)
    _write_json(run.output("errors.json"), errors)


def stage_gsea(run: Run) -> None:
    cfg = run.cfg
    ledger = read_ledger(run.input("evaluate", "ledger.tsv"))
    ranked = dsa.rank_genes_for_gsea(ledger)
    _write_lines(run.output("ranking.txt"), ranked)
    gmt = _external(run, "gene_sets", "gene_sets.gmt")
    sets = dsa.read_gmt(gmt) if gmt is not None else {}
    results = dsa.gsea_significance(ranked, sets, cfg.n_perm, cfg.seeds.gsea, cfg.gsea_min_size) \
        if sets else []
    dsa.write_gsea_results(run.output("results.tsv"), results)


def stage_report(run: Run) -> None:
    from .report import emit_report

    emit_report(
        ledger_path=run.input("evaluate", "ledger.tsv"),
        modes_path=run.input("evaluate", "modes.tsv"),
        cluster_stats_path=run.input("cluster", "cluster_stats.tsv"),
        cox_path=run.input("cox", "results.tsv"),
        ccp_summary_path=run.input("ccp", "summary.json"),
        gsea_path=run.input("gsea", "results.tsv"),
        cv_alpha=run.cfg.cv_alpha, test_alpha=run.cfg.test_alpha,
        output=run.output,
    )


STAGE_FUNCS: dict[str, Callable[[Run], None]] = {
    "ingest": stage_ingest, "filter": stage_filter, "cluster": stage_cluster, "split": stage_split,
    "preprocess": stage_preprocess, "roi": stage_roi, "train": stage_train, "predict": stage_predict,
    "evaluate": stage_evaluate, "ccp": stage_ccp, "cox": stage_cox, "gsea": stage_gsea,
    "report": stage_report,
}
