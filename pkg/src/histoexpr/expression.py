"""Expression matrices and clinical records: ingestion, filtering, scaling."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "ExpressionError",
    "PatientRecord",
    "ExpressionDataset",
    "StandardizationStats",
    "load_expression",
    "read_clinical",
    "write_clinical",
    "write_matrix",
    "filter_transcripts",
    "drop_constant_transcripts",
    "log2_transform",
    "fit_standardization",
    "apply_standardization",
    "invert_standardization",
]

CLINICAL_COLUMNS = ("patient_id", "age", "psa", "isup", "bcr_event", "bcr_time_days")


class ExpressionError(ValueError):
    pass


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    isup: int
    bcr_event: bool = False
    bcr_time: float | None = None
    age: float | None = None
    psa: float | None = None
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.isup not in (1, 2, 3, 4, 5):
            raise ExpressionError(f"patient {self.patient_id}: ISUP grade {self.isup!r} not in 1..5")
        if self.bcr_event and self.bcr_time is None:
            raise ExpressionError(f"patient {self.patient_id}: BCR event without a time")
        if self.bcr_time is not None and self.bcr_time < 0:
            raise ExpressionError(f"patient {self.patient_id}: negative BCR time")


@dataclass(frozen=True)
class ExpressionDataset:
    """Patients x transcripts counts and log-scale normalized values."""

    patients: tuple[PatientRecord, ...]
    transcript_ids: tuple[str, ...]
    counts: np.ndarray
    normalized: np.ndarray
    protein_coding: np.ndarray | None = None

    def __post_init__(self):
        n, m = len(self.patients), len(self.transcript_ids)
        if self.counts.shape != (n, m) or self.normalized.shape != (n, m):
            raise ExpressionError(
                f"matrix shapes {self.counts.shape}/{self.normalized.shape} do not match "
                f"{n} patients x {m} transcripts")
        _check_unique([p.patient_id for p in self.patients], "patient")
        _check_unique(self.transcript_ids, "transcript")
        if np.isnan(self.normalized).any():
            raise ExpressionError("normalized matrix contains missing values")
        if (self.counts < 0).any():
            raise ExpressionError("negative counts")

    @property
    def shape(self) -> tuple[int, int]:
        return self.normalized.shape

    @property
    def patient_ids(self) -> tuple[str, ...]:
        return tuple(p.patient_id for p in self.patients)

    def subset(self, patient_ids: Sequence[str] | None = None,
               transcript_ids: Sequence[str] | None = None) -> "ExpressionDataset":
        rows = np.arange(len(self.patients))
        cols = np.arange(len(self.transcript_ids))
        if patient_ids is not None:
            pos = {p: i for i, p in enumerate(self.patient_ids)}
            rows = np.array([pos[p] for p in patient_ids], dtype=int)
        if transcript_ids is not None:
            pos = {t: i for i, t in enumerate(self.transcript_ids)}
            cols = np.array([pos[t] for t in transcript_ids], dtype=int)
        return replace(
            self,
            patients=tuple(self.patients[i] for i in rows),
            transcript_ids=tuple(self.transcript_ids[j] for j in cols),
            counts=self.counts[np.ix_(rows, cols)],
            normalized=self.normalized[np.ix_(rows, cols)],
            protein_coding=None if self.protein_coding is None else self.protein_coding[cols],
        )

    def column(self, transcript_id: str) -> np.ndarray:
        return self.normalized[:, self.transcript_ids.index(transcript_id)]


def _check_unique(ids, what):
    seen = set()
    for i in ids:
        if i in seen:
            raise ExpressionError(f"duplicate {what} id {i!r}")
        seen.add(i)


def _sniff_delimiter(path: Path) -> str:
    with open(path, newline="") as fh:
        head = fh.readline()
    return "\t" if "\t" in head else ","


def _read_matrix(path: Path, dtype) -> tuple[list[str], list[str], np.ndarray]:
    """Read a transcripts-by-patients table; returns (patients, transcripts, P x T)."""
    delim = _sniff_delimiter(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter=delim))
    if not rows:
        raise ExpressionError(f"{path}: empty table")
    patients = rows[0][1:]
    transcripts, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(patients) + 1:
            raise ExpressionError(f"{path}:{lineno}: expected {len(patients) + 1} cells, got {len(row)}")
        transcripts.append(row[0])
        try:
            values.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise ExpressionError(f"{path}:{lineno}: non-numeric cell ({exc})") from None
    mat = np.asarray(values, dtype=np.float64).reshape(len(transcripts), len(patients)).T
    if dtype is int:
        if not np.all(mat == np.round(mat)):
            raise ExpressionError(f"{path}: counts must be integers")
        mat = mat.astype(np.int64)
    _check_unique(patients, "patient")
    _check_unique(transcripts, "transcript")
    return patients, transcripts, mat


def _opt_float(v: str) -> float | None:
    v = v.strip()
    if v == "" or v.upper() in ("NA", "NAN", "NONE"):
        return None
    return float(v)


def _parse_bool(v: str) -> bool:
    v = v.strip().lower()
    if v in ("1", "true", "yes", "t"):
        return True
    if v in ("0", "false", "no", "f", ""):
        return False
    raise ExpressionError(f"cannot parse boolean {v!r}")


def read_clinical(path: str | Path) -> list[PatientRecord]:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, delimiter=_sniff_delimiter(path))
        missing = {"patient_id", "isup"} - set(reader.fieldnames or ())
        if missing:
            raise ExpressionError(f"{path}: missing clinical columns {sorted(missing)}")
        out = []
        for row in reader:
            event = _parse_bool(row.get("bcr_event", "0") or "0")
            extra = {k: v for k, v in row.items() if k not in CLINICAL_COLUMNS}
            try:
                out.append(PatientRecord(
                    patient_id=row["patient_id"],
                    isup=int(row["isup"]),
                    bcr_event=event,
                    bcr_time=_opt_float(row.get("bcr_time_days", "") or ""),
                    age=_opt_float(row.get("age", "") or ""),
                    psa=_opt_float(row.get("psa", "") or ""),
                    extra=extra,
                ))
            except ValueError as exc:
                raise ExpressionError(f"{path}: bad clinical row for {row.get('patient_id')!r}: {exc}") from None
    _check_unique([p.patient_id for p in out], "patient")
    return out


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_clinical(path: str | Path, patients: Sequence[PatientRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(CLINICAL_COLUMNS)
        for p in patients:
            w.writerow([p.patient_id, _fmt(p.age), _fmt(p.psa), p.isup,
                        _fmt(bool(p.bcr_event)), _fmt(p.bcr_time)])


def write_matrix(path: str | Path, patient_ids: Sequence[str], transcript_ids: Sequence[str],
                 matrix: np.ndarray) -> None:
    """Write a patients x transcripts matrix transposed (one row per transcript)."""
    integer = np.issubdtype(matrix.dtype, np.integer)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["transcript_id", *patient_ids])
        for j, t in enumerate(transcript_ids):
            col = matrix[:, j]
            w.writerow([t, *(str(int(v)) if integer else repr(float(v)) for v in col)])


def _read_annotation(path: Path) -> dict[str, bool]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, delimiter=_sniff_delimiter(path))
        return {row["transcript_id"]: _parse_bool(row["protein_coding"]) for row in reader}


def load_expression(counts_path: str | Path, normalized_path: str | Path,
                    clinical_path: str | Path,
                    annotation_path: str | Path | None = None) -> ExpressionDataset:
    """Load and align the counts, normalized, clinical and annotation tables.

    Transcripts without a ``protein_coding=true`` annotation are dropped. With
    no annotation file every transcript is kept. Row order follows the
    clinical table.
    """
    cp, ct, counts = _read_matrix(Path(counts_path), int)
    npat, nt, norm = _read_matrix(Path(normalized_path), float)
    if cp != npat or ct != nt:
        if set(cp) != set(npat) or set(ct) != set(nt):
            raise ExpressionError("counts and normalized tables have different row/column keys")
        pi = [npat.index(p) for p in cp]
        ti = [nt.index(t) for t in ct]
        norm = norm[np.ix_(pi, ti)]
    clinical = read_clinical(clinical_path)
    clin_ids = [p.patient_id for p in clinical]
    unmatched = sorted(set(cp) ^ set(clin_ids))
    if unmatched:
        raise ExpressionError(f"unmatched patient(s) between expression and clinical tables: {unmatched[:5]}")
    rows = [cp.index(p) for p in clin_ids]
    counts, norm = counts[rows], norm[rows]

    coding = np.ones(len(ct), dtype=bool)
    if annotation_path is not None:
        ann = _read_annotation(Path(annotation_path))
        coding = np.array([ann.get(t, False) for t in ct], dtype=bool)
        logger.info("annotation keeps %d of %d transcripts", coding.sum(), len(ct))
    keep = np.flatnonzero(coding)
    return ExpressionDataset(
        patients=tuple(clinical),
        transcript_ids=tuple(ct[j] for j in keep),
        counts=counts[:, keep],
        normalized=norm[:, keep],
        protein_coding=np.ones(keep.size, dtype=bool),
    )


def filter_transcripts(ds: ExpressionDataset, min_count: int = 3,
                       min_fraction: float = 0.10) -> ExpressionDataset:
    """Keep transcripts with at least ``min_count`` counts in enough patients.

    A transcript survives when the number of patients reaching ``min_count``
    is at least ``ceil(min_fraction * n_patients)``.
    """
    if not 0 < min_fraction <= 1:
        raise ExpressionError("min_fraction must lie in (0, 1]")
    if min_count < 0:
        raise ExpressionError("min_count must be nonnegative")
    n = ds.counts.shape[0]
    # round before ceil so 0.1 * 30 does not become 4
    needed = math.ceil(round(min_fraction * n, 9))
    hits = (ds.counts >= min_count).sum(axis=0)
    keep = np.flatnonzero(hits >= needed)
    if keep.size == 0:
        raise ExpressionError("no transcript passes the expression filter")
    logger.info("expression filter keeps %d of %d transcripts", keep.size, len(ds.transcript_ids))
    return ds.subset(transcript_ids=[ds.transcript_ids[j] for j in keep])


def drop_constant_transcripts(ds: ExpressionDataset) -> ExpressionDataset:
    sd = ds.normalized.std(axis=0)
    keep = [t for t, s in zip(ds.transcript_ids, sd) if s > 0]
    if len(keep) < len(ds.transcript_ids):
        logger.info("dropping %d constant transcripts", len(ds.transcript_ids) - len(keep))
    return ds.subset(transcript_ids=keep)


def log2_transform(values, pseudocount: float = 1.0) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if (values < 0).any():
        raise ExpressionError("log2_transform needs nonnegative input")
    if pseudocount <= 0 and (values == 0).any():
        raise ExpressionError("pseudocount must be positive when zeros are present")
    return np.log2(values + pseudocount)


@dataclass(frozen=True)
class StandardizationStats:
    transcript_ids: tuple[str, ...]
    mean: np.ndarray
    sd: np.ndarray


def fit_standardization(values: np.ndarray, transcript_ids: Sequence[str] | None = None
                        ) -> StandardizationStats:
    """Per-column mean and sample standard deviation (n - 1 denominator)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    ids = tuple(transcript_ids) if transcript_ids is not None else tuple(str(i) for i in range(values.shape[1]))
    if values.shape[0] < 2:
        raise ExpressionError("standardization needs at least two training patients")
    mean = values.mean(axis=0)
    sd = values.std(axis=0, ddof=1)
    flat = np.flatnonzero(~(sd > 0))
    if flat.size:
        raise ExpressionError(f"zero-variance transcript(s) in training data: {[ids[j] for j in flat[:5]]}")
    return StandardizationStats(ids, mean, sd)


def apply_standardization(values, stats: StandardizationStats) -> np.ndarray:
    return (np.asarray(values, dtype=np.float64) - stats.mean) / stats.sd


def invert_standardization(values, stats: StandardizationStats) -> np.ndarray:
    return np.asarray(values, dtype=np.float64) * stats.sd + stats.mean
