"""Pipeline configuration read from an INI file.

Relative paths are resolved against the directory of the config file. A
``[synthetic]`` section makes the ingest stage generate its own cohort
instead of reading ``[paths]`` inputs.
"""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

from .synthetic import SyntheticSpec
from .train import MODES, TrainingConfig
from .wsi import MAGNIFICATIONS

STAGES = ("ingest", "filter", "cluster", "split", "preprocess", "roi", "train", "predict",
          "evaluate", "ccp", "cox", "gsea", "report")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Seeds:
    synthetic: int = 0
    split: int = 0
    folds: int = 0
    clustering: int = 0
    training: int = 0
    bootstrap: int = 0
    gsea: int = 0


@dataclass(frozen=True)
class PipelineConfig:
    work_dir: Path
    counts: Path | None = None
    normalized: Path | None = None
    clinical: Path | None = None
    annotation: Path | None = None
    slides: Path | None = None
    gene_sets: Path | None = None
    signature: Path | None = None
    cv_alpha: float = 1e-4
    test_alpha: float = 0.01
    min_count: int = 3
    min_fraction: float = 0.10
    test_fraction: float = 0.3
    n_split_candidates: int = 500
    n_folds: int = 10
    k_clusters: int = 50
    compare_clusters: int = 10
    modes: tuple[str, ...] = ("corr_clusters", "rnd_clusters", "all_gene", "per_gene")
    resolutions: tuple[str, ...] = ("40X", "20X", "10X")
    tile_size: int = 500
    strides: tuple[tuple[str, int], ...] = (("40X", 500), ("20X", 250), ("10X", 250))
    min_tissue: float = 0.5
    stain_reference_tiles: int = 64
    roi_magnification: str = "10X"
    roi_threshold: float = 0.863
    roi_kernel: int = 3
    min_area_mm2: float = 1.0
    hidden: int = 3
    weight_decay: float = 1e-4
    training: TrainingConfig = field(default_factory=TrainingConfig)
    n_boot: int = 2000
    n_perm: int = 2000
    gsea_min_size: int = 1
    seeds: Seeds = field(default_factory=Seeds)
    synthetic: SyntheticSpec | None = None

    def __post_init__(self):
        for name in ("cv_alpha", "test_alpha", "min_fraction", "test_fraction"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ConfigError(f"{name} must lie in (0, 1), got {v}")
        for m in self.modes:
            if m not in MODES:
                raise ConfigError(f"unknown mode {m!r}; choose from {MODES}")
        if "corr_clusters" not in self.modes:
            raise ConfigError("modes must include corr_clusters")
        for r in self.resolutions:
            if r not in MAGNIFICATIONS:
                raise ConfigError(f"unknown resolution {r!r}")
        if not self.resolutions:
            raise ConfigError("at least one resolution required")
        if self.roi_magnification not in self.resolutions:
            raise ConfigError("roi magnification must be one of the resolutions")
        strides = dict(self.strides)
        missing = [r for r in self.resolutions if r not in strides]
        if missing:
            raise ConfigError(f"no stride for resolution {missing[0]}")
        if self.k_clusters < 1 or self.compare_clusters < 1:
            raise ConfigError("cluster counts must be positive")
        if self.synthetic is None and (self.counts is None or self.normalized is None
                                       or self.clinical is None or self.slides is None):
            raise ConfigError("[paths] needs counts, normalized, clinical and slides "
                              "unless a [synthetic] section is given")

    def stride(self, magnification: str) -> int:
        return dict(self.strides)[magnification]

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Path):
                v = str(v)
            elif isinstance(v, (TrainingConfig, Seeds, SyntheticSpec)):
                v = asdict(v)
            elif isinstance(v, tuple):
                v = [list(x) if isinstance(x, tuple) else x for x in v]
            d[f.name] = v
        return d

    def digest(self) -> str:
        """sha256 of the canonical JSON form; paths and work_dir are excluded."""
        d = self.to_dict()
        for k in ("work_dir", "counts", "normalized", "clinical", "annotation", "slides",
                  "gene_sets", "signature"):
            d.pop(k)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _list(v: str) -> tuple[str, ...]:
    return tuple(s.strip() for s in v.replace(",", " ").split() if s.strip())


def _coerce(raw: str, like: Any, name: str):
    try:
        if isinstance(like, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            return _list(raw)
    except ValueError as e:
        raise ConfigError(f"bad value for {name}: {raw!r}") from e
    return raw.strip()


def _section_into(obj, section: Mapping[str, str], prefix: str):
    known = {f.name for f in fields(obj)}
    kw = {}
    for key, raw in section.items():
        if key not in known:
            raise ConfigError(f"unknown key {prefix}.{key}")
        kw[key] = _coerce(raw, getattr(obj, key), f"{prefix}.{key}")
    return replace(obj, **kw) if kw else obj


PATH_KEYS = ("work_dir", "counts", "normalized", "clinical", "annotation", "slides", "gene_sets",
             "signature")

TOP_SECTIONS = {
    "thresholds": ("cv_alpha", "test_alpha", "min_count", "min_fraction"),
    "split": ("test_fraction", "n_split_candidates", "n_folds"),
    "clustering": ("k_clusters", "compare_clusters"),
    "preprocess": ("tile_size", "min_tissue", "stain_reference_tiles"),
    "roi": ("roi_magnification", "roi_threshold", "roi_kernel", "min_area_mm2"),
    "model": ("hidden", "weight_decay"),
    "downstream": ("n_boot", "n_perm", "gsea_min_size"),
    "run": ("modes", "resolutions"),
}


def parse_overrides(items: Sequence[str]) -> dict[str, int]:
    """``name=value`` pairs for ``--seed-override``."""
    out = {}
    known = {f.name for f in fields(Seeds)}
    for item in items:
        name, sep, value = item.partition("=")
        name = name.strip()
        if not sep or name not in known:
            raise ConfigError(f"bad seed override {item!r}; expected one of {sorted(known)}=<int>")
        try:
            out[name] = int(value)
        except ValueError as e:
            raise ConfigError(f"seed override {item!r} needs an integer") from e
    return out


def load_config(path: str | Path, seed_overrides: Mapping[str, int] | None = None) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read(path)
    base = path.parent.resolve()
    allowed = {"paths", "training", "seeds", "synthetic", "strides", *TOP_SECTIONS}
    unknown = sorted(set(cp.sections()) - allowed)
    if unknown:
        raise ConfigError(f"unknown section [{unknown[0]}]")

    kw: dict[str, Any] = {}
    paths = cp["paths"] if cp.has_section("paths") else {}
    for key in paths:
        if key not in PATH_KEYS:
            raise ConfigError(f"unknown key paths.{key}")
    for key in PATH_KEYS:
        if key in paths and paths[key].strip():
            p = Path(paths[key].strip())
            kw[key] = p if p.is_absolute() else base / p
    kw.setdefault("work_dir", base / "work")

    defaults = {f.name: f.default for f in fields(PipelineConfig)}
    for section, keys in TOP_SECTIONS.items():
        if not cp.has_section(section):
            continue
        for key, raw in cp[section].items():
            if key not in keys:
                raise ConfigError(f"unknown key {section}.{key}")
            kw[key] = _coerce(raw, defaults[key], f"{section}.{key}")
    if cp.has_section("strides"):
        try:
            kw["strides"] = tuple(sorted((k, int(v)) for k, v in cp["strides"].items()))
        except ValueError as e:
            raise ConfigError("strides must be integers") from e

    kw["training"] = _section_into(TrainingConfig(), cp["training"], "training") \
        if cp.has_section("training") else TrainingConfig()
    seeds = _section_into(Seeds(), cp["seeds"], "seeds") if cp.has_section("seeds") else Seeds()
    if seed_overrides:
        seeds = replace(seeds, **seed_overrides)
    kw["seeds"] = seeds
    if cp.has_section("synthetic"):
        kw["synthetic"] = _section_into(SyntheticSpec(), cp["synthetic"], "synthetic")
    return PipelineConfig(**kw)
