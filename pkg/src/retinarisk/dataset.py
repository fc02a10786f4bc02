"""Model-ready cohorts: preprocessed images, graphs, metadata and labels.

Ingestion reads the manifest / long-format biomarker CSVs written by
``synthdata`` (the same layout is the contract for real data, where risk
and time columns may be empty).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .fusion import InputBatch
from .io import load_image, to_uint8
from .preprocess import PreprocessConfig, preprocess_image, resize
from .synthdata import MANIFEST_HEADER, PatientRecord
from .temporal_graph import (
    DEFAULT_VALUE_RANGES,
    Biomarker,
    BiomarkerSeries,
    GraphError,
    TemporalGraph,
    ValueRanges,
    batch_graphs,
    build_graph,
)

AGE_RANGE = (18.0, 90.0)
DURATION_RANGE = (0.0, 40.0)
GRAPH_TIME_SCALE = 24.0


class ManifestError(ValueError):
    pass


def metadata_vector(age: float, diabetes_years: float) -> np.ndarray:
    """Age and diabetes duration scaled to [0, 1] over fixed ranges."""
    out = []
    for v, (lo, hi) in ((age, AGE_RANGE), (diabetes_years, DURATION_RANGE)):
        out.append(min(max((v - lo) / (hi - lo), 0.0), 1.0))
    return np.array(out)


def quantize(img: np.ndarray) -> np.ndarray:
    """Round-trip through 8 bits, matching what a PNG on disk holds."""
    return to_uint8(img).astype(np.float64) / 255.0


def downsample_mask(mask: np.ndarray, size: int) -> np.ndarray:
    return resize(mask.astype(np.float64), size) > 0.0


@dataclass
class Dataset:
    ids: list[str]
    images: np.ndarray
    graphs: list[TemporalGraph]
    meta: np.ndarray
    grades: np.ndarray
    risks: np.ndarray
    times: np.ndarray
    events: np.ndarray
    masks: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx: Sequence[int]) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset([self.ids[i] for i in idx], self.images[idx], [self.graphs[i] for i in idx],
                       self.meta[idx], self.grades[idx], self.risks[idx], self.times[idx],
                       self.events[idx], None if self.masks is None else self.masks[idx])

    def batch(self, idx: Sequence[int] | None = None, images: np.ndarray | None = None) -> InputBatch:
        idx = np.arange(len(self)) if idx is None else np.asarray(idx, dtype=int)
        imgs = self.images[idx] if images is None else images
        return InputBatch(imgs, batch_graphs([self.graphs[i] for i in idx]), self.meta[idx])

    @property
    def has_risk(self) -> bool:
        return bool(np.all(np.isfinite(self.risks)))

    @property
    def has_survival(self) -> bool:
        return bool(np.all(np.isfinite(self.times)) and np.all(self.events >= 0))

    @classmethod
    def from_records(cls, records: Sequence[PatientRecord], pcfg: PreprocessConfig,
                     value_ranges: ValueRanges | None = None) -> "Dataset":
        ranges = DEFAULT_VALUE_RANGES if value_ranges is None else value_ranges
        images, graphs, meta, masks = [], [], [], []
        for rec in records:
            images.append(preprocess_image(quantize(rec.image), pcfg))
            graphs.append(build_graph(rec.series, GRAPH_TIME_SCALE, ranges))
            meta.append(metadata_vector(rec.age, rec.diabetes_years))
            if rec.mask is not None:
                masks.append(downsample_mask(rec.mask, pcfg.target_size))

        def col(name, default):
            return np.array([default if getattr(r, name) is None else getattr(r, name) for r in records],
                            dtype=float)

        return cls([r.patient_id for r in records], np.stack(images), graphs, np.stack(meta),
                   np.array([r.grade for r in records], dtype=int), col("risk", np.nan),
                   col("progression_months", np.nan), col("event", -1),
                   np.stack(masks) if len(masks) == len(records) else None)


def _parse_float(value: str, row: int, column: str, optional: bool = False) -> float | None:
    if value.strip() == "":
        if optional:
            return None
        raise ManifestError(f"row {row}: missing value in column '{column}'")
    try:
        out = float(value)
    except ValueError:
        raise ManifestError(f"row {row}: column '{column}' is not numeric: {value!r}") from None
    if not np.isfinite(out):
        raise ManifestError(f"row {row}: column '{column}' is not finite")
    return out


def read_biomarkers(path: str | Path) -> dict[str, list[BiomarkerSeries]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"biomarker file not found: {path}")
    raw: dict[str, dict[Biomarker, list[tuple[float, float]]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"patient_id", "biomarker", "month", "value"} - set(reader.fieldnames or [])
        if missing:
            raise ManifestError(f"{path}: missing columns {sorted(missing)}")
        for n, row in enumerate(reader, start=2):
            try:
                marker = Biomarker(row["biomarker"].strip())
            except ValueError:
                raise ManifestError(f"row {n}: unknown biomarker {row['biomarker']!r}") from None
            month = _parse_float(row["month"], n, "month")
            value = _parse_float(row["value"], n, "value")
            raw.setdefault(row["patient_id"], {}).setdefault(marker, []).append((month, value))
    out = {}
    for pid, markers in raw.items():
        series = []
        for marker in Biomarker:
            if marker in markers:
                pts = sorted(markers[marker])
                try:
                    series.append(BiomarkerSeries(marker, [m for m, _ in pts], [v for _, v in pts]))
                except GraphError as exc:
                    raise ManifestError(f"patient {pid}: {exc}") from None
        out[pid] = series
    return out


def read_manifest(manifest: str | Path, biomarkers: str | Path | None = None,
                  load_images: bool = True) -> list[PatientRecord]:
    """Parse manifest rows into records; errors name the offending row."""
    manifest = Path(manifest)
    if not manifest.exists():
        raise FileNotFoundError(f"manifest not found: {manifest}")
    root = manifest.parent
    bio = read_biomarkers(biomarkers if biomarkers is not None else root / "biomarkers.csv")
    records = []
    with open(manifest, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"patient_id", "image_path", "grade", "age", "diabetes_years"}
        missing = required - set(reader.fieldnames or [])
        if missing:
            raise ManifestError(f"{manifest}: missing columns {sorted(missing)}")
        for n, row in enumerate(reader, start=2):
            pid = row["patient_id"].strip()
            if not pid:
                raise ManifestError(f"row {n}: empty patient_id")
            grade = _parse_float(row["grade"], n, "grade")
            if grade not in (0, 1, 2, 3, 4):
                raise ManifestError(f"row {n}: grade must be an integer 0..4, got {row['grade']!r}")
            risk = _parse_float(row.get("risk", ""), n, "risk", optional=True)
            if risk is not None and not 0.0 <= risk <= 1.0:
                raise ManifestError(f"row {n}: risk must lie in [0, 1]")
            t = _parse_float(row.get("progression_months", ""), n, "progression_months", optional=True)
            if t is not None and t <= 0:
                raise ManifestError(f"row {n}: progression_months must be positive")
            event = _parse_float(row.get("event", ""), n, "event", optional=True)
            if event is not None and event not in (0, 1):
                raise ManifestError(f"row {n}: event must be 0 or 1")
            if pid not in bio:
                raise ManifestError(f"row {n}: no biomarker rows for patient {pid}")
            img_path = root / row["image_path"]
            image = load_image(img_path) if load_images else None
            mask = None
            mask_path = root / "masks" / f"{pid}.png"
            if load_images and mask_path.exists():
                mask = load_image(mask_path, grayscale=True) > 0.5
            records.append(PatientRecord(
                pid, image, bio[pid], _parse_float(row["age"], n, "age"),
                _parse_float(row["diabetes_years"], n, "diabetes_years"), int(grade), risk, t,
                None if event is None else int(event), mask, row["image_path"]))
    if not records:
        raise ManifestError(f"{manifest}: no rows")
    return records


def load_dataset(manifest: str | Path, pcfg: PreprocessConfig,
                 biomarkers: str | Path | None = None) -> Dataset:
    return Dataset.from_records(read_manifest(manifest, biomarkers), pcfg)


__all__ = ["AGE_RANGE", "DURATION_RANGE", "Dataset", "ManifestError", "MANIFEST_HEADER",
           "downsample_mask", "load_dataset", "metadata_vector", "quantize", "read_biomarkers",
           "read_manifest"]
