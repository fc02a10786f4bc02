"""Synthetic cohorts: biomarker trajectories, fundus-like images, risk labels.

Everything is a pure function of the config and its seed. Images are drawn
at ``render_size`` and written as PNGs; lesion masks share the geometry.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .io import save_image, write_csv
from .temporal_graph import Biomarker, BiomarkerSeries

GRADE_NAMES = ("No DR", "Mild", "Moderate", "Severe", "Proliferative")
MANIFEST_HEADER = ["patient_id", "image_path", "grade", "risk", "progression_months", "event",
                   "age", "diabetes_years"]
BIOMARKER_HEADER = ["patient_id", "biomarker", "month", "value"]

# (microaneurysms, hemorrhages, exudates) per grade
LESION_COUNTS = {0: (0, 0, 0), 1: (3, 0, 0), 2: (4, 2, 1), 3: (5, 4, 2), 4: (6, 6, 4)}


@dataclass(frozen=True)
class CohortConfig:
    n: int = 200
    priors: tuple[float, ...] = (0.4, 0.15, 0.2, 0.1, 0.15)
    hba1c: tuple[float, float] = (7.0, 1.5)
    thickness: tuple[float, float] = (250.0, 20.0)
    vegf: tuple[float, float] = (100.0, 30.0)
    visits: int = 4
    visit_interval: float = 6.0
    # per-visit drift per grade step, and per-visit measurement noise
    drift: tuple[float, float, float] = (0.25, -3.0, 8.0)
    noise: tuple[float, float, float] = (0.1, 1.0, 3.0)
    # risk = logistic(a*hba1c_slope + b*thickness_drop + c*grade + intercept + noise)
    risk_coef: tuple[float, float, float] = (0.3, 0.04, 0.15)
    risk_intercept: float = -1.4
    risk_noise: float = 0.3
    censor_fraction: float = 0.2
    time_scale: float = 72.0
    render_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("cohort size must be positive")
        p = np.asarray(self.priors, dtype=float)
        if p.size != 5 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("priors must be 5 non-negative reals summing to 1")
        if min(self.hba1c[1], self.thickness[1], self.vegf[1]) < 0:
            raise ValueError("standard deviations must be non-negative")
        if self.visits < 1:
            raise ValueError("need at least one visit")
        if not 0.0 <= self.censor_fraction < 1.0:
            raise ValueError("censor_fraction must lie in [0, 1)")
        if self.render_size < 16:
            raise ValueError("render_size must be at least 16")

    def replace(self, **kw) -> "CohortConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class PatientRecord:
    patient_id: str
    image: np.ndarray | None
    series: list[BiomarkerSeries]
    age: float
    diabetes_years: float
    grade: int
    risk: float | None = None
    progression_months: float | None = None
    event: int | None = None
    mask: np.ndarray | None = None
    image_path: str | None = None


def visit_months(cfg: CohortConfig) -> np.ndarray:
    return cfg.visit_interval * np.arange(cfg.visits)


def gen_biomarkers(grade: int, cfg: CohortConfig, rng: np.random.Generator) -> list[BiomarkerSeries]:
    """Gaussian baselines plus a grade-proportional drift per visit."""
    if grade not in range(5):
        raise ValueError(f"grade must be 0..4, got {grade}")
    months = visit_months(cfg)
    steps = np.arange(cfg.visits)
    out = []
    params = (cfg.hba1c, cfg.thickness, cfg.vegf)
    for marker, (mu, sd), drift, noise in zip(Biomarker, params, cfg.drift, cfg.noise):
        base = rng.normal(mu, sd)
        jitter = rng.normal(0.0, noise, size=cfg.visits)
        jitter[0] = 0.0
        out.append(BiomarkerSeries(marker, months, base + drift * grade * steps + jitter))
    return out


def _disc_geometry(size: int):
    c = (size - 1) / 2.0
    return c, c, 0.46 * size


def _draw_blob(canvas: np.ndarray, mask: np.ndarray, cy: float, cx: float, radius: float,
               color: Sequence[float], inside: np.ndarray) -> None:
    size = canvas.shape[0]
    yy, xx = np.mgrid[0:size, 0:size]
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    hit = (d2 <= radius ** 2) & inside
    canvas[hit] = color
    mask[hit] = True


def gen_fundus(grade: int, size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """RGB image in [0, 1] and a boolean lesion mask, both ``size x size``."""
    if size < 16:
        raise ValueError("fundus size must be at least 16")
    if grade not in range(5):
        raise ValueError(f"grade must be 0..4, got {grade}")
    cy, cx, rad = _disc_geometry(size)
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    r = np.hypot(yy - cy, xx - cx) / rad
    inside = r < 1.0
    shade = np.clip(1.0 - 0.35 * r ** 2, 0.0, 1.0)
    tint = rng.uniform(0.9, 1.05)
    img = np.stack([0.75 * shade, 0.33 * shade, 0.14 * shade], axis=-1) * tint
    # optic disc
    oy, ox = cy + rng.uniform(-0.1, 0.1) * rad, cx + rng.choice([-1, 1]) * 0.55 * rad
    od = np.hypot(yy - oy, xx - ox) < 0.14 * rad
    img[od] = (0.95, 0.8, 0.55)
    # vessels: low-contrast curves leaving the optic disc
    for _ in range(4):
        angle = rng.uniform(0, 2 * math.pi)
        bend = rng.uniform(-0.6, 0.6)
        t = np.linspace(0.0, 1.1 * rad, 4 * size)
        ang = angle + bend * t / rad
        py, px = oy + t * np.sin(ang), ox + t * np.cos(ang)
        iy, ix = np.round(py).astype(int), np.round(px).astype(int)
        ok = (iy >= 0) & (iy < size) & (ix >= 0) & (ix < size)
        img[iy[ok], ix[ok]] *= 0.8
    mask = np.zeros((size, size), dtype=bool)
    n_ma, n_hem, n_ex = LESION_COUNTS[grade]
    # lesions keep clear of the rim and optic disc
    lesion_zone = (r < 0.8) & (np.hypot(yy - oy, xx - ox) > 0.25 * rad)
    kinds = [("ma", n_ma), ("hem", n_hem), ("ex", n_ex)]
    for kind, count in kinds:
        for _ in range(count):
            for _attempt in range(50):
                rr, th = 0.75 * rad * math.sqrt(rng.uniform()), rng.uniform(0, 2 * math.pi)
                ly, lx = cy + rr * math.sin(th), cx + rr * math.cos(th)
                iy, ix = int(round(ly)), int(round(lx))
                if 0 <= iy < size and 0 <= ix < size and lesion_zone[iy, ix]:
                    break
            if kind == "ma":
                _draw_blob(img, mask, ly, lx, max(1.0, 0.025 * size), (0.12, 0.02, 0.02), lesion_zone)
            elif kind == "hem":
                _draw_blob(img, mask, ly, lx, rng.uniform(0.045, 0.07) * size, (0.2, 0.03, 0.02), lesion_zone)
            else:
                _draw_blob(img, mask, ly, lx, rng.uniform(0.035, 0.055) * size, (1.0, 0.95, 0.45), lesion_zone)
    img = img + rng.normal(0.0, 0.01, size=img.shape)
    img[~inside] = 0.0
    mask &= inside
    return np.clip(img, 0.0, 1.0), mask


def lesion_count(mask: np.ndarray) -> int:
    from scipy import ndimage

    return int(ndimage.label(mask)[1])


def risk_score(series: Sequence[BiomarkerSeries], grade: int, cfg: CohortConfig,
               rng: np.random.Generator) -> float:
    hba1c = next(s for s in series if s.biomarker is Biomarker.HBA1C)
    thick = next(s for s in series if s.biomarker is Biomarker.RETINAL_THICKNESS)
    years = max(hba1c.months[-1] - hba1c.months[0], cfg.visit_interval) / 12.0
    slope = (hba1c.values[-1] - hba1c.values[0]) / years
    drop = thick.values[0] - thick.values[-1]
    a, b, c = cfg.risk_coef
    z = a * slope + b * drop + c * grade + cfg.risk_intercept + rng.normal(0.0, cfg.risk_noise)
    return float(np.clip(1.0 / (1.0 + math.exp(-z)), 0.0, 1.0))


def progression_time(r: float, cfg: CohortConfig, rng: np.random.Generator) -> tuple[float, int]:
    """Higher risk gives stochastically shorter times; a random fraction is censored."""
    t = cfg.time_scale * math.exp(-2.5 * r + 0.25 * rng.normal())
    event = 1
    if rng.uniform() < cfg.censor_fraction:
        event = 0
        t *= rng.uniform(0.2, 1.0)
    return max(t, 0.5), event


def gen_patient(index: int, cfg: CohortConfig, rng: np.random.Generator,
                grade: int | None = None) -> PatientRecord:
    if grade is None:
        grade = int(rng.choice(5, p=np.asarray(cfg.priors)))
    series = gen_biomarkers(grade, cfg, rng)
    image, mask = gen_fundus(grade, cfg.render_size, rng)
    r = risk_score(series, grade, cfg, rng)
    t, event = progression_time(r, cfg, rng)
    age = float(np.clip(rng.normal(58.0, 10.0), 20.0, 90.0))
    duration = float(np.clip(rng.gamma(2.0, 3.0 + grade), 0.5, 40.0))
    return PatientRecord(f"P{index:05d}", image, series, age, duration, grade, r, t, event, mask)


def gen_cohort(cfg: CohortConfig, out_dir: str | Path | None = None) -> list[PatientRecord]:
    """Per-patient RNG streams are spawned from the cohort seed."""
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.n)
    records = [gen_patient(i, cfg, np.random.default_rng(s)) for i, s in enumerate(streams)]
    if out_dir is not None:
        write_cohort(records, out_dir)
    return records


def write_cohort(records: Sequence[PatientRecord], out_dir: str | Path) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rows, bio_rows = [], []
    for rec in records:
        rel = f"images/{rec.patient_id}.png"
        save_image(out / rel, rec.image)
        if rec.mask is not None:
            save_image(out / f"masks/{rec.patient_id}.png", rec.mask.astype(float))
        rec.image_path = rel
        rows.append([rec.patient_id, rel, rec.grade, rec.risk, rec.progression_months, rec.event,
                     rec.age, rec.diabetes_years])
        for s in rec.series:
            bio_rows.extend([rec.patient_id, s.biomarker.value, m, v] for m, v in zip(s.months, s.values))
    write_csv(out / "manifest.csv", MANIFEST_HEADER, rows)
    write_csv(out / "biomarkers.csv", BIOMARKER_HEADER, bio_rows)
    return out / "manifest.csv"
