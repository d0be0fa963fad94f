"""Screening cohort data model: per-image records, visit aggregation, file I/O.

A visit's dense area is the sum over breasts of the per-breast mean across
views; its percent density is the mean over breasts of the per-breast mean
across views. Subjects enter the risk set at their first screening age, which
doubles as the baseline age covariate.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

SIDES = ("Left", "Right")
VIEWS = ("CC", "MLO")
MANUFACTURERS = ("Hologic", "GEHC")
CENTERS = (1, 2)

BIOMARKER_KINDS = ("DenseArea", "PercentDensity")
TRANSFORMS = ("None", "Sqrt")


@dataclass(frozen=True)
class ImageDensityRecord:
    """Dense/breast area measured on a single mammogram."""

    subject_id: str
    visit_index: int
    age: float
    side: str
    view: str
    dense_area: float
    breast_area: float
    manufacturer: str
    center: int

    def __post_init__(self):
        if self.visit_index < 0:
            raise DataError("invalid record: negative visit index")
        if self.side not in SIDES:
            raise DataError(f"invalid record: unknown side {self.side!r}")
        if self.view not in VIEWS:
            raise DataError(f"invalid record: unknown view {self.view!r}")
        if self.manufacturer not in MANUFACTURERS:
            raise DataError(f"invalid record: unknown manufacturer {self.manufacturer!r}")
        if self.center not in CENTERS:
            raise DataError(f"invalid record: unknown center {self.center!r}")
        if self.dense_area < 0:
            raise DataError("invalid record: negative dense area")
        if self.breast_area <= 0:
            raise DataError("invalid record: nonpositive breast area")
        if self.dense_area > self.breast_area:
            raise DataError("invalid record: dense area exceeds breast area")

    @property
    def percent_density(self) -> float:
        return 100.0 * self.dense_area / self.breast_area


@dataclass(frozen=True)
class VisitMeasurement:
    """Visit-level aggregate of the per-image density metrics."""

    age: float
    dense_area_total: float
    percent_density_avg: float

    def __post_init__(self):
        if self.dense_area_total < 0:
            raise DataError("negative visit dense area")
        if not 0.0 <= self.percent_density_avg <= 100.0:
            raise DataError("visit percent density outside [0, 100]")


def aggregate_visit(records: list[ImageDensityRecord]) -> VisitMeasurement:
    """Collapse the images of one subject-visit into a VisitMeasurement.

    Per breast, dense area and percent density are averaged across available
    views (a single view stands for itself); the visit dense area sums the two
    breasts while percent density averages them.
    """
    if not records:
        raise DataError("incomplete visit: no records")
    ids = {(r.subject_id, r.visit_index) for r in records}
    if len(ids) != 1:
        raise DataError("records span multiple subject-visits")
    ages = {r.age for r in records}
    if max(ages) - min(ages) > 1e-9:
        raise DataError("records of one visit carry different ages")
    if len({r.manufacturer for r in records}) != 1:
        raise DataError("incomplete visit: images from multiple manufacturers")
    per_breast_da = {}
    per_breast_pd = {}
    for side in SIDES:
        side_records = [r for r in records if r.side == side]
        if not side_records:
            raise DataError(f"incomplete visit: no image for {side} breast")
        per_breast_da[side] = float(np.mean([r.dense_area for r in side_records]))
        per_breast_pd[side] = float(np.mean([r.percent_density for r in side_records]))
    return VisitMeasurement(
        age=records[0].age,
        dense_area_total=sum(per_breast_da.values()),
        percent_density_avg=float(np.mean(list(per_breast_pd.values()))),
    )


@dataclass
class SubjectRecord:
    """One woman's longitudinal series and time-to-event outcome.

    `times`/`y` hold the modeling-scale biomarker series; `t0` is the entry
    age (first screening visit) and also the baseline age covariate `age0`.
    """

    subject_id: str
    t0: float
    age0: float
    manuf: int
    times: np.ndarray
    y: np.ndarray
    event_age: float
    event_indicator: int
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.times.shape != self.y.shape or self.times.ndim != 1:
            raise DataError("times and y must be equal-length 1-d arrays")
        if self.times.size < 2:
            raise DataError("fewer than two visits")
        if np.any(np.diff(self.times) <= 0):
            raise DataError("visit ages must strictly increase")
        if abs(self.t0 - self.times[0]) > 1e-9:
            raise DataError("entry age must equal the first visit age")
        if self.event_indicator not in (0, 1):
            raise DataError("event indicator must be 0 or 1")
        if self.event_age < self.t0:
            raise DataError("event before entry")
        if self.event_age < self.times[-1] - 1e-9:
            raise DataError("event age precedes the last visit")

    @property
    def n_visits(self) -> int:
        return self.times.size


@dataclass
class Cohort:
    """Immutable-after-construction collection of subjects for modeling."""

    subjects: list[SubjectRecord]
    biomarker_kind: str = "DenseArea"
    transform: str = "Sqrt"
    excluded: list = field(default_factory=list)

    def __post_init__(self):
        if self.biomarker_kind not in BIOMARKER_KINDS:
            raise DataError(f"unknown biomarker kind {self.biomarker_kind!r}")
        if self.transform not in TRANSFORMS:
            raise DataError(f"unknown transform {self.transform!r}")
        ids = [s.subject_id for s in self.subjects]
        if len(ids) != len(set(ids)):
            raise DataError("duplicate subject ids")

    def __len__(self) -> int:
        return len(self.subjects)

    @property
    def n_events(self) -> int:
        return sum(s.event_indicator for s in self.subjects)

    def subject(self, subject_id: str) -> SubjectRecord:
        for s in self.subjects:
            if s.subject_id == subject_id:
                return s
        raise DataError(f"unknown subject id {subject_id!r}")


def _apply_transform(value: float, transform: str) -> float:
    if transform == "Sqrt":
        if value < 0:
            raise DataError("cannot take square root of a negative biomarker value")
        return math.sqrt(value)
    return value


def build_cohort(images: list[ImageDensityRecord], events: dict,
                 biomarker_kind: str = "DenseArea", transform: str = "Sqrt",
                 paper_selection: bool = False) -> Cohort:
    """Assemble a Cohort from per-image records and per-subject outcomes.

    `events` maps subject_id -> (event_age, event_indicator). Subjects that
    fail an invariant (fewer than two visits, entry age outside 40-74 when
    `paper_selection` is on) are excluded with a reason rather than rejected.
    """
    seen = set()
    by_visit: dict = {}
    for rec in images:
        key = (rec.subject_id, rec.visit_index, rec.side, rec.view)
        if key in seen:
            raise DataError(f"duplicate image record {key}")
        seen.add(key)
        by_visit.setdefault((rec.subject_id, rec.visit_index), []).append(rec)

    per_subject: dict = {}
    manuf_by_subject: dict = {}
    for (sid, _vidx), recs in sorted(by_visit.items()):
        measurement = aggregate_visit(recs)
        per_subject.setdefault(sid, []).append(measurement)
        manuf_by_subject.setdefault(sid, []).append((measurement.age, recs[0].manufacturer))

    subjects = []
    excluded = []
    for sid, visits in per_subject.items():
        if sid not in events:
            raise DataError(f"no event entry for subject {sid!r}")
        visits = sorted(visits, key=lambda v: v.age)
        if len(visits) < 2:
            excluded.append((sid, "fewer than two visits"))
            continue
        t0 = visits[0].age
        if paper_selection and not 40.0 <= t0 <= 74.0:
            excluded.append((sid, "entry age outside 40-74"))
            continue
        event_age, delta = events[sid]
        if event_age < t0:
            raise DataError(f"event before entry for subject {sid!r}")
        if biomarker_kind == "DenseArea":
            raw = [v.dense_area_total for v in visits]
        else:
            raw = [v.percent_density_avg for v in visits]
        baseline_manuf = min(manuf_by_subject[sid])[1]
        manuf = 1 if baseline_manuf == "Hologic" else 0
        subjects.append(SubjectRecord(
            subject_id=sid,
            t0=t0,
            age0=t0,
            manuf=manuf,
            times=np.array([v.age for v in visits]),
            y=np.array([_apply_transform(v, transform) for v in raw]),
            event_age=float(event_age),
            event_indicator=int(delta),
        ))
    return Cohort(subjects=subjects, biomarker_kind=biomarker_kind,
                  transform=transform, excluded=excluded)


IMAGE_CSV_COLUMNS = ["subject_id", "visit_index", "age", "side", "view",
                     "dense_area_cm2", "breast_area_cm2", "manufacturer", "center"]
EVENTS_CSV_COLUMNS = ["subject_id", "event_age", "event_indicator"]
COHORT_CSV_COLUMNS = ["subject_id", "age", "y_value", "t0", "age0", "manuf",
                      "event_age", "event_indicator"]


def _check_header(header, expected, path):
    if header != expected:
        missing = [c for c in expected if c not in (header or [])]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
        raise DataError(f"{path}: header {header} does not match schema {expected}")


def read_images_csv(path) -> list[ImageDensityRecord]:
    """Read per-image density records from the documented CSV schema."""
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        _check_header(header, IMAGE_CSV_COLUMNS, path)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                records.append(ImageDensityRecord(
                    subject_id=row[0], visit_index=int(row[1]), age=float(row[2]),
                    side=row[3], view=row[4], dense_area=float(row[5]),
                    breast_area=float(row[6]), manufacturer=row[7], center=int(row[8]),
                ))
            except (IndexError, ValueError) as exc:
                raise DataError(f"{path}: malformed row at line {lineno}: {exc}") from exc
    return records


def read_events_csv(path) -> dict:
    """Read the per-subject (event_age, event_indicator) table."""
    events = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        _check_header(header, EVENTS_CSV_COLUMNS, path)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                events[row[0]] = (float(row[1]), int(row[2]))
            except (IndexError, ValueError) as exc:
                raise DataError(f"{path}: malformed row at line {lineno}: {exc}") from exc
    return events


def write_cohort_csv(cohort: Cohort, path) -> None:
    """Write one row per visit; floats use shortest round-trip formatting."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(COHORT_CSV_COLUMNS)
        for s in cohort.subjects:
            for age, y in zip(s.times, s.y):
                writer.writerow([
                    s.subject_id, repr(float(age)), repr(float(y)), repr(float(s.t0)),
                    repr(float(s.age0)), s.manuf, repr(float(s.event_age)),
                    s.event_indicator,
                ])


def read_cohort_csv(path, biomarker_kind: str = "DenseArea",
                    transform: str = "Sqrt") -> Cohort:
    """Read a visit-level cohort file; inverse of write_cohort_csv."""
    rows_by_subject: dict = {}
    order = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        _check_header(header, COHORT_CSV_COLUMNS, path)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                sid = row[0]
                parsed = (float(row[1]), float(row[2]), float(row[3]), float(row[4]),
                          int(row[5]), float(row[6]), int(row[7]))
            except (IndexError, ValueError) as exc:
                raise DataError(f"{path}: malformed row at line {lineno}: {exc}") from exc
            if sid not in rows_by_subject:
                rows_by_subject[sid] = []
                order.append(sid)
            rows_by_subject[sid].append(parsed)
    subjects = []
    for sid in order:
        rows = rows_by_subject[sid]
        subjects.append(SubjectRecord(
            subject_id=sid,
            t0=rows[0][2],
            age0=rows[0][3],
            manuf=rows[0][4],
            times=np.array([r[0] for r in rows]),
            y=np.array([r[1] for r in rows]),
            event_age=rows[0][5],
            event_indicator=rows[0][6],
        ))
    return Cohort(subjects=subjects, biomarker_kind=biomarker_kind, transform=transform)
