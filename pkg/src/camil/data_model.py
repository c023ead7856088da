"""Cohorts, feature bags, clinical records and target binarization.

On-disk formats
---------------
Feature file (one per slide, ``<patient_id>.milf`` or ``<patient_id>__<slide>.milf``)::

    magic  b"MILF"
    u16    format version (1)
    u32    n_instances
    u32    d
    u8     coord_flag
    [i32 x n_instances x 2]  tile grid coordinates, present iff coord_flag == 1
    f32 x n_instances x d    features, row-major

All integers and floats are little-endian.

Clinical CSV columns: ``patient_id, site_id, target, age, sex, stage,
survival_days, event``. An empty cell means missing.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import DegenerateError, FormatError

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"MILF"
FEATURE_VERSION = 1
FEATURE_SUFFIX = ".milf"
SLIDE_SEPARATOR = "__"
_HEADER = struct.Struct("<4sHIIB")

CLINICAL_COLUMNS = (
    "patient_id",
    "site_id",
    "target",
    "age",
    "sex",
    "stage",
    "survival_days",
    "event",
)

HRD_MAX = 103.0


class Sex(enum.IntEnum):
    FEMALE = 0
    MALE = 1


@dataclass(frozen=True, eq=False)
class FeatureBag:
    patient_id: str
    site_id: str
    features: np.ndarray
    tile_coords: np.ndarray | None = None

    def __post_init__(self):
        feats = np.asarray(self.features)
        if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
            raise FormatError(
                f"bag {self.patient_id!r}: features must be a non-empty 2-D matrix, "
                f"got shape {feats.shape}"
            )
        if feats.dtype != np.float32:
            feats = feats.astype(np.float32)
        if not np.isfinite(feats).all():
            raise FormatError(f"bag {self.patient_id!r}: non-finite feature values")
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)
        if self.tile_coords is not None:
            coords = np.asarray(self.tile_coords, dtype=np.int32).reshape(-1, 2)
            if coords.shape[0] != feats.shape[0]:
                raise FormatError(
                    f"bag {self.patient_id!r}: {coords.shape[0]} coords for "
                    f"{feats.shape[0]} instances"
                )
            if len(np.unique(coords, axis=0)) != len(coords):
                raise FormatError(f"bag {self.patient_id!r}: duplicate tile coordinates")
            coords.setflags(write=False)
            object.__setattr__(self, "tile_coords", coords)

    @property
    def n_instances(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    site_id: str
    target_value: float
    age: float | None = None
    sex: Sex | None = None
    stage: int | None = None
    survival_days: float | None = None
    event: bool | None = None

    def __post_init__(self):
        if self.age is not None and not self.age >= 0:
            raise FormatError(f"patient {self.patient_id!r}: age must be >= 0")
        if self.stage is not None and self.stage not in (1, 2, 3, 4):
            raise FormatError(f"patient {self.patient_id!r}: stage must be in 1..4")
        if self.survival_days is not None and not self.survival_days >= 0:
            raise FormatError(f"patient {self.patient_id!r}: survival_days must be >= 0")

    @property
    def has_survival(self) -> bool:
        return (
            self.survival_days is not None
            and self.survival_days > 0
            and self.event is not None
        )


class TargetKind(str, enum.Enum):
    FIXED_CUTOFF = "fixed_cutoff"
    MEDIAN_SPLIT = "median_split"


class Direction(str, enum.Enum):
    POSITIVE_IF_GE = "positive_if_ge"
    POSITIVE_IF_GT = "positive_if_gt"


@dataclass(frozen=True)
class TargetSpec:
    name: str
    kind: TargetKind = TargetKind.MEDIAN_SPLIT
    cutoff: float | None = None
    direction: Direction = Direction.POSITIVE_IF_GT

    def __post_init__(self):
        object.__setattr__(self, "kind", TargetKind(self.kind))
        object.__setattr__(self, "direction", Direction(self.direction))
        if self.kind is TargetKind.FIXED_CUTOFF and self.cutoff is None:
            raise ValueError("fixed_cutoff target requires a cutoff")
        if self.kind is TargetKind.MEDIAN_SPLIT and self.cutoff is not None:
            raise ValueError("median_split cutoff is fitted, not declared")


HRD_TARGET = TargetSpec("HRD", TargetKind.FIXED_CUTOFF, 42.0, Direction.POSITIVE_IF_GE)


@dataclass(frozen=True)
class HrdSubscores:
    loh: float
    tai: float
    lst: float

    def __post_init__(self):
        for name in ("loh", "tai", "lst"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"HRD subscore {name} must be finite and >= 0, got {v}")


def compose_hrd(sub: HrdSubscores) -> float:
    """HRD composite score: LOH + TAI + LST."""
    return float(sub.loh) + float(sub.tai) + float(sub.lst)


@dataclass(frozen=True)
class CohortReport:
    n_slides: int
    n_features: int
    n_target_overlap: int
    records_without_bag: tuple[str, ...] = ()
    bags_without_record: tuple[str, ...] = ()


@dataclass(frozen=True)
class Cohort:
    name: str
    bags: Mapping[str, FeatureBag]
    records: Mapping[str, PatientRecord]
    report: CohortReport | None = field(default=None, compare=False)

    def __post_init__(self):
        missing = sorted(set(self.bags) - set(self.records))
        if missing:
            raise FormatError(f"bags without clinical record: {missing[:5]}")
        widths = {b.d for b in self.bags.values()}
        if len(widths) > 1:
            raise FormatError(f"dimension mismatch across bags: {sorted(widths)}")

    @property
    def patient_ids(self) -> list[str]:
        """Sorted ids of patients that have a bag."""
        return sorted(self.bags)

    @property
    def d(self) -> int:
        return next(iter(self.bags.values())).d

    def targets(self, ids: Iterable[str] | None = None) -> dict[str, float]:
        ids = self.patient_ids if ids is None else ids
        return {pid: self.records[pid].target_value for pid in ids}

    def sites(self) -> dict[str, str]:
        return {pid: self.records[pid].site_id for pid in self.patient_ids}

    def subset(self, ids: Iterable[str]) -> "Cohort":
        ids = set(ids)
        return Cohort(
            self.name,
            {k: v for k, v in self.bags.items() if k in ids},
            {k: v for k, v in self.records.items() if k in ids},
        )


# -- feature files -----------------------------------------------------------


def write_feature_file(path: str | Path, features: np.ndarray, coords=None) -> None:
    feats = np.ascontiguousarray(features, dtype="<f4")
    if feats.ndim != 2:
        raise ValueError("features must be 2-D")
    n, d = feats.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, n, d, coords is not None))
        if coords is not None:
            fh.write(np.ascontiguousarray(coords, dtype="<i4").reshape(n, 2).tobytes())
        fh.write(feats.tobytes())


def read_feature_file(path: str | Path) -> tuple[np.ndarray, np.ndarray | None]:
    """Return ``(features, coords_or_None)``; raises FormatError on any defect."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, n, d, flag = _HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    if flag not in (0, 1):
        raise FormatError(f"{path}: bad coord flag {flag}")
    if n < 1 or d < 1:
        raise FormatError(f"{path}: empty feature matrix ({n} x {d})")
    offset = _HEADER.size
    coords = None
    if flag:
        nbytes = n * 2 * 4
        if len(data) < offset + nbytes:
            raise FormatError(f"{path}: truncated coordinate block")
        coords = np.frombuffer(data, "<i4", n * 2, offset).reshape(n, 2).astype(np.int32)
        offset += nbytes
    expected = n * d * 4
    actual = len(data) - offset
    if actual != expected:
        raise FormatError(
            f"{path}: dimension mismatch, header declares {n} x {d} "
            f"({expected} bytes) but payload has {actual} bytes"
        )
    feats = np.frombuffer(data, "<f4", n * d, offset).reshape(n, d).astype(np.float32)
    if not np.isfinite(feats).all():
        raise FormatError(f"{path}: non-finite feature values")
    return feats, coords


def patient_of(path: Path) -> str:
    return path.stem.split(SLIDE_SEPARATOR, 1)[0]


# -- clinical CSV ------------------------------------------------------------


def _opt_float(s: str) -> float | None:
    s = s.strip()
    return None if s == "" else float(s)


def _parse_sex(s: str) -> Sex | None:
    s = s.strip().lower()
    if s in ("", "unknown", "na", "nan"):
        return None
    if s in ("0", "female", "f"):
        return Sex.FEMALE
    if s in ("1", "male", "m"):
        return Sex.MALE
    raise FormatError(f"unrecognised sex value {s!r}")


def _parse_stage(s: str) -> int | None:
    s = s.strip().lower()
    if s in ("", "unknown", "na", "nan"):
        return None
    return int(float(s))


def _parse_event(s: str) -> bool | None:
    s = s.strip().lower()
    if s == "":
        return None
    if s in ("1", "true", "yes"):
        return True
    if s in ("0", "false", "no"):
        return False
    raise FormatError(f"unrecognised event value {s!r}")


def read_clinical_table(path: str | Path) -> dict[str, PatientRecord]:
    """Parse the clinical CSV. Rows with a missing target are skipped."""
    records: dict[str, PatientRecord] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing_cols = set(CLINICAL_COLUMNS) - set(reader.fieldnames or ())
        if missing_cols:
            raise FormatError(f"{path}: missing columns {sorted(missing_cols)}")
        seen: set[str] = set()
        for lineno, row in enumerate(reader, start=2):
            pid = row["patient_id"].strip()
            if not pid:
                raise FormatError(f"{path}:{lineno}: empty patient_id")
            if pid in seen:
                raise FormatError(f"{path}:{lineno}: duplicate patient_id {pid!r}")
            seen.add(pid)
            target = _opt_float(row["target"])
            if target is None:
                continue
            if not math.isfinite(target):
                raise FormatError(f"{path}:{lineno}: non-finite target")
            try:
                records[pid] = PatientRecord(
                    patient_id=pid,
                    site_id=row["site_id"].strip(),
                    target_value=target,
                    age=_opt_float(row["age"]),
                    sex=_parse_sex(row["sex"]),
                    stage=_parse_stage(row["stage"]),
                    survival_days=_opt_float(row["survival_days"]),
                    event=_parse_event(row["event"]),
                )
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return records


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, enum.IntEnum):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_clinical_table(path: str | Path, records: Iterable[PatientRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CLINICAL_COLUMNS)
        for r in records:
            w.writerow(
                [
                    r.patient_id,
                    r.site_id,
                    _fmt(r.target_value),
                    _fmt(r.age),
                    _fmt(r.sex),
                    _fmt(r.stage),
                    _fmt(r.survival_days),
                    _fmt(r.event),
                ]
            )


def write_cohort(cohort: Cohort, features_dir: str | Path, clinical_path: str | Path) -> None:
    """Persist a cohort in the feature-file + clinical-CSV layout."""
    features_dir = Path(features_dir)
    features_dir.mkdir(parents=True, exist_ok=True)
    for pid in cohort.patient_ids:
        bag = cohort.bags[pid]
        write_feature_file(features_dir / f"{pid}{FEATURE_SUFFIX}", bag.features, bag.tile_coords)
    write_clinical_table(clinical_path, (cohort.records[p] for p in sorted(cohort.records)))


def load_cohort(
    features_dir: str | Path,
    clinical_table: str | Path,
    target: TargetSpec,
    name: str | None = None,
    merge_slides: str = "concat",
) -> Cohort:
    """Load every patient that has both a feature file and a non-missing target.

    Several files for one patient (``<pid>__<slide>.milf``) are merged: ``concat``
    stacks all instances into one bag (coordinates are dropped because grid
    positions of different slides collide); ``first`` keeps the first slide in
    sorted filename order.
    """
    features_dir = Path(features_dir)
    if not features_dir.is_dir():
        raise FileNotFoundError(f"feature directory not found: {features_dir}")
    if merge_slides not in ("concat", "first"):
        raise ValueError(f"merge_slides must be 'concat' or 'first', got {merge_slides!r}")
    records = read_clinical_table(clinical_table)

    files = sorted(features_dir.glob(f"*{FEATURE_SUFFIX}"))
    by_patient: dict[str, list[Path]] = {}
    for f in files:
        by_patient.setdefault(patient_of(f), []).append(f)

    bags: dict[str, FeatureBag] = {}
    width = None
    for pid, paths in sorted(by_patient.items()):
        if pid not in records:
            continue
        if merge_slides == "first":
            paths = paths[:1]
        parts = [read_feature_file(p) for p in paths]
        for (feats, _), p in zip(parts, paths):
            if width is None:
                width = feats.shape[1]
            elif feats.shape[1] != width:
                raise FormatError(f"{p}: dimension mismatch, d={feats.shape[1]} vs {width}")
        if len(parts) == 1:
            feats, coords = parts[0]
        else:
            feats, coords = np.concatenate([f for f, _ in parts]), None
        rec = records[pid]
        bags[pid] = FeatureBag(pid, rec.site_id, feats, coords)

    report = CohortReport(
        n_slides=len(files),
        n_features=len(by_patient),
        n_target_overlap=len(bags),
        records_without_bag=tuple(sorted(set(records) - set(by_patient))),
        bags_without_record=tuple(sorted(set(by_patient) - set(records))),
    )
    log.info(
        "cohort %s: slides=%d features=%d target overlap=%d",
        name or target.name,
        report.n_slides,
        report.n_features,
        report.n_target_overlap,
    )
    if report.records_without_bag:
        log.warning("%d patients have a target but no features", len(report.records_without_bag))
    kept = {pid: records[pid] for pid in bags}
    return Cohort(name or target.name, bags, kept, report)


# -- binarization ------------------------------------------------------------


def lower_median(values: Iterable[float]) -> float:
    """Median without interpolation; the lower of the two middle values for even counts."""
    v = np.sort(np.asarray(list(values), dtype=np.float64))
    if v.size == 0:
        raise ValueError("median of empty sequence")
    return float(v[(v.size - 1) // 2])


def fit_cutoff(values: Mapping[str, float], spec: TargetSpec, fit_ids: Iterable[str]) -> float:
    if spec.kind is TargetKind.FIXED_CUTOFF:
        return float(spec.cutoff)
    fit = [values[i] for i in fit_ids]
    if not fit:
        raise ValueError("median_split requires a non-empty fit set")
    if min(fit) == max(fit):
        raise DegenerateError("degenerate target: all fit values are identical")
    return lower_median(fit)


def apply_cutoff(value: float, cutoff: float, direction: Direction) -> int:
    if direction is Direction.POSITIVE_IF_GE:
        return int(value >= cutoff)
    return int(value > cutoff)


def binarize_target(
    values: Mapping[str, float], spec: TargetSpec, fit_ids: Iterable[str]
) -> dict[str, int]:
    """Label every patient in ``values``; the cutoff only ever sees ``fit_ids``."""
    cutoff = fit_cutoff(values, spec, fit_ids)
    return {pid: apply_cutoff(v, cutoff, spec.direction) for pid, v in values.items()}
