"""Synthetic cohorts with known instance-level signal.

Every bag mixes background instances (unit Gaussian) with signal instances
whose first ``signal_dim_count`` features are shifted by ``signal_strength``.
The fraction of signal instances drives the continuous target and the hazard,
so the ground truth for attention, regression and survival is known exactly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data_model import (
    HRD_MAX,
    Cohort,
    FeatureBag,
    HrdSubscores,
    PatientRecord,
    Sex,
    compose_hrd,
    write_cohort,
)

CENSOR_DAYS = 3650.0


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 200
    n_sites: int = 8
    instances_per_bag: tuple[int, int] = (16, 48)
    d: int = 32
    signal_dim_count: int = 3
    signal_strength: float = 1.0
    label_noise_sd: float = 0.05
    hazard_coef: float = -2.0
    seed: int = 0
    site_shift_sd: float = 0.1
    base_hazard: float = 1.0 / 365.0
    target_kind: str = "fraction"
    with_coords: bool = True

    def __post_init__(self):
        lo, hi = self.instances_per_bag
        if min(self.n_patients, self.n_sites, lo, self.d, self.signal_dim_count) < 1:
            raise ValueError("counts in SynthConfig must be positive")
        if hi < lo:
            raise ValueError("instances_per_bag must be (min, max) with min <= max")
        if self.signal_dim_count > self.d:
            raise ValueError("signal_dim_count must not exceed d")
        if self.n_sites > self.n_patients:
            raise ValueError("more sites than patients")
        if self.label_noise_sd < 0 or self.site_shift_sd < 0 or self.base_hazard <= 0:
            raise ValueError("noise scales must be >= 0 and base_hazard > 0")
        if self.target_kind not in ("fraction", "hrd"):
            raise ValueError("target_kind must be 'fraction' or 'hrd'")


@dataclass(frozen=True)
class SynthTruth:
    """Hidden generator state, one entry per patient id."""

    signal_fraction: dict[str, float]
    signal_flags: dict[str, np.ndarray]
    subscores: dict[str, HrdSubscores] = field(default_factory=dict)

    def attention_on_signal(self, pid: str, attention: np.ndarray) -> float:
        """Share of attention mass placed on signal instances of one bag."""
        return float(np.sum(np.asarray(attention)[self.signal_flags[pid]]))


def _site_sizes(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    p = rng.dirichlet(np.full(k, 5.0))
    return rng.multinomial(n - k, p) + 1


def generate_cohort(cfg: SynthConfig, name: str = "synthetic") -> tuple[Cohort, SynthTruth]:
    rng = np.random.default_rng(cfg.seed)
    width = len(str(cfg.n_patients - 1))
    ids = [f"P{i:0{width}d}" for i in range(cfg.n_patients)]

    sizes = _site_sizes(rng, cfg.n_patients, cfg.n_sites)
    site_of = np.repeat(np.arange(cfg.n_sites), sizes)
    rng.shuffle(site_of)
    site_shift = rng.normal(0.0, cfg.site_shift_sd, size=(cfg.n_sites, cfg.d))

    lo, hi = cfg.instances_per_bag
    bags: dict[str, FeatureBag] = {}
    records: dict[str, PatientRecord] = {}
    fractions: dict[str, float] = {}
    flags_by: dict[str, np.ndarray] = {}
    subs: dict[str, HrdSubscores] = {}
    for i, pid in enumerate(ids):
        site = int(site_of[i])
        site_id = f"S{site:02d}"
        f = float(rng.uniform(0.0, 1.0))
        n = int(rng.integers(lo, hi + 1))
        n_signal = int(round(f * n))
        flags = np.zeros(n, dtype=bool)
        flags[rng.choice(n, size=n_signal, replace=False)] = True
        x = rng.standard_normal((n, cfg.d))
        x[flags, : cfg.signal_dim_count] += cfg.signal_strength
        x += site_shift[site]
        coords = None
        if cfg.with_coords:
            side = math.isqrt(n - 1) + 1
            cells = rng.permutation(side * side)[:n]
            coords = np.stack([cells % side, cells // side], axis=1)

        noise = float(rng.normal(0.0, cfg.label_noise_sd)) if cfg.label_noise_sd > 0 else 0.0
        if cfg.target_kind == "hrd":
            parts = rng.dirichlet(np.full(3, 4.0))
            total = min(max((f + noise) * HRD_MAX, 0.0), HRD_MAX)
            sub = HrdSubscores(*(float(total * p) for p in parts))
            subs[pid] = sub
            target = compose_hrd(sub)
        else:
            target = f + noise

        rate = cfg.base_hazard * math.exp(cfg.hazard_coef * f)
        t = float(rng.exponential(1.0 / rate))
        event = t <= CENSOR_DAYS
        t = min(t, CENSOR_DAYS)
        age = float(np.clip(rng.normal(66.0, 10.0), 18.0, 100.0))
        sex = Sex(int(rng.integers(0, 2)))
        stage = int(rng.integers(1, 5))

        bags[pid] = FeatureBag(pid, site_id, x.astype(np.float32), coords)
        records[pid] = PatientRecord(pid, site_id, target, age, sex, stage, t, event)
        fractions[pid] = f
        flags_by[pid] = flags

    return Cohort(name, bags, records), SynthTruth(fractions, flags_by, subs)


def write_truth(truth: SynthTruth, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "signal_fraction", "n_instances", "signal_instances"])
        for pid in sorted(truth.signal_fraction):
            flags = truth.signal_flags[pid]
            idx = ";".join(str(i) for i in np.flatnonzero(flags))
            w.writerow([pid, repr(truth.signal_fraction[pid]), flags.size, idx])


def read_truth(path: str | Path) -> SynthTruth:
    fractions, flags = {}, {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            pid = row["patient_id"]
            fractions[pid] = float(row["signal_fraction"])
            f = np.zeros(int(row["n_instances"]), dtype=bool)
            if row["signal_instances"]:
                f[[int(i) for i in row["signal_instances"].split(";")]] = True
            flags[pid] = f
    return SynthTruth(fractions, flags)


def write_synthetic(cohort: Cohort, truth: SynthTruth, out_dir: str | Path, cfg: SynthConfig | None = None) -> dict[str, Path]:
    """Write features/, clinical.csv and truth.csv under ``out_dir``."""
    out = Path(out_dir)
    paths = {
        "features_dir": out / "features",
        "clinical_table": out / "clinical.csv",
        "truth": out / "truth.csv",
    }
    write_cohort(cohort, paths["features_dir"], paths["clinical_table"])
    write_truth(truth, paths["truth"])
    if cfg is not None:
        paths["config"] = out / "synth_config.csv"
        with open(paths["config"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for k, v in asdict(cfg).items():
                w.writerow([k, v])
    return paths
