import time

import numpy as np
import pytest

from camil.data_model import TargetSpec, binarize_target
from camil.splitting import site_aware_folds
from camil.synth import SynthConfig, generate_cohort


@pytest.fixture(scope="session")
def small_synth():
    """60-patient cohort with 6 sites; cheap enough for per-test training."""
    cfg = SynthConfig(n_patients=60, n_sites=6, instances_per_bag=(8, 16), d=8, signal_dim_count=3, seed=11)
    cohort, truth = generate_cohort(cfg)
    labels = binarize_target(cohort.targets(), TargetSpec("target"), cohort.patient_ids)
    plan = site_aware_folds(cohort, labels, k=3, seed=0)
    return cohort, truth, labels, plan


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance verdicts ------------------------------------------------------

_VERDICTS: dict[str, str] = {}


class _Verdict:
    def __init__(self, key: str, title: str, budget_s: float | None):
        self.key, self.title, self.budget_s = key, title, budget_s
        self.detail = ""
        self.extra_s = 0.0

    def __enter__(self):
        self.t0 = time.perf_counter()
        _VERDICTS[self.key] = f"FAIL {self.key} {self.title} (did not finish)"
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.t0 + self.extra_s
        over = self.budget_s is not None and elapsed > self.budget_s
        ok = exc_type is None and not over
        budget = "" if self.budget_s is None else f" / {self.budget_s:g} s"
        why = "" if exc_type is None else f"; {exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        if over and exc_type is None:
            why = "; over runtime budget"
        line = f"{'PASS' if ok else 'FAIL'} {self.key} {self.title} [{self.detail}] {elapsed:.1f} s{budget}{why}"
        _VERDICTS[self.key] = line
        print(line)
        if exc_type is None and over:
            raise AssertionError(f"{self.key} took {elapsed:.1f} s, budget {self.budget_s} s")
        return False


@pytest.fixture
def verdict():
    """Context manager that times one acceptance criterion and records its PASS/FAIL line."""
    return _Verdict


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_VERDICTS, key=lambda k: int(k[1:])):
        terminalreporter.write_line(_VERDICTS[key])
