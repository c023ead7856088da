"""Comparison metrics and the statistical tests used to compare model heads."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateError
from .special import f_sf, t_sf, t_two_sided

Z95 = 1.96


@dataclass(frozen=True)
class ScoreSet:
    patient_ids: tuple[str, ...]
    scores: np.ndarray
    labels: np.ndarray
    truth_continuous: np.ndarray | None = None

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if s.ndim != 1 or s.shape != y.shape or len(self.patient_ids) != s.size:
            raise ValueError("scores, labels and patient_ids must be equal-length vectors")
        if not np.isin(y, (0, 1)).all():
            raise ValueError("labels must be 0/1")
        object.__setattr__(self, "patient_ids", tuple(self.patient_ids))
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", y)
        if self.truth_continuous is not None:
            t = np.asarray(self.truth_continuous, dtype=np.float64)
            if t.shape != s.shape:
                raise ValueError("truth_continuous must align with scores")
            object.__setattr__(self, "truth_continuous", t)

    def require_both_classes(self) -> None:
        n_pos = int(self.labels.sum())
        if n_pos == 0 or n_pos == self.labels.size:
            raise DegenerateError("single-class input: both classes are required")


def average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    xs = x[order]
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], xs.size]
    # positions are 0-based; mean 1-based rank of a tie block [s, e) is (s + e + 1) / 2
    block_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(x.size)
    ranks[order] = np.repeat(block_rank, ends - starts)
    return ranks


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; tied positive/negative pairs count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateError("single-class input: AUROC undefined")
    r = average_ranks(s)
    u = r[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Step-interpolated area under the precision-recall curve."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise DegenerateError("single-class input: AUPRC undefined")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(s[1:] != s[:-1]), s.size - 1]
    tps = np.cumsum(y)[last]
    precision = tps / (last + 1.0)
    recall = tps / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def binary_metrics(s: ScoreSet) -> dict[str, float]:
    s.require_both_classes()
    return {"auroc": auroc(s.scores, s.labels), "auprc": average_precision(s.scores, s.labels)}


def regression_metrics(s: ScoreSet) -> dict[str, float]:
    if s.truth_continuous is None:
        raise ValueError("regression metrics need truth_continuous")
    if s.scores.size < 3:
        raise ValueError("regression metrics need at least 3 points")
    truth = s.truth_continuous
    ss_tot = float(np.sum((truth - truth.mean()) ** 2))
    if ss_tot == 0:
        raise DegenerateError("constant truth: R^2 undefined")
    r2 = 1.0 - float(np.sum((truth - s.scores) ** 2)) / ss_tot
    rs, rt = average_ranks(s.scores), average_ranks(truth)
    rs -= rs.mean()
    rt -= rt.mean()
    denom = math.sqrt(float(rs @ rs) * float(rt @ rt))
    rho = float(rs @ rt) / denom if denom > 0 else 0.0
    return {"r2": r2, "spearman_rho": rho}


def minmax_normalize(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        raise DegenerateError("degenerate range: constant scores cannot be min-max normalized")
    return (x - lo) / (hi - lo)


@dataclass(frozen=True)
class SeparationStats:
    median_pos: float
    iqr_pos: float
    median_neg: float
    iqr_neg: float

    @property
    def delta(self) -> float:
        return abs(self.median_pos - self.median_neg)


def _median_iqr(x: np.ndarray) -> tuple[float, float]:
    q25, q50, q75 = np.percentile(x, [25, 50, 75])
    return float(q50), float(q75 - q25)


def separation_stats(s: ScoreSet) -> SeparationStats:
    """Class medians/IQRs of scores min-max normalized over the whole model output."""
    s.require_both_classes()
    z = minmax_normalize(s.scores)
    pos = _median_iqr(z[s.labels == 1])
    neg = _median_iqr(z[s.labels == 0])
    return SeparationStats(pos[0], pos[1], neg[0], neg[1])


def improvement_pct(delta_reg: float, delta_clf: float) -> float:
    """Relative gain in median separation of regression over classification, in percent."""
    if delta_clf <= 0:
        raise DegenerateError("classification separation must be positive")
    return 100.0 * (delta_reg - delta_clf) / delta_clf


# -- hypothesis tests --------------------------------------------------------


@dataclass(frozen=True)
class StatResult:
    kind: str
    statistic: float
    dof: float | tuple[float, float]
    p_value: float
    alpha_effective: float = 0.05
    zero_variance: bool = False

    @property
    def significant(self) -> bool:
        return self.p_value < self.alpha_effective


def bonferroni_alpha(n_hypotheses: int, alpha: float = 0.05) -> float:
    if n_hypotheses < 1:
        raise ValueError("need at least one hypothesis")
    return alpha / n_hypotheses


def rm_anova(matrix, alpha: float = 0.05) -> StatResult:
    """One-way repeated-measures ANOVA; rows are subjects (folds), columns treatments (models)."""
    x = np.asarray(matrix, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise ValueError("rm_anova needs an n x k matrix with n >= 2 and k >= 2")
    if not np.isfinite(x).all():
        raise ValueError("rm_anova needs a complete, finite matrix")
    n, k = x.shape
    grand = x.mean()
    ss_treat = n * float(np.sum((x.mean(axis=0) - grand) ** 2))
    ss_subj = k * float(np.sum((x.mean(axis=1) - grand) ** 2))
    resid = x - x.mean(axis=1, keepdims=True) - x.mean(axis=0, keepdims=True) + grand
    ss_err = float(np.sum(resid**2))
    df1, df2 = k - 1, (k - 1) * (n - 1)
    # rounding noise when the true sums of squares are zero
    scale = max(ss_treat + ss_subj + ss_err, 1e-300)
    if ss_err <= 1e-14 * scale:
        if ss_treat <= 1e-14 * scale:
            raise DegenerateError("degenerate: zero treatment and zero error variance")
        return StatResult("rm_anova", math.inf, (df1, df2), 0.0, alpha, zero_variance=True)
    if ss_treat <= 1e-14 * scale:
        ss_treat = 0.0
    f = (ss_treat / df1) / (ss_err / df2)
    return StatResult("rm_anova", f, (df1, df2), f_sf(f, df1, df2), alpha)


def _p_from_t(t: float, df: float, sided: str) -> float:
    if sided == "two-sided":
        return t_two_sided(t, df)
    if sided == "greater":
        return t_sf(t, df)
    if sided == "less":
        return t_sf(-t, df)
    raise ValueError(f"sided must be 'two-sided', 'greater' or 'less', got {sided!r}")


def _degenerate_t(mean_diff: float, sided: str) -> tuple[float, float]:
    if mean_diff == 0:
        return 0.0, 1.0
    t = math.copysign(math.inf, mean_diff)
    return t, _p_from_t(t, 1.0, sided)


def paired_ttest(a, b, sided: str = "two-sided", n_hypotheses: int = 1, alpha: float = 0.05) -> StatResult:
    """Dependent t-test on ``a - b``; ``greater`` tests mean(a) > mean(b)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("paired t-test needs two equal-length vectors of length >= 2")
    d = a - b
    n = d.size
    kind = "paired_t_two_sided" if sided == "two-sided" else "paired_t_one_sided"
    alpha_eff = bonferroni_alpha(n_hypotheses, alpha)
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0:
        t, p = _degenerate_t(mean, sided)
        return StatResult(kind, t, n - 1, p, alpha_eff, zero_variance=True)
    t = mean / (sd / math.sqrt(n))
    return StatResult(kind, t, n - 1, _p_from_t(t, n - 1, sided), alpha_eff)


def welch_ttest(a, b, sided: str = "two-sided", n_hypotheses: int = 1, alpha: float = 0.05) -> StatResult:
    """Unequal-variance two-sample t-test with Welch-Satterthwaite degrees of freedom."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("independent t-test needs at least 2 values per group")
    kind = "independent_t_two_sided" if sided == "two-sided" else "independent_t_one_sided"
    alpha_eff = bonferroni_alpha(n_hypotheses, alpha)
    va = float(a.var(ddof=1)) / a.size
    vb = float(b.var(ddof=1)) / b.size
    diff = float(a.mean() - b.mean())
    se2 = va + vb
    if se2 == 0:
        t, p = _degenerate_t(diff, sided)
        return StatResult(kind, t, a.size + b.size - 2, p, alpha_eff, zero_variance=True)
    t = diff / math.sqrt(se2)
    df = se2**2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    return StatResult(kind, t, df, _p_from_t(t, df, sided), alpha_eff)


def t_tests(a, b, kind: str = "paired", sided: str = "two-sided", n_hypotheses: int = 1) -> StatResult:
    if kind == "paired":
        return paired_ttest(a, b, sided, n_hypotheses)
    if kind == "independent":
        return welch_ttest(a, b, sided, n_hypotheses)
    raise ValueError(f"kind must be 'paired' or 'independent', got {kind!r}")


def class_score_ttest(s: ScoreSet) -> StatResult:
    """Welch two-sided test of positive-class scores against negative-class scores."""
    s.require_both_classes()
    return welch_ttest(s.scores[s.labels == 1], s.scores[s.labels == 0])


def mean_ci95(values: Iterable[float]) -> tuple[float, float]:
    """Mean and normal-approximation half-width ``1.96 * sd / sqrt(n)`` over folds."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ValueError("no values")
    half = Z95 * float(v.std(ddof=1)) / math.sqrt(v.size) if v.size > 1 else 0.0
    return float(v.mean()), half


# -- reports -----------------------------------------------------------------


@dataclass(frozen=True)
class MetricReport:
    fold: int
    auroc: float
    auprc: float
    r2: float | None = None
    spearman_rho: float | None = None
    separation: SeparationStats | None = None
    improvement_pct: float | None = None

    @property
    def separation_delta(self) -> float | None:
        return None if self.separation is None else self.separation.delta


def metric_report(s: ScoreSet, fold: int) -> MetricReport:
    bm = binary_metrics(s)
    r2 = rho = None
    if s.truth_continuous is not None and s.scores.size >= 3:
        try:
            rm = regression_metrics(s)
            r2, rho = rm["r2"], rm["spearman_rho"]
        except DegenerateError:
            pass
    try:
        sep = separation_stats(s)
    except DegenerateError:
        sep = None
    return MetricReport(fold, bm["auroc"], bm["auprc"], r2, rho, sep)


SUMMARY_COLUMNS = ("cohort", "model", "auroc", "auroc_ci95", "auprc", "auprc_ci95", "p_value")


def summary_row(cohort: str, model: str, reports: Sequence[MetricReport], pooled: ScoreSet) -> dict:
    """One row in the AUROC/AUPRC +- 95% CI layout, with the class-score t-test p-value."""
    au, au_ci = mean_ci95(r.auroc for r in reports)
    ap, ap_ci = mean_ci95(r.auprc for r in reports)
    p = class_score_ttest(pooled).p_value
    return {
        "cohort": cohort,
        "model": model,
        "auroc": au,
        "auroc_ci95": au_ci,
        "auprc": ap,
        "auprc_ci95": ap_ci,
        "p_value": p,
    }


def write_csv(path: str | Path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
