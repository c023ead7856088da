"""Fold-level orchestration shared by the command line and the end-to-end tests."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .attmil import ModelParams, predict_scores
from .data_model import Cohort, TargetSpec, binarize_target
from .errors import DegenerateError
from .evaluation import (
    MetricReport,
    ScoreSet,
    improvement_pct,
    mean_ci95,
    metric_report,
    paired_ttest,
    rm_anova,
    summary_row,
)
from .splitting import FoldPlan
from .training import TrainLog, TrainPreset, ablate, get_preset, train_model

log = logging.getLogger(__name__)


def resolve_preset(name: str, **overrides) -> TrainPreset:
    """``camil_regression+use_sgd`` style names resolve to an ablated preset."""
    base, *toggles = name.split("+")
    preset = get_preset(base, **overrides)
    for t in toggles:
        preset = ablate(preset, t)
    return preset


def fold_seed(seed: int, fold: int) -> tuple[int, int]:
    return (int(seed), int(fold))


def _train_one(job) -> tuple[int, ModelParams, TrainLog]:
    cohort, plan, fold, preset, seed, target = job
    params, tlog = train_model(cohort, plan, fold, preset, fold_seed(seed, fold), target)
    return fold, params, tlog


def train_folds(
    cohort: Cohort,
    plan: FoldPlan,
    preset: TrainPreset,
    seed: int,
    folds: Sequence[int] | None = None,
    target: TargetSpec | None = None,
    jobs: int = 1,
) -> dict[int, tuple[ModelParams, TrainLog]]:
    """Train one model per fold; with ``jobs > 1`` folds run in worker processes."""
    folds = list(range(plan.k) if folds is None else folds)
    work = [(cohort, plan, f, preset, seed, target) for f in folds]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(work))) as pool:
            done = list(pool.map(_train_one, work))
    else:
        done = [_train_one(w) for w in work]
    return {f: (p, lg) for f, p, lg in done}


def test_scoreset(
    cohort: Cohort, plan: FoldPlan, fold: int, model: ModelParams, target: TargetSpec | None = None
) -> ScoreSet:
    """Scores for the fold's test patients only.

    Only test bags are touched. Binary labels use the cutoff fitted on the
    fold's training targets, as in training.
    """
    entry = plan.folds[fold]
    test_ids = sorted(p for p in entry.test_ids if plan.role(fold, p) == "test")
    values = {p: cohort.records[p].target_value for p in cohort.records}
    labels = binarize_target(values, target or TargetSpec("target"), entry.train_ids)
    scores = predict_scores(model, [cohort.bags[p] for p in test_ids])
    return ScoreSet(
        tuple(test_ids),
        scores,
        np.array([labels[p] for p in test_ids]),
        np.array([values[p] for p in test_ids]),
    )


@dataclass
class ModelResult:
    name: str
    scoresets: dict[int, ScoreSet]

    @property
    def reports(self) -> list[MetricReport]:
        return [metric_report(s, f) for f, s in sorted(self.scoresets.items())]

    @property
    def pooled(self) -> ScoreSet:
        sets = [self.scoresets[f] for f in sorted(self.scoresets)]
        return ScoreSet(
            tuple(p for s in sets for p in s.patient_ids),
            np.concatenate([s.scores for s in sets]),
            np.concatenate([s.labels for s in sets]),
            np.concatenate([s.truth_continuous for s in sets]),
        )

    def auroc_vector(self) -> np.ndarray:
        return np.array([r.auroc for r in self.reports])


def per_fold_rows(cohort_name: str, result: ModelResult) -> list[dict]:
    rows = []
    for r in result.reports:
        sep = r.separation
        rows.append(
            {
                "cohort": cohort_name,
                "model": result.name,
                "fold": r.fold,
                "auroc": r.auroc,
                "auprc": r.auprc,
                "r2": "" if r.r2 is None else r.r2,
                "spearman_rho": "" if r.spearman_rho is None else r.spearman_rho,
                "separation_delta": "" if sep is None else sep.delta,
            }
        )
    return rows


PER_FOLD_COLUMNS = ("cohort", "model", "fold", "auroc", "auprc", "r2", "spearman_rho", "separation_delta")
SCORE_COLUMNS = ("fold", "patient_id", "score", "label", "target")
ANOVA_COLUMNS = ("cohort", "metric", "f_value", "dof1", "dof2", "p_value", "significant")
TTEST_COLUMNS = ("cohort", "model_a", "model_b", "t_value", "dof", "p_value", "alpha", "significant")
SEPARATION_COLUMNS = (
    "cohort", "model", "median_pos", "iqr_pos", "median_neg", "iqr_neg", "separation_delta", "improvement_pct",
)
REGRESSION_COLUMNS = ("cohort", "model", "r2", "r2_ci95", "spearman_rho", "spearman_ci95")
RANGE_COLUMNS = ("cohort", "model", "pred_min", "pred_max", "pred_range", "auroc")


def score_rows(result: ModelResult) -> list[dict]:
    rows = []
    for f, s in sorted(result.scoresets.items()):
        for pid, sc, y, t in zip(s.patient_ids, s.scores, s.labels, s.truth_continuous):
            rows.append({"fold": f, "patient_id": pid, "score": float(sc), "label": int(y), "target": float(t)})
    return rows


def comparison_tables(cohort_name: str, results: Sequence[ModelResult], reference: str) -> dict[str, list[dict]]:
    """Summary, repeated-measures ANOVA, paired t-tests, separation and R2 tables."""
    by_name = {r.name: r for r in results}
    tables: dict[str, list[dict]] = {
        "summary": [summary_row(cohort_name, r.name, r.reports, r.pooled) for r in results],
        "per_fold": [row for r in results for row in per_fold_rows(cohort_name, r)],
    }

    aurocs = np.column_stack([r.auroc_vector() for r in results])
    anova = []
    if aurocs.shape[1] >= 2 and aurocs.shape[0] >= 2:
        try:
            st = rm_anova(aurocs)
            anova.append(
                {
                    "cohort": cohort_name, "metric": "auroc", "f_value": st.statistic,
                    "dof1": st.dof[0], "dof2": st.dof[1], "p_value": st.p_value,
                    "significant": int(st.significant),
                }
            )
        except DegenerateError as exc:
            log.warning("ANOVA skipped: %s", exc)
    tables["anova"] = anova

    ttests = []
    if reference in by_name:
        others = [r for r in results if r.name != reference]
        ref = by_name[reference].auroc_vector()
        for r in others:
            st = paired_ttest(ref, r.auroc_vector(), "two-sided", n_hypotheses=len(others))
            ttests.append(
                {
                    "cohort": cohort_name, "model_a": reference, "model_b": r.name, "t_value": st.statistic,
                    "dof": st.dof, "p_value": st.p_value, "alpha": st.alpha_effective,
                    "significant": int(st.significant),
                }
            )
    tables["ttests"] = ttests

    seps = {}
    for r in results:
        stats = [rep.separation for rep in r.reports if rep.separation is not None]
        if stats:
            seps[r.name] = {
                "median_pos": float(np.mean([s.median_pos for s in stats])),
                "iqr_pos": float(np.mean([s.iqr_pos for s in stats])),
                "median_neg": float(np.mean([s.median_neg for s in stats])),
                "iqr_neg": float(np.mean([s.iqr_neg for s in stats])),
                "separation_delta": float(np.mean([s.delta for s in stats])),
            }
    clf = next((n for n in seps if not n.endswith("regression") and "+" not in n), None)
    sep_rows = []
    for name, s in seps.items():
        imp = ""
        if clf is not None and name != clf and seps[clf]["separation_delta"] > 0:
            imp = improvement_pct(s["separation_delta"], seps[clf]["separation_delta"])
        sep_rows.append({"cohort": cohort_name, "model": name, **s, "improvement_pct": imp})
    tables["separation"] = sep_rows

    reg_rows = []
    for r in results:
        r2 = [rep.r2 for rep in r.reports if rep.r2 is not None]
        rho = [rep.spearman_rho for rep in r.reports if rep.spearman_rho is not None]
        if r2:
            m, ci = mean_ci95(r2)
            mr, cir = mean_ci95(rho)
            reg_rows.append(
                {"cohort": cohort_name, "model": r.name, "r2": m, "r2_ci95": ci, "spearman_rho": mr, "spearman_ci95": cir}
            )
    tables["regression"] = reg_rows

    range_rows = []
    for r in results:
        pooled = r.pooled
        lo, hi = float(pooled.scores.min()), float(pooled.scores.max())
        range_rows.append(
            {
                "cohort": cohort_name, "model": r.name, "pred_min": lo, "pred_max": hi,
                "pred_range": hi - lo, "auroc": float(np.mean(r.auroc_vector())),
            }
        )
    tables["ranges"] = range_rows
    return tables


def prediction_range(scores) -> float:
    s = np.asarray(scores, dtype=np.float64)
    return float(s.max() - s.min())
