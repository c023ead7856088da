"""Cox proportional-hazards regression with Efron tie handling."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .attmil import predict_scores
from .data_model import lower_median
from .errors import DegenerateError
from .special import norm_sf

log = logging.getLogger(__name__)

MONOTONE_BETA = 20.0
SURVIVAL_COLUMNS = ("model", "mode", "covariate", "hr", "ci_low", "ci_high", "p", "n_used", "n_events")


@dataclass(frozen=True)
class SurvivalDataset:
    time: np.ndarray
    event: np.ndarray
    covariates: np.ndarray
    names: tuple[str, ...]

    def __post_init__(self):
        t = np.asarray(self.time, dtype=np.float64)
        e = np.asarray(self.event).astype(bool)
        x = np.asarray(self.covariates, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if t.ndim != 1 or e.shape != t.shape or x.shape[0] != t.size:
            raise ValueError("time, event and covariates must have one row per subject")
        if len(self.names) != x.shape[1]:
            raise ValueError("one name per covariate column is required")
        if not (np.isfinite(t).all() and (t > 0).all()):
            raise ValueError("survival times must be finite and positive")
        if not np.isfinite(x).all():
            raise ValueError("covariates must be finite")
        if not e.any():
            raise DegenerateError("at least one event is required")
        xc = x - x.mean(axis=0)
        # tolerance tied to the covariate scale, so centering residue of a constant column counts as zero
        tol = 1e-10 * max(1.0, float(np.abs(x).max())) * math.sqrt(t.size)
        if np.linalg.matrix_rank(xc, tol=tol) < x.shape[1]:
            raise DegenerateError(f"rank-deficient covariates: {list(self.names)}")
        object.__setattr__(self, "time", t)
        object.__setattr__(self, "event", e)
        object.__setattr__(self, "covariates", x)
        object.__setattr__(self, "names", tuple(self.names))


@dataclass(frozen=True)
class CoxTerm:
    name: str
    beta: float
    se: float
    p: float

    @property
    def hr(self) -> float:
        return math.exp(self.beta)

    @property
    def ci95(self) -> tuple[float, float]:
        return math.exp(self.beta - 1.96 * self.se), math.exp(self.beta + 1.96 * self.se)

    @property
    def significant(self) -> bool:
        lo, hi = self.ci95
        return not (lo <= 1.0 <= hi)


@dataclass(frozen=True)
class CoxResult:
    terms: tuple[CoxTerm, ...]
    log_likelihood: float
    iterations: int
    converged: bool
    n_used: int
    n_events: int
    loglik_trace: tuple[float, ...] = field(default=(), repr=False)

    def __getitem__(self, name: str) -> CoxTerm:
        for t in self.terms:
            if t.name == name:
                return t
        raise KeyError(name)

    @property
    def beta(self) -> np.ndarray:
        return np.array([t.beta for t in self.terms])


class _TieBlocks:
    """Event-time blocks of a dataset sorted by descending time."""

    def __init__(self, data: SurvivalDataset):
        order = np.argsort(-data.time, kind="stable")
        self.x = data.covariates[order]
        self.t = data.time[order]
        self.e = data.event[order]
        self.n = self.t.size
        # block of rows sharing each distinct time; risk set at t = rows 0..end
        change = np.flatnonzero(np.r_[self.t[1:] != self.t[:-1], True])
        self.ends = change + 1
        self.starts = np.r_[0, self.ends[:-1]]


def efron_loglik(data: SurvivalDataset | _TieBlocks, beta) -> tuple[float, np.ndarray, np.ndarray]:
    """Efron partial log-likelihood with its gradient and Hessian."""
    b = data if isinstance(data, _TieBlocks) else _TieBlocks(data)
    beta = np.asarray(beta, dtype=np.float64)
    p = b.x.shape[1]
    eta = b.x @ beta
    # shift for stability; the partial likelihood is invariant to it
    eta_shift = eta.max()
    phi = np.exp(eta - eta_shift)
    phix = phi[:, None] * b.x
    phixx = phix[:, :, None] * b.x[:, None, :]
    cum_phi = np.cumsum(phi)
    cum_phix = np.cumsum(phix, axis=0)
    cum_phixx = np.cumsum(phixx, axis=0)

    ll = 0.0
    grad = np.zeros(p)
    hess = np.zeros((p, p))
    for s, e in zip(b.starts, b.ends):
        ev = b.e[s:e]
        d = int(ev.sum())
        if d == 0:
            continue
        rows = np.arange(s, e)[ev]
        r_phi = cum_phi[e - 1]
        r_phix = cum_phix[e - 1]
        r_phixx = cum_phixx[e - 1]
        t_phi = phi[rows].sum()
        t_phix = phix[rows].sum(axis=0)
        t_phixx = phixx[rows].sum(axis=0)
        ll += float(eta[rows].sum())
        grad += b.x[rows].sum(axis=0)
        for l in range(d):
            frac = l / d
            denom = r_phi - frac * t_phi
            num1 = r_phix - frac * t_phix
            num2 = r_phixx - frac * t_phixx
            ll -= math.log(denom) + eta_shift
            m = num1 / denom
            grad -= m
            hess -= num2 / denom - np.outer(m, m)
    return ll, grad, hess


def fit_cox(
    data: SurvivalDataset,
    max_iter: int = 100,
    score_tol: float = 1e-8,
    rel_ll_tol: float = 1e-10,
    max_halvings: int = 30,
) -> CoxResult:
    """Newton-Raphson with step halving on the Efron partial likelihood.

    A fit whose coefficients pass ``|beta| > 20`` is treated as a monotone
    likelihood (perfect separation): it stops, warns and is flagged
    non-converged.
    """
    p = data.covariates.shape[1]
    if int(data.event.sum()) < p + 1:
        raise DegenerateError(f"need at least {p + 1} events for {p} covariates")
    blocks = _TieBlocks(data)
    # centre covariates; beta is unchanged and the exponentials stay tame
    blocks.x = blocks.x - data.covariates.mean(axis=0)
    beta = np.zeros(p)
    ll, grad, hess = efron_loglik(blocks, beta)
    trace = [ll]
    converged = False
    monotone = False
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(grad)) < score_tol:
            converged = True
            it -= 1
            break
        try:
            step = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(-hess, grad, rcond=None)[0]
        scale = 1.0
        for _ in range(max_halvings):
            cand = beta + scale * step
            ll_new, g_new, h_new = efron_loglik(blocks, cand)
            if np.isfinite(ll_new) and ll_new >= ll:
                break
            scale *= 0.5
        else:
            break
        rel = abs(ll_new - ll) / max(abs(ll), 1e-300)
        beta, ll, grad, hess = cand, ll_new, g_new, h_new
        trace.append(ll)
        if np.max(np.abs(beta)) > MONOTONE_BETA:
            monotone = True
            break
        if rel < rel_ll_tol or np.max(np.abs(grad)) < score_tol:
            converged = True
            break

    if converged and np.max(np.abs(beta)) > MONOTONE_BETA / 4:
        # the score test can pass on the flat tail of a diverging fit; an
        # interior maximum drops along the ray, a monotone likelihood keeps rising
        monotone = efron_loglik(blocks, 2.0 * beta)[0] >= ll
    if monotone:
        log.warning("monotone likelihood: |beta| exceeded %g, fit flagged non-converged", MONOTONE_BETA)
        converged = False
    try:
        cov = np.linalg.inv(-hess)
        se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    except np.linalg.LinAlgError:
        se = np.full(p, np.inf)
    terms = []
    for name, b_j, se_j in zip(data.names, beta, se):
        z = b_j / se_j if se_j > 0 else math.inf
        terms.append(CoxTerm(name, float(b_j), float(se_j), min(1.0, 2.0 * norm_sf(abs(z)))))
    return CoxResult(
        tuple(terms), ll, it, converged, data.time.size, int(data.event.sum()), tuple(trace)
    )


def cox_rows(model: str, mode: str, result: CoxResult) -> list[dict]:
    """Rows for the survival report CSV."""
    rows = []
    for t in result.terms:
        lo, hi = t.ci95
        rows.append(
            {
                "model": model,
                "mode": mode,
                "covariate": t.name,
                "hr": t.hr,
                "ci_low": lo,
                "ci_high": hi,
                "p": t.p,
                "n_used": result.n_used,
                "n_events": result.n_events,
            }
        )
    return rows


def dataset_from_records(
    ids: Sequence[str],
    scores: Sequence[float],
    records,
    covariates: str = "none",
    score_name: str = "score",
) -> SurvivalDataset:
    """Build a dataset from scores and clinical records, deleting incomplete rows.

    ``covariates`` is ``"none"`` (score only) or ``"age+sex+stage"``.
    """
    if covariates not in ("none", "age+sex+stage"):
        raise ValueError(f"unknown covariate set {covariates!r}")
    names = [score_name]
    if covariates != "none":
        names += ["age", "sex", "stage"]
    rows, times, events = [], [], []
    dropped = 0
    for pid, s in zip(ids, scores):
        r = records[pid]
        if not r.has_survival:
            dropped += 1
            continue
        row = [float(s)]
        if covariates != "none":
            if r.age is None or r.sex is None or r.stage is None:
                dropped += 1
                continue
            row += [float(r.age), float(int(r.sex)), float(r.stage)]
        rows.append(row)
        times.append(r.survival_days)
        events.append(bool(r.event))
    if dropped:
        log.info("listwise deletion: %d of %d patients dropped", dropped, len(ids))
    return SurvivalDataset(np.array(times), np.array(events), np.array(rows).reshape(-1, len(names)), tuple(names))


def ensemble_scores(models, bags) -> np.ndarray:
    """Mean score over fold models: regression output or positive-class probability."""
    models = list(models)
    if not models:
        raise ValueError("at least one model is required")
    shapes = {(m.d, m.h_att, m.h_mlp, m.out, m.gated, m.batch_norm) for m in models}
    if len(shapes) > 1:
        raise ValueError(f"fold models do not share one architecture: {sorted(shapes)}")
    return np.mean([predict_scores(m, bags) for m in models], axis=0)


def score_prognosis(
    cohort,
    fold_models,
    mode: str = "continuous",
    covariates: str = "none",
    ids: Sequence[str] | None = None,
) -> CoxResult:
    """Deploy every fold model, average the scores and fit a Cox model on them.

    In ``binarized_at_median`` mode a regression score becomes 1 when it is at
    or above the cohort's lower median; a classification score becomes the
    predicted label (mean probability above one half).
    """
    if mode not in ("continuous", "binarized_at_median"):
        raise ValueError(f"unknown mode {mode!r}")
    models = list(fold_models)
    ids = list(cohort.patient_ids if ids is None else ids)
    ids = [p for p in ids if cohort.records[p].has_survival]
    scores = ensemble_scores(models, [cohort.bags[p] for p in ids])
    if mode == "binarized_at_median":
        if models[0].is_regression:
            scores = (scores >= lower_median(scores)).astype(np.float64)
        else:
            scores = (scores > 0.5).astype(np.float64)
    return fit_cox(dataset_from_records(ids, scores, cohort.records, covariates))
