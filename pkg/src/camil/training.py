"""Losses, optimizers, the one-cycle schedule, presets and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .attmil import (
    NO_DECAY,
    ModelParams,
    backward_batch,
    dropout_masks,
    forward_batch,
    init_params,
    update_running_stats,
)
from .data_model import Cohort, TargetSpec, binarize_target
from .errors import DegenerateError, NumericError

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


# -- losses --------------------------------------------------------------------


def class_weights(labels: Sequence[int]) -> np.ndarray:
    """Inverse-frequency weights ``N / (2 * count_c)`` for classes 0 and 1."""
    y = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(y, minlength=2)[:2]
    if (counts == 0).any():
        raise DegenerateError("degenerate class weights: a class has no training samples")
    return y.size / (2.0 * counts)


def weighted_cross_entropy(logits, label: int, weights) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    m = logits.max()
    lse = m + math.log(np.exp(logits - m).sum())
    p = np.exp(logits - lse)
    wt = float(weights[label])
    loss = -wt * (logits[label] - lse)
    grad = wt * p
    grad[label] -= wt
    return float(loss), grad


def mse(pred: float, target: float) -> tuple[float, float]:
    r = float(pred) - float(target)
    return r * r, 2.0 * r


@dataclass(frozen=True)
class LossConfig:
    sigma2: float = 1.0
    candidate_labels: np.ndarray = field(default_factory=lambda: np.zeros(0))
    class_weights: np.ndarray = field(default_factory=lambda: np.ones(2))

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        object.__setattr__(self, "candidate_labels", np.asarray(self.candidate_labels, dtype=np.float64).ravel())
        object.__setattr__(self, "class_weights", np.asarray(self.class_weights, dtype=np.float64))


def balanced_mse(pred: float, target: float, cfg: LossConfig) -> tuple[float, float]:
    """Gaussian NLL of ``target`` renormalized over the training-label set.

    ``loss = -log( k(pred, target) / sum_y k(pred, y) )`` with Gaussian kernel
    ``k(p, y) = exp(-(p - y)^2 / (2 sigma2))`` and ``y`` over the candidate labels.
    """
    S = cfg.candidate_labels
    if S.size == 0:
        raise ValueError("balanced MSE needs a non-empty candidate label set")
    s2 = cfg.sigma2
    pred = float(pred)
    logits = -((pred - S) ** 2) / (2.0 * s2)
    m = logits.max()
    ex = np.exp(logits - m)
    lse = m + math.log(ex.sum())
    own = -((pred - target) ** 2) / (2.0 * s2)
    loss = lse - own
    w = ex / ex.sum()
    grad = (float(w @ S) - float(target)) / s2
    return loss, grad


def silverman_sigma2(labels: Sequence[float], fallback: float = 1.0) -> float:
    """Squared Silverman rule-of-thumb bandwidth of the training labels."""
    y = np.asarray(labels, dtype=np.float64)
    if y.size < 2:
        return fallback
    sd = float(y.std(ddof=1))
    q75, q25 = np.percentile(y, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34)
    if spread <= 0:
        spread = sd
    if spread <= 0:
        return fallback
    h = 0.9 * spread * y.size ** (-0.2)
    return h * h


# -- optimizers ----------------------------------------------------------------


def optimizer_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: dict,
    opt: str,
    lr: float,
    weight_decay: float = 0.0,
    no_decay: Sequence[str] = (),
    decoupled: bool = True,
) -> tuple[dict[str, np.ndarray], dict]:
    """One update. Returns new arrays and the updated ``state`` (mutated in place).

    sgd: ``p - lr * (g + wd * p)``. adam: decoupled decay ``p * (1 - lr * wd)``
    followed by the bias-corrected moment update; ``decoupled=False`` folds
    ``wd * p`` into the gradient instead.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"diverged: non-finite gradient for {name}")
    new = {}
    if opt == "sgd":
        for name, p in params.items():
            g = grads[name]
            wd = 0.0 if name in no_decay else weight_decay
            new[name] = p - lr * (g + wd * p)
        return new, state
    if opt != "adam":
        raise ValueError(f"unknown optimizer {opt!r}")
    t = state.get("t", 0) + 1
    state["t"] = t
    m_all = state.setdefault("m", {})
    v_all = state.setdefault("v", {})
    c1 = 1.0 - ADAM_BETA1**t
    c2 = 1.0 - ADAM_BETA2**t
    for name, p in params.items():
        g = grads[name]
        wd = 0.0 if name in no_decay else weight_decay
        if wd and decoupled:
            p = p * (1.0 - lr * wd)
        elif wd:
            g = g + wd * p
        m = ADAM_BETA1 * m_all.get(name, 0.0) + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v_all.get(name, 0.0) + (1.0 - ADAM_BETA2) * g * g
        m_all[name], v_all[name] = m, v
        new[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return new, state


def one_cycle_lr(
    step: float,
    total_steps: int,
    lr_max: float,
    pct_start: float = 0.25,
    div_start: float = 25.0,
    div_final: float = 1e4,
) -> float:
    """Cosine warm-up from ``lr_max/div_start`` to ``lr_max``, then cosine decay to ``lr_max/div_final``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    lo, hi, end = lr_max / div_start, lr_max, lr_max / div_final
    warm = pct_start * total_steps

    def cos_interp(start, stop, frac):
        if frac >= 1.0:
            return stop
        return start + (stop - start) * (1.0 - math.cos(math.pi * frac)) / 2.0

    if step <= warm:
        return cos_interp(lo, hi, step / warm if warm > 0 else 1.0)
    return cos_interp(hi, end, (step - warm) / (total_steps - warm))


# -- presets -------------------------------------------------------------------


@dataclass(frozen=True)
class TrainPreset:
    name: str
    batch_size: int
    optimizer: str
    loss: str
    epochs: int
    dropout_rate: float
    balancing: str
    batch_norm: bool
    lr: float = 1e-4
    weight_decay: float = 1e-2
    patience: int = 12
    pct_start: float = 0.25
    div_start: float = 25.0
    div_final: float = 1e4
    h_att: int = 128
    h_mlp: int = 256
    gated: bool = False
    max_instances: int = 512
    sigma2: float | None = None
    decoupled_weight_decay: bool = True
    bmc_variance_scaled: bool = True

    @property
    def is_regression(self) -> bool:
        return self.loss != "weighted_cross_entropy"

    @property
    def effective_loss(self) -> str:
        if self.loss == "balanced_mse" and self.balancing == "none":
            return "mse"
        return self.loss


PRESETS: dict[str, TrainPreset] = {
    "camil_classification": TrainPreset(
        "camil_classification", 64, "adam", "weighted_cross_entropy", 25, 0.5, "inverse_weighted", True
    ),
    "graziani_regression": TrainPreset("graziani_regression", 1, "sgd", "mse", 100, 0.2, "none", False),
    "camil_regression": TrainPreset("camil_regression", 1, "adam", "balanced_mse", 25, 0.0, "kernel_based", False),
}

ABLATIONS = ("add_dropout_20", "use_sgd", "epochs_100", "no_balancing")


def get_preset(name: str, **overrides) -> TrainPreset:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides) if overrides else base


def ablate(preset: TrainPreset, toggle: str) -> TrainPreset:
    """Apply one Graziani-style change to the CAMIL regression preset."""
    if not preset.name.startswith("camil_regression"):
        raise ValueError("ablations apply to the camil_regression preset only")
    changes = {
        "add_dropout_20": {"dropout_rate": 0.2},
        "use_sgd": {"optimizer": "sgd"},
        "epochs_100": {"epochs": 100},
        "no_balancing": {"balancing": "none"},
    }
    if toggle not in changes:
        raise ValueError(f"unknown ablation {toggle!r}; choose from {ABLATIONS}")
    return replace(preset, name=f"{preset.name}+{toggle}", **changes[toggle])


# -- training loop -------------------------------------------------------------


@dataclass
class TrainLog:
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    lr_trace: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False
    total_steps: int = 0

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "lr"])
            for row in zip(self.epochs, self.train_loss, self.val_loss, self.lr):
                w.writerow([row[0], *(repr(float(v)) for v in row[1:])])


class _Objective:
    """Per-bag loss for one preset, configured from the training fold."""

    def __init__(self, preset: TrainPreset, train_targets: np.ndarray, train_labels: np.ndarray | None):
        self.kind = preset.effective_loss
        if self.kind == "weighted_cross_entropy":
            weights = class_weights(train_labels) if preset.balancing == "inverse_weighted" else np.ones(2)
            self.cfg = LossConfig(class_weights=weights)
        elif self.kind == "balanced_mse":
            s2 = preset.sigma2 if preset.sigma2 is not None else silverman_sigma2(train_targets)
            self.cfg = LossConfig(sigma2=s2, candidate_labels=train_targets)
            # constant weight 2*sigma2 puts the objective on the MSE scale
            self.scale = 2.0 * s2 if preset.bmc_variance_scaled else 1.0
        else:
            self.cfg = None

    def __call__(self, pred: np.ndarray, target: float) -> tuple[float, np.ndarray]:
        if self.kind == "weighted_cross_entropy":
            return weighted_cross_entropy(pred, int(target), self.cfg.class_weights)
        if self.kind == "balanced_mse":
            loss, g = balanced_mse(pred[0], target, self.cfg)
            loss, g = loss * self.scale, g * self.scale
        else:
            loss, g = mse(pred[0], target)
        return loss, np.array([g])

    def batch(self, preds: np.ndarray, targets: Sequence[float]) -> tuple[list[float], np.ndarray]:
        losses, grads = [], np.zeros_like(preds)
        for i, (p, t) in enumerate(zip(preds, targets)):
            loss, grads[i] = self(p, t)
            losses.append(loss)
        return losses, grads


def fold_labels(cohort: Cohort, plan, fold: int, target: TargetSpec) -> dict[str, int]:
    entry = plan.folds[fold]
    values = cohort.targets()
    return binarize_target(values, target, entry.train_ids)


def train_model(
    cohort: Cohort,
    plan,
    fold: int,
    preset: TrainPreset,
    seed: int | Sequence[int],
    target: TargetSpec | None = None,
) -> tuple[ModelParams, TrainLog]:
    """Train one model on ``plan.folds[fold]``; returns the best-validation parameters."""
    entry = plan.folds[fold]
    train_ids = sorted(entry.train_ids)
    val_ids = sorted(entry.val_ids)
    if not train_ids:
        raise ValueError("empty train split")
    values = cohort.targets()
    if preset.is_regression:
        tgt = {pid: values[pid] for pid in cohort.patient_ids}
        train_labels = None
    else:
        tgt = binarize_target(values, target or TargetSpec("target"), train_ids)
        train_labels = np.array([tgt[p] for p in train_ids])
    objective = _Objective(preset, np.array([values[p] for p in train_ids]), train_labels)

    init_ss, shuffle_ss, drop_ss, sub_ss = np.random.SeedSequence(seed).spawn(4)
    params = init_params(
        cohort.d,
        1 if preset.is_regression else 2,
        np.random.default_rng(init_ss),
        h_att=preset.h_att,
        h_mlp=preset.h_mlp,
        gated=preset.gated,
        batch_norm=preset.batch_norm,
        dropout_rate=preset.dropout_rate,
        preset=preset.name,
    )
    shuffle_rng = np.random.default_rng(shuffle_ss)
    drop_rng = np.random.default_rng(drop_ss)
    sub_rng = np.random.default_rng(sub_ss)

    bs = preset.batch_size
    steps_per_epoch = math.ceil(len(train_ids) / bs)
    total = preset.epochs * steps_per_epoch
    tlog = TrainLog(total_steps=total)
    monitor = val_ids or train_ids
    val_X = [cohort.bags[p].features for p in monitor]
    val_t = [tgt[p] for p in monitor]

    state: dict = {}
    best_val = math.inf
    best_params = params.copy()
    since_best = 0
    step = 0
    for epoch in range(1, preset.epochs + 1):
        order = shuffle_rng.permutation(len(train_ids))
        epoch_losses: list[float] = []
        lr = 0.0
        for start in range(0, len(order), bs):
            ids = [train_ids[i] for i in order[start : start + bs]]
            bags = []
            for pid in ids:
                X = cohort.bags[pid].features
                if bs > 1 and X.shape[0] > preset.max_instances:
                    keep = np.sort(sub_rng.choice(X.shape[0], preset.max_instances, replace=False))
                    X = X[keep]
                bags.append(X)
            masks = None
            if params.dropout_rate > 0:
                masks = dropout_masks(drop_rng, len(bags), params.h_mlp, params.dropout_rate)
            cache = forward_batch(bags, params, "batch", masks)
            losses, dpred = objective.batch(cache.pred, [tgt[p] for p in ids])
            if not np.isfinite(losses).all():
                raise NumericError(f"diverged: non-finite loss at epoch {epoch}")
            epoch_losses.extend(losses)
            grads = backward_batch(cache, params, dpred / len(bags))
            if params.batch_norm:
                update_running_stats(params, cache)
            lr = one_cycle_lr(step, total, preset.lr, preset.pct_start, preset.div_start, preset.div_final)
            tlog.lr_trace.append(lr)
            updated, state = optimizer_step(
                params.trainable(), grads, state, preset.optimizer, lr,
                preset.weight_decay, NO_DECAY, preset.decoupled_weight_decay,
            )
            for name, arr in updated.items():
                setattr(params, name, arr)
            step += 1

        val_cache = forward_batch(val_X, params, "running")
        val_losses, _ = objective.batch(val_cache.pred, val_t)
        val_loss = float(np.mean(val_losses))
        tlog.epochs.append(epoch)
        tlog.train_loss.append(float(np.mean(epoch_losses)))
        tlog.val_loss.append(val_loss)
        tlog.lr.append(lr)
        if not math.isfinite(val_loss):
            raise NumericError(f"diverged: non-finite validation loss at epoch {epoch}")
        if val_loss < best_val:
            best_val, best_params, tlog.best_epoch, since_best = val_loss, params.copy(), epoch, 0
        else:
            since_best += 1
            if since_best >= preset.patience:
                tlog.stopped_early = True
                log.info("early stop at epoch %d (best %d)", epoch, tlog.best_epoch)
                break
    return best_params, tlog
