"""Site-aware stratified k-fold plans.

Hospitals (sites) are atomic: every site lands wholly in one fold's test set,
so no site is ever on both sides of a train/test boundary. Sites are assigned
to test groups greedily, largest first, into whichever group keeps the
class-rate and size imbalance smallest. If the greedy plan leaves a group's
positive rate more than ``tol`` off the cohort rate, a move/swap local search
runs, and for at most ``EXACT_MAX_SITES`` sites an exhaustive search over all
site partitions takes over.
"""

from __future__ import annotations

import csv
import functools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import SplitError

EXACT_MAX_SITES = 10
_TIE = 1e-12


@dataclass(frozen=True)
class FoldEntry:
    train_ids: frozenset[str]
    val_ids: frozenset[str]
    test_ids: frozenset[str]
    test_sites: tuple[str, ...] = ()


@dataclass(frozen=True)
class FoldPlan:
    k: int
    folds: tuple[FoldEntry, ...]
    seed: int
    deviations: tuple[float, ...] = field(default=(), compare=False)

    @property
    def patient_ids(self) -> list[str]:
        e = self.folds[0]
        return sorted(e.train_ids | e.val_ids | e.test_ids)

    def role(self, fold: int, pid: str) -> str:
        e = self.folds[fold]
        if pid in e.test_ids:
            return "test"
        if pid in e.val_ids:
            return "val"
        if pid in e.train_ids:
            return "train"
        raise KeyError(pid)


@dataclass(frozen=True)
class _Sites:
    names: tuple[str, ...]
    size: np.ndarray
    pos: np.ndarray

    @property
    def n(self) -> int:
        return int(self.size.sum())

    @property
    def rate(self) -> float:
        return float(self.pos.sum()) / self.n


def _site_table(sites: Mapping[str, str], labels: Mapping[str, int]) -> _Sites:
    names = sorted(set(sites.values()))
    index = {s: i for i, s in enumerate(names)}
    size = np.zeros(len(names), dtype=np.int64)
    pos = np.zeros(len(names), dtype=np.int64)
    for pid, s in sites.items():
        if pid not in labels:
            raise SplitError(f"patient {pid!r} has no label")
        size[index[s]] += 1
        pos[index[s]] += int(labels[pid])
    return _Sites(tuple(names), size, pos)


def group_objective(g_size, g_pos, n_total: int, rate: float, k: int) -> np.ndarray:
    """Per-group cost ``|rate_g - rate| + |n_g - N/k| / N``; empty groups pay only the size term."""
    g_size = np.asarray(g_size, dtype=np.float64)
    g_pos = np.asarray(g_pos, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(g_size > 0, g_pos / np.maximum(g_size, 1), rate)
    return np.abs(r - rate) + np.abs(g_size - n_total / k) / n_total


def group_deviation(g_size, g_pos, rate: float) -> np.ndarray:
    g_size = np.asarray(g_size, dtype=np.float64)
    return np.abs(np.asarray(g_pos) / np.maximum(g_size, 1) - rate)


def partition_cost(assign: np.ndarray, st: _Sites, k: int) -> float:
    gs = np.bincount(assign, weights=st.size, minlength=k)
    gp = np.bincount(assign, weights=st.pos, minlength=k)
    return float(group_objective(gs, gp, st.n, st.rate, k).sum())


def _violations(assign: np.ndarray, st: _Sites, k: int, tol: float) -> int:
    gs = np.bincount(assign, weights=st.size, minlength=k)
    gp = np.bincount(assign, weights=st.pos, minlength=k)
    return int(np.sum(group_deviation(gs, gp, st.rate) > tol + _TIE))


def _greedy(st: _Sites, k: int, rng: np.random.Generator) -> np.ndarray:
    n_sites = len(st.names)
    jitter = rng.random(n_sites)
    order = np.lexsort((jitter, -st.size))
    group_rank = rng.permutation(k)
    assign = np.full(n_sites, -1)
    gs = np.zeros(k)
    gp = np.zeros(k)
    for placed, s in enumerate(order):
        empty = np.flatnonzero(gs == 0)
        remaining = n_sites - placed
        candidates = empty if remaining <= len(empty) else np.arange(k)
        best, best_cost = None, np.inf
        for g in sorted(candidates, key=lambda g: group_rank[g]):
            gs[g] += st.size[s]
            gp[g] += st.pos[s]
            cost = group_objective(gs, gp, st.n, st.rate, k).sum()
            gs[g] -= st.size[s]
            gp[g] -= st.pos[s]
            if cost < best_cost - _TIE:
                best, best_cost = g, cost
        assign[s] = best
        gs[best] += st.size[s]
        gp[best] += st.pos[s]
    return assign


def _local_search(assign: np.ndarray, st: _Sites, k: int, tol: float) -> np.ndarray:
    """First-improvement moves and swaps on (violations, objective)."""
    assign = assign.copy()

    def key(a):
        return (_violations(a, st, k, tol), partition_cost(a, st, k))

    current = key(assign)
    n_sites = len(assign)
    improved = True
    while improved:
        improved = False
        for s in range(n_sites):
            for g in range(k):
                if g == assign[s] or np.sum(assign == assign[s]) == 1:
                    continue
                cand = assign.copy()
                cand[s] = g
                ck = key(cand)
                if ck[0] < current[0] or (ck[0] == current[0] and ck[1] < current[1] - _TIE):
                    assign, current, improved = cand, ck, True
        for s in range(n_sites):
            for t in range(s + 1, n_sites):
                if assign[s] == assign[t]:
                    continue
                cand = assign.copy()
                cand[s], cand[t] = assign[t], assign[s]
                ck = key(cand)
                if ck[0] < current[0] or (ck[0] == current[0] and ck[1] < current[1] - _TIE):
                    assign, current, improved = cand, ck, True
    return assign


@functools.lru_cache(maxsize=None)
def set_partitions(n: int, k: int) -> np.ndarray:
    """All partitions of ``n`` items into exactly ``k`` non-empty blocks, as restricted growth strings."""
    out: list[tuple[int, ...]] = []

    def rec(prefix: list[int], used: int):
        i = len(prefix)
        if i == n:
            if used == k:
                out.append(tuple(prefix))
            return
        if k - used > n - i:
            return
        for g in range(min(used + 1, k)):
            prefix.append(g)
            rec(prefix, max(used, g + 1))
            prefix.pop()

    rec([], 0)
    return np.array(out, dtype=np.int64).reshape(-1, n)


def _exact(st: _Sites, k: int, tol: float) -> np.ndarray | None:
    parts = set_partitions(len(st.names), k)
    gs = np.stack([(parts == g) @ st.size for g in range(k)], axis=1).astype(np.float64)
    gp = np.stack([(parts == g) @ st.pos for g in range(k)], axis=1).astype(np.float64)
    feasible = (group_deviation(gs, gp, st.rate) <= tol + _TIE).all(axis=1)
    if not feasible.any():
        return None
    cost = group_objective(gs, gp, st.n, st.rate, k).sum(axis=1)
    cost[~feasible] = np.inf
    return parts[int(np.argmin(cost))]


def assign_sites(
    sites: Mapping[str, str], labels: Mapping[str, int], k: int, seed: int, tol: float
) -> dict[str, int]:
    """Map every site name to its test-group index."""
    st = _site_table(sites, labels)
    if len(st.names) < k:
        raise SplitError(f"fewer sites ({len(st.names)}) than folds ({k})")
    frac = st.size.max() / st.n
    if frac > 1.0 - 1.0 / k + tol:
        biggest = st.names[int(np.argmax(st.size))]
        raise SplitError(f"site dominates: {biggest} holds {frac:.0%} of patients")
    rng = np.random.default_rng(seed)
    assign = _greedy(st, k, rng)
    if _violations(assign, st, k, tol):
        # greedy missed the tolerance: best feasible partition when enumeration is cheap
        exact = _exact(st, k, tol) if len(st.names) <= EXACT_MAX_SITES else None
        assign = exact if exact is not None else _local_search(assign, st, k, tol)
    return {name: int(g) for name, g in zip(st.names, assign)}


def _stratified_val(ids: list[str], labels: Mapping[str, int], val_frac: float, rng) -> set[str]:
    val: set[str] = set()
    for c in (0, 1):
        members = sorted(p for p in ids if labels[p] == c)
        n_val = int(round(val_frac * len(members)))
        perm = rng.permutation(len(members))
        val.update(members[i] for i in perm[:n_val])
    return val


def plan_folds(
    sites: Mapping[str, str],
    labels: Mapping[str, int],
    k: int = 5,
    val_frac: float = 0.2,
    seed: int = 0,
    tol: float = 0.1,
) -> FoldPlan:
    if not 0 < val_frac < 0.5:
        raise ValueError("val_frac must be in (0, 0.5)")
    if k < 2:
        raise ValueError("k must be >= 2")
    group_of = assign_sites(sites, labels, k, seed, tol)
    everyone = sorted(sites)
    rate = sum(labels[p] for p in everyone) / len(everyone)
    folds, devs = [], []
    for i in range(k):
        test = {p for p in everyone if group_of[sites[p]] == i}
        rest = [p for p in everyone if p not in test]
        rng = np.random.default_rng([seed, i])
        val = _stratified_val(rest, labels, val_frac, rng)
        train = set(rest) - val
        test_sites = tuple(sorted(s for s, g in group_of.items() if g == i))
        folds.append(FoldEntry(frozenset(train), frozenset(val), frozenset(test), test_sites))
        devs.append(abs(sum(labels[p] for p in test) / len(test) - rate))
    return FoldPlan(k, tuple(folds), seed, tuple(devs))


def site_aware_folds(cohort, labels: Mapping[str, int], k: int = 5, val_frac: float = 0.2, seed: int = 0, tol: float = 0.1) -> FoldPlan:
    return plan_folds(cohort.sites(), labels, k, val_frac, seed, tol)


@dataclass(frozen=True)
class FoldValidation:
    failures: tuple[str, ...]
    deviations: tuple[float, ...]

    @property
    def passed(self) -> bool:
        return not self.failures


def validate_folds(plan: FoldPlan, sites: Mapping[str, str], labels: Mapping[str, int], tol: float = 0.1) -> FoldValidation:
    """Check every plan invariant; each violation becomes one itemized failure."""
    sites = getattr(sites, "sites", lambda: sites)()
    failures: list[str] = []
    everyone = set(sites)
    rate = sum(labels[p] for p in everyone) / len(everyone)
    seen_in_test: dict[str, int] = {}
    devs = []
    for i, e in enumerate(plan.folds):
        for a, b, name in ((e.train_ids, e.val_ids, "train/val"), (e.train_ids, e.test_ids, "train/test"), (e.val_ids, e.test_ids, "val/test")):
            overlap = a & b
            if overlap:
                failures.append(f"fold {i}: {name} overlap ({len(overlap)} patients)")
        union = e.train_ids | e.val_ids | e.test_ids
        if union != everyone:
            failures.append(f"fold {i}: covers {len(union)} of {len(everyone)} patients")
        inner_sites = {sites[p] for p in (e.train_ids | e.val_ids) if p in sites}
        test_sites = {sites[p] for p in e.test_ids if p in sites}
        for s in sorted(inner_sites & test_sites):
            failures.append(f"fold {i}: site leakage: {s}")
        for p in e.test_ids:
            seen_in_test[p] = seen_in_test.get(p, 0) + 1
        if e.test_ids:
            dev = abs(sum(labels[p] for p in e.test_ids) / len(e.test_ids) - rate)
        else:
            dev = float("inf")
        devs.append(dev)
        if dev > tol:
            failures.append(f"fold {i}: test class-rate deviation {dev:.4f} > {tol}")
    for p in sorted(everyone):
        c = seen_in_test.get(p, 0)
        if c != 1:
            failures.append(f"patient {p} appears in {c} test sets")
    return FoldValidation(tuple(failures), tuple(devs))


def write_fold_plan(plan: FoldPlan, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "fold_index", "role"])
        for i in range(plan.k):
            for pid in plan.patient_ids:
                w.writerow([pid, i, plan.role(i, pid)])


def read_fold_plan(path: str | Path, seed: int = 0) -> FoldPlan:
    roles: dict[int, dict[str, set[str]]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            role = row["role"]
            if role not in ("train", "val", "test"):
                raise ValueError(f"{path}: bad role {role!r}")
            roles.setdefault(int(row["fold_index"]), {"train": set(), "val": set(), "test": set()})[role].add(row["patient_id"])
    k = len(roles)
    if sorted(roles) != list(range(k)):
        raise ValueError(f"{path}: fold indices must be 0..k-1")
    folds = tuple(
        FoldEntry(frozenset(r["train"]), frozenset(r["val"]), frozenset(r["test"])) for _, r in sorted(roles.items())
    )
    return FoldPlan(k, folds, seed)
