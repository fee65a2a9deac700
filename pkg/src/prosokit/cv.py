"""Participant-blocked cross-validation around the random forest."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .features import FEATURE_NAMES_V1
from .forest import CLASSIFY, REGRESS, Hyperparams, fit_forest
from .records import VALENCES
from .stats import balanced_accuracy, friedman_test, mae, spearman_rho

TARGETS = ("sex", "valence", "arousal")


class SingleClassFoldWarning(UserWarning):
    pass


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    groups: np.ndarray
    feature_names: tuple
    conditions: np.ndarray | None = None
    record_ids: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y)
        self.groups = np.asarray(self.groups)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.size or self.groups.size != self.y.size:
            raise ValueError("X, y and groups must agree in length")
        if not np.isfinite(self.X).all():
            raise ValueError("feature matrix contains non-finite values")

    def __len__(self):
        return self.y.size

    def subset(self, mask) -> "Dataset":
        mask = np.asarray(mask)
        return Dataset(
            self.X[mask], self.y[mask], self.groups[mask], self.feature_names,
            None if self.conditions is None else self.conditions[mask],
            None if self.record_ids is None else self.record_ids[mask],
        )


def task_for(target: str) -> str:
    if target not in TARGETS:
        raise ValueError(f"unknown target {target!r}; expected one of {TARGETS}")
    return CLASSIFY if target == "sex" else REGRESS


def dataset_from_records(records, target: str, retained_only: bool = True) -> Dataset:
    records = [r for r in records if r.qc.retained or not retained_only]
    if not records:
        return Dataset(np.zeros((0, len(FEATURE_NAMES_V1))), np.zeros(0), np.zeros(0, dtype=object), FEATURE_NAMES_V1)
    task_for(target)
    names = records[0].features.names
    X = np.array([r.features.values for r in records], dtype=np.float64)
    if target == "sex":
        y = np.array([r.sex for r in records])
    elif target == "valence":
        y = np.array([r.affect_valence for r in records], dtype=np.float64)
    else:
        y = np.array([r.affect_arousal for r in records], dtype=np.float64)
    return Dataset(
        X, y, np.array([r.participant_id for r in records]), names,
        np.array([r.condition for r in records]), np.array([r.record_id for r in records]),
    )


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    fold_of_group: dict

    def fold_index(self, groups) -> np.ndarray:
        return np.array([self.fold_of_group[g] for g in groups], dtype=np.int64)

    def splits(self, groups):
        """Yield ``(fold, train_mask, test_mask)`` for each fold."""
        folds = self.fold_index(groups)
        for f in range(self.k):
            test = folds == f
            yield f, ~test, test


def make_blocked_folds(groups, k: int, rng: np.random.Generator) -> FoldAssignment:
    """Assign whole participants to ``k`` folds, balancing row counts.

    Participants are shuffled, stably sorted by descending row count, and
    each goes to the fold with the fewest rows so far (ties broken by
    ``rng``).
    """
    ids, counts = np.unique(np.asarray(groups), return_counts=True)
    if ids.size < k:
        raise ValueError(f"{ids.size} participants cannot fill {k} folds")
    if k < 2:
        raise ValueError("k must be at least 2")
    order = rng.permutation(ids.size)
    order = order[np.argsort(-counts[order], kind="stable")]
    load = np.zeros(k, dtype=np.int64)
    assignment = {}
    for i in order:
        smallest = np.flatnonzero(load == load.min())
        f = int(smallest[0] if smallest.size == 1 else rng.choice(smallest))
        assignment[ids[i].item() if hasattr(ids[i], "item") else ids[i]] = f
        load[f] += counts[i]
    return FoldAssignment(k, assignment)


@dataclass
class CVResult:
    task: str
    fold_metrics: list
    folds: FoldAssignment
    flags: list = field(default_factory=list)
    predictions: np.ndarray | None = None

    def metric(self, name) -> np.ndarray:
        return np.array([m[name] for m in self.fold_metrics], dtype=np.float64)

    def summary(self) -> dict:
        names = ["balanced_accuracy"] if self.task == CLASSIFY else ["spearman_rho", "mae"]
        out = {}
        for name in names:
            vals = self.metric(name)
            out[name] = {
                "median": float(np.nanmedian(vals)),
                "sd": float(np.nanstd(vals, ddof=1)) if np.isfinite(vals).sum() > 1 else float("nan"),
                "min": float(np.nanmin(vals)),
                "max": float(np.nanmax(vals)),
            }
        return out


def _seed_for(seed, *path):
    return [int(seed), *path]


def cross_validate(ds: Dataset, task: str, hyperparams: Hyperparams, k: int = 10, seed: int = 0,
                   folds: FoldAssignment | None = None, n_jobs: int = 1) -> CVResult:
    """Train on out-of-fold participants, score the held-out fold.

    Classification folds report balanced accuracy; regression folds report
    Spearman rho and MAE.
    """
    if folds is None:
        folds = make_blocked_folds(ds.groups, k, np.random.default_rng(_seed_for(seed, 0)))
    preds = np.empty(len(ds), dtype=object if task == CLASSIFY else np.float64)
    metrics, flags = [], []
    for f, train, test in folds.splits(ds.groups):
        train_groups = set(ds.groups[train].tolist())
        test_groups = set(ds.groups[test].tolist())
        assert not train_groups & test_groups, "participant leaked across the fold boundary"
        row = {"fold": f, "n_train": int(train.sum()), "n_test": int(test.sum())}
        if not test.any():
            raise ValueError(f"fold {f} has no test rows")
        model = fit_forest(ds.X[train], ds.y[train], task, hyperparams, seed=_seed_for(seed, 1, f), n_jobs=n_jobs)
        pred = model.predict(ds.X[test])
        preds[test] = pred
        if task == CLASSIFY:
            present = np.unique(ds.y[test])
            if present.size < 2:
                flags.append(f"fold {f}: single class {present[0]!r} in test set")
                warnings.warn(flags[-1], SingleClassFoldWarning, stacklevel=2)
            row["balanced_accuracy"] = balanced_accuracy(ds.y[test], pred)
        else:
            row["spearman_rho"] = spearman_rho(ds.y[test], pred)
            row["mae"] = mae(ds.y[test], pred)
        metrics.append(row)
    return CVResult(task, metrics, folds, flags, preds)


@dataclass
class ConditionComparison:
    mae: np.ndarray  # folds x conditions
    conditions: tuple
    statistic: float
    p_value: float
    folds: FoldAssignment
    results: dict


def per_condition_evaluation(ds: Dataset, task: str, hyperparams: Hyperparams, k: int = 10, seed: int = 0,
                             conditions=VALENCES, n_jobs: int = 1) -> ConditionComparison:
    """Repeat CV within each condition using one shared fold assignment,
    then compare fold-wise MAE across conditions with the Friedman test."""
    if ds.conditions is None:
        raise ValueError("dataset carries no condition labels")
    if task != REGRESS:
        raise ValueError("fold-wise MAE comparison is defined for regression targets")
    folds = make_blocked_folds(ds.groups, k, np.random.default_rng(_seed_for(seed, 0)))
    fold_idx = folds.fold_index(ds.groups)
    results = {}
    cols = []
    for c in conditions:
        mask = ds.conditions == c
        present = set(fold_idx[mask].tolist())
        if mask.sum() < 2 * k or len(present) < k:
            raise ValueError(f"condition {c!r} has too few rows to fill {k} folds")
        res = cross_validate(ds.subset(mask), task, hyperparams, k, seed=seed, folds=folds, n_jobs=n_jobs)
        results[c] = res
        cols.append(res.metric("mae"))
    matrix = np.column_stack(cols)
    stat, p = friedman_test(matrix)
    return ConditionComparison(matrix, tuple(conditions), stat, p, folds, results)
