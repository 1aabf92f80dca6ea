"""Regression metrics, k-fold cross-validation with out-of-fold SHAP, the
feature-addition curve and the baseline models used for comparison."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import gbt
from .errors import ValidationError
from .gbt import Ensemble, TrainConfig, Tree
from .rng import SplitMix64
from .shap import ImportanceRanking, importance, tree_shap_values
from .signal import Dataset

R2_CONVENTIONS = ("paper", "standard")
GROUPINGS = ("row", "subject")


@dataclass(frozen=True)
class Metrics:
    rmse: float
    mae: float
    r2: float
    adj_r2: float
    n: int
    m: int
    r2_convention: str = "paper"

    def to_dict(self) -> dict:
        return {
            "rmse": self.rmse, "mae": self.mae, "r2": self.r2, "adj_r2": self.adj_r2,
            "n": self.n, "m": self.m, "r2_convention": self.r2_convention,
        }


def adjusted_r2(r2: float, n: int, m: int) -> float:
    if n <= m + 1:
        raise ValidationError(f"adjusted R^2 needs n > m + 1 (n={n}, m={m})")
    return 1.0 - (1.0 - r2) * (n - 1) / (n - m - 1)


def metrics(y, yhat, m: int, r2_convention: str = "paper") -> Metrics:
    """RMSE, MAE, R^2 and adjusted R^2 of ``yhat`` against ``y``.

    The ``paper`` convention is the explained-variance ratio
    ``sum((yhat - ybar)^2) / sum((y - ybar)^2)``; ``standard`` is
    ``1 - SS_res / SS_tot``.
    """
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.ndim != 1 or y.shape != yhat.shape:
        raise ValidationError(f"y and yhat must be 1-D of equal length, got {y.shape} and {yhat.shape}")
    if r2_convention not in R2_CONVENTIONS:
        raise ValidationError(f"r2_convention must be one of {R2_CONVENTIONS}")
    n = y.size
    if n == 0:
        raise ValidationError("no predictions to score")
    resid = y - yhat
    ybar = y.mean()
    ss_tot = float(np.sum((y - ybar) ** 2))
    if ss_tot == 0.0:
        raise ValidationError("R^2 is undefined for constant y")
    if r2_convention == "paper":
        r2 = float(np.sum((yhat - ybar) ** 2)) / ss_tot
    else:
        r2 = 1.0 - float(np.sum(resid**2)) / ss_tot
    return Metrics(
        rmse=math.sqrt(float(np.mean(resid**2))),
        mae=float(np.mean(np.abs(resid))),
        r2=r2,
        adj_r2=adjusted_r2(r2, n, m),
        n=n,
        m=m,
        r2_convention=r2_convention,
    )


def _try_metrics(y, yhat, m, r2_convention):
    try:
        return metrics(y, yhat, m, r2_convention)
    except ValidationError:
        return None


# --- fold assignment ----------------------------------------------------------


def fold_assignment(dataset: Dataset, k: int, seed: int, grouping: str = "row") -> np.ndarray:
    """Fold index per row from a seeded shuffle split into near-equal parts.

    With ``grouping="subject"`` whole subjects are shuffled and split, so
    fold sizes are near-equal in subjects rather than rows.
    """
    if grouping not in GROUPINGS:
        raise ValidationError(f"grouping must be one of {GROUPINGS}")
    if k < 2:
        raise ValidationError("k must be >= 2")
    rng = SplitMix64(seed)
    if grouping == "row":
        if dataset.n < k:
            raise ValidationError(f"cannot split {dataset.n} rows into {k} folds")
        perm = rng.permutation(dataset.n)
        fold = np.empty(dataset.n, dtype=np.int64)
        for i, part in enumerate(np.array_split(perm, k)):
            fold[part] = i
        return fold
    if dataset.subject_id is None:
        raise ValidationError("subject grouping needs subject_id on the dataset")
    subjects, inverse = np.unique(dataset.subject_id, return_inverse=True)
    if subjects.size < k:
        raise ValidationError(f"cannot split {subjects.size} subjects into {k} folds")
    perm = rng.permutation(subjects.size)
    group_fold = np.empty(subjects.size, dtype=np.int64)
    for i, part in enumerate(np.array_split(perm, k)):
        group_fold[part] = i
    return group_fold[inverse]


# --- cross-validation ---------------------------------------------------------


@dataclass(frozen=True)
class CvReport:
    k: int
    seed: int
    grouping: str
    r2_convention: str
    m: int
    fold: np.ndarray
    folds: tuple[Metrics | None, ...]
    pooled: Metrics
    prediction: np.ndarray
    phi: np.ndarray | None = None
    base_values: np.ndarray | None = None
    explained: np.ndarray | None = None
    feature_names: tuple[str, ...] = ()

    def fold_summary(self) -> dict[str, tuple[float, float]]:
        """Mean and population std over folds of rmse, mae and adj_r2.

        Folds whose metrics are undefined (e.g. a single held-out row) are
        left out; a statistic with no defined folds is NaN.
        """
        out = {}
        for name in ("rmse", "mae", "adj_r2"):
            vals = np.array([getattr(f, name) for f in self.folds if f is not None])
            out[name] = (float(vals.mean()), float(vals.std())) if vals.size else (math.nan, math.nan)
        return out

    def importance(self) -> ImportanceRanking:
        if self.phi is None:
            raise ValidationError("report was produced without explanations")
        return importance(self.phi[self.explained], self.feature_names)

    def to_dict(self) -> dict:
        summary = self.fold_summary()
        return {
            "k": self.k,
            "seed": self.seed,
            "grouping": self.grouping,
            "r2_convention": self.r2_convention,
            "folds": [None if f is None else f.to_dict() for f in self.folds],
            "pooled": self.pooled.to_dict(),
            "fold_mean": {name: mean for name, (mean, _) in summary.items()},
            "fold_std": {name: std for name, (_, std) in summary.items()},
        }


Fitter = Callable[[np.ndarray, np.ndarray, int], object]
Predictor = Callable[[object, np.ndarray], np.ndarray]


def cross_validate(
    dataset: Dataset,
    fit: Fitter,
    predict: Predictor,
    k: int = 10,
    seed: int = 0,
    *,
    grouping: str = "row",
    r2_convention: str = "paper",
    explain: bool = False,
    explain_rows: int | None = None,
    threads: int = 1,
) -> CvReport:
    """Generic k-fold loop.

    ``fit(X, y, fold_seed)`` returns a model and ``predict(model, X)`` its
    predictions. With ``explain`` the model must be an :class:`Ensemble`
    and each held-out row is attributed by the model of its own fold.
    ``explain_rows`` caps the rows explained per fold; the subset is drawn
    from the fold's generator and recorded in ``explained``.
    """
    if r2_convention not in R2_CONVENTIONS:
        raise ValidationError(f"r2_convention must be one of {R2_CONVENTIONS}")
    fold = fold_assignment(dataset, k, seed, grouping)
    # the partition consumes SplitMix64(seed) itself; per-fold seeds use a child stream
    rng = SplitMix64(seed).spawn()
    fold_seeds = [rng.next_u64() for _ in range(k)]
    for i in range(k):
        n_train = int(np.sum(fold != i))
        if n_train < 2:
            raise ValidationError(f"fold {i} leaves {n_train} training row(s); need at least 2")

    def run(i):
        test = np.flatnonzero(fold == i)
        train_rows = np.flatnonzero(fold != i)
        model = fit(dataset.X[train_rows], dataset.y[train_rows], fold_seeds[i])
        pred = np.asarray(predict(model, dataset.X[test]), dtype=np.float64)
        phi = base = chosen = None
        if explain:
            chosen = test
            if explain_rows is not None and explain_rows < test.size:
                pick = SplitMix64(fold_seeds[i]).sample_prefix(test.size, int(explain_rows))
                chosen = np.sort(test[pick])
            phi, base = tree_shap_values(model, dataset.X[chosen])
        return test, pred, chosen, phi, base

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, range(k)))
    else:
        results = [run(i) for i in range(k)]

    prediction = np.empty(dataset.n)
    phi_all = base_all = explained = None
    if explain:
        phi_all = np.full((dataset.n, dataset.m), np.nan)
        base_all = np.full(dataset.n, np.nan)
        explained = np.zeros(dataset.n, dtype=bool)
    fold_metrics = []
    for test, pred, chosen, phi, base in results:
        prediction[test] = pred
        fold_metrics.append(_try_metrics(dataset.y[test], pred, dataset.m, r2_convention))
        if explain:
            phi_all[chosen] = phi
            base_all[chosen] = base
            explained[chosen] = True
    return CvReport(
        k=k,
        seed=seed,
        grouping=grouping,
        r2_convention=r2_convention,
        m=dataset.m,
        fold=fold,
        folds=tuple(fold_metrics),
        pooled=metrics(dataset.y, prediction, dataset.m, r2_convention),
        prediction=prediction,
        phi=phi_all,
        base_values=base_all,
        explained=explained,
        feature_names=dataset.feature_names,
    )


def _gbt_fitter(config: TrainConfig, feature_names) -> Fitter:
    def fit(X, y, fold_seed):
        return gbt.train(X, y, replace(config, seed=fold_seed), feature_names)

    return fit


def kfold_cv(
    dataset: Dataset,
    config: TrainConfig = TrainConfig(),
    k: int = 10,
    seed: int = 0,
    *,
    grouping: str = "row",
    r2_convention: str = "paper",
    explain: bool = True,
    explain_rows: int | None = None,
    threads: int = 1,
) -> CvReport:
    """Boosted-tree k-fold CV; fold ``i`` trains with a seed drawn from ``seed``."""
    return cross_validate(
        dataset, _gbt_fitter(config, dataset.feature_names), gbt.predict, k, seed,
        grouping=grouping, r2_convention=r2_convention, explain=explain,
        explain_rows=explain_rows, threads=threads,
    )


# --- feature-addition curve ---------------------------------------------------


@dataclass(frozen=True)
class CurvePoint:
    n_features: int
    features: tuple[str, ...]
    mean: dict
    std: dict
    pooled: Metrics


def forward_feature_curve(
    dataset: Dataset,
    ranking: ImportanceRanking | Sequence[str],
    config: TrainConfig = TrainConfig(),
    k: int = 10,
    seed: int = 0,
    *,
    grouping: str = "row",
    r2_convention: str = "paper",
    threads: int = 1,
) -> list[CurvePoint]:
    """Cross-validate the top-j features for j = 1..m, most important first."""
    names = tuple(ranking.features if isinstance(ranking, ImportanceRanking) else ranking)
    if sorted(names) != sorted(dataset.feature_names):
        raise ValidationError("ranking must list every dataset feature exactly once")
    points = []
    for j in range(1, len(names) + 1):
        subset = dataset.select_features(names[:j])
        report = kfold_cv(
            subset, config, k, seed, grouping=grouping, r2_convention=r2_convention,
            explain=False, threads=threads,
        )
        summary = report.fold_summary()
        points.append(
            CurvePoint(
                n_features=j,
                features=names[:j],
                mean={key: v[0] for key, v in summary.items()},
                std={key: v[1] for key, v in summary.items()},
                pooled=report.pooled,
            )
        )
    return points


def best_point(curve: Sequence[CurvePoint]) -> CurvePoint:
    """Lowest mean fold RMSE; ties go to fewer features."""
    return min(curve, key=lambda p: (p.mean["rmse"], p.n_features))


# --- baselines ----------------------------------------------------------------


@dataclass(frozen=True)
class OlsModel:
    intercept: float
    coef: np.ndarray
    ridge: float = 0.0

    def predict(self, X) -> np.ndarray:
        return self.intercept + np.asarray(X, dtype=np.float64) @ self.coef


def fit_ols(X, y, jitter: float = 1e-8) -> OlsModel:
    """Least squares with intercept through the normal equations.

    A rank-deficient design gets ``jitter`` added to the diagonal of the
    Gram matrix (intercept included).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    A = np.column_stack([np.ones(X.shape[0]), X])
    gram = A.T @ A
    rhs = A.T @ y
    ridge = 0.0
    if np.linalg.matrix_rank(A) < A.shape[1]:
        ridge = jitter
        gram = gram + ridge * np.eye(gram.shape[0])
    beta = np.linalg.solve(gram, rhs)
    return OlsModel(float(beta[0]), beta[1:], ridge)


def ols_baseline(
    dataset: Dataset, k: int = 10, seed: int = 0, *, grouping: str = "row", r2_convention: str = "paper"
) -> CvReport:
    return cross_validate(
        dataset, lambda X, y, _s: fit_ols(X, y), lambda model, X: model.predict(X), k, seed,
        grouping=grouping, r2_convention=r2_convention,
    )


def single_tree_config(config: TrainConfig) -> TrainConfig:
    return replace(config, n_estimators=1, learning_rate=1.0, gamma=0.0)


def _bootstrap_tree(X, y, config: TrainConfig, tree_seed: int) -> tuple[Tree, float]:
    rng = SplitMix64(tree_seed)
    n = X.shape[0]
    rows = rng.below_many(n, n)
    cfg = replace(single_tree_config(config), subsample=1.0, seed=rng.next_u64())
    model = gbt.train(X[rows], y[rows], cfg)
    return model.trees[0], model.base_score


def forest_from_seeds(X, y, config: TrainConfig, tree_seeds: Sequence[int], feature_names=None) -> Ensemble:
    """Average of bootstrap single trees, one per seed, as one ensemble.

    Each tree's own base score is folded into the shared base so that the
    ensemble output equals the plain mean of the tree predictions.
    """
    X = gbt._check_matrix(X)
    if len(tree_seeds) < 1:
        raise ValidationError("a forest needs at least one tree")
    B = len(tree_seeds)
    parts = [_bootstrap_tree(X, np.asarray(y, dtype=np.float64), config, s) for s in tree_seeds]
    trees = tuple(tree.scaled(1.0 / B) for tree, _ in parts)
    base = float(np.mean([b for _, b in parts]))
    names = feature_names if feature_names is not None else tuple(f"f{j}" for j in range(X.shape[1]))
    return Ensemble(trees, base, tuple(names))


def random_forest(X, y, config: TrainConfig, n_trees: int = 100, seed: int = 0, feature_names=None) -> Ensemble:
    rng = SplitMix64(seed)
    return forest_from_seeds(X, y, config, [rng.next_u64() for _ in range(n_trees)], feature_names)


def tree_baselines(
    dataset: Dataset,
    config: TrainConfig = TrainConfig(),
    k: int = 10,
    seed: int = 0,
    *,
    n_trees: int = 100,
    grouping: str = "row",
    r2_convention: str = "paper",
    threads: int = 1,
) -> tuple[CvReport, CvReport]:
    """(single tree, random forest) reports under the shared fold protocol."""
    names = dataset.feature_names
    single = cross_validate(
        dataset, _gbt_fitter(single_tree_config(config), names), gbt.predict, k, seed,
        grouping=grouping, r2_convention=r2_convention, threads=threads,
    )
    forest = cross_validate(
        dataset, lambda X, y, s: random_forest(X, y, config, n_trees, s, names), gbt.predict, k, seed,
        grouping=grouping, r2_convention=r2_convention, threads=threads,
    )
    return single, forest
