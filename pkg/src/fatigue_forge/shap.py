"""Exact Shapley attributions for tree ensembles.

Two routes compute the same numbers: :func:`shapley_bruteforce` enumerates
every coalition and :func:`tree_shap` runs the polynomial path recursion.
Both use the path-dependent conditional expectation, in which a split on
a feature outside the coalition averages its children by cover.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np

from .errors import CapacityError, ModelIntegrityError, ValidationError
from .gbt import Ensemble, Tree, _check_matrix, predict

MAX_BRUTEFORCE_FEATURES = 20


@dataclass(frozen=True)
class Explanation:
    base_value: float
    phi: np.ndarray
    prediction: float
    row_index: int | None = None


@dataclass(frozen=True)
class ImportanceRanking:
    features: tuple[str, ...]
    global_impact: tuple[float, ...]

    def __iter__(self):
        return iter(zip(self.features, self.global_impact))

    def top(self, k: int) -> tuple[str, ...]:
        return self.features[:k]


@dataclass(frozen=True)
class DependenceData:
    feature_name: str
    feature_values: np.ndarray
    shap_values: np.ndarray
    bin_centers: np.ndarray
    mean_shap: np.ndarray
    bin_counts: np.ndarray
    note: str = ""


# --- conditional expectation and brute force ---------------------------------


def _check_covers(model: Ensemble):
    for t, tree in enumerate(model.trees):
        bad = (tree.feature >= 0) & ~(tree.cover > 0)
        if np.any(bad):
            node = int(np.flatnonzero(bad)[0])
            raise ModelIntegrityError(f"tree {t} node {node}: split node has zero cover")


def _tree_cond(tree: Tree, x: np.ndarray, S: frozenset, node: int = 0) -> float:
    f = tree.feature[node]
    if f < 0:
        return float(tree.value[node])
    left, right = tree.left[node], tree.right[node]
    if f in S:
        return _tree_cond(tree, x, S, left if x[f] < tree.threshold[node] else right)
    c = tree.cover[node]
    if not c > 0:
        raise ModelIntegrityError(f"node {node}: split node has zero cover")
    return (tree.cover[left] * _tree_cond(tree, x, S, left) + tree.cover[right] * _tree_cond(tree, x, S, right)) / c


def cond_expectation(model: Ensemble, x, S) -> float:
    """Path-dependent ``E[f(x) | x_S]``."""
    x = _check_matrix(x, model.n_features)[0]
    S = frozenset(int(i) for i in S)
    if any(not 0 <= i < model.n_features for i in S):
        raise ValidationError(f"subset {sorted(S)} has indices outside [0, {model.n_features})")
    return model.base_score + sum(_tree_cond(tree, x, S) for tree in model.trees)


def _tree_all_subsets(tree: Tree, x: np.ndarray, member: np.ndarray, node: int = 0):
    """``E[tree(x) | x_S]`` for every subset, indexed by bitmask."""
    f = tree.feature[node]
    if f < 0:
        return tree.value[node]
    left, right = tree.left[node], tree.right[node]
    vl = _tree_all_subsets(tree, x, member, left)
    vr = _tree_all_subsets(tree, x, member, right)
    c = tree.cover[node]
    if not c > 0:
        raise ModelIntegrityError(f"node {node}: split node has zero cover")
    hot = vl if x[f] < tree.threshold[node] else vr
    averaged = (tree.cover[left] * vl + tree.cover[right] * vr) / c
    return np.where(member[f], hot, averaged)


def all_coalition_values(model: Ensemble, x) -> np.ndarray:
    """Vector of ``cond_expectation(model, x, S)`` over all ``2**m`` bitmasks S."""
    x = _check_matrix(x, model.n_features)[0]
    m = model.n_features
    masks = np.arange(1 << m, dtype=np.int64)
    member = ((masks[None, :] >> np.arange(m)[:, None]) & 1).astype(bool)
    total = np.full(masks.size, model.base_score)
    for tree in model.trees:
        total = total + _tree_all_subsets(tree, x, member)
    return total


def shapley_bruteforce(model: Ensemble, x, row_index: int | None = None) -> Explanation:
    """Shapley values by enumerating every coalition; exponential in m."""
    m = model.n_features
    if m > MAX_BRUTEFORCE_FEATURES:
        raise CapacityError(
            f"{m} features needs 2^{m} coalitions; brute force is capped at "
            f"{MAX_BRUTEFORCE_FEATURES}, use tree_shap instead"
        )
    v = all_coalition_values(model, x)
    masks = np.arange(1 << m, dtype=np.int64)
    size = np.zeros(masks.size, dtype=np.int64)
    for j in range(m):
        size += (masks >> j) & 1
    weight = np.array([math.factorial(s) * math.factorial(m - s - 1) / math.factorial(m) for s in range(m)])
    phi = np.zeros(m)
    for i in range(m):
        without = masks[((masks >> i) & 1) == 0]
        phi[i] = np.sum(weight[size[without]] * (v[without | (1 << i)] - v[without]))
    return Explanation(float(v[0]), phi, float(v[-1]), row_index)


# --- polynomial path recursion ------------------------------------------------


@numba.njit(cache=True)
def _extend(pz, po, pf, pw, depth, zero, one, feat):
    pf[depth] = feat
    pz[depth] = zero
    po[depth] = one
    pw[depth] = 1.0 if depth == 0 else 0.0
    for i in range(depth - 1, -1, -1):
        pw[i + 1] += one * pw[i] * (i + 1) / (depth + 1)
        pw[i] = zero * pw[i] * (depth - i) / (depth + 1)


@numba.njit(cache=True)
def _unwind(pz, po, pf, pw, depth, path_index):
    one = po[path_index]
    zero = pz[path_index]
    nxt = pw[depth]
    for i in range(depth - 1, -1, -1):
        if one != 0.0:
            tmp = pw[i]
            pw[i] = nxt * (depth + 1) / ((i + 1) * one)
            nxt = tmp - pw[i] * zero * (depth - i) / (depth + 1)
        else:
            pw[i] = pw[i] * (depth + 1) / (zero * (depth - i))
    for i in range(path_index, depth):
        pf[i] = pf[i + 1]
        pz[i] = pz[i + 1]
        po[i] = po[i + 1]


@numba.njit(cache=True)
def _unwound_sum(pz, po, pw, depth, path_index):
    one = po[path_index]
    zero = pz[path_index]
    nxt = pw[depth]
    total = 0.0
    for i in range(depth - 1, -1, -1):
        if one != 0.0:
            tmp = nxt * (depth + 1) / ((i + 1) * one)
            total += tmp
            nxt = pw[i] - tmp * zero * ((depth - i) / (depth + 1))
        else:
            total += (pw[i] / zero) / ((depth - i) / (depth + 1))
    return total


# recursive kernels are not cached: numba cache reuse across edits crashed them
@numba.njit
def _recurse(x, phi, feature, threshold, left, right, value, cover, node,
             PZ, PO, PF, PW, level, depth, pzero, pone, pfeat):
    if level > 0:
        for i in range(depth):
            PZ[level, i] = PZ[level - 1, i]
            PO[level, i] = PO[level - 1, i]
            PF[level, i] = PF[level - 1, i]
            PW[level, i] = PW[level - 1, i]
    pz = PZ[level]
    po = PO[level]
    pf = PF[level]
    pw = PW[level]
    _extend(pz, po, pf, pw, depth, pzero, pone, pfeat)

    f = feature[node]
    if f < 0:
        for i in range(1, depth + 1):
            w = _unwound_sum(pz, po, pw, depth, i)
            phi[pf[i]] += w * (po[i] - pz[i]) * value[node]
        return

    if x[f] < threshold[node]:
        hot = left[node]
        cold = right[node]
    else:
        hot = right[node]
        cold = left[node]
    c = cover[node]
    hot_zero = cover[hot] / c
    cold_zero = cover[cold] / c
    inc_zero = 1.0
    inc_one = 1.0
    path_index = 0
    for k in range(1, depth + 1):
        if pf[k] == f:
            path_index = k
            break
    if path_index != 0:
        inc_zero = pz[path_index]
        inc_one = po[path_index]
        _unwind(pz, po, pf, pw, depth, path_index)
        depth -= 1
    _recurse(x, phi, feature, threshold, left, right, value, cover, hot,
             PZ, PO, PF, PW, level + 1, depth + 1, hot_zero * inc_zero, inc_one, f)
    # a zero-cover cold branch carries no weight on any coalition
    if cold_zero * inc_zero > 0.0:
        _recurse(x, phi, feature, threshold, left, right, value, cover, cold,
                 PZ, PO, PF, PW, level + 1, depth + 1, cold_zero * inc_zero, 0.0, f)


@numba.njit(nogil=True)
def _tree_shap_rows(X, feature, threshold, left, right, value, cover, roots, max_depth):
    n, m = X.shape
    phi = np.zeros((n, m))
    size = max_depth + 2
    PZ = np.zeros((size, size))
    PO = np.zeros((size, size))
    PF = np.zeros((size, size), dtype=np.int64)
    PW = np.zeros((size, size))
    for i in range(n):
        x = X[i]
        row = phi[i]
        for t in range(roots.size):
            _recurse(x, row, feature, threshold, left, right, value, cover, roots[t],
                     PZ, PO, PF, PW, 0, 0, 1.0, 1.0, -1)
    return phi


def expected_value(model: Ensemble) -> float:
    """``cond_expectation`` with the empty coalition; needs no input row."""
    _check_covers(model)
    total = model.base_score
    for tree in model.trees:
        weight = np.zeros(tree.n_nodes)
        weight[0] = 1.0
        for node in _preorder(tree):
            if tree.feature[node] >= 0:
                for child in (tree.left[node], tree.right[node]):
                    weight[child] = weight[node] * tree.cover[child] / tree.cover[node]
        total += float(np.sum(weight[tree.is_leaf] * tree.value[tree.is_leaf]))
    return total


def _preorder(tree: Tree):
    stack = [0]
    while stack:
        node = stack.pop()
        yield node
        if tree.feature[node] >= 0:
            stack.extend((int(tree.right[node]), int(tree.left[node])))


def tree_shap_values(model: Ensemble, X, threads: int = 1) -> tuple[np.ndarray, float]:
    """SHAP matrix (rows x features) and the shared base value.

    Rows are split into contiguous chunks across ``threads`` workers; every
    row is computed independently, so the result does not depend on it.
    """
    X = _check_matrix(X, model.n_features)
    _check_covers(model)
    base = expected_value(model)
    if not model.trees:
        return np.zeros(X.shape), base
    args = (*model.packed, max(tree.max_depth for tree in model.trees))
    threads = max(1, min(int(threads), X.shape[0]))
    if threads == 1:
        return _tree_shap_rows(X, *args), base
    chunks = np.array_split(np.arange(X.shape[0]), threads)
    with ThreadPoolExecutor(threads) as pool:
        parts = list(pool.map(lambda rows: _tree_shap_rows(X[rows], *args), chunks))
    return np.vstack(parts), base


def tree_shap(model: Ensemble, x, row_index: int | None = None) -> Explanation:
    x = _check_matrix(x, model.n_features)
    phi, base = tree_shap_values(model, x)
    return Explanation(base, phi[0], float(predict(model, x)[0]), row_index)


# --- summaries ----------------------------------------------------------------


def _phi_matrix(explanations) -> np.ndarray:
    if isinstance(explanations, np.ndarray):
        phi = np.atleast_2d(explanations)
    else:
        explanations = list(explanations)
        if not explanations:
            raise ValidationError("no explanations given")
        phi = np.vstack([e.phi for e in explanations])
    if phi.shape[0] == 0:
        raise ValidationError("no explanations given")
    return phi


def importance(explanations, feature_names: Sequence[str]) -> ImportanceRanking:
    """Features sorted by the summed absolute SHAP value over all rows."""
    phi = _phi_matrix(explanations)
    if phi.shape[1] != len(feature_names):
        raise ValidationError("explanations and feature_names disagree on the feature count")
    impact = np.abs(phi).sum(axis=0)
    order = sorted(range(len(feature_names)), key=lambda j: (-impact[j], j))
    return ImportanceRanking(
        tuple(feature_names[j] for j in order), tuple(float(impact[j]) for j in order)
    )


def dependence(explanations, X, feature: int, bins: int = 20, feature_name: str | None = None) -> DependenceData:
    """Scatter and equal-width binned means of one feature's SHAP values.

    Only points between the 2.5th and 97.5th percentile of the feature are kept.
    """
    if bins < 2:
        raise ValidationError("bins must be >= 2")
    phi = _phi_matrix(explanations)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape != phi.shape:
        raise ValidationError(f"X shape {X.shape} does not match explanations {phi.shape}")
    name = feature_name if feature_name is not None else f"f{feature}"
    values = X[:, feature]
    shap_values = phi[:, feature]
    lo, hi = np.percentile(values, [2.5, 97.5])
    keep = (values >= lo) & (values <= hi)
    values, shap_values = values[keep], shap_values[keep]
    if hi <= lo:
        return DependenceData(
            name, values, shap_values, np.array([lo]), np.array([shap_values.mean()]),
            np.array([values.size]), note="feature is constant over the kept range; single bin",
        )
    edges = np.linspace(lo, hi, bins + 1)
    idx = np.clip(np.searchsorted(edges, values, side="right") - 1, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    sums = np.bincount(idx, weights=shap_values, minlength=bins)
    nonempty = counts > 0
    centers = 0.5 * (edges[:-1] + edges[1:])
    return DependenceData(
        name, values, shap_values, centers[nonempty], sums[nonempty] / counts[nonempty], counts[nonempty]
    )


@dataclass(frozen=True)
class ForceRecord:
    explanation: Explanation
    positive: tuple[dict, ...] = field(default_factory=tuple)
    negative: tuple[dict, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "base": self.explanation.base_value,
            "prediction": self.explanation.prediction,
            "positive": list(self.positive),
            "negative": list(self.negative),
        }


def explain_instance(model: Ensemble, x, row_index: int | None = None) -> ForceRecord:
    """Split a row's attributions into features pushing up and pushing down."""
    x = _check_matrix(x, model.n_features)
    exp = tree_shap(model, x, row_index)
    order = sorted(range(model.n_features), key=lambda j: (-abs(exp.phi[j]), j))
    pos, neg = [], []
    for j in order:
        item = {"feature": model.feature_names[j], "value": float(x[0, j]), "phi": float(exp.phi[j])}
        if exp.phi[j] > 0:
            pos.append(item)
        elif exp.phi[j] < 0:
            neg.append(item)
    return ForceRecord(exp, tuple(pos), tuple(neg))
