"""Second-order gradient boosted regression trees with exact greedy splits.

Loss is ``0.5 * (y - yhat) ** 2`` so every hessian is one. Shrinkage is
folded into the stored leaf weights.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple, Sequence

import numba
import numpy as np

from .errors import ParseError, ValidationError
from .rng import SplitMix64

FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    max_depth: int = 10
    learning_rate: float = 0.1
    n_estimators: int = 150
    reg_lambda: float = 1.0
    reg_alpha: float = 1.0
    gamma: float = 0.0
    subsample: float = 0.9
    colsample: float = 0.9
    min_child_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.max_depth < 1:
            raise ValidationError("max_depth must be >= 1")
        if not 0 < self.learning_rate <= 1:
            raise ValidationError("learning_rate must lie in (0, 1]")
        if self.n_estimators < 0:
            raise ValidationError("n_estimators must be >= 0")
        for name in ("subsample", "colsample"):
            value = getattr(self, name)
            if not 0 < value <= 1:
                raise ValidationError(f"{name} must lie in (0, 1]")
        for name in ("reg_lambda", "reg_alpha", "gamma", "min_child_weight"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")


class GradHess(NamedTuple):
    g: np.ndarray
    h: np.ndarray


class Split(NamedTuple):
    feature: int
    threshold: float
    gain: float


@dataclass(frozen=True, eq=False)
class Tree:
    """Flat array tree; node 0 is the root and leaves have ``feature == -1``.

    Rows go left when ``x[feature] < threshold``. ``value`` holds leaf
    weights (zero at internal nodes) and ``cover`` the hessian sum of the
    training rows routed through each node.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    cover: np.ndarray

    def __post_init__(self):
        for name, dtype in (
            ("feature", np.int64),
            ("left", np.int64),
            ("right", np.int64),
            ("threshold", np.float64),
            ("value", np.float64),
            ("cover", np.float64),
        ):
            arr = np.ascontiguousarray(getattr(self, name), dtype=dtype)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    @property
    def is_leaf(self) -> np.ndarray:
        return self.feature < 0

    @property
    def n_leaves(self) -> int:
        return int(np.count_nonzero(self.is_leaf))

    @property
    def max_depth(self) -> int:
        deepest = 0
        stack = [(0, 0)]
        while stack:
            node, d = stack.pop()
            deepest = max(deepest, d)
            if self.feature[node] >= 0:
                stack.append((int(self.left[node]), d + 1))
                stack.append((int(self.right[node]), d + 1))
        return deepest

    def scaled(self, factor: float) -> "Tree":
        return Tree(self.feature, self.threshold, self.left, self.right, self.value * factor, self.cover)


@dataclass(frozen=True, eq=False)
class Ensemble:
    trees: tuple[Tree, ...]
    base_score: float
    feature_names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "trees", tuple(self.trees))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "base_score", float(self.base_score))

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    @cached_property
    def packed(self):
        """All trees concatenated into single arrays plus root offsets."""
        if not self.trees:
            empty_i = np.empty(0, dtype=np.int64)
            empty_f = np.empty(0, dtype=np.float64)
            return empty_i, empty_f, empty_i, empty_i, empty_f, empty_f, empty_i
        roots, offset = [], 0
        parts = {k: [] for k in ("feature", "threshold", "left", "right", "value", "cover")}
        for tree in self.trees:
            tree = _sibling_contiguous(tree)
            roots.append(offset)
            parts["feature"].append(tree.feature)
            parts["threshold"].append(tree.threshold)
            parts["left"].append(np.where(tree.left >= 0, tree.left + offset, -1))
            parts["right"].append(np.where(tree.right >= 0, tree.right + offset, -1))
            parts["value"].append(tree.value)
            parts["cover"].append(tree.cover)
            offset += tree.n_nodes
        cat = {k: np.ascontiguousarray(np.concatenate(v)) for k, v in parts.items()}
        return (
            cat["feature"],
            cat["threshold"],
            cat["left"],
            cat["right"],
            cat["value"],
            cat["cover"],
            np.asarray(roots, dtype=np.int64),
        )

    @cached_property
    def routing(self):
        """Compact int32 ``[feature, left]`` pairs for the prediction kernel."""
        feature, threshold, left, _, value, _, roots = self.packed
        links = np.ascontiguousarray(np.stack([feature, left], axis=1).astype(np.int32))
        return links, threshold, value, roots.astype(np.int32)


def _sibling_contiguous(tree: Tree) -> Tree:
    """Relabel nodes breadth-first so every right child is ``left + 1``."""
    if np.all(tree.right[~tree.is_leaf] == tree.left[~tree.is_leaf] + 1):
        return tree
    order = [0]
    for node in order:
        if tree.feature[node] >= 0:
            order.extend((int(tree.left[node]), int(tree.right[node])))
    order = np.asarray(order)
    new_id = np.empty_like(order)
    new_id[order] = np.arange(order.size)
    internal = tree.feature[order] >= 0
    left = np.where(internal, new_id[np.maximum(tree.left[order], 0)], -1)
    right = np.where(internal, new_id[np.maximum(tree.right[order], 0)], -1)
    return Tree(tree.feature[order], tree.threshold[order], left, right, tree.value[order], tree.cover[order])


# --- numeric kernels ----------------------------------------------------------


@numba.njit(cache=True)
def _leaf_weight(G, H, lam, alpha, eta):
    mag = abs(G) - alpha
    if mag <= 0.0:
        return 0.0
    sign = 1.0 if G > 0 else -1.0
    return eta * (-sign * mag) / (H + lam)


@numba.njit(cache=True, nogil=True)
def _grow(X, order, Xs, g, h, in_sample, cols, max_depth, cap, lam, alpha, gamma, mcw, eta):
    n = X.shape[0]
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)
    gain_out = np.zeros(cap)
    G = np.zeros(cap)
    H = np.zeros(cap)

    node_of = np.full(n, -1, dtype=np.int64)
    for r in range(n):
        if in_sample[r]:
            node_of[r] = 0
            G[0] += g[r]
            H[0] += h[r]
    n_nodes = 1
    level_start = 0
    level_end = 1

    for _depth in range(max_depth):
        nl = level_end - level_start
        best_gain = np.zeros(nl)
        best_feat = np.full(nl, -1, dtype=np.int64)
        best_thr = np.zeros(nl)
        best_GL = np.zeros(nl)
        best_HL = np.zeros(nl)
        GL = np.zeros(nl)
        HL = np.zeros(nl)
        last = np.zeros(nl)
        seen = np.zeros(nl, dtype=np.bool_)
        for ci in range(cols.size):
            f = cols[ci]
            GL[:] = 0.0
            HL[:] = 0.0
            seen[:] = False
            for idx in range(n):
                r = order[f, idx]
                k = node_of[r] - level_start
                if k < 0:
                    continue
                v = Xs[f, idx]
                if seen[k] and v != last[k]:
                    hl = HL[k]
                    hr = H[level_start + k] - hl
                    if hl >= mcw and hr >= mcw:
                        gl = GL[k]
                        gt = G[level_start + k]
                        gr = gt - gl
                        gain = (
                            0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - gt * gt / (H[level_start + k] + lam))
                            - gamma
                        )
                        if gain > best_gain[k]:
                            thr = (last[k] + v) * 0.5
                            if thr <= last[k]:
                                thr = v
                            best_gain[k] = gain
                            best_feat[k] = f
                            best_thr[k] = thr
                            best_GL[k] = gl
                            best_HL[k] = hl
                GL[k] += g[r]
                HL[k] += h[r]
                last[k] = v
                seen[k] = True

        new_start = n_nodes
        for k in range(nl):
            if best_feat[k] < 0:
                continue
            node = level_start + k
            feature[node] = best_feat[k]
            threshold[node] = best_thr[k]
            gain_out[node] = best_gain[k]
            lc = n_nodes
            rc = n_nodes + 1
            n_nodes += 2
            left[node] = lc
            right[node] = rc
            G[lc] = best_GL[k]
            H[lc] = best_HL[k]
            G[rc] = G[node] - best_GL[k]
            H[rc] = H[node] - best_HL[k]
        if n_nodes == new_start:
            break
        for r in range(n):
            nd = node_of[r]
            if nd >= level_start and feature[nd] >= 0:
                if X[r, feature[nd]] < threshold[nd]:
                    node_of[r] = left[nd]
                else:
                    node_of[r] = right[nd]
        level_start = new_start
        level_end = n_nodes

    for node in range(n_nodes):
        if feature[node] < 0:
            value[node] = _leaf_weight(G[node], H[node], lam, alpha, eta)
    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        value[:n_nodes].copy(),
        gain_out[:n_nodes].copy(),
    )


@numba.njit(cache=True, nogil=True)
def _route(X, feature, threshold, left, right, root):
    n = X.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        node = root
        while feature[node] >= 0:
            if X[i, feature[node]] < threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out


@numba.njit(cache=True, nogil=True)
def _predict(X, links, threshold, value, roots, base):
    n = X.shape[0]
    out = np.full(n, base)
    # tree-major order keeps one tree hot in cache; sums match training order
    for t in range(roots.size):
        root = roots[t]
        for i in range(n):
            node = root
            feat = links[node, 0]
            while feat >= 0:
                # right child is left + 1 in packed trees
                node = links[node, 1] + (X[i, feat] >= threshold[node])
                feat = links[node, 0]
            out[i] += value[node]
    return out


@numba.njit(cache=True)
def _covers(leaf_of, h, left, right, n_nodes):
    cover = np.zeros(n_nodes)
    for i in range(leaf_of.size):
        cover[leaf_of[i]] += h[i]
    # children always carry larger ids than their parent
    for node in range(n_nodes - 1, -1, -1):
        if left[node] >= 0:
            cover[node] = cover[left[node]] + cover[right[node]]
    return cover


# --- operations ---------------------------------------------------------------


def compute_grad_hess(y, yhat) -> GradHess:
    """Gradient and hessian of ``0.5 * (y - yhat) ** 2`` with respect to yhat."""
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ValidationError(f"length mismatch: y has {y.size} entries, yhat has {yhat.size}")
    return GradHess(yhat - y, np.ones_like(y))


def leaf_weight(G: float, H: float, reg_lambda: float, reg_alpha: float = 0.0, learning_rate: float = 1.0) -> float:
    """Shrunk, L1 soft-thresholded minimizer of the leaf's quadratic objective."""
    if not H + reg_lambda > 0:
        raise ValidationError("H + lambda must be positive")
    return float(_leaf_weight(float(G), float(H), float(reg_lambda), float(reg_alpha), float(learning_rate)))


def _sorted_order(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature stable sort order and the matching sorted values (m x n)."""
    order = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T)
    return order, np.ascontiguousarray(np.take_along_axis(X.T, order, axis=1))


def _draw_count(fraction: float, total: int) -> int:
    return min(total, max(1, math.ceil(round(fraction * total, 9))))


def best_split(
    rows,
    features,
    X,
    g,
    h,
    reg_lambda: float = 1.0,
    gamma: float = 0.0,
    min_child_weight: float = 1.0,
) -> Split | None:
    """Exact greedy search over midpoints between consecutive distinct values.

    Returns the positive-gain maximizer, preferring the lowest feature index
    and then the lowest threshold on exact ties, or ``None``.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    in_sample = np.zeros(X.shape[0], dtype=np.bool_)
    in_sample[np.asarray(rows, dtype=np.int64)] = True
    cols = np.unique(np.asarray(features, dtype=np.int64))
    feature, threshold, _, _, _, gain = _grow(
        X, *_sorted_order(X), np.asarray(g, dtype=np.float64), np.asarray(h, dtype=np.float64),
        in_sample, cols, 1, 3, float(reg_lambda), 0.0, float(gamma), float(min_child_weight), 1.0,
    )
    if feature[0] < 0:
        return None
    return Split(int(feature[0]), float(threshold[0]), float(gain[0]))


def build_tree(rows, X, g, h, config: TrainConfig, rng: SplitMix64, order: tuple | None = None) -> Tree:
    """Grow one tree on ``rows`` and record covers from every row of ``X``."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    n, m = X.shape
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        raise ValidationError("cannot grow a tree on zero rows")
    if order is None:
        order = _sorted_order(X)
    g = np.asarray(g, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    cols = np.sort(rng.sample_prefix(m, _draw_count(config.colsample, m)))
    in_sample = np.zeros(n, dtype=np.bool_)
    in_sample[rows] = True
    cap = min(2 ** (config.max_depth + 1) - 1, 2 * rows.size + 1)
    feature, threshold, left, right, value, _ = _grow(
        X, *order, g, h, in_sample, cols, config.max_depth, cap,
        float(config.reg_lambda), float(config.reg_alpha), float(config.gamma),
        float(config.min_child_weight), float(config.learning_rate),
    )
    leaf_of = _route(X, feature, threshold, left, right, 0)
    cover = _covers(leaf_of, h, left, right, feature.size)
    return Tree(feature, threshold, left, right, value, cover)


def _check_matrix(X, m: int | None = None) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2:
        raise ValidationError("X must be two-dimensional")
    if m is not None and X.shape[1] != m:
        raise ValidationError(f"X has {X.shape[1]} columns, model expects {m}")
    if not np.all(np.isfinite(X)):
        raise ValidationError("X contains non-finite values")
    return X


def train(X, y, config: TrainConfig = TrainConfig(), feature_names: Sequence[str] | None = None, *, trace=None) -> Ensemble:
    """Boost ``config.n_estimators`` trees starting from ``mean(y)``.

    ``trace``, when given, is called as ``trace(round, predictions)`` after
    each round with the in-sample predictions for all rows.
    """
    X = _check_matrix(X)
    y = np.asarray(y, dtype=np.float64)
    n, m = X.shape
    if y.shape != (n,):
        raise ValidationError("y must have one entry per row of X")
    if not np.all(np.isfinite(y)):
        raise ValidationError("y contains non-finite values")
    if n < 2 or m < 1:
        raise ValidationError("need at least 2 rows and 1 feature")
    if feature_names is None:
        feature_names = [f"f{j}" for j in range(m)]
    if len(feature_names) != m:
        raise ValidationError("feature_names length does not match X")

    base = float(np.mean(y))
    order = _sorted_order(X)
    rng = SplitMix64(config.seed)
    pred = np.full(n, base)
    k_rows = _draw_count(config.subsample, n)
    trees = []
    for t in range(config.n_estimators):
        g, h = compute_grad_hess(y, pred)
        rows = rng.sample_prefix(n, k_rows)
        tree = build_tree(rows, X, g, h, config, rng, order)
        leaf_of = _route(X, tree.feature, tree.threshold, tree.left, tree.right, 0)
        pred += tree.value[leaf_of]
        trees.append(tree)
        if trace is not None:
            trace(t, pred)
    return Ensemble(tuple(trees), base, tuple(feature_names))


def train_dataset(dataset, config: TrainConfig = TrainConfig()) -> Ensemble:
    return train(dataset.X, dataset.y, config, dataset.feature_names)


def predict(model: Ensemble, X) -> np.ndarray:
    X = _check_matrix(X, model.n_features)
    links, threshold, value, roots = model.routing
    return _predict(X, links, threshold, value, roots, model.base_score)


# --- serialization ------------------------------------------------------------


def _tree_document(tree: Tree) -> dict:
    nodes = []
    for i in range(tree.n_nodes):
        leaf = bool(tree.feature[i] < 0)
        nodes.append(
            {
                "id": i,
                "kind": "leaf" if leaf else "split",
                "feature": None if leaf else int(tree.feature[i]),
                "threshold": None if leaf else float(tree.threshold[i]),
                "left": None if leaf else int(tree.left[i]),
                "right": None if leaf else int(tree.right[i]),
                "weight": float(tree.value[i]) if leaf else None,
                "cover": float(tree.cover[i]),
            }
        )
    return {"nodes": nodes}


def to_document(model: Ensemble) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "base_score": model.base_score,
        "feature_names": list(model.feature_names),
        "trees": [_tree_document(t) for t in model.trees],
    }


def save(model: Ensemble) -> bytes:
    return json.dumps(to_document(model), allow_nan=False).encode("utf-8")


def _require(cond, where, msg):
    if not cond:
        raise ParseError(f"{where}: {msg}")


def _number(value, where, allow_none=False):
    if value is None and allow_none:
        return None
    _require(
        isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value),
        where,
        f"expected a finite number, got {value!r}",
    )
    return float(value)


def _parse_tree(doc, where: str, m: int) -> Tree:
    _require(isinstance(doc, dict) and isinstance(doc.get("nodes"), list), where, "expected {'nodes': [...]}")
    nodes = doc["nodes"]
    _require(len(nodes) > 0, where, "tree has no nodes")
    k = len(nodes)
    feature = np.full(k, -1, dtype=np.int64)
    threshold = np.zeros(k)
    left = np.full(k, -1, dtype=np.int64)
    right = np.full(k, -1, dtype=np.int64)
    value = np.zeros(k)
    cover = np.zeros(k)
    seen = set()
    for pos, node in enumerate(nodes):
        at = f"{where}.nodes[{pos}]"
        _require(isinstance(node, dict), at, "expected an object")
        nid = node.get("id")
        _require(isinstance(nid, int) and not isinstance(nid, bool) and 0 <= nid < k, f"{at}.id", f"expected an integer in [0, {k})")
        _require(nid not in seen, f"{at}.id", f"duplicate node id {nid}")
        seen.add(nid)
        cover[nid] = _number(node.get("cover"), f"{at}.cover")
        kind = node.get("kind")
        if kind == "leaf":
            value[nid] = _number(node.get("weight"), f"{at}.weight")
        elif kind == "split":
            f = node.get("feature")
            _require(isinstance(f, int) and not isinstance(f, bool) and 0 <= f < m, f"{at}.feature", f"expected a feature index in [0, {m})")
            feature[nid] = f
            threshold[nid] = _number(node.get("threshold"), f"{at}.threshold")
            for side, arr in (("left", left), ("right", right)):
                c = node.get(side)
                _require(isinstance(c, int) and not isinstance(c, bool) and 0 <= c < k, f"{at}.{side}", "expected a node id")
                arr[nid] = c
        else:
            raise ParseError(f"{at}.kind: expected 'leaf' or 'split', got {kind!r}")
    # every node reachable exactly once from the root
    visits = np.zeros(k, dtype=np.int64)
    stack = [0]
    while stack:
        node = stack.pop()
        visits[node] += 1
        _require(visits[node] == 1, where, f"node {node} is reachable more than once")
        if feature[node] >= 0:
            stack.extend((int(left[node]), int(right[node])))
    _require(np.all(visits == 1), where, "tree has unreachable nodes")
    return Tree(feature, threshold, left, right, value, cover)


def from_document(doc) -> Ensemble:
    _require(isinstance(doc, dict), "$", "expected a JSON object")
    _require(doc.get("format_version") == FORMAT_VERSION, "$.format_version", f"expected {FORMAT_VERSION}")
    base = _number(doc.get("base_score"), "$.base_score")
    names = doc.get("feature_names")
    _require(isinstance(names, list) and all(isinstance(s, str) for s in names), "$.feature_names", "expected a list of strings")
    trees = doc.get("trees")
    _require(isinstance(trees, list), "$.trees", "expected a list")
    parsed = tuple(_parse_tree(t, f"$.trees[{i}]", len(names)) for i, t in enumerate(trees))
    return Ensemble(parsed, base, tuple(names))


def load(payload: bytes | str) -> Ensemble:
    if isinstance(payload, bytes):
        try:
            payload = payload.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"byte {exc.start}: not valid UTF-8") from exc
    try:
        doc = json.loads(payload)
    except json.JSONDecodeError as exc:
        raise ParseError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return from_document(doc)
