"""Extremely randomized trees with sample weights and class weights.

Trees are grown on the full training set (no bootstrap). At every node up to
``k_features`` non-constant features are drawn without replacement, each gets
one threshold drawn uniformly inside the feature's range over the node, and
the candidate with the lowest weighted Gini impurity wins.

The growing and traversal loops are compiled with numba; everything else is
plain numpy.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numba import njit

from ._rng import open_uniform, randbelow

FORMAT_VERSION = 1


class ForestError(ValueError):
    """Invalid training data or model usage."""


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 50
    k_features: int | None = None  # None -> ceil(sqrt(D))
    min_samples_leaf: int = 5
    class_weights: tuple[float, ...] | None = None  # None -> all ones
    max_depth: int | None = None
    seed: int = 0
    n_threads: int = 1

    def __post_init__(self):
        if self.n_trees < 1:
            raise ForestError("n_trees must be >= 1")
        if self.min_samples_leaf < 1:
            raise ForestError("min_samples_leaf must be >= 1")
        if self.k_features is not None and self.k_features < 1:
            raise ForestError("k_features must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ForestError("max_depth must be >= 0")
        if self.class_weights is not None and any(c <= 0 for c in self.class_weights):
            raise ForestError("class weights must be positive")

    def resolved_k(self, n_features: int) -> int:
        k = self.k_features if self.k_features is not None else math.ceil(math.sqrt(n_features))
        if not 1 <= k <= n_features:
            raise ForestError(f"k_features={k} outside [1, {n_features}]")
        return k


@dataclass
class Tree:
    """Flat node arrays; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[i] + 1
                depth[self.right[i]] = depth[i] + 1
        return int(depth.max())


@dataclass
class ForestModel:
    trees: list[Tree]
    n_classes: int
    n_features: int
    config: ForestConfig
    _packed: tuple | None = field(default=None, repr=False, compare=False)

    def packed(self):
        if self._packed is None:
            offsets = np.cumsum([0] + [t.n_nodes for t in self.trees])
            feature = np.concatenate([t.feature for t in self.trees])
            threshold = np.concatenate([t.threshold for t in self.trees])
            left = np.concatenate([t.left + o for t, o in zip(self.trees, offsets[:-1])])
            right = np.concatenate([t.right + o for t, o in zip(self.trees, offsets[:-1])])
            value = np.concatenate([t.value for t in self.trees])
            self._packed = (offsets[:-1].astype(np.int64), feature, threshold, left, right, value)
        return self._packed

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for t in self.trees:
            for arr in (t.feature, t.threshold, t.left, t.right, t.value):
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


# --------------------------------------------------------------------------
# compiled kernels


@njit(nogil=True, cache=True)
def _grow_tree(X, y, w, n_classes, k_features, min_leaf, max_depth, seed):
    n, d = X.shape
    max_nodes = 2 * n + 1
    feature = np.full(max_nodes, -1, dtype=np.int32)
    threshold = np.zeros(max_nodes)
    left = np.full(max_nodes, -1, dtype=np.int32)
    right = np.full(max_nodes, -1, dtype=np.int32)
    value = np.zeros((max_nodes, n_classes))

    state = np.empty(1, dtype=np.uint64)
    state[0] = np.uint64(seed)

    idx = np.arange(n)
    perm = np.arange(d)
    st_node = np.empty(max_nodes, dtype=np.int64)
    st_start = np.empty(max_nodes, dtype=np.int64)
    st_end = np.empty(max_nodes, dtype=np.int64)
    st_depth = np.empty(max_nodes, dtype=np.int64)
    top = 0
    st_node[0] = 0
    st_start[0] = 0
    st_end[0] = n
    st_depth[0] = 0
    top = 1
    n_nodes = 1

    wl = np.zeros(n_classes)
    wr = np.zeros(n_classes)

    while top > 0:
        top -= 1
        node = st_node[top]
        start = st_start[top]
        end = st_end[top]
        depth = st_depth[top]
        count = end - start

        total = 0.0
        for i in range(start, end):
            s = idx[i]
            value[node, y[s]] += w[s]
            total += w[s]
        n_present = 0
        for c in range(n_classes):
            if value[node, c] > 0.0:
                n_present += 1

        best_f = -1
        best_t = 0.0
        if n_present > 1 and count >= 2 * min_leaf and (max_depth < 0 or depth < max_depth):
            best_score = np.inf
            drawn = 0
            remaining = d
            while drawn < k_features and remaining > 0:
                j = randbelow(state, remaining)
                f = perm[j]
                perm[j] = perm[remaining - 1]
                perm[remaining - 1] = f
                remaining -= 1

                lo = X[idx[start], f]
                hi = lo
                for i in range(start + 1, end):
                    v = X[idx[i], f]
                    if v < lo:
                        lo = v
                    elif v > hi:
                        hi = v
                if not hi > lo:
                    continue
                drawn += 1
                t = lo + open_uniform(state) * (hi - lo)
                if not (t > lo and t < hi):
                    t = 0.5 * (lo + hi)
                    if not (t > lo and t < hi):
                        continue

                wl[:] = 0.0
                wr[:] = 0.0
                nl = 0
                for i in range(start, end):
                    s = idx[i]
                    if X[s, f] <= t:
                        wl[y[s]] += w[s]
                        nl += 1
                    else:
                        wr[y[s]] += w[s]
                nr = count - nl
                if nl < min_leaf or nr < min_leaf:
                    continue
                WL = 0.0
                WR = 0.0
                for c in range(n_classes):
                    WL += wl[c]
                    WR += wr[c]
                score = 0.0
                if WL > 0.0:
                    sq = 0.0
                    for c in range(n_classes):
                        sq += wl[c] * wl[c]
                    score += WL - sq / WL
                if WR > 0.0:
                    sq = 0.0
                    for c in range(n_classes):
                        sq += wr[c] * wr[c]
                    score += WR - sq / WR
                # score / total is the size-weighted child Gini; total is constant per node
                if score < best_score:
                    best_score = score
                    best_f = f
                    best_t = t

        if best_f < 0:
            for c in range(n_classes):
                value[node, c] /= total
            continue

        # partition idx[start:end] so that X <= t comes first
        i = start
        j = end - 1
        while i <= j:
            if X[idx[i], best_f] <= best_t:
                i += 1
            else:
                tmp = idx[i]
                idx[i] = idx[j]
                idx[j] = tmp
                j -= 1
        mid = i

        feature[node] = best_f
        threshold[node] = best_t
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        # push right first so the left subtree is numbered depth-first
        st_node[top] = rc
        st_start[top] = mid
        st_end[top] = end
        st_depth[top] = depth + 1
        top += 1
        st_node[top] = lc
        st_start[top] = start
        st_end[top] = mid
        st_depth[top] = depth + 1
        top += 1

    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        value[:n_nodes].copy(),
    )


@njit(nogil=True, cache=True)
def _predict_packed(X, roots, feature, threshold, left, right, value, out):
    n = X.shape[0]
    n_trees = roots.shape[0]
    n_classes = value.shape[1]
    for r in range(n):
        for c in range(n_classes):
            out[r, c] = 0.0
        for t in range(n_trees):
            node = roots[t]
            while feature[node] >= 0:
                if X[r, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            for c in range(n_classes):
                out[r, c] += value[node, c]
        for c in range(n_classes):
            out[r, c] /= n_trees


@njit(nogil=True, cache=True)
def _leaf_ids(X, roots, feature, threshold, left, right, out):
    for r in range(X.shape[0]):
        for t in range(roots.shape[0]):
            node = roots[t]
            while feature[node] >= 0:
                if X[r, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            out[r, t] = node


# --------------------------------------------------------------------------
# public API


def tree_seeds(seed: int, n_trees: int) -> list[int]:
    ss = np.random.SeedSequence(seed)
    return [int(s.generate_state(1, np.uint64)[0]) for s in ss.spawn(n_trees)]


def _check_xyw(X, y, w):
    X = np.ascontiguousarray(X)
    if X.dtype not in (np.float32, np.float64):
        X = X.astype(np.float64)
    if X.ndim != 2:
        raise ForestError("X must be 2-D")
    y = np.asarray(y)
    if y.shape != (X.shape[0],):
        raise ForestError("y length does not match X")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ForestError("labels must be integers")
    y = y.astype(np.int64)
    if y.size and y.min() < 0:
        raise ForestError("labels must be non-negative")
    w = np.ones(X.shape[0]) if w is None else np.asarray(w, dtype=np.float64)
    if w.shape != (X.shape[0],):
        raise ForestError("w length does not match X")
    if np.isnan(X).any():
        raise ForestError("X contains NaN")
    if (w < 0).any() or not np.isfinite(w).all():
        raise ForestError("weights must be finite and non-negative")
    return X, y, w


def fit_extratrees(X, y, w=None, cfg: ForestConfig = ForestConfig(), n_classes: int | None = None) -> ForestModel:
    """Fit an ExtraTrees ensemble.

    Rows with zero weight are dropped before growing, so they can never
    influence a split or a leaf. Effective per-sample weight is
    ``w[i] * class_weights[y[i]]`` for both the impurity and leaf estimates.
    """
    X, y, w = _check_xyw(X, y, w)
    if X.shape[0] < 2:
        raise ForestError("need at least two samples")
    n_classes = int(max(y.max() + 1, n_classes or 0))
    cw = np.ones(n_classes) if cfg.class_weights is None else np.asarray(cfg.class_weights, float)
    if cw.shape[0] < n_classes:
        raise ForestError(f"class_weights has {cw.shape[0]} entries, need {n_classes}")
    w_eff = w * cw[y]
    keep = w_eff > 0
    if not keep.any():
        raise ForestError("total sample weight is zero")
    X, y, w_eff = np.ascontiguousarray(X[keep]), y[keep], w_eff[keep]
    if np.count_nonzero(np.bincount(y, weights=w_eff, minlength=n_classes) > 0) < 2:
        raise ForestError("need at least two classes with positive weight")

    k = cfg.resolved_k(X.shape[1])
    max_depth = -1 if cfg.max_depth is None else cfg.max_depth
    seeds = tree_seeds(cfg.seed, cfg.n_trees)

    def grow(s):
        return Tree(*_grow_tree(X, y, w_eff, n_classes, k, cfg.min_samples_leaf, max_depth, np.uint64(s)))

    if cfg.n_threads > 1:
        with ThreadPoolExecutor(cfg.n_threads) as pool:
            trees = list(pool.map(grow, seeds))
    else:
        trees = [grow(s) for s in seeds]
    return ForestModel(trees=trees, n_classes=n_classes, n_features=X.shape[1], config=cfg)


def predict_proba(m: ForestModel, X, n_threads: int | None = None) -> np.ndarray:
    X = np.ascontiguousarray(X)
    if X.ndim != 2 or X.shape[1] != m.n_features:
        raise ForestError(f"expected {m.n_features} features, got shape {X.shape}")
    roots, feature, threshold, left, right, value = m.packed()
    out = np.zeros((X.shape[0], m.n_classes))
    n_threads = n_threads or m.config.n_threads
    if n_threads > 1 and X.shape[0] > 4096:
        bounds = np.linspace(0, X.shape[0], n_threads + 1).astype(int)

        def run(i):
            a, b = bounds[i], bounds[i + 1]
            _predict_packed(X[a:b], roots, feature, threshold, left, right, value, out[a:b])

        with ThreadPoolExecutor(n_threads) as pool:
            list(pool.map(run, range(n_threads)))
    else:
        _predict_packed(X, roots, feature, threshold, left, right, value, out)
    return out


def apply(m: ForestModel, X) -> np.ndarray:
    """Leaf node index (local to each tree) reached by every row, shape (Q, n_trees)."""
    X = np.ascontiguousarray(X)
    roots, feature, threshold, left, right, _ = m.packed()
    out = np.empty((X.shape[0], len(m.trees)), dtype=np.int64)
    _leaf_ids(X, roots, feature, threshold, left, right, out)
    return out - roots[None, :]


def gini(counts: Sequence[float]) -> float:
    counts = np.asarray(counts, dtype=float)
    total = counts.sum()
    if total <= 0:
        return 0.0
    p = counts / total
    return float(1.0 - np.sum(p * p))


# --------------------------------------------------------------------------
# hyperparameter search


def dice_score(y_true, y_pred) -> float:
    a = np.asarray(y_true).astype(bool)
    b = np.asarray(y_pred).astype(bool)
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return 2.0 * np.logical_and(a, b).sum() / denom


def contiguous_folds(n: int, folds: int) -> np.ndarray:
    return (np.arange(n) * folds // max(n, 1)).astype(np.int64)


def cv_select_hparams(
    X,
    y,
    w,
    cw_grid: Sequence[float] = (1, 2, 5, 10, 20),
    leaf_grid: Sequence[int] = (1, 5, 10, 25, 50),
    folds: int = 3,
    metric: Callable = dice_score,
    groups=None,
    cfg: ForestConfig = ForestConfig(),
) -> tuple[float, int]:
    """Pick the lesion class weight, then min_samples_leaf, by held-out score.

    The two searches run one after the other: class weight with
    ``cfg.min_samples_leaf``, then leaf size with the winning class weight.
    ``groups`` assigns each row to a fold; by default rows are cut into
    contiguous blocks in their given order. Folds whose training or held-out
    part lacks a class are skipped. Ties go to the smaller class weight and
    the larger leaf size.
    """
    if folds < 2:
        raise ForestError("folds must be >= 2")
    if not len(cw_grid) or not len(leaf_grid):
        raise ForestError("grids must be nonempty")
    X, y, w = _check_xyw(X, y, w)
    groups = contiguous_folds(len(y), folds) if groups is None else np.asarray(groups)

    splits = []
    for f in range(folds):
        test = groups == f
        train = ~test
        if len(np.unique(y[train][w[train] > 0])) < 2 or len(np.unique(y[test])) < 2:
            continue
        splits.append((train, test))
    if not splits:
        raise ForestError("every cross-validation fold is single-class")

    def score(cw: float, leaf: int) -> float:
        c = replace(cfg, class_weights=(1.0, float(cw)), min_samples_leaf=int(leaf))
        vals = []
        for train, test in splits:
            m = fit_extratrees(X[train], y[train], w[train], c, n_classes=2)
            pred = predict_proba(m, X[test])[:, 1] >= 0.5
            vals.append(metric(y[test] == 1, pred))
        return float(np.mean(vals))

    best_cw, best = None, -np.inf
    for cw in sorted(cw_grid):
        s = score(cw, cfg.min_samples_leaf)
        if s > best:
            best_cw, best = cw, s
    best_leaf, best = None, -np.inf
    for leaf in sorted(leaf_grid, reverse=True):
        s = score(best_cw, leaf)
        if s > best:
            best_leaf, best = leaf, s
    return float(best_cw), int(best_leaf)


# --------------------------------------------------------------------------
# serialization


def save_forest(m: ForestModel, path: str | Path, feature_layout: str = "") -> None:
    header = {
        "format_version": FORMAT_VERSION,
        "n_classes": m.n_classes,
        "n_features": m.n_features,
        "n_trees": len(m.trees),
        "config": asdict(m.config),
        "feature_layout": feature_layout,
        "content_hash": m.content_hash(),
    }
    arrays = {"header": np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)}
    for i, t in enumerate(m.trees):
        for name in ("feature", "threshold", "left", "right", "value"):
            arrays[f"t{i}_{name}"] = getattr(t, name)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_forest(path: str | Path) -> ForestModel:
    with np.load(path) as data:
        header = json.loads(data["header"].tobytes().decode())
        if header.get("format_version") != FORMAT_VERSION:
            raise ForestError(f"{path}: unsupported forest format {header.get('format_version')}")
        trees = [
            Tree(*(data[f"t{i}_{n}"] for n in ("feature", "threshold", "left", "right", "value")))
            for i in range(header["n_trees"])
        ]
    cfg = dict(header["config"])
    if cfg.get("class_weights") is not None:
        cfg["class_weights"] = tuple(cfg["class_weights"])
    m = ForestModel(trees, header["n_classes"], header["n_features"], ForestConfig(**cfg))
    if m.content_hash() != header["content_hash"]:
        raise ForestError(f"{path}: content hash mismatch")
    return m
