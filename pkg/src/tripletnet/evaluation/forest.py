"""Bagged CART classifier with Gini splits, used as the site-leakage probe."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_depth: int | None = None
    max_features: int | None = None  # None -> ceil(sqrt(M))
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")

    def features_per_split(self, n_features: int) -> int:
        k = self.max_features if self.max_features is not None else math.ceil(math.sqrt(n_features))
        return max(1, min(k, n_features))


@dataclass
class Tree:
    feature: np.ndarray    # -1 at leaves
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    label: np.ndarray      # majority class at every node

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return self.label[node]
            r, n = rows[inner], node[inner]
            go_left = X[r, f[inner]] <= self.threshold[n]
            node[inner] = np.where(go_left, self.left[n], self.right[n])


@dataclass
class Forest:
    trees: list[Tree]
    n_classes: int
    importances: np.ndarray

    def predict(self, X) -> np.ndarray:
        return predict_forest(self, X)


def _gini(counts: np.ndarray) -> float:
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts / n
    return 1.0 - float(p @ p)


def _best_split(X: np.ndarray, y: np.ndarray, n_classes: int, feats: np.ndarray, rank: np.ndarray):
    """Lowest weighted child Gini over ``feats``; ties go to the lowest-``rank`` feature."""
    n = len(y)
    vals = X[:, feats]
    order = np.argsort(vals, axis=0, kind="stable")
    sv = np.take_along_axis(vals, order, axis=0)
    onehot = np.zeros((n, len(feats), n_classes))
    np.put_along_axis(onehot, y[order][:, :, None], 1.0, axis=2)
    left = np.cumsum(onehot, axis=0)[:-1]                      # (n-1, k, C)
    total = left[-1] + onehot[-1] if n > 1 else onehot[0]
    right = total[None] - left
    nl = np.arange(1, n, dtype=np.float64)[:, None]
    nr = n - nl
    gl = 1.0 - np.sum(left * left, axis=2) / (nl * nl)
    gr = 1.0 - np.sum(right * right, axis=2) / (nr * nr)
    cost = (nl * gl + nr * gr) / n
    valid = sv[:-1] < sv[1:]
    cost = np.where(valid, cost, np.inf)
    pos = np.argmin(cost, axis=0)
    per_feat = cost[pos, np.arange(len(feats))]
    best = per_feat.min()
    if not np.isfinite(best):
        return None
    tied = np.flatnonzero(per_feat == best)
    j = tied[np.argmin(rank[feats[tied]])]
    i = pos[j]
    thr = 0.5 * (sv[i, j] + sv[i + 1, j])
    if not thr < sv[i + 1, j]:  # midpoint rounded onto the upper value
        thr = sv[i, j]
    return int(feats[j]), float(thr), float(best)


def build_tree(X: np.ndarray, y: np.ndarray, n_classes: int, k: int, rng: np.random.Generator,
               max_depth: int | None, rank: np.ndarray, importances: np.ndarray) -> Tree:
    M = X.shape[1]
    feature, threshold, left, right, label = [], [], [], [], []
    N = len(y)

    def new_node(lab):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        label.append(lab)
        return len(feature) - 1

    root_counts = np.bincount(y, minlength=n_classes)
    stack = [(np.arange(N), 0, new_node(int(np.argmax(root_counts))), root_counts)]
    while stack:
        idx, depth, node, counts = stack.pop()
        parent_gini = _gini(counts)
        if parent_gini == 0.0 or len(idx) < 2 or (max_depth is not None and depth >= max_depth):
            continue
        Xn, yn = X[idx], y[idx]
        feats = np.sort(rng.choice(M, size=k, replace=False)) if k < M else np.arange(M)
        split = _best_split(Xn, yn, n_classes, feats, rank)
        if split is None and k < M:
            rest = np.setdiff1d(np.arange(M), feats)
            split = _best_split(Xn, yn, n_classes, rest, rank)
        if split is None:
            continue
        f, thr, cost = split
        mask = Xn[:, f] <= thr
        li, ri = idx[mask], idx[~mask]
        importances[f] += len(idx) / N * (parent_gini - cost)
        lc = np.bincount(y[li], minlength=n_classes)
        rc = np.bincount(y[ri], minlength=n_classes)
        feature[node], threshold[node] = f, thr
        left[node] = new_node(int(np.argmax(lc)))
        right[node] = new_node(int(np.argmax(rc)))
        stack.append((ri, depth + 1, right[node], rc))
        stack.append((li, depth + 1, left[node], lc))
    return Tree(np.array(feature), np.array(threshold), np.array(left), np.array(right), np.array(label))


def _column_rank(X: np.ndarray) -> np.ndarray:
    # canonical feature order from column contents, so ties do not depend on column position
    order = np.lexsort(X[::-1]) if X.shape[0] else np.arange(X.shape[1])
    rank = np.empty(X.shape[1], dtype=np.int64)
    rank[order] = np.arange(X.shape[1])
    return rank


def train_forest(features, labels, cfg: ForestConfig = ForestConfig(),
                 n_classes: int | None = None) -> Forest:
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("features must be N×M with one label per row")
    if len(y) < 2:
        raise ValueError("need at least two samples")
    n_classes = int(y.max()) + 1 if n_classes is None else n_classes
    rng = np.random.default_rng(cfg.seed)
    k = cfg.features_per_split(X.shape[1])
    rank = _column_rank(X)
    trees, imps = [], []
    for _ in range(cfg.n_trees):
        sample = rng.integers(0, len(y), size=len(y)) if cfg.bootstrap else np.arange(len(y))
        imp = np.zeros(X.shape[1])
        trees.append(build_tree(X[sample], y[sample], n_classes, k, rng, cfg.max_depth, rank, imp))
        imps.append(imp / imp.sum() if imp.sum() > 0 else imp)
    return Forest(trees, n_classes, np.mean(imps, axis=0))


def predict_forest(forest: Forest, features) -> np.ndarray:
    """Plurality vote over trees; ties resolve to the lowest class index."""
    X = np.asarray(features, dtype=np.float64)
    votes = np.zeros((len(X), forest.n_classes), dtype=np.int64)
    rows = np.arange(len(X))
    for tree in forest.trees:
        votes[rows, tree.predict(X)] += 1
    return np.argmax(votes, axis=1)
