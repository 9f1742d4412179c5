"""Random forest classifier with mean-decrease-in-impurity importances.

Trees are stored as flat arrays.  A row goes left when
``x[feature] <= threshold``.  Candidate features are redrawn at every node;
split thresholds are midpoints between adjacent distinct values.  Among
equally good splits the lowest feature index wins, then the lowest
threshold.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng

LEAF = -1
TIE_TOL = 1e-12


@dataclass(frozen=True)
class ForestConfig:
    n_estimators: int = 100
    criterion: str = "gini"
    max_features: float | str = "sqrt"
    min_samples_split: int = 2
    min_samples_leaf: int = 1
    bootstrap: bool = True
    max_samples: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_estimators < 1:
            raise ValueError("n_estimators must be >= 1")
        if self.criterion not in ("gini", "entropy"):
            raise ValueError(f"unknown criterion {self.criterion!r}")
        if self.max_features != "sqrt" and not (0 < float(self.max_features) <= 1):
            raise ValueError("max_features must be 'sqrt' or a fraction in (0, 1]")
        if self.min_samples_split < 2 or self.min_samples_leaf < 1:
            raise ValueError("min_samples_split >= 2 and min_samples_leaf >= 1 required")
        if self.max_samples is not None and self.max_samples < 1:
            raise ValueError("max_samples must be >= 1")

    def n_candidates(self, n_features: int) -> int:
        if self.max_features == "sqrt":
            return max(1, math.ceil(math.sqrt(n_features)))
        return max(1, math.ceil(float(self.max_features) * n_features))


def impurity(class_counts, criterion: str = "gini") -> float:
    counts = np.asarray(class_counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("impurity of an empty node is undefined")
    p = counts / total
    if criterion == "gini":
        return float(1.0 - np.sum(p * p))
    if criterion == "entropy":
        nz = p[p > 0]
        return float(-np.sum(nz * np.log2(nz)))
    raise ValueError(f"unknown criterion {criterion!r}")


def _impurity_vec(pos: np.ndarray, total: np.ndarray, criterion: str) -> np.ndarray:
    p = pos / total
    if criterion == "gini":
        return 2.0 * p * (1.0 - p)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(np.where(p > 0, p * np.log2(p), 0.0) + np.where(p < 1, (1 - p) * np.log2(1 - p), 0.0))
    return h


@dataclass(frozen=True, eq=False)
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray       # (n_nodes, 2) negatives, positives
    decrease: np.ndarray     # weighted impurity decrease per node (0 at leaves)

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row."""
        node = np.zeros(x.shape[0], dtype=np.int64)
        active = np.flatnonzero(self.feature[node] != LEAF)
        while active.size:
            n = node[active]
            go_left = x[active, self.feature[n]] <= self.threshold[n]
            node[active] = np.where(go_left, self.left[n], self.right[n])
            active = active[self.feature[node[active]] != LEAF]
        return node

    def leaf_positive_fraction(self) -> np.ndarray:
        return self.counts[:, 1] / self.counts.sum(axis=1)


def _best_split(xs: np.ndarray, ys: np.ndarray, feats: np.ndarray, min_leaf: int, criterion: str):
    """Best (feature, threshold, decrease) over the candidate features, or
    None when no admissible split exists."""
    n = ys.size
    total_pos = ys.sum()
    parent = _impurity_vec(np.array([total_pos], float), np.array([n], float), criterion)[0]
    best = None
    sizes = np.arange(1, n, dtype=np.float64)
    for f in np.sort(feats):
        col = xs[:, f]
        order = np.argsort(col, kind="stable")
        v = col[order]
        cum = np.cumsum(ys[order])[:-1].astype(np.float64)
        ok = v[1:] > v[:-1]
        if min_leaf > 1:
            ok &= (sizes >= min_leaf) & (n - sizes >= min_leaf)
        if not ok.any():
            continue
        il = _impurity_vec(cum, sizes, criterion)
        ir = _impurity_vec(total_pos - cum, n - sizes, criterion)
        gain = parent - (sizes * il + (n - sizes) * ir) / n
        gain = np.where(ok, gain, -np.inf)
        # gains equal up to rounding count as ties (lowest threshold, then feature)
        i = int(np.argmax(gain >= gain.max() - TIE_TOL))
        if best is None or gain[i] > best[2] + TIE_TOL:
            best = (int(f), 0.5 * (v[i] + v[i + 1]), float(gain[i]))
    return best


def grow_tree(x: np.ndarray, y: np.ndarray, config: ForestConfig, g: np.random.Generator) -> Tree:
    n_features = x.shape[1]
    k = config.n_candidates(n_features)
    feature, threshold, left, right, counts, decrease = [], [], [], [], [], []
    n_root = y.size

    def new_node(idx):
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        pos = int(y[idx].sum())
        counts.append((idx.size - pos, pos))
        decrease.append(0.0)
        return len(feature) - 1

    stack = [(new_node(np.arange(n_root)), np.arange(n_root))]
    while stack:
        node, idx = stack.pop()
        neg, pos = counts[node]
        if idx.size < config.min_samples_split or neg == 0 or pos == 0:
            continue
        feats = g.choice(n_features, size=k, replace=False) if k < n_features else np.arange(n_features)
        split = _best_split(x[idx], y[idx], feats, config.min_samples_leaf, config.criterion)
        if split is None:
            continue
        f, thr, gain = split
        go_left = x[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        feature[node], threshold[node] = f, thr
        decrease[node] = max(gain, 0.0) * idx.size / n_root
        left[node] = new_node(li)
        right[node] = new_node(ri)
        # right pushed first so the left subtree is numbered depth-first
        stack.append((right[node], ri))
        stack.append((left[node], li))
    return Tree(np.array(feature, dtype=np.int64), np.array(threshold), np.array(left, dtype=np.int64),
                np.array(right, dtype=np.int64), np.array(counts, dtype=np.int64), np.array(decrease))


@dataclass(frozen=True, eq=False)
class Forest:
    trees: tuple[Tree, ...]
    bootstrap_indices: tuple[np.ndarray, ...]
    config: ForestConfig
    n_features: int
    feature_names: tuple[str, ...] = ()

    def write_csv(self, path: str | Path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tree", "node", "feature", "threshold", "left", "right", "count_neg", "count_pos"])
            for t, tree in enumerate(self.trees):
                for i in range(tree.n_nodes):
                    w.writerow([t, i, int(tree.feature[i]), repr(float(tree.threshold[i])), int(tree.left[i]),
                                int(tree.right[i]), int(tree.counts[i, 0]), int(tree.counts[i, 1])])


def _fit_one(args):
    x, y, config, t = args
    g = rng.stream(config.seed, 21, t)
    n = y.size
    if config.bootstrap:
        size = n if config.max_samples is None else min(config.max_samples, n)
        idx = g.integers(0, n, size=size)
    elif config.max_samples is not None and config.max_samples < n:
        idx = np.sort(g.choice(n, size=config.max_samples, replace=False))
    else:
        idx = np.arange(n)
    return grow_tree(x[idx], y[idx], config, g), idx


def forest_fit(table, labels, config: ForestConfig = ForestConfig(), n_jobs: int = 1) -> Forest:
    """Grow ``n_estimators`` trees, each from its own seed-derived stream,
    so parallel and sequential growth give identical forests."""
    x = np.asarray(getattr(table, "rows", table), dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if not (np.any(y == 1) and np.any(y == 0)):
        raise ValueError("forest fitting needs both classes")
    jobs = [(x, y, config, t) for t in range(config.n_estimators)]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_fit_one, jobs))
    else:
        results = [_fit_one(j) for j in jobs]
    return Forest(tuple(r[0] for r in results), tuple(r[1] for r in results), config, x.shape[1],
                  tuple(getattr(table, "column_names", ())))


def forest_predict_proba(forest: Forest, table) -> np.ndarray:
    x = np.asarray(getattr(table, "rows", table), dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != forest.n_features:
        raise ValueError(f"table has {x.shape[-1]} columns, forest expects {forest.n_features}")
    total = np.zeros(x.shape[0])
    for tree in forest.trees:
        total += tree.leaf_positive_fraction()[tree.apply(x)]
    return total / len(forest.trees)


@dataclass(frozen=True)
class Importance:
    values: np.ndarray
    normalized: bool


def mdi(forest: Forest) -> Importance:
    """Mean decrease in impurity per feature, normalized to sum to one.  A
    forest without splits yields unnormalized zeros."""
    per_tree = np.zeros((len(forest.trees), forest.n_features))
    for t, tree in enumerate(forest.trees):
        internal = tree.feature != LEAF
        np.add.at(per_tree[t], tree.feature[internal], tree.decrease[internal])
    mean = per_tree.mean(axis=0)
    total = mean.sum()
    if total <= 0:
        return Importance(mean, False)
    return Importance(mean / total, True)
