"""Pixel-based random forest baseline: CART trees, bagging, grid-search CV.

Split candidates are midpoints between consecutive sorted unique feature
values, so every chosen split can be checked against an exhaustive
best-gain search. Ties break toward the first candidate in scan order;
classification votes tie toward the lower class index.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .grids import Raster
from .scenegen import CLP_CLEAR, LabelSet, SceneStack


@dataclass
class ForestHyper:
    n_estimators: int = 180
    max_depth: int = 40
    min_samples_split: int = 3
    min_samples_leaf: int = 1
    features_per_split: str = "auto"  # "auto" | "all"  (auto: sqrt(p) / p//3)
    seed: int = 0

    def __post_init__(self):
        if min(self.n_estimators, self.max_depth + 1, self.min_samples_split, self.min_samples_leaf) <= 0:
            raise ValueError("forest hyperparameters must be positive")
        if self.min_samples_leaf > self.min_samples_split:
            raise ValueError("min_samples_leaf must not exceed min_samples_split")


@dataclass
class PixelDataset:
    features: np.ndarray  # [n, p]
    labels: np.ndarray  # [n] class indices or reals
    provenance: list = field(default_factory=list)  # (scene id, pixel index)

    def __len__(self):
        return len(self.labels)


@dataclass
class Tree:
    """Flat node arrays; leaves have feature == -1 and value set."""

    feature: np.ndarray  # int, -1 for leaf
    threshold: np.ndarray  # float
    left: np.ndarray  # int child index
    right: np.ndarray
    value: np.ndarray  # leaf prediction

    def predict(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(len(x), dtype=np.int64)
        active = self.feature[node] >= 0
        while np.any(active):
            idx = np.nonzero(active)[0]
            nd = node[idx]
            go_left = x[idx, self.feature[nd]] <= self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            active[idx] = self.feature[node[idx]] >= 0
        return self.value[node]


@dataclass
class Forest:
    task: str  # "classification" | "regression"
    hyper: ForestHyper
    trees: list
    n_classes: int = 0


def _gini(counts: np.ndarray) -> float:
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts / n
    return 1.0 - float((p * p).sum())


def best_split_brute(x: np.ndarray, y: np.ndarray, task: str, feature_indices=None):
    """Exhaustive best (feature, threshold) by impurity decrease.

    Serves both as the production split search and the oracle the tests
    compare against; candidates are midpoints of consecutive unique values.
    Returns (feature, threshold, gain) or None when no split helps.
    """
    n, p = x.shape
    feats = range(p) if feature_indices is None else feature_indices
    best = None
    if task == "classification":
        classes, yi = np.unique(y, return_inverse=True)
        k = len(classes)
        parent = _gini(np.bincount(yi, minlength=k))
    else:
        parent = float(np.var(y))
    for f in feats:
        order = np.argsort(x[:, f], kind="stable")
        xs = x[order, f]
        if task == "classification":
            ys = yi[order]
            onehot = np.zeros((n, k))
            onehot[np.arange(n), ys] = 1.0
            cum = np.cumsum(onehot, axis=0)
            total = cum[-1]
        else:
            ys = y[order]
            cum_s = np.cumsum(ys)
            cum_s2 = np.cumsum(ys * ys)
        # split after position i (left = first i+1 samples); only where the
        # feature value changes do we get a distinct midpoint threshold
        change = np.nonzero(np.diff(xs) > 0)[0]
        for i in change:
            nl = i + 1
            nr = n - nl
            if task == "classification":
                lc = cum[i]
                rc = total - lc
                child = (nl * _gini(lc) + nr * _gini(rc)) / n
            else:
                sl, sl2 = cum_s[i], cum_s2[i]
                sr, sr2 = cum_s[-1] - sl, cum_s2[-1] - sl2
                var_l = sl2 / nl - (sl / nl) ** 2
                var_r = sr2 / nr - (sr / nr) ** 2
                child = (nl * var_l + nr * var_r) / n
            gain = parent - child
            if best is None or gain > best[2] + 1e-15:
                thr = 0.5 * (xs[i] + xs[i + 1])
                best = (f, float(thr), float(gain))
    if best is None or best[2] <= 1e-12:
        return None
    return best


def _leaf_value(y: np.ndarray, task: str) -> float:
    if task == "classification":
        counts = np.bincount(y.astype(np.int64))
        return float(np.argmax(counts))  # argmax ties toward lower class
    return float(y.mean())


def _n_features_per_split(p: int, task: str, rule: str) -> int:
    if rule == "all":
        return p
    if task == "classification":
        return max(1, int(math.sqrt(p)))
    return max(1, p // 3)


def fit_tree(data: PixelDataset, hyper: ForestHyper, task: str, seed: int) -> Tree:
    rng = np.random.default_rng(seed)
    x = np.asarray(data.features, dtype=np.float64)
    y = np.asarray(data.labels)
    p = x.shape[1]
    msub = _n_features_per_split(p, task, hyper.features_per_split)

    feature, threshold, left, right, value = [], [], [], [], []

    def add_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feature) - 1

    # iterative depth-first build, deterministic order
    root = add_node()
    stack = [(root, np.arange(len(y)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        ysub = y[idx]
        pure = len(np.unique(ysub)) == 1
        if depth >= hyper.max_depth or len(idx) < hyper.min_samples_split or pure:
            value[node] = _leaf_value(ysub, task)
            continue
        feats = sorted(rng.choice(p, size=msub, replace=False).tolist())
        split = best_split_brute(x[idx], ysub, task, feats)
        if split is None:
            value[node] = _leaf_value(ysub, task)
            continue
        f, thr, _ = split
        go_left = x[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        if len(li) < hyper.min_samples_leaf or len(ri) < hyper.min_samples_leaf:
            value[node] = _leaf_value(ysub, task)
            continue
        feature[node] = f
        threshold[node] = thr
        ln = add_node()
        rn = add_node()
        left[node], right[node] = ln, rn
        stack.append((rn, ri, depth + 1))
        stack.append((ln, li, depth + 1))

    return Tree(
        np.asarray(feature, dtype=np.int64),
        np.asarray(threshold, dtype=np.float64),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(value, dtype=np.float64),
    )


def fit_forest(data: PixelDataset, hyper: ForestHyper, task: str) -> Forest:
    """Bagged trees on bootstrap resamples; tree i is seeded hyper.seed + i."""
    n = len(data)
    trees = []
    for i in range(hyper.n_estimators):
        rng = np.random.default_rng(hyper.seed + i)
        boot = rng.integers(0, n, size=n)
        sub = PixelDataset(data.features[boot], data.labels[boot])
        trees.append(fit_tree(sub, hyper, task, seed=hyper.seed + i))
    n_classes = int(np.max(data.labels)) + 1 if task == "classification" else 0
    return Forest(task, hyper, trees, n_classes)


def predict_forest(forest: Forest, features: np.ndarray) -> np.ndarray:
    preds = np.stack([t.predict(features) for t in forest.trees])
    if forest.task == "regression":
        return preds.mean(axis=0)
    votes = np.zeros((len(features), forest.n_classes))
    for row in preds.astype(np.int64):
        votes[np.arange(len(features)), row] += 1
    return votes.argmax(axis=1).astype(np.float64)  # argmax ties toward lower class


def sample_pixels(features: np.ndarray, labels: np.ndarray, n: int, seed: int, provenance=None) -> PixelDataset:
    """Uniform sample without replacement of valid pixels."""
    total = len(labels)
    if n > total:
        raise ValueError(f"requested {n} pixels but only {total} available")
    rng = np.random.default_rng(seed)
    idx = rng.choice(total, size=n, replace=False)
    idx.sort()
    prov = [provenance[i] for i in idx] if provenance is not None else []
    return PixelDataset(features[idx], labels[idx], prov)


def grid_search_cv(data: PixelDataset, grid: list, task: str, k_folds: int = 5, seed: int = 0):
    """K-fold CV over a hyperparameter grid; score = OA or -RMSE.

    Returns (best hyper, table of (hyper, mean score)); ties keep the first
    grid entry.
    """
    if not grid:
        raise ValueError("empty hyperparameter grid")
    n = len(data)
    folds = np.random.default_rng(seed).permutation(n) % k_folds
    table = []
    best = None
    for hyper in grid:
        scores = []
        for k in range(k_folds):
            tr, te = folds != k, folds == k
            if not np.any(te) or not np.any(tr):
                continue
            f = fit_forest(PixelDataset(data.features[tr], data.labels[tr]), hyper, task)
            pred = predict_forest(f, data.features[te])
            if task == "classification":
                scores.append(float(np.mean(pred == data.labels[te])))
            else:
                scores.append(-float(np.sqrt(np.mean((pred - data.labels[te]) ** 2))))
        score = float(np.mean(scores))
        table.append((hyper, score))
        if best is None or score > best[1]:
            best = (hyper, score)
    return best[0], table


@dataclass
class ForestSuite:
    clp: Forest
    cth: Forest
    cer: Forest
    cot: Forest
    log_cot: bool = True


def predict_scene_rf(suite: ForestSuite, stack: SceneStack) -> tuple[LabelSet, float]:
    """Per-pixel full-scene inference; returns labels and pure-inference time."""
    arr = stack.to_array().astype(np.float64)
    c, h, w = arr.shape
    feats23 = arr.reshape(c, -1).T
    grid = stack.grid
    t0 = time.perf_counter()
    clp_flat = predict_forest(suite.clp, feats23)
    feats24 = np.concatenate([feats23, (clp_flat / 2.0)[:, None]], axis=1)
    prop = {}
    for var in ("cth", "cer", "cot"):
        vals = predict_forest(getattr(suite, var), feats24)
        if var == "cot" and suite.log_cot:
            vals = 10.0**vals
        prop[var] = vals.reshape(h, w)
    elapsed = time.perf_counter() - t0

    clp_map = clp_flat.reshape(h, w)
    cloudy = clp_map != CLP_CLEAR
    ones = np.ones(grid.shape, dtype=bool)
    return (
        LabelSet(
            clp=Raster(grid, clp_map, ones.copy()),
            cth=Raster(grid, np.where(cloudy, prop["cth"], 0.0), cloudy.copy()),
            cer=Raster(grid, np.where(cloudy, prop["cer"], 0.0), cloudy.copy()),
            cot=Raster(grid, np.where(cloudy, prop["cot"], 0.0), cloudy.copy()),
            coverage=Raster(grid, np.ones(grid.shape), ones.copy()),
        ),
        elapsed,
    )


# --- JSON serialization ------------------------------------------------------


def save_forest(forest: Forest, path) -> None:
    doc = {
        "task": forest.task,
        "n_classes": forest.n_classes,
        "hyper": {
            "n_estimators": forest.hyper.n_estimators,
            "max_depth": forest.hyper.max_depth,
            "min_samples_split": forest.hyper.min_samples_split,
            "min_samples_leaf": forest.hyper.min_samples_leaf,
            "features_per_split": forest.hyper.features_per_split,
            "seed": forest.hyper.seed,
        },
        "trees": [
            {
                "feature": t.feature.tolist(),
                "threshold": t.threshold.tolist(),
                "left": t.left.tolist(),
                "right": t.right.tolist(),
                "value": t.value.tolist(),
            }
            for t in forest.trees
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True)


def load_forest(path) -> Forest:
    with open(path) as f:
        doc = json.load(f)
    trees = [
        Tree(
            np.asarray(t["feature"], dtype=np.int64),
            np.asarray(t["threshold"], dtype=np.float64),
            np.asarray(t["left"], dtype=np.int64),
            np.asarray(t["right"], dtype=np.int64),
            np.asarray(t["value"], dtype=np.float64),
        )
        for t in doc["trees"]
    ]
    return Forest(doc["task"], ForestHyper(**doc["hyper"]), trees, doc["n_classes"])
