"""Random forests (CART trees on bootstrap samples) for classification and
regression.

Trees are grown by numba kernels that release the GIL, so a thread pool can
build them concurrently. All randomness of a tree (its bootstrap rows and
the uniforms consumed by per-node feature sampling) is drawn up front from
a per-tree child of the forest seed, which keeps a fitted forest identical
for any number of worker threads.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numba import njit

CLASSIFY = "classify"
REGRESS = "regress"


@dataclass(frozen=True)
class Hyperparams:
    num_trees: int = 1000
    mtry: int | None = None  # None -> floor(sqrt(p))
    min_node_size: int = 1

    def resolve_mtry(self, p: int) -> int:
        m = self.mtry if self.mtry is not None else int(math.isqrt(p))
        return max(1, min(p, m))


CLASSIFIER_DEFAULTS = Hyperparams(num_trees=1000, min_node_size=1)
REGRESSOR_DEFAULTS = Hyperparams(num_trees=1000, min_node_size=5)


@njit(nogil=True, cache=True)
def _grow(X, y, rows, unif, mtry, min_node, n_classes):
    n = rows.size
    p = X.shape[1]
    cap = 2 * n + 1
    feat = np.full(cap, -1, np.int64)
    thr = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap)
    size = np.zeros(cap, np.int64)

    idx = rows.copy()
    tmp = np.empty(n, np.int64)
    stack_node = np.empty(cap, np.int64)
    stack_lo = np.empty(cap, np.int64)
    stack_hi = np.empty(cap, np.int64)
    counts = np.zeros(max(n_classes, 1), np.int64)
    lcounts = np.zeros(max(n_classes, 1), np.int64)
    perm = np.arange(p)
    chosen = np.empty(mtry, np.int64)
    vals = np.empty(n)

    n_nodes = 1
    top = 0
    stack_node[0] = 0
    stack_lo[0] = 0
    stack_hi[0] = n
    top = 1
    u_ptr = 0
    while top > 0:
        top -= 1
        node = stack_node[top]
        lo = stack_lo[top]
        hi = stack_hi[top]
        m = hi - lo
        size[node] = m

        # leaf value and purity
        pure = True
        if n_classes > 0:
            counts[:] = 0
            for i in range(lo, hi):
                counts[int(y[idx[i]])] += 1
            best_c = 0
            for c in range(n_classes):
                if counts[c] > counts[best_c]:
                    best_c = c
            value[node] = best_c
            pure = counts[best_c] == m
            parent_score = 0.0
            for c in range(n_classes):
                parent_score += counts[c] * counts[c]
            parent_score /= m
            tol = 1e-12
        else:
            s = 0.0
            ss = 0.0
            y0 = y[idx[lo]]
            for i in range(lo, hi):
                v = y[idx[i]]
                s += v
                ss += v * v
                if v != y0:
                    pure = False
            value[node] = s / m
            parent_score = s * s / m
            tol = 1e-12 * (ss + 1e-300)

        if pure or m < 2 * min_node:
            continue

        # feature subset: partial Fisher-Yates on pre-drawn uniforms
        if mtry >= p:
            for j in range(p):
                chosen[j] = j
        else:
            for j in range(p):
                perm[j] = j
            for j in range(mtry):
                r = j + int(unif[u_ptr] * (p - j))
                u_ptr += 1
                if r >= p:
                    r = p - 1
                t = perm[j]
                perm[j] = perm[r]
                perm[r] = t
            for j in range(mtry):
                chosen[j] = perm[j]
            chosen[:mtry] = np.sort(chosen[:mtry])

        best_gain = tol
        best_f = -1
        best_t = 0.0
        for jj in range(mtry):
            f = chosen[jj]
            for i in range(m):
                vals[i] = X[idx[lo + i], f]
            order = np.argsort(vals[:m], kind="mergesort")
            if n_classes > 0:
                lcounts[:] = 0
            sl = 0.0
            for k in range(m - 1):
                r_ = idx[lo + order[k]]
                if n_classes > 0:
                    lcounts[int(y[r_])] += 1
                else:
                    sl += y[r_]
                va = vals[order[k]]
                vb = vals[order[k + 1]]
                if va == vb:
                    continue
                nl = k + 1
                nr = m - nl
                if nl < min_node or nr < min_node:
                    continue
                if n_classes > 0:
                    sl2 = 0.0
                    sr2 = 0.0
                    for c in range(n_classes):
                        cl = lcounts[c]
                        cr = counts[c] - cl
                        sl2 += cl * cl
                        sr2 += cr * cr
                    gain = sl2 / nl + sr2 / nr - parent_score
                else:
                    sr = s - sl
                    gain = sl * sl / nl + sr * sr / nr - parent_score
                if gain > best_gain:
                    best_gain = gain
                    best_f = f
                    t_ = 0.5 * (va + vb)
                    if t_ >= vb:
                        t_ = va
                    best_t = t_
        if best_f < 0:
            continue

        # stable partition of idx[lo:hi]
        nl = 0
        for i in range(lo, hi):
            if X[idx[i], best_f] <= best_t:
                tmp[nl] = idx[i]
                nl += 1
        k = nl
        for i in range(lo, hi):
            if X[idx[i], best_f] > best_t:
                tmp[k] = idx[i]
                k += 1
        for i in range(m):
            idx[lo + i] = tmp[i]

        feat[node] = best_f
        thr[node] = best_t
        left[node] = n_nodes
        right[node] = n_nodes + 1
        n_nodes += 2
        # right pushed first so the left subtree is grown first
        stack_node[top] = right[node]
        stack_lo[top] = lo + nl
        stack_hi[top] = hi
        top += 1
        stack_node[top] = left[node]
        stack_lo[top] = lo
        stack_hi[top] = lo + nl
        top += 1

    return (feat[:n_nodes].copy(), thr[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy(), size[:n_nodes].copy())


@njit(nogil=True, cache=True)
def _predict_all(X, offsets, feat, thr, left, right, value):
    n = X.shape[0]
    t = offsets.size - 1
    out = np.empty((n, t))
    for j in range(t):
        base = offsets[j]
        for i in range(n):
            node = 0
            while feat[base + node] >= 0:
                if X[i, feat[base + node]] <= thr[base + node]:
                    node = left[base + node]
                else:
                    node = right[base + node]
            out[i, j] = value[base + node]
    return out


@dataclass(frozen=True)
class Tree:
    feature: np.ndarray  # -1 marks a leaf
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # class index (classify) or mean (regress)
    n_samples: np.ndarray

    @property
    def is_leaf(self):
        return self.feature < 0


class ForestModel:
    def __init__(self, task, trees, hyperparams, mtry, seed, n_features, classes=None, oob_counts=None):
        self.task = task
        self.trees = list(trees)
        self.hyperparams = hyperparams
        self.mtry = mtry
        self.seed = seed
        self.n_features = n_features
        self.classes = classes
        self.oob_counts = oob_counts
        sizes = [t.feature.size for t in self.trees]
        self._offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self._feat = np.concatenate([t.feature for t in self.trees])
        self._thr = np.concatenate([t.threshold for t in self.trees])
        self._value = np.concatenate([t.value for t in self.trees])
        # children are stored tree-local
        self._left = np.concatenate([t.left for t in self.trees])
        self._right = np.concatenate([t.right for t in self.trees])

    def tree_outputs(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got shape {X.shape}")
        return _predict_all(X, self._offsets, self._feat, self._thr, self._left, self._right, self._value)

    def predict(self, X):
        out = self.tree_outputs(X)
        if self.task == REGRESS:
            return out.mean(axis=1)
        k = len(self.classes)
        votes = np.zeros((out.shape[0], k), np.int64)
        for c in range(k):
            votes[:, c] = (out == c).sum(axis=1)
        # argmax returns the first maximum: ties go to the lexicographically smaller label
        return self.classes[votes.argmax(axis=1)]


def _tree_randomness(stream, n, draws):
    rng = np.random.default_rng(stream)
    rows = rng.integers(0, n, size=n)
    unif = rng.random(draws) if draws else np.zeros(1)
    return rows, unif


def fit_forest(X, y, task: str, hyperparams: Hyperparams | None = None, seed: int = 0,
               n_jobs: int = 1) -> ForestModel:
    """Grow a random forest.

    Each tree sees a bootstrap sample of size n; each node considers
    ``mtry`` features drawn without replacement and the best Gini (classify)
    or variance (regress) split over midpoints between sorted distinct
    values. A node is split only if it holds at least ``2 * min_node_size``
    samples and both children keep ``min_node_size``.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("X must be 2-D")
    n, p = X.shape
    if n < 2:
        raise ValueError("need at least two rows")
    if not np.isfinite(X).all():
        raise ValueError("X contains non-finite values")
    if hyperparams is None:
        hyperparams = CLASSIFIER_DEFAULTS if task == CLASSIFY else REGRESSOR_DEFAULTS
    mtry = hyperparams.resolve_mtry(p)
    min_node = max(1, int(hyperparams.min_node_size))

    classes = None
    if task == CLASSIFY:
        classes, codes = np.unique(np.asarray(y), return_inverse=True)
        if classes.size < 2:
            raise ValueError("classification needs at least two classes in the training data")
        target = codes.astype(np.float64)
        n_classes = int(classes.size)
    elif task == REGRESS:
        target = np.asarray(y, dtype=np.float64)
        if not np.isfinite(target).all():
            raise ValueError("y contains non-finite values")
        n_classes = 0
    else:
        raise ValueError(f"unknown task {task!r}")

    draws = 0 if mtry >= p else 2 * n * mtry + mtry
    streams = np.random.SeedSequence(seed).spawn(hyperparams.num_trees)

    def grow(stream):
        rows, unif = _tree_randomness(stream, n, draws)
        tree = Tree(*_grow(X, target, rows, unif, mtry, min_node, n_classes))
        return tree, n - np.unique(rows).size

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            built = list(pool.map(grow, streams))
    else:
        built = [grow(s) for s in streams]
    trees = [t for t, _ in built]
    oob = np.array([k for _, k in built])
    return ForestModel(task, trees, hyperparams, mtry, seed, p, classes=classes, oob_counts=oob)
