"""CART regression trees grown best-first on squared error.

Splits are axis aligned: the left child holds ``x[j] < s`` and the right
child ``x[j] >= s``. Candidate split points are midpoints between
consecutive distinct sorted values. Ties are broken by lowest variable
index, then smallest split point; among leaves with equal gain the
leftmost one is split first.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


class TreeError(ValueError):
    pass


@dataclass(frozen=True)
class FitConfig:
    max_leaves: int = 9
    min_leaf_size: int = 20
    min_sse_improvement: float = 0.0

    def __post_init__(self):
        if self.max_leaves < 1:
            raise ValueError("max_leaves must be >= 1")
        if self.min_leaf_size < 1:
            raise ValueError("min_leaf_size must be >= 1")


@dataclass
class Leaf:
    id: int
    value: float
    count: int
    sample_indices: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower) and np.all(x < self.upper))


@dataclass
class _Split:
    gain: float
    var: int
    point: float
    left_idx: np.ndarray
    right_idx: np.ndarray
    parent_sse: float = 0.0


def _canonical_mean(y):
    return float(np.mean(np.sort(y)))


def _sse(y):
    return float(np.sum((y - y.mean()) ** 2)) if len(y) else 0.0


def best_split(X, y, idx, min_leaf_size):
    """Best (variable, point) for the samples ``idx``; ``None`` if no admissible split.

    Uses one canonical sort per variable and prefix sums of centred responses.
    """
    n = len(idx)
    if n < 2 * min_leaf_size:
        return None
    ys_all = y[idx]
    c = _canonical_mean(ys_all)
    parent_sse = float(np.sum(np.sort((ys_all - c) ** 2)))
    best = None
    lo_pos = min_leaf_size - 1
    hi_pos = n - min_leaf_size - 1
    tie_tol = 1e-12 * (1.0 + parent_sse)
    for j in range(X.shape[1]):
        xj = X[idx, j]
        order = np.lexsort((ys_all, xj))
        xs = xj[order]
        ys = ys_all[order] - c
        cs = np.cumsum(ys)
        cs2 = np.cumsum(ys * ys)
        # position i means: left = sorted[0..i], right = sorted[i+1..]
        pos = np.arange(lo_pos, hi_pos + 1)
        if len(pos) == 0:
            continue
        valid = xs[pos] < xs[pos + 1]
        if not np.any(valid):
            continue
        pos = pos[valid]
        nl = pos + 1.0
        nr = n - nl
        sl, sl2 = cs[pos], cs2[pos]
        sr, sr2 = cs[-1] - sl, cs2[-1] - sl2
        sse = (sl2 - sl * sl / nl) + (sr2 - sr * sr / nr)
        k = int(np.argmin(sse))
        # re-check near-ties exactly so the choice does not hinge on rounding
        near = np.flatnonzero(sse <= sse[k] + tie_tol)
        if len(near) > 1:
            exact = np.array([_sse(ys[: p + 1]) + _sse(ys[p + 1:]) for p in pos[near]])
            k = int(near[int(np.argmin(exact))])
            cand_sse = float(exact.min())
        else:
            p = pos[k]
            cand_sse = _sse(ys[: p + 1]) + _sse(ys[p + 1:])
        if best is None or cand_sse < best[0] - tie_tol:
            p = int(pos[k])
            s = 0.5 * (xs[p] + xs[p + 1])
            if s <= xs[p]:
                s = xs[p + 1]
            best = (cand_sse, j, float(s))
    if best is None:
        return None
    sse, j, s = best
    mask = X[idx, j] < s
    return _Split(parent_sse - sse, j, s, idx[mask], idx[~mask], parent_sse)


class RegressionTree:
    """A fitted regression tree.

    Internal nodes are stored in flat arrays; ``feature[n] == -1`` marks a
    leaf and ``leaf_of[n]`` its left-to-right id.
    """

    def __init__(self, n_features, feature, threshold, left, right, leaves):
        self.n_features = int(n_features)
        self.feature = np.asarray(feature, dtype=int)
        self.threshold = np.asarray(threshold, dtype=float)
        self.left = np.asarray(left, dtype=int)
        self.right = np.asarray(right, dtype=int)
        self._leaves = list(leaves)
        self.leaf_of = np.full(len(self.feature), -1, dtype=int)
        # leaf ids follow the in-order (left-to-right) traversal
        order = self._inorder_leaves()
        for lid, n in enumerate(order):
            self.leaf_of[n] = lid
        self.values = np.array([lf.value for lf in self._leaves])

    def _inorder_leaves(self):
        out, stack = [], [0]
        while stack:
            n = stack.pop()
            if self.feature[n] < 0:
                out.append(n)
            else:
                stack.append(self.right[n])
                stack.append(self.left[n])
        return out

    @property
    def n_leaves(self) -> int:
        return len(self._leaves)

    def leaves(self):
        return list(self._leaves)

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_features:
            raise TreeError(f"expected {self.n_features} predictors, got {x.shape[-1]}")
        return x

    def leaf_index(self, x) -> int:
        x = self._check(x)
        if x.ndim != 1:
            raise TreeError("leaf_index takes a single point; use leaf_indices for batches")
        n = 0
        feat, thr, left, right = self.feature, self.threshold, self.left, self.right
        while feat[n] >= 0:
            n = right[n] if x[feat[n]] >= thr[n] else left[n]
        return int(self.leaf_of[n])

    def leaf_indices(self, X) -> np.ndarray:
        X = np.atleast_2d(self._check(X))
        node = np.zeros(len(X), dtype=int)
        active = self.feature[node] >= 0
        while np.any(active):
            a = np.flatnonzero(active)
            f = self.feature[node[a]]
            go_right = X[a, f] >= self.threshold[node[a]]
            node[a] = np.where(go_right, self.right[node[a]], self.left[node[a]])
            active = self.feature[node] >= 0
        return self.leaf_of[node]

    def predict(self, x):
        x = self._check(x)
        if x.ndim == 1:
            return float(self.values[self.leaf_index(x)])
        return self.values[self.leaf_indices(x)]

    # serialisation -------------------------------------------------------
    def to_dict(self, include_samples: bool = True) -> dict:
        def enc(a):
            return [("inf" if v > 0 else "-inf") if np.isinf(v) else float(v) for v in a]
        return {
            "n_features": self.n_features,
            "feature": self.feature.tolist(),
            "threshold": [None if np.isnan(t) else float(t) for t in self.threshold],
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "leaves": [{"id": lf.id, "value": lf.value, "count": lf.count,
                        "lower": enc(lf.lower), "upper": enc(lf.upper),
                        **({"sample_indices": lf.sample_indices.tolist()} if include_samples else {})}
                       for lf in self._leaves],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegressionTree":
        leaves = [Leaf(lf["id"], lf["value"], lf["count"],
                       np.asarray(lf.get("sample_indices", []), dtype=int),
                       np.array([float(v) for v in lf["lower"]]),
                       np.array([float(v) for v in lf["upper"]]))
                  for lf in d["leaves"]]
        thr = [np.nan if t is None else t for t in d["threshold"]]
        return cls(d["n_features"], d["feature"], thr, d["left"], d["right"], leaves)

    def to_json(self, include_samples: bool = True) -> str:
        return json.dumps(self.to_dict(include_samples))

    @classmethod
    def from_json(cls, text: str) -> "RegressionTree":
        return cls.from_dict(json.loads(text))


def fit(X, y, config: FitConfig = FitConfig()) -> RegressionTree:
    """Grow a regression tree best-first until a stopping rule fires."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if len(y) == 0 or X.shape[0] == 0:
        raise TreeError("empty dataset")
    if X.shape[0] != len(y):
        raise TreeError("predictor and response lengths differ")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise TreeError("non-finite values in dataset")
    if len(y) < config.min_leaf_size:
        raise TreeError("fewer samples than min_leaf_size")
    d = X.shape[1]

    # node store
    feature, threshold, left, right = [-1], [np.nan], [-1], [-1]
    node_idx = {0: np.arange(len(y))}
    lower = {0: np.full(d, -np.inf)}
    upper = {0: np.full(d, np.inf)}
    frontier = [0]  # leaves, left-to-right
    cache = {0: best_split(X, y, node_idx[0], config.min_leaf_size)}

    while len(frontier) < config.max_leaves:
        best_pos, best = None, None
        for pos, n in enumerate(frontier):
            sp = cache[n]
            if sp is None:
                continue
            thr = config.min_sse_improvement + 1e-12 * sp.parent_sse
            if sp.gain <= thr:
                continue
            if best is None or sp.gain > best.gain:
                best_pos, best = pos, sp
        if best is None:
            break
        n = frontier[best_pos]
        ln, rn = len(feature), len(feature) + 1
        feature[n], threshold[n], left[n], right[n] = best.var, best.point, ln, rn
        for child, idx in ((ln, best.left_idx), (rn, best.right_idx)):
            feature.append(-1)
            threshold.append(np.nan)
            left.append(-1)
            right.append(-1)
            node_idx[child] = idx
            lower[child] = lower[n].copy()
            upper[child] = upper[n].copy()
            cache[child] = best_split(X, y, idx, config.min_leaf_size)
        upper[ln][best.var] = min(upper[ln][best.var], best.point)
        lower[rn][best.var] = max(lower[rn][best.var], best.point)
        frontier[best_pos:best_pos + 1] = [ln, rn]
        del cache[n]

    leaves = []
    for lid, n in enumerate(frontier):
        idx = node_idx[n]
        leaves.append(Leaf(lid, _canonical_mean(y[idx]), len(idx), idx, lower[n], upper[n]))
    return RegressionTree(d, feature, threshold, left, right, leaves)


def exhaustive_split(X, y, min_leaf_size: int = 1):
    """Brute-force reference: minimal SSE over all variables and midpoints.

    Returns ``(sse, var, point)`` or ``None``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    best = None
    for j in range(X.shape[1]):
        vals = np.unique(X[:, j])
        for a, b in zip(vals[:-1], vals[1:]):
            s = 0.5 * (a + b)
            if s <= a:
                s = b
            m = X[:, j] < s
            if m.sum() < min_leaf_size or (~m).sum() < min_leaf_size:
                continue
            sse = _sse(y[m]) + _sse(y[~m])
            if best is None or sse < best[0]:
                best = (sse, j, float(s))
    return best
