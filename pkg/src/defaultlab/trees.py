"""CART, random forests and Newton gradient-boosted trees.

All three grow trees on integer bin codes.  A feature's bins are delimited by
cut values taken from the training data; a split at cut ``c`` sends rows with
``value < c`` left.  With exact binning (every distinct value is a cut) the
stored threshold is the smallest training value in the right child, so fitted
trees commute with strictly increasing feature transforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np
from scipy.special import expit, logit

from .data import ObservationTable
from .errors import DataError, DimensionError, EmptyInputError, InsufficientDataError, ModelError
from .metrics import PredictionSet, cross_entropy
from .seeding import derive_rng

FORMAT = "defaultlab.trees"
FORMAT_VERSION = 1
TIE_TOL = 1e-12
# dense histograms are used while a node has at least this many rows per bin slot
_DENSE_RATIO = 0.125
_EMPTY = np.zeros(0)


# -- binning -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Binning:
    """Per-feature sorted cut values; code ``b`` means ``cuts[b-1] <= x < cuts[b]``."""

    cuts: tuple

    @property
    def n_features(self):
        return len(self.cuts)

    def n_bins(self):
        return np.array([c.size + 1 for c in self.cuts], dtype=np.int64)

    def transform(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise DimensionError(f"expected {self.n_features} columns")
        codes = np.empty(x.shape, dtype=np.int32)
        for j, c in enumerate(self.cuts):
            codes[:, j] = np.searchsorted(c, x[:, j], side="right")
        return codes


def fit_binning(x, max_bins=None) -> Binning:
    """Cut values per feature.

    With ``max_bins=None`` or at most ``max_bins`` distinct values, every
    distinct value above the minimum becomes a cut.  Otherwise the cuts are
    the distinct values found at the ``k / max_bins`` quantiles of the
    feature's distinct values (order statistics, no interpolation).
    """
    x = np.asarray(x, dtype=np.float64)
    if max_bins is not None and max_bins < 2:
        raise ModelError("max_bins must be >= 2")
    cuts = []
    for j in range(x.shape[1]):
        u = np.unique(x[:, j])
        if max_bins is None or u.size <= max_bins:
            c = u[1:]
        else:
            q = np.arange(1, max_bins) / max_bins
            c = np.unique(np.quantile(u, q, method="inverted_cdf"))
            c = c[c > u[0]]
        cuts.append(np.ascontiguousarray(c))
    return Binning(tuple(cuts))


@numba.njit(cache=True)
def _route(feature, threshold, left, right, x):
    out = np.empty(x.shape[0], dtype=np.int64)
    for i in range(x.shape[0]):
        node = 0
        while feature[node] >= 0:
            if x[i, feature[node]] < threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out


# -- tree storage --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Tree:
    """Pre-order node arrays.  Leaves have ``feature == -1``."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self):
        return self.feature.size

    @property
    def n_leaves(self):
        return int(np.sum(self.feature < 0))

    def depth(self):
        d = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                d[self.left[i]] = d[i] + 1
                d[self.right[i]] = d[i] + 1
        return int(d.max()) if d.size else 0

    def apply(self, x):
        """Leaf index reached by every row."""
        return _route(self.feature, self.threshold, self.left, self.right,
                      np.ascontiguousarray(x, dtype=np.float64))

    def predict(self, x):
        return self.value[self.apply(x)]

    def to_dict(self):
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            np.array(d["feature"], dtype=np.int64),
            np.array(d["threshold"], dtype=np.float64),
            np.array(d["left"], dtype=np.int64),
            np.array(d["right"], dtype=np.int64),
            np.array(d["value"], dtype=np.float64),
        )


class _TreeBuilder:
    def __init__(self):
        self.feature, self.threshold, self.left, self.right, self.value = [], [], [], [], []

    def add(self):
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(0.0)
        return len(self.feature) - 1

    def build(self):
        return Tree(
            np.array(self.feature, dtype=np.int64),
            np.array(self.threshold, dtype=np.float64),
            np.array(self.left, dtype=np.int64),
            np.array(self.right, dtype=np.int64),
            np.array(self.value, dtype=np.float64),
        )


# -- split search ----------------------------------------------------------------

@numba.njit(cache=True)
def _dense_hist(codes, idx, features, bmax, w1, w2, n_weights):
    k = features.size
    cnt = np.zeros((k, bmax))
    s1 = np.zeros((k, bmax))
    s2 = np.zeros((k, bmax))
    for r in idx:
        for j in range(k):
            b = codes[r, features[j]]
            cnt[j, b] += 1.0
            if n_weights > 0:
                s1[j, b] += w1[r]
            if n_weights > 1:
                s2[j, b] += w2[r]
    return cnt, s1, s2


def _node_histograms(codes, idx, features, n_bins, weights):
    """Per-feature histograms over the node's rows.

    Returns ``(bin_ids, stats)``: ``stats[0]`` holds row counts and the rest
    hold sums of each array in ``weights``, all shaped (k, K) and aligned with
    ``bin_ids``.  Slots with bin id -1 are padding with zero statistics.
    """
    n = idx.size
    k = features.size
    bmax = int(n_bins[features].max())
    if n >= _DENSE_RATIO * bmax:
        w1 = weights[0] if len(weights) > 0 else _EMPTY
        w2 = weights[1] if len(weights) > 1 else _EMPTY
        cnt, s1, s2 = _dense_hist(codes, idx, features, bmax, w1, w2, len(weights))
        ids = np.broadcast_to(np.arange(bmax), (k, bmax))
        return ids, [cnt, s1, s2][: 1 + len(weights)]
    ids = np.full((k, n), -1, dtype=np.int64)
    stats = [np.zeros((k, n)) for _ in range(1 + len(weights))]
    for j in range(k):
        u, inv = np.unique(codes[idx, features[j]], return_inverse=True)
        ids[j, :u.size] = u
        stats[0][j, :u.size] = np.bincount(inv, minlength=u.size)
        for s, w in zip(stats[1:], weights):
            s[j, :u.size] = np.bincount(inv, weights=w[idx], minlength=u.size)
    return ids, stats


def _pick(score, valid):
    """First (feature, slot) whose score is within tolerance of the best."""
    if not valid.any():
        return None
    masked = np.where(valid, score, -np.inf)
    best = masked.max()
    tol = TIE_TOL * max(abs(best), 1e-300)
    flat = np.flatnonzero((masked >= best - tol).ravel())
    return np.unravel_index(flat[0], score.shape), best


def _exclusive_cumsum(a):
    c = np.cumsum(a, axis=1)
    return c - a


def _gini_split(codes, idx, features, n_bins, y, min_leaf):
    ids, (cnt, pos) = _node_histograms(codes, idx, features, n_bins, [y])
    nl = _exclusive_cumsum(cnt)
    pl = _exclusive_cumsum(pos)
    n = float(idx.size)
    p = pos.sum(axis=1, keepdims=True)
    nr = n - nl
    pr = p - pl
    valid = (cnt > 0) & (nl >= max(min_leaf, 1)) & (nr >= max(min_leaf, 1))
    with np.errstate(divide="ignore", invalid="ignore"):
        score = (pl ** 2 + (nl - pl) ** 2) / nl + (pr ** 2 + (nr - pr) ** 2) / nr
    hit = _pick(score, valid)
    if hit is None:
        return None
    (j, s), _ = hit
    return int(features[j]), int(ids[j, s])


def _newton_split(codes, idx, features, n_bins, g, h, reg_lambda, min_child_weight):
    ids, (cnt, gs, hs) = _node_histograms(codes, idx, features, n_bins, [g, h])
    nl = _exclusive_cumsum(cnt)
    gl = _exclusive_cumsum(gs)
    hl = _exclusive_cumsum(hs)
    G = gs.sum(axis=1, keepdims=True)
    H = hs.sum(axis=1, keepdims=True)
    gr = G - gl
    hr = H - hl
    valid = (cnt > 0) & (nl > 0) & (hl >= min_child_weight) & (hr >= min_child_weight)
    gain = gl ** 2 / (hl + reg_lambda) + gr ** 2 / (hr + reg_lambda) - G ** 2 / (H + reg_lambda)
    valid &= gain > 0
    hit = _pick(gain, valid)
    if hit is None:
        return None
    (j, s), _ = hit
    return int(features[j]), int(ids[j, s])


def _split_rows(codes, idx, feature, bin_id):
    go_left = codes[idx, feature] < bin_id
    return idx[go_left], idx[~go_left]


def _grow_cart(codes, binning, n_bins, y, idx, max_depth, min_leaf, rng=None, max_features=None):
    b = _TreeBuilder()
    d = codes.shape[1]
    all_features = np.arange(d)

    def grow(rows, depth):
        node = b.add()
        pos = y[rows].sum()
        b.value[node] = float(pos / rows.size)
        if depth >= max_depth or rows.size < 2 * max(min_leaf, 1) or pos == 0 or pos == rows.size:
            return node
        if max_features is not None and max_features < d:
            feats = np.sort(rng.choice(d, size=max_features, replace=False))
        else:
            feats = all_features
        split = _gini_split(codes, rows, feats, n_bins, y, min_leaf)
        if split is None:
            return node
        f, bin_id = split
        left_rows, right_rows = _split_rows(codes, rows, f, bin_id)
        b.feature[node] = f
        b.threshold[node] = float(binning.cuts[f][bin_id - 1])
        b.left[node] = grow(left_rows, depth + 1)
        b.right[node] = grow(right_rows, depth + 1)
        return node

    grow(idx, 0)
    return b.build()


def _grow_newton(codes, binning, n_bins, g, h, max_depth, reg_lambda, min_child_weight):
    """Returns the tree and a per-row leaf value for the training rows."""
    b = _TreeBuilder()
    features = np.arange(codes.shape[1])
    row_value = np.empty(g.size)

    def grow(rows, depth):
        node = b.add()
        G = g[rows].sum()
        H = h[rows].sum()
        v = -G / (H + reg_lambda)
        b.value[node] = float(v)
        split = None
        if depth < max_depth and rows.size >= 2 and H >= 2 * min_child_weight:
            split = _newton_split(codes, rows, features, n_bins, g, h, reg_lambda, min_child_weight)
        if split is None:
            row_value[rows] = b.value[node]
            return node
        f, bin_id = split
        left_rows, right_rows = _split_rows(codes, rows, f, bin_id)
        b.feature[node] = f
        b.threshold[node] = float(binning.cuts[f][bin_id - 1])
        b.left[node] = grow(left_rows, depth + 1)
        b.right[node] = grow(right_rows, depth + 1)
        return node

    grow(np.arange(g.size), 0)
    return b.build(), row_value


# -- models ----------------------------------------------------------------------

MODES = ("single", "forest", "gbt")


@dataclass(frozen=True, eq=False)
class TreeEnsembleModel:
    trees: tuple
    tree_weights: np.ndarray
    base_score: float
    mode: str
    n_features: int

    @property
    def link(self):
        return "sigmoid-of-sum" if self.mode == "gbt" else "identity-mean"

    def raw_score(self, x):
        x = _check_x(x, self.n_features)
        if self.mode == "gbt":
            out = np.full(x.shape[0], self.base_score)
            for t, w in zip(self.trees, self.tree_weights):
                out += w * t.predict(x)
            return out
        out = np.zeros(x.shape[0])
        for t in self.trees:
            out += t.predict(x)
        return out / len(self.trees)

    def staged_raw_scores(self, x):
        """Raw score after 0, 1, ..., M boosting rounds (gbt only)."""
        if self.mode != "gbt":
            raise ModelError("staged scores are defined for boosted ensembles")
        x = _check_x(x, self.n_features)
        cur = np.full(x.shape[0], self.base_score)
        out = [cur.copy()]
        for t, w in zip(self.trees, self.tree_weights):
            cur = cur + w * t.predict(x)
            out.append(cur.copy())
        return np.array(out)

    def predict(self, x):
        raw = self.raw_score(x)
        return expit(raw) if self.mode == "gbt" else raw

    def truncated(self, n_trees):
        return TreeEnsembleModel(
            self.trees[:n_trees], self.tree_weights[:n_trees], self.base_score, self.mode, self.n_features
        )

    def to_dict(self):
        return {
            "format": FORMAT,
            "version": FORMAT_VERSION,
            "mode": self.mode,
            "link": self.link,
            "base_score": self.base_score,
            "n_features": self.n_features,
            "tree_weights": [float(w) for w in self.tree_weights],
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != FORMAT:
            raise ModelError(f"not a tree-ensemble document (format={d.get('format')!r})")
        if d.get("version") != FORMAT_VERSION:
            raise ModelError(f"unsupported tree format version {d.get('version')!r}")
        return cls(
            tuple(Tree.from_dict(t) for t in d["trees"]),
            np.array(d["tree_weights"], dtype=np.float64),
            float(d["base_score"]),
            d["mode"],
            int(d["n_features"]),
        )


def _check_x(x, n_features):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != n_features:
        raise DimensionError(f"input has {x.shape[1]} columns, model expects {n_features}")
    return x


def _xy(table):
    if isinstance(table, ObservationTable):
        return table.rows, table.labels.astype(np.float64)
    x, y = table
    return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)


def predict_tree(model: TreeEnsembleModel, table: ObservationTable) -> PredictionSet:
    return PredictionSet.from_table(model.predict(table.rows), table)


def fit_cart(train, max_depth=7, min_leaf=1, max_bins=None) -> TreeEnsembleModel:
    """Single classification tree grown greedily on weighted Gini impurity.

    Leaves hold the mean label of their training rows.  Splitting stops at
    ``max_depth``, when a child would hold fewer than ``min_leaf`` rows, at a
    pure node, or when no split separates the node's rows.
    """
    x, y = _xy(train)
    if x.shape[0] == 0:
        raise EmptyInputError("training set is empty")
    if max_depth < 0 or min_leaf < 1:
        raise ModelError("max_depth must be >= 0 and min_leaf >= 1")
    if x.shape[0] < 2 * min_leaf:
        raise InsufficientDataError(f"need at least {2 * min_leaf} rows for min_leaf={min_leaf}")
    binning = fit_binning(x, max_bins)
    codes = binning.transform(x)
    tree = _grow_cart(codes, binning, binning.n_bins(), y, np.arange(x.shape[0]), max_depth, min_leaf)
    return TreeEnsembleModel((tree,), np.ones(1), 0.0, "single", x.shape[1])


def fit_random_forest(train, n_trees=100, max_depth=20, seed=0, min_leaf=1, bootstrap=True,
                      max_features="sqrt", max_bins=None) -> TreeEnsembleModel:
    """Bagged CART trees with per-split feature subsampling.

    ``max_features="sqrt"`` draws ceil(sqrt(d)) candidate features at each
    split; ``None`` considers all features.
    """
    x, y = _xy(train)
    n, d = x.shape
    if n == 0:
        raise EmptyInputError("training set is empty")
    if n_trees < 1:
        raise ModelError("n_trees must be >= 1")
    if max_features == "sqrt":
        m = int(math.ceil(math.sqrt(d)))
    elif max_features is None:
        m = d
    else:
        m = int(max_features)
        if not 1 <= m <= d:
            raise ModelError("max_features must lie in [1, n_features]")
    binning = fit_binning(x, max_bins)
    codes = binning.transform(x)
    n_bins = binning.n_bins()
    trees = []
    for t in range(n_trees):
        rng = derive_rng(seed, "forest", t)
        idx = np.sort(rng.integers(0, n, size=n)) if bootstrap else np.arange(n)
        trees.append(_grow_cart(codes, binning, n_bins, y, idx, max_depth, min_leaf, rng, m))
    return TreeEnsembleModel(tuple(trees), np.ones(n_trees), 0.0, "forest", d)


@dataclass(frozen=True)
class GbtConfig:
    n_trees: int = 100
    max_depth: int = 6
    learning_rate: float = 0.1
    max_bins: Optional[int] = 64
    min_child_weight: float = 1.0
    reg_lambda: float = 1.0
    early_stopping_rounds: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.max_depth < 1:
            raise ModelError("max_depth must be >= 1")
        if self.max_bins is not None and self.max_bins < 2:
            raise ModelError("max_bins must be >= 2")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ModelError("learning_rate must lie in (0, 1]")
        if self.n_trees < 0:
            raise ModelError("n_trees must be >= 0")
        if self.early_stopping_rounds is not None and self.early_stopping_rounds < 1:
            raise ModelError("early_stopping_rounds must be >= 1")


GBT_PRESETS = {
    "ofs-gbt": GbtConfig(n_trees=1000, max_depth=6, learning_rate=0.05, max_bins=64),
    "pooled-gbt": GbtConfig(n_trees=10000, max_depth=6, learning_rate=0.3, max_bins=64,
                            early_stopping_rounds=1000),
}
CART_DEPTH = 7
FOREST_DEPTH = 20
FOREST_TREES = 900


def fit_gbt(train, validation=None, config: GbtConfig = GbtConfig()):
    """Newton boosting on the logistic loss.

    Each round fits a depth-limited tree to gradients ``p - y`` and hessians
    ``p (1 - p)`` with leaf values ``-G / (H + lambda)``; its contribution is
    scaled by the learning rate.  With a validation set and
    ``early_stopping_rounds`` the ensemble is cut back to the round with the
    lowest validation loss.  Returns ``(model, history)``.
    """
    x, y = _xy(train)
    if x.shape[0] == 0:
        raise EmptyInputError("training set is empty")
    prevalence = y.mean()
    if prevalence <= 0.0 or prevalence >= 1.0:
        raise DataError("boosting needs both classes in the training labels")
    base = float(logit(prevalence))
    binning = fit_binning(x, config.max_bins)
    codes = binning.transform(x)
    n_bins = binning.n_bins()
    xv = yv = None
    if validation is not None:
        xv, yv = _xy(validation)
        if xv.shape[0] == 0:
            xv = yv = None
        elif xv.shape[1] != x.shape[1]:
            raise DimensionError("validation columns do not match training columns")
    raw = np.full(y.size, base)
    raw_val = None if xv is None else np.full(yv.size, base)
    trees = []
    history = []
    best, best_round, since_best = math.inf, 0, 0
    if raw_val is not None:
        best = cross_entropy(expit(raw_val), yv)
    for m in range(1, config.n_trees + 1):
        p = expit(raw)
        g = p - y
        h = p * (1.0 - p)
        tree, row_value = _grow_newton(
            codes, binning, n_bins, g, h, config.max_depth, config.reg_lambda, config.min_child_weight
        )
        trees.append(tree)
        raw += config.learning_rate * row_value
        entry = {"round": m, "train_loss": cross_entropy(expit(raw), y), "val_loss": None}
        if raw_val is not None:
            raw_val += config.learning_rate * tree.predict(xv)
            vl = cross_entropy(expit(raw_val), yv)
            entry["val_loss"] = vl
            if vl < best:
                best, best_round, since_best = vl, m, 0
            else:
                since_best += 1
        history.append(entry)
        if config.early_stopping_rounds is not None and raw_val is not None \
                and since_best >= config.early_stopping_rounds:
            break
    keep = len(trees)
    if config.early_stopping_rounds is not None and raw_val is not None:
        keep = best_round
    model = TreeEnsembleModel(
        tuple(trees[:keep]), np.full(keep, config.learning_rate), base, "gbt", x.shape[1]
    )
    return model, history
