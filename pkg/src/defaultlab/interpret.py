"""Feature attribution: permutation importance and interventional Shapley values.

A predictor is any callable mapping a feature matrix to default
probabilities; :func:`as_predictor` adapts the package's model types.

Shapley values use the interventional value function
``v(S) = mean_b f(x_S, b_rest)`` over a background sample ``b``.  The exact
method enumerates all subsets; the sampled method averages marginal
contributions along random feature orderings, drawn in antithetic pairs.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components

from . import nn
from .data import ObservationTable
from .errors import DataError, DimensionError, InsufficientDataError, ModelError
from .metrics import cross_entropy
from .seeding import derive_rng

MAX_EXACT_FEATURES = 15
DEFAULT_PERMUTATIONS = 200
DEFAULT_BACKGROUND = 100
_EVAL_ROWS = 1 << 18


def as_predictor(model):
    """Callable ``x -> probabilities`` for a network, tree ensemble, hybrid or callable."""
    if isinstance(model, nn.NetworkModel):
        return lambda x: nn.predict(model, x)
    if hasattr(model, "predict"):
        return model.predict
    if callable(model):
        return model
    raise ModelError(f"cannot build a predictor from {type(model).__name__}")


def _matrix(data):
    if isinstance(data, ObservationTable):
        return data.rows, data.schema.names
    x = np.asarray(data, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    return x, tuple(f"x{j}" for j in range(x.shape[1]))


@dataclass(frozen=True, eq=False)
class ShapExplanation:
    """Attributions for a batch of instances against one background sample."""

    values: np.ndarray
    base_value: float
    predictions: np.ndarray
    feature_names: tuple
    instance_ids: tuple
    background: np.ndarray

    @property
    def n_instances(self):
        return self.values.shape[0]

    def efficiency_residual(self):
        return self.predictions - self.base_value - self.values.sum(axis=1)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["instance_id", "base_value", "prediction", *self.feature_names])
            for i in range(self.n_instances):
                w.writerow([
                    self.instance_ids[i], repr(float(self.base_value)), repr(float(self.predictions[i])),
                    *(repr(float(v)) for v in self.values[i]),
                ])


def _value_function(f, x, background, masks):
    """``v(S)`` for each boolean mask row (features in S taken from ``x``)."""
    m, d = background.shape
    out = np.empty(masks.shape[0])
    step = max(1, _EVAL_ROWS // max(m, 1))
    for start in range(0, masks.shape[0], step):
        mk = masks[start:start + step]
        rows = np.where(mk[:, None, :], x[None, None, :], background[None, :, :])
        out[start:start + step] = f(rows.reshape(-1, d)).reshape(mk.shape[0], m).mean(axis=1)
    return out


def shapley_exact(model, instances, background) -> ShapExplanation:
    """Exact interventional Shapley values by enumerating all feature subsets.

    Cost grows as ``2**d`` model evaluations per background row, so inputs
    with more than 15 features are refused; use :func:`shapley_sampled`.
    """
    f = as_predictor(model)
    x_all, names = _matrix(instances)
    bg, bg_names = _matrix(background)
    if isinstance(background, ObservationTable) and not isinstance(instances, ObservationTable):
        names = bg_names
    d = x_all.shape[1]
    if bg.shape[0] == 0:
        raise InsufficientDataError("background sample is empty")
    if bg.shape[1] != d:
        raise DimensionError("background and instances differ in feature count")
    if d > MAX_EXACT_FEATURES:
        raise ModelError(
            f"exact enumeration over {d} features needs 2**{d} coalitions; "
            f"use shapley_sampled for more than {MAX_EXACT_FEATURES} features"
        )
    codes = np.arange(1 << d)
    masks = ((codes[:, None] >> np.arange(d)[None, :]) & 1).astype(bool)
    sizes = masks.sum(axis=1)
    weight = np.array([
        math.factorial(s) * math.factorial(d - s - 1) / math.factorial(d) for s in range(d)
    ])
    base = float(f(bg).mean())
    values = np.zeros((x_all.shape[0], d))
    preds = np.empty(x_all.shape[0])
    for i, x in enumerate(x_all):
        v = _value_function(f, x, bg, masks)
        v[0] = base
        preds[i] = v[-1]
        for j in range(d):
            without = codes[(codes >> j) & 1 == 0]
            values[i, j] = np.sum(weight[sizes[without]] * (v[without | (1 << j)] - v[without]))
    ids = tuple(str(i) for i in range(x_all.shape[0]))
    return ShapExplanation(values, base, preds, tuple(names), ids, bg)


def _instance_key(row):
    return hashlib.sha256(np.ascontiguousarray(row, dtype=np.float64).tobytes()).hexdigest()[:16]


def sample_background(data, background_size=DEFAULT_BACKGROUND, seed=0):
    x, _ = _matrix(data)
    if x.shape[0] == 0:
        raise InsufficientDataError("no rows to draw a background from")
    if background_size >= x.shape[0]:
        return x.copy()
    idx = np.sort(derive_rng(seed, "background").choice(x.shape[0], background_size, replace=False))
    return x[idx]


def _renormalize(phi, residual):
    """Spread ``residual`` over features in proportion to ``|phi|``."""
    mag = np.abs(phi)
    total = mag.sum()
    if total > 0:
        return phi + residual * mag / total
    return phi + residual / phi.size


def shapley_sampled(model, instances, background, background_size=DEFAULT_BACKGROUND,
                    n_permutations=DEFAULT_PERMUTATIONS, seed=0, instance_ids=None,
                    renormalize=True) -> ShapExplanation:
    """Permutation-sampling Shapley estimate for each instance.

    ``background`` is subsampled to ``background_size`` rows once.  Each
    instance draws its orderings from a seed derived from ``seed`` and its
    instance id (by default a hash of the row), so results do not depend on
    the order or grouping of instances.  With ``renormalize`` the
    floating-point residual of the efficiency identity is spread over the
    features in proportion to their magnitude.
    """
    f = as_predictor(model)
    x_all, names = _matrix(instances)
    if isinstance(background, ObservationTable) and not isinstance(instances, ObservationTable):
        names = background.schema.names
    bg = sample_background(background, background_size, seed)
    n, d = x_all.shape
    if bg.shape[1] != d:
        raise DimensionError("background and instances differ in feature count")
    if n_permutations < 1:
        raise ModelError("n_permutations must be >= 1")
    if instance_ids is None:
        instance_ids = [_instance_key(r) for r in x_all]
    instance_ids = tuple(str(i) for i in instance_ids)
    if len(instance_ids) != n:
        raise DimensionError("one instance id per instance is required")
    base = float(f(bg).mean())
    preds = f(x_all).astype(np.float64) if n else np.zeros(0)
    values = np.zeros((n, d))
    m = bg.shape[0]
    per_chunk = max(1, _EVAL_ROWS // max(m * max(d - 1, 1), 1))
    for i in range(n):
        x = x_all[i]
        rng = derive_rng(seed, "shap", instance_ids[i])
        half = (n_permutations + 1) // 2
        perms = np.array([rng.permutation(d) for _ in range(half)]).reshape(half, d)
        perms = np.concatenate([perms, perms[:, ::-1]])[:n_permutations]
        phi = np.zeros(d)
        for start in range(0, perms.shape[0], per_chunk):
            chunk = perms[start:start + per_chunk]
            p = chunk.shape[0]
            # prefix masks of length 1..d-1; empty and full coalitions are known
            rank = np.empty_like(chunk)
            rank[np.arange(p)[:, None], chunk] = np.arange(d)[None, :]
            k = np.arange(1, d)
            masks = rank[:, None, :] < k[None, :, None]
            v_mid = _value_function(f, x, bg, masks.reshape(-1, d)).reshape(p, d - 1)
            v = np.concatenate([np.full((p, 1), base), v_mid, np.full((p, 1), preds[i])], axis=1)
            contrib = np.diff(v, axis=1)
            np.add.at(phi, chunk.ravel(), contrib.ravel())
        phi /= perms.shape[0]
        if renormalize:
            phi = _renormalize(phi, preds[i] - base - phi.sum())
        values[i] = phi
    return ShapExplanation(values, base, preds, tuple(names), instance_ids, bg)


def hybrid_shap(dnn_expl: ShapExplanation, gbt_expl: ShapExplanation, w=0.5) -> ShapExplanation:
    """Weighted combination of two explanations of the same instances."""
    if not 0.0 <= w <= 1.0:
        raise ModelError("w must lie in [0, 1]")
    if dnn_expl.values.shape != gbt_expl.values.shape:
        raise DimensionError("explanations cover different instances or features")
    if dnn_expl.feature_names != gbt_expl.feature_names or dnn_expl.instance_ids != gbt_expl.instance_ids:
        raise DimensionError("explanations cover different instances or features")
    if dnn_expl.background.shape != gbt_expl.background.shape or not np.array_equal(
        dnn_expl.background, gbt_expl.background
    ):
        raise DimensionError("explanations use different backgrounds")
    mix = lambda a, b: w * a + (1.0 - w) * b
    return ShapExplanation(
        mix(dnn_expl.values, gbt_expl.values),
        float(mix(dnn_expl.base_value, gbt_expl.base_value)),
        mix(dnn_expl.predictions, gbt_expl.predictions),
        dnn_expl.feature_names,
        dnn_expl.instance_ids,
        dnn_expl.background,
    )


# -- grouping --------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureGroup:
    label: str
    members: tuple


@dataclass(frozen=True)
class FeatureGrouping:
    feature_names: tuple
    groups: tuple

    def __post_init__(self):
        seen = set()
        for g in self.groups:
            for j in g.members:
                if not 0 <= j < len(self.feature_names):
                    raise DataError(f"group {g.label!r} names unknown feature index {j}")
                if j in seen:
                    raise DataError(f"feature index {j} appears in more than one group")
                seen.add(j)

    def units(self):
        """(label, members) for every group plus every ungrouped feature, in feature order."""
        owner = {j: g for g in self.groups for j in g.members}
        out, done = [], set()
        for j, name in enumerate(self.feature_names):
            g = owner.get(j)
            if g is None:
                out.append((name, (j,)))
            elif g.label not in done:
                done.add(g.label)
                out.append((g.label, g.members))
        return out

    def to_dict(self):
        return {
            "feature_names": list(self.feature_names),
            "groups": [
                {"label": g.label, "members": [self.feature_names[j] for j in g.members]}
                for g in self.groups
            ],
        }

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def group_features(train, threshold=0.7) -> FeatureGrouping:
    """Connected components of the graph joining features with |Pearson r| > threshold.

    Components of two or more features become groups labelled by their first
    member followed by an asterisk.
    """
    x, names = _matrix(train)
    if x.shape[0] < 3:
        raise InsufficientDataError("need at least 3 rows to estimate correlations")
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.corrcoef(x, rowvar=False)
    corr = np.atleast_2d(np.nan_to_num(corr, nan=0.0))
    adj = np.abs(corr) > threshold
    np.fill_diagonal(adj, False)
    _, label = connected_components(adj, directed=False)
    groups = []
    for comp in sorted(set(label.tolist()), key=lambda c: int(np.flatnonzero(label == c)[0])):
        members = tuple(int(j) for j in np.flatnonzero(label == comp))
        if len(members) >= 2:
            groups.append(FeatureGroup(names[members[0]] + "*", members))
    return FeatureGrouping(tuple(names), tuple(groups))


def grouping_from_categories(feature_names, categories) -> FeatureGrouping:
    """Grouping with one group per category label (e.g. score-factor categories)."""
    order = []
    for c in categories:
        if c not in order:
            order.append(c)
    groups = tuple(
        FeatureGroup(c, tuple(j for j, cj in enumerate(categories) if cj == c)) for c in order
    )
    return FeatureGrouping(tuple(feature_names), groups)


AGGREGATE_MODES = ("signed_sum", "mean_abs", "sum_abs")


def aggregate_shap(expl: ShapExplanation, grouping: Optional[FeatureGrouping] = None,
                   mode="mean_abs", within="signed", normalize=False):
    """Rank features and groups by aggregated attribution.

    Attributions are first combined within each group per instance (signed
    sum, or sum of magnitudes with ``within="abs"``), then across instances
    by ``mode``.  ``normalize`` rescales the values to shares summing to 1.
    Returns rows ``{"rank", "unit", "members", "value"}`` ordered by rank.
    """
    if mode not in AGGREGATE_MODES:
        raise ModelError(f"unknown aggregation mode {mode!r}")
    if within not in ("signed", "abs"):
        raise ModelError("within must be 'signed' or 'abs'")
    if expl.n_instances == 0:
        raise InsufficientDataError("no explanations to aggregate")
    if grouping is None:
        grouping = FeatureGrouping(expl.feature_names, ())
    if tuple(grouping.feature_names) != tuple(expl.feature_names):
        raise DataError("grouping and explanation use different feature names")
    rows = []
    for label, members in grouping.units():
        phi = expl.values[:, list(members)]
        per_instance = phi.sum(axis=1) if within == "signed" else np.abs(phi).sum(axis=1)
        if mode == "signed_sum":
            value = float(per_instance.sum())
        elif mode == "mean_abs":
            value = float(np.abs(per_instance).mean())
        else:
            value = float(np.abs(per_instance).sum())
        rows.append({"unit": label, "members": [expl.feature_names[j] for j in members], "value": value})
    if normalize:
        total = sum(abs(r["value"]) for r in rows) if mode == "signed_sum" else sum(r["value"] for r in rows)
        if total > 0:
            for r in rows:
                r["value"] = r["value"] / total
    key = (lambda r: -abs(r["value"])) if mode == "signed_sum" else (lambda r: -r["value"])
    rows.sort(key=key)
    for i, r in enumerate(rows, 1):
        r["rank"] = i
    return rows


def write_aggregate_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "unit", "value", "members"])
        for r in rows:
            w.writerow([r["rank"], r["unit"], repr(float(r["value"])), ";".join(r["members"])])


# -- permutation importance --------------------------------------------------------

@dataclass(frozen=True)
class ImportanceRow:
    name: str
    accuracy: float
    loss: float


@dataclass(frozen=True)
class ImportanceReport:
    baseline: ImportanceRow
    rows: tuple
    n_repeats: int
    sample_size: int

    def all_rows(self):
        return (self.baseline,) + self.rows

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["feature", "accuracy", "loss", "loss_increase"])
            for r in self.all_rows():
                w.writerow([r.name, repr(r.accuracy), repr(r.loss), repr(r.loss - self.baseline.loss)])


def _score(f, x, y, threshold):
    p = f(x)
    return float(np.mean((p > threshold) == (y == 1))), cross_entropy(p, y)


def permutation_importance(model, test, n_repeats=10, sample_size=None, seed=0, threshold=0.5,
                           groups: Sequence = ()) -> ImportanceReport:
    """Loss and accuracy after shuffling each feature within a seeded sample.

    Each column is permuted without replacement, so its marginal
    distribution is unchanged; results are averaged over ``n_repeats``.
    ``groups`` adds rows for sets of features shuffled jointly with one
    shared permutation, given as ``(label, member_indices)`` pairs.
    """
    f = as_predictor(model)
    if isinstance(test, ObservationTable):
        x, y, names = test.rows, test.labels, test.schema.names
    else:
        x, y = test
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y)
        names = tuple(f"x{j}" for j in range(x.shape[1]))
    n = x.shape[0]
    if n == 0:
        raise InsufficientDataError("test set is empty")
    if sample_size is None or sample_size >= n:
        idx = np.arange(n)
    else:
        idx = np.sort(derive_rng(seed, "importance-sample").choice(n, sample_size, replace=False))
    xs = x[idx].copy()
    ys = y[idx]
    acc0, loss0 = _score(f, xs, ys, threshold)
    units = [(name, (j,)) for j, name in enumerate(names)]
    units += [(label, tuple(members)) for label, members in groups]
    rows = []
    if n_repeats > 0:
        for label, members in units:
            cols = list(members)
            saved = xs[:, cols].copy()
            accs, losses = [], []
            for r in range(n_repeats):
                perm = derive_rng(seed, "importance", label, r).permutation(xs.shape[0])
                xs[:, cols] = saved[perm]
                a, l = _score(f, xs, ys, threshold)
                accs.append(a)
                losses.append(l)
            xs[:, cols] = saved
            rows.append(ImportanceRow(label, float(np.mean(accs)), float(np.mean(losses))))
    return ImportanceReport(ImportanceRow("Baseline", acc0, loss0), tuple(rows), int(n_repeats), int(idx.size))
