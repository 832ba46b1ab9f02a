"""Classification metrics, ROC/AUC, calibration bins and risk-band tables.

Default (label 1) is the positive class throughout.  A row is predicted
positive when its probability is strictly greater than the threshold.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata, spearmanr

from .errors import DataError, DimensionError, InsufficientDataError

CLIP = 1e-7
UNDEFINED = "undefined"


@dataclass(frozen=True, eq=False)
class PredictionSet:
    probabilities: np.ndarray
    labels: np.ndarray
    quarter: Optional[np.ndarray] = None
    current_flag: Optional[np.ndarray] = None

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64).ravel()
        y = np.asarray(self.labels).ravel()
        if p.shape != y.shape:
            raise DimensionError(f"{p.size} probabilities but {y.size} labels")
        if p.size and (np.any(~np.isfinite(p)) or p.min() < 0.0 or p.max() > 1.0):
            raise DataError("probabilities must lie in [0, 1]")
        if y.size and not np.all((y == 0) | (y == 1)):
            raise DataError("labels must be 0 or 1")
        object.__setattr__(self, "probabilities", p)
        object.__setattr__(self, "labels", y.astype(np.int8))
        for name in ("quarter", "current_flag"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v).ravel()
                if v.shape != p.shape:
                    raise DimensionError(f"{name} length {v.size} does not match {p.size}")
                object.__setattr__(self, name, v)

    @classmethod
    def from_table(cls, probabilities, table):
        return cls(probabilities, table.labels, table.quarter, table.current_flag)

    def __len__(self):
        return self.probabilities.size

    def take(self, index):
        pick = lambda v: None if v is None else v[index]
        return PredictionSet(
            self.probabilities[index], self.labels[index], pick(self.quarter), pick(self.current_flag)
        )

    def with_probabilities(self, probabilities):
        return PredictionSet(probabilities, self.labels, self.quarter, self.current_flag)


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int
    threshold: float = 0.5

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise DataError("confusion counts must be nonnegative")

    @property
    def n(self):
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class MetricsReport:
    """Rates derived from a confusion matrix; ``None`` marks a zero denominator."""

    tnr: Optional[float]
    fpr: Optional[float]
    precision: Optional[float]
    recall: Optional[float]
    f_measure: Optional[float]
    accuracy: Optional[float]
    youden_j: Optional[float]

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True, eq=False)
class RocCurve:
    """(FPR, TPR) points from threshold +inf down to -inf."""

    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    @property
    def points(self):
        return np.column_stack([self.fpr, self.tpr])

    def trapezoid_area(self):
        return float(np.sum(np.diff(self.fpr) * (self.tpr[1:] + self.tpr[:-1]) / 2.0))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fpr", "tpr"])
            for a, b in zip(self.fpr, self.tpr):
                w.writerow([repr(float(a)), repr(float(b))])


def _ratio(num, den):
    return None if den == 0 else num / den


def confusion_at_threshold(preds: PredictionSet, threshold=0.5) -> ConfusionMatrix:
    if not math.isfinite(threshold):
        raise DataError("threshold must be finite")
    pos = preds.probabilities > threshold
    y = preds.labels == 1
    return ConfusionMatrix(
        tp=int(np.sum(pos & y)),
        tn=int(np.sum(~pos & ~y)),
        fp=int(np.sum(pos & ~y)),
        fn=int(np.sum(~pos & y)),
        threshold=float(threshold),
    )


def compute_metrics(cm: ConfusionMatrix) -> MetricsReport:
    tp, tn, fp, fn = cm.tp, cm.tn, cm.fp, cm.fn
    tnr = _ratio(tn, tn + fp)
    fpr = _ratio(fp, fp + tn)
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    if precision is None or recall is None:
        f = None
    else:
        f = _ratio(2.0 * recall * precision, precision + recall)
    accuracy = _ratio(tp + tn, cm.n)
    j = None if recall is None or tnr is None else recall + tnr - 1.0
    return MetricsReport(tnr, fpr, precision, recall, f, accuracy, j)


def _require_both_classes(preds):
    n_pos = int(preds.labels.sum())
    if n_pos == 0 or n_pos == len(preds):
        raise InsufficientDataError("ROC/AUC needs both classes present")
    return n_pos, len(preds) - n_pos


def auc_rank(preds: PredictionSet) -> float:
    """Mann-Whitney AUC with ties counted one half."""
    n_pos, n_neg = _require_both_classes(preds)
    ranks = rankdata(preds.probabilities, method="average")
    rank_sum = ranks[preds.labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_curve(preds: PredictionSet) -> RocCurve:
    n_pos, n_neg = _require_both_classes(preds)
    order = np.argsort(-preds.probabilities, kind="stable")
    p = preds.probabilities[order]
    y = preds.labels[order]
    # one point per distinct probability, taken after all tied rows
    last = np.r_[np.nonzero(np.diff(p))[0], p.size - 1]
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    thresholds = np.r_[np.inf, p[last]]
    return RocCurve(fpr, tpr, thresholds)


def roc_auc(preds: PredictionSet):
    return roc_curve(preds), auc_rank(preds)


def gini(preds: PredictionSet) -> float:
    return 2.0 * auc_rank(preds) - 1.0


def brier(preds: PredictionSet) -> float:
    return float(np.mean((preds.probabilities - preds.labels) ** 2))


def cross_entropy(probabilities, labels) -> float:
    """Mean binary cross-entropy with probabilities clipped to [1e-7, 1 - 1e-7]."""
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise DimensionError(f"length mismatch: {p.shape} vs {y.shape}")
    p = np.clip(p, CLIP, 1.0 - CLIP)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def log_loss(preds: PredictionSet) -> float:
    return cross_entropy(preds.probabilities, preds.labels)


@dataclass(frozen=True)
class QuantileBin:
    key: int
    mean_prediction: float
    realized_rate: float
    count: int
    positives: int


def bin_by_quantile(preds: PredictionSet, n_bins) -> list:
    """Equal-count bins in ascending probability order (stable sort for ties)."""
    n = len(preds)
    if n_bins < 1 or n_bins > n:
        raise InsufficientDataError(f"cannot form {n_bins} bins from {n} predictions")
    order = np.argsort(preds.probabilities, kind="stable")
    out = []
    for k, idx in enumerate(np.array_split(order, n_bins)):
        pos = int(preds.labels[idx].sum())
        out.append(QuantileBin(k, float(preds.probabilities[idx].mean()), pos / idx.size, int(idx.size), pos))
    return out


@dataclass(frozen=True)
class ScoreGroup:
    key: float
    realized_rate: float
    count: int


def group_by_score(scores, labels) -> list:
    """Realized default frequency at every distinct score value."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape:
        raise DimensionError("scores and labels differ in length")
    uniq, inv, counts = np.unique(scores, return_inverse=True, return_counts=True)
    sums = np.bincount(inv, weights=labels)
    return [ScoreGroup(float(u), float(s / c), int(c)) for u, s, c in zip(uniq, sums, counts)]


def rank_correlation(groups: Sequence, negate=False) -> float:
    """Spearman correlation between group keys and realized default rates.

    ``groups`` holds objects with ``key`` and ``realized_rate`` attributes or
    (key, rate) pairs.  ``negate`` flips the sign, as for credit scores where
    a higher score means lower risk.
    """
    keys, rates = [], []
    for g in groups:
        if hasattr(g, "realized_rate"):
            keys.append(g.key)
            rates.append(g.realized_rate)
        else:
            keys.append(g[0])
            rates.append(g[1])
    if len(keys) < 2:
        raise InsufficientDataError("rank correlation needs at least two groups")
    rho = spearmanr(keys, rates).statistic
    rho = float(rho)
    return -rho if negate else rho


# Industry score bands: deep subprime <= 499, subprime 500-600, near prime
# 601-660, prime 661-780, super prime above 780.
BAND_LABELS = ("Deep Subprime", "Subprime", "Near Prime", "Prime", "Super Prime")
BAND_BOUNDARIES = (499.0, 600.0, 660.0, 780.0)
BAND_SHARES = (0.0648, 0.2122, 0.1409, 0.3331, 0.2490)


@dataclass(frozen=True)
class RiskBandSpec:
    boundaries: tuple = BAND_BOUNDARIES
    shares: tuple = BAND_SHARES
    labels: tuple = BAND_LABELS

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=float)
        if b.size and np.any(np.diff(b) <= 0):
            raise DataError("band boundaries must be strictly increasing")
        if len(self.shares) != b.size + 1 or len(self.labels) != b.size + 1:
            raise DataError("need one share and one label per band")
        if abs(sum(self.shares) - 1.0) > 1e-6:
            raise DataError("band shares must sum to 1")

    @property
    def n_bands(self):
        return len(self.labels)

    def score_band(self, scores):
        """Band index per score; 0 is the riskiest (lowest score)."""
        return np.searchsorted(np.asarray(self.boundaries), np.asarray(scores, dtype=float), side="left")


def prediction_bands(probabilities, counts):
    """Band index per row: the ``counts[0]`` highest probabilities form band 0, and so on."""
    p = np.asarray(probabilities, dtype=float)
    counts = np.asarray(counts, dtype=np.int64)
    if counts.sum() != p.size:
        raise DimensionError("band counts must sum to the number of predictions")
    order = np.argsort(-p, kind="stable")
    bands = np.empty(p.size, dtype=np.int64)
    bands[order] = np.repeat(np.arange(counts.size), counts)
    return bands


@dataclass(frozen=True)
class CrosstabCell:
    score_band: int
    predicted_band: int
    count: int
    share_of_score_band: Optional[float]
    realized_rate: Optional[float]
    mean_predicted: Optional[float]


@dataclass(frozen=True)
class BandRow:
    score_band: int
    label: str
    count: int
    share: float
    realized_rate: Optional[float]
    mean_predicted: Optional[float]


@dataclass(frozen=True)
class BandCrosstab:
    spec: RiskBandSpec
    cells: tuple
    score_rows: tuple
    predicted_rows: tuple

    def cell(self, score_band, predicted_band):
        return self.cells[score_band * self.spec.n_bands + predicted_band]

    def share_matrix(self):
        k = self.spec.n_bands
        m = np.zeros((k, k))
        for c in self.cells:
            m[c.score_band, c.predicted_band] = c.share_of_score_band or 0.0
        return m

    def rows(self):
        """Flat rows in score-band-major order for CSV output."""
        out = []
        for sr in self.score_rows:
            for pb in range(self.spec.n_bands):
                c = self.cell(sr.score_band, pb)
                out.append({
                    "score_band": sr.label,
                    "score_band_share": sr.share,
                    "predicted_band": pb + 1,
                    "share_in_predicted_band": c.share_of_score_band,
                    "realized_rate": c.realized_rate,
                    "mean_predicted": c.mean_predicted,
                    "score_band_realized_rate": sr.realized_rate,
                    "score_band_mean_predicted": sr.mean_predicted,
                })
        return out


def band_crosstab(preds: PredictionSet, scores, spec: RiskBandSpec = RiskBandSpec()) -> BandCrosstab:
    """Cross-tabulate score bands against equally sized predicted-risk bands.

    Prediction bands reuse the empirical sizes of the score bands in this
    sample.  Empty cells carry ``None`` rates.
    """
    scores = np.asarray(scores, dtype=float)
    if scores.size != len(preds):
        raise DimensionError("scores and predictions differ in length")
    k = spec.n_bands
    sband = spec.score_band(scores)
    counts = np.bincount(sband, minlength=k)
    pband = prediction_bands(preds.probabilities, counts)
    p, y = preds.probabilities, preds.labels
    n = max(len(preds), 1)
    cells = []
    for s in range(k):
        in_s = sband == s
        for b in range(k):
            m = in_s & (pband == b)
            c = int(m.sum())
            cells.append(CrosstabCell(
                s, b, c,
                None if counts[s] == 0 else c / counts[s],
                None if c == 0 else float(y[m].mean()),
                None if c == 0 else float(p[m].mean()),
            ))

    def band_row(mask, idx):
        c = int(mask.sum())
        return BandRow(idx, spec.labels[idx], c, c / n,
                       None if c == 0 else float(y[mask].mean()),
                       None if c == 0 else float(p[mask].mean()))

    score_rows = tuple(band_row(sband == s, s) for s in range(k))
    predicted_rows = tuple(band_row(pband == b, b) for b in range(k))
    return BandCrosstab(spec, tuple(cells), score_rows, predicted_rows)


# -- window reports ----------------------------------------------------------

WINDOW_COLUMNS = (
    "train_window", "test_window", "n",
    "auc", "precision", "recall", "f_measure", "accuracy", "loss",
    "default_rate", "predicted_default_rate",
    "mean_forecast_defaulters", "mean_forecast_nondefaulters",
)


def window_row(train_window, test_window, preds: PredictionSet, threshold=0.5):
    rep = compute_metrics(confusion_at_threshold(preds, threshold))
    y = preds.labels == 1
    try:
        auc = auc_rank(preds)
    except InsufficientDataError:
        auc = None
    return {
        "train_window": train_window,
        "test_window": test_window,
        "n": len(preds),
        "auc": auc,
        "precision": rep.precision,
        "recall": rep.recall,
        "f_measure": rep.f_measure,
        "accuracy": rep.accuracy,
        "loss": log_loss(preds) if len(preds) else None,
        "default_rate": float(y.mean()) if len(preds) else None,
        "predicted_default_rate": float((preds.probabilities > threshold).mean()) if len(preds) else None,
        "mean_forecast_defaulters": float(preds.probabilities[y].mean()) if y.any() else None,
        "mean_forecast_nondefaulters": float(preds.probabilities[~y].mean()) if (~y).any() else None,
    }


def metrics_over_windows(runs, threshold=0.5, current_only=False):
    """One report row per (train_window, test_window, PredictionSet) run.

    With ``current_only`` each set is restricted to rows whose current flag is
    set; sets without flags are reported unfiltered.
    """
    runs = list(runs)
    if not runs:
        raise InsufficientDataError("no windows to report")
    rows = []
    for train_window, test_window, preds in runs:
        if current_only and preds.current_flag is not None:
            preds = preds.take(preds.current_flag.astype(bool))
        rows.append(window_row(train_window, test_window, preds, threshold))
    return rows


def gini_by_period(preds: PredictionSet, period_of_quarter=lambda q: q):
    """Gini per period, e.g. per quarter or per year; ``None`` when one class is missing."""
    if preds.quarter is None:
        raise DataError("predictions carry no quarter stamps")
    periods = np.array([period_of_quarter(int(q)) for q in preds.quarter])
    out = {}
    for key in sorted(set(periods.tolist())):
        sub = preds.take(periods == key)
        try:
            out[key] = gini(sub)
        except InsufficientDataError:
            out[key] = None
    return out


def _fmt(v):
    if v is None:
        return UNDEFINED
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_rows_csv(rows, path, columns=None):
    """CSV with ``undefined`` in place of missing values."""
    rows = list(rows)
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def write_rows_json(rows, path):
    with open(path, "w") as fh:
        json.dump(list(rows), fh, indent=2, sort_keys=True)
        fh.write("\n")
