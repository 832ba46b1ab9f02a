"""Economic value of default forecasts.

Value added compares the run-up losses a lender avoids by cutting credit
lines of predicted defaulters against the interest income lost on good
accounts that were cut by mistake, relative to the losses with no forecast.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import ndtr, ndtri
from scipy.stats import pearsonr

from .data import ObservationTable
from .errors import ConfigError, DataError, DimensionError, InsufficientDataError
from .metrics import ConfusionMatrix, PredictionSet, RiskBandSpec, prediction_bands
from .seeding import derive_rng


@dataclass(frozen=True)
class ValueAddedParams:
    """``r`` is the annual rate, ``n_periods`` the amortization in years and
    ``runup`` the ratio of the balance at default to the running balance."""

    r: float = 0.10
    n_periods: int = 3
    runup: float = 1.2
    threshold: float = 0.5

    def __post_init__(self):
        if not self.r > 0:
            raise ConfigError("must be > 0", "r")
        if self.n_periods < 1:
            raise ConfigError("must be >= 1", "n_periods")
        if not self.runup > 1:
            raise ConfigError("must be > 1", "runup")

    def penalty(self):
        """Lost interest on a wrongly cut account per unit of avoided run-up."""
        return (1.0 - (1.0 + self.r) ** (-self.n_periods)) / (self.runup - 1.0)


def value_added_counts(tn, fn, fp, params: ValueAddedParams) -> Optional[float]:
    """Value added with the lender's convention that a negative forecast flags a default.

    ``tn``: defaulters that were flagged, ``fp``: defaulters that were
    missed, ``fn``: good accounts that were flagged.  ``None`` when there
    are no defaulters.
    """
    den = tn + fp
    if den == 0:
        return None
    if math.isinf(params.runup):
        return tn / den
    return (tn - fn * params.penalty()) / den


def value_added(cm: ConfusionMatrix, params: ValueAddedParams = ValueAddedParams()) -> Optional[float]:
    """Value added from a default-positive confusion matrix.

    Flagged defaulters are true positives here, missed defaulters false
    negatives and flagged good accounts false positives; they are mapped
    onto the lender convention of :func:`value_added_counts`.
    """
    return value_added_counts(tn=cm.tp, fn=cm.fp, fp=cm.fn, params=params)


def value_added_surface(cm: ConfusionMatrix, r_grid: Sequence[float], runup_grid: Sequence[float],
                        n_periods=3):
    """Matrix of value added with rows over ``r_grid`` and columns over ``runup_grid``."""
    r_grid = list(r_grid)
    runup_grid = list(runup_grid)
    if not r_grid or not runup_grid:
        raise InsufficientDataError("value-added grids must be nonempty")
    out = np.full((len(r_grid), len(runup_grid)), np.nan)
    for i, r in enumerate(r_grid):
        for j, u in enumerate(runup_grid):
            va = value_added(cm, ValueAddedParams(r=r, n_periods=n_periods, runup=u))
            if va is not None:
                out[i, j] = va
    return out


def write_surface_csv(r_grid, runup_grid, surface, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["r", "runup", "value_added"])
        for i, r in enumerate(r_grid):
            for j, u in enumerate(runup_grid):
                v = surface[i, j]
                w.writerow([repr(float(r)), repr(float(u)), "undefined" if np.isnan(v) else repr(float(v))])


def comparative_value(cm_a: ConfusionMatrix, cm_b: ConfusionMatrix,
                      params: ValueAddedParams = ValueAddedParams()) -> Optional[float]:
    """VA(a) - VA(b) for two forecasts of the same accounts."""
    if cm_a.n != cm_b.n or cm_a.tp + cm_a.fn != cm_b.tp + cm_b.fn:
        raise DataError("confusion matrices describe different populations")
    a = value_added(cm_a, params)
    b = value_added(cm_b, params)
    return None if a is None or b is None else a - b


# -- aggregate risk ------------------------------------------------------------

@dataclass(frozen=True)
class AggregateRiskSeries:
    rows: tuple
    correlation: Optional[float]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["quarter", "n", "predicted_rate", "realized_rate"])
            for r in self.rows:
                w.writerow([r["quarter"], r["n"], repr(r["predicted_rate"]), repr(r["realized_rate"])])
            w.writerow(["correlation", "", "undefined" if self.correlation is None else repr(self.correlation), ""])


def aggregate_default_rate(preds) -> AggregateRiskSeries:
    """Mean predicted and realized default rate per quarter.

    ``preds`` is either one PredictionSet with quarter stamps or a sequence
    of per-quarter PredictionSets.  The Pearson correlation between the two
    series is ``None`` with fewer than two quarters or a constant series.
    """
    if isinstance(preds, PredictionSet):
        if preds.quarter is None:
            raise DataError("predictions carry no quarter stamps")
        parts = [(int(q), preds.take(preds.quarter == q)) for q in np.unique(preds.quarter)]
    else:
        parts = []
        for i, p in enumerate(preds):
            q = int(p.quarter[0]) if p.quarter is not None and len(p) else i
            parts.append((q, p))
    if not parts:
        raise InsufficientDataError("no quarters to aggregate")
    rows = []
    for q, p in parts:
        if len(p) == 0:
            continue
        rows.append({
            "quarter": q,
            "n": len(p),
            "predicted_rate": float(np.mean(p.probabilities)),
            "realized_rate": float(np.mean(p.labels)),
        })
    corr = None
    if len(rows) >= 2:
        a = np.array([r["predicted_rate"] for r in rows])
        b = np.array([r["realized_rate"] for r in rows])
        if np.ptp(a) > 0 and np.ptp(b) > 0:
            corr = float(pearsonr(a, b).statistic)
    return AggregateRiskSeries(tuple(rows), corr)


# -- borrower savings -------------------------------------------------------------

def truncated_normal_draw(mean, std, low, high, seed=0, size=None, rng=None):
    """Inverse-CDF draws from a normal truncated to ``[low, high]``."""
    if not std > 0:
        raise ConfigError("must be > 0", "std")
    if not low < high:
        raise ConfigError("low must be below high", "bounds")
    if rng is None:
        rng = derive_rng(seed, "truncated-normal")
    u = rng.random(size)
    alpha = (low - mean) / std
    beta = (high - mean) / std
    # work in the tail closer to the mean for accuracy far out in the upper tail
    flip = alpha > 0
    if flip:
        alpha, beta = -beta, -alpha
    a, b = ndtr(alpha), ndtr(beta)
    z = ndtri(a + u * (b - a))
    if flip:
        z = -z
    return np.clip(mean + std * z, low, high)


# Placeholder annual credit card rates per score band (deep subprime first).
# These are illustrative only; supply measured rates for real analyses.
DEFAULT_RATE_MEANS = (0.245, 0.225, 0.195, 0.155, 0.125)
DEFAULT_RATE_STDS = (0.035, 0.035, 0.030, 0.025, 0.020)


@dataclass(frozen=True)
class SavingsSpec:
    bands: RiskBandSpec = RiskBandSpec()
    rate_means: tuple = DEFAULT_RATE_MEANS
    rate_stds: tuple = DEFAULT_RATE_STDS
    rate_low: float = 0.0
    rate_high: float = 0.36
    balance_column: str = "credit_card_balance"
    score_column: str = "credit_score"
    seed: int = 0

    def __post_init__(self):
        k = self.bands.n_bands
        if len(self.rate_means) != k or len(self.rate_stds) != k:
            raise ConfigError(f"need {k} rate means and stds", "rate_means")
        if not self.rate_low < self.rate_high:
            raise ConfigError("rate_low must be below rate_high", "rate_low")
        if any(s <= 0 for s in self.rate_stds):
            raise ConfigError("rate stds must be > 0", "rate_stds")
        if any(m <= 0 for m in self.rate_means) or self.rate_low < 0:
            raise ConfigError("rates must be positive", "rate_means")


def draw_band_rates(n, spec: SavingsSpec):
    """(n, bands) matrix: one independent rate per borrower for each band."""
    out = np.empty((n, spec.bands.n_bands))
    for k in range(spec.bands.n_bands):
        rng = derive_rng(spec.seed, "savings-rate", k)
        out[:, k] = truncated_normal_draw(
            spec.rate_means[k], spec.rate_stds[k], spec.rate_low, spec.rate_high, size=n, rng=rng
        )
    return out


@dataclass(frozen=True)
class SavingsReport:
    cells: tuple
    per_row: np.ndarray
    total: float
    per_capita: float

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["score_band", "predicted_band", "count", "mean_balance", "mean_saving", "saving_pct_of_balance"])
            for c in self.cells:
                fmt = lambda v: "undefined" if v is None else repr(v)
                w.writerow([c["score_band"], c["predicted_band"], c["count"],
                            fmt(c["mean_balance"]), fmt(c["mean_saving"]), fmt(c["saving_pct_of_balance"])])
            w.writerow(["total", "", len(self.per_row), "", repr(self.total), ""])
            w.writerow(["per_capita", "", len(self.per_row), "", repr(self.per_capita), ""])


def savings_from_bands(balances, score_band, pred_band, rates, labels=None, n_bands=None):
    """Per-row saving ``(rate[score band] - rate[predicted band]) * balance`` and per-cell means."""
    balances = np.asarray(balances, dtype=np.float64)
    score_band = np.asarray(score_band, dtype=np.int64)
    pred_band = np.asarray(pred_band, dtype=np.int64)
    n = balances.size
    if score_band.size != n or pred_band.size != n or rates.shape[0] != n:
        raise DimensionError("balances, bands and rates differ in length")
    if np.any(balances < 0):
        raise DataError("balances must be nonnegative")
    k = rates.shape[1] if n_bands is None else n_bands
    rows = np.arange(n)
    saving = (rates[rows, score_band] - rates[rows, pred_band]) * balances
    cells = []
    for s in range(k):
        for b in range(k):
            m = (score_band == s) & (pred_band == b)
            c = int(m.sum())
            mean_bal = float(balances[m].mean()) if c else None
            mean_sav = math.fsum(saving[m]) / c if c else None
            pct = None if not c or mean_bal == 0 else mean_sav / mean_bal
            cells.append({
                "score_band": (labels[s] if labels else s),
                "predicted_band": b + 1,
                "count": c,
                "mean_balance": mean_bal,
                "mean_saving": mean_sav,
                "saving_pct_of_balance": pct,
            })
    total = math.fsum(saving)
    return SavingsReport(tuple(cells), saving, total, total / n if n else 0.0)


def borrower_savings(table: ObservationTable, preds: PredictionSet, spec: SavingsSpec = SavingsSpec()):
    """Interest savings from pricing each borrower by predicted rather than score band.

    Prediction bands have the same sizes as the score bands in ``table``.
    Each borrower gets one rate draw per band, so a borrower whose bands
    coincide saves exactly zero.
    """
    if len(table) != len(preds):
        raise DimensionError("table and predictions differ in length")
    balances = table.column(spec.balance_column)
    scores = table.column(spec.score_column)
    k = spec.bands.n_bands
    sband = spec.bands.score_band(scores)
    pband = prediction_bands(preds.probabilities, np.bincount(sband, minlength=k))
    rates = draw_band_rates(len(table), spec)
    return savings_from_bands(balances, sband, pband, rates, spec.bands.labels, k)
