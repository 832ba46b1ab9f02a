"""Synthetic consumer credit panels with a known default mechanism.

Each borrower carries a persistent size factor and an AR(1) latent risk
process.  Bureau-style features are noisy functions of both, the delinquency
state is a threshold on latent risk, and the 8-quarter default label is drawn
from a closed-form probability

    p(x) = sigmoid(b_state + linear(x) + strength * nonlinear(x))

whose per-state intercepts are solved so that the state-conditional default
frequencies hit the configured persistence.  An optional stress path shifts
latent risk by quarter, which moves the feature distribution (and hence the
aggregate default rate) while leaving p(x) unchanged.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit, ndtri

from .data import FeatureSchema, ObservationTable
from .errors import ConfigError
from .seeding import derive_rng

FEATURES = (
    # name, kind, score-factor category
    ("worst_present_status", "count", "payment_history"),
    ("past_due_90_now", "indicator", "payment_history"),
    ("delinquencies_90_last_24m", "count", "payment_history"),
    ("months_since_recent_90dpd", "continuous", "payment_history"),
    ("bankruptcy_flag", "indicator", "payment_history"),
    ("collections_balance", "continuous", "payment_history"),
    ("total_debt_balance", "continuous", "amounts_owed"),
    ("monthly_payment_all_debt", "continuous", "amounts_owed"),
    ("mortgage_balance", "continuous", "amounts_owed"),
    ("credit_card_balance", "continuous", "amounts_owed"),
    ("credit_card_utilization", "continuous", "amounts_owed"),
    ("months_since_oldest_trade", "count", "length_of_credit"),
    ("open_credit_card_trades", "count", "credit_mix"),
    ("installment_trades", "count", "credit_mix"),
    ("has_mortgage", "indicator", "credit_mix"),
    ("inquiries_last_12m", "count", "new_credit"),
)

SCHEMA = FeatureSchema(
    names=[f[0] for f in FEATURES],
    kinds=[f[1] for f in FEATURES],
    groups=[f[2] for f in FEATURES],
)

_IDX = {name: j for j, name in enumerate(SCHEMA.names)}

# Cumulative share of borrowers (lowest score first) at the upper edge of
# each industry score band; used to place synthetic credit scores.
_SCORE_ANCHORS = (
    (0.0, 300.0),
    (0.0648, 499.5),
    (0.2870, 600.5),
    (0.4279, 660.5),
    (0.7610, 780.5),
    (1.0, 850.0),
)


@dataclass(frozen=True)
class SyntheticPanelConfig:
    n_borrowers: int = 20000
    n_quarters: int = 12
    base_default_rate: float = 0.34
    persistence: tuple = (0.776, 0.927)
    nonlinearity_strength: float = 1.0
    seed: int = 0
    stress_amplitude: float = 0.0
    latent_autocorrelation: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "persistence", tuple(float(p) for p in self.persistence))
        if int(self.n_borrowers) < 1:
            raise ConfigError("must be >= 1", "n_borrowers")
        if int(self.n_quarters) < 1:
            raise ConfigError("must be >= 1", "n_quarters")
        if not 0.0 <= self.base_default_rate <= 1.0:
            raise ConfigError("must lie in [0, 1]", "base_default_rate")
        if len(self.persistence) != 2 or not all(0.0 <= p <= 1.0 for p in self.persistence):
            raise ConfigError("needs two probabilities in [0, 1]", "persistence")
        if self.nonlinearity_strength < 0:
            raise ConfigError("must be >= 0", "nonlinearity_strength")
        if not 0.0 <= self.latent_autocorrelation < 1.0:
            raise ConfigError("must lie in [0, 1)", "latent_autocorrelation")
        self.delinquent_share()

    def delinquent_share(self):
        """Share of rows in the delinquent state implied by the base rate."""
        stay_current, stay_default = self.persistence
        leave = 1.0 - stay_current
        spread = stay_default - leave
        if spread <= 0:
            raise ConfigError("default state must be more persistent than entry into it", "persistence")
        pi = (self.base_default_rate - leave) / spread
        if not 0.0 < pi < 1.0:
            raise ConfigError(
                f"base rate {self.base_default_rate} is unreachable with persistence "
                f"{self.persistence} (implied delinquent share {pi:.4f})",
                "base_default_rate",
            )
        return pi

    def stress_path(self):
        q = int(self.n_quarters)
        if q == 1 or self.stress_amplitude == 0:
            return np.zeros(q)
        return self.stress_amplitude * np.sin(np.pi * np.arange(q) / (q - 1))

    def to_dict(self):
        d = asdict(self)
        d["persistence"] = list(self.persistence)
        return d


def _draws(cfg: SyntheticPanelConfig):
    """All random inputs, drawn in a fixed order from the config seed."""
    rng = derive_rng(cfg.seed, "synth")
    n, q = int(cfg.n_borrowers), int(cfg.n_quarters)
    rho = cfg.latent_autocorrelation
    d = {}
    d["size"] = rng.standard_normal(n)
    d["history0"] = np.floor(6 + rng.gamma(2.0, 45.0, n))
    d["mortgage_u"] = rng.random(n)
    d["mortgage_share"] = rng.beta(8.0, 2.0, n)
    z = np.empty((q, n))
    z[0] = rng.standard_normal(n)
    for t in range(1, q):
        z[t] = rho * z[t - 1] + np.sqrt(1 - rho * rho) * rng.standard_normal(n)
    d["latent"] = z
    for name in ("debt_eps", "pay_eps", "cc_eps", "util_eps", "recent_eps", "score_eps"):
        d[name] = rng.standard_normal((q, n))
    for name in ("status_u", "status_u2", "bk_u", "coll_u", "had_delinq_u", "label_u"):
        d[name] = rng.random((q, n))
    d["coll_eps"] = rng.standard_normal((q, n))
    d["recent_gamma"] = rng.gamma(1.5, 1.0, (q, n))
    # Poisson counts come from inverse-CDF on stored uniforms so the feature
    # map below stays a deterministic function of latent risk.
    for name in ("delinq_u", "cards_u", "inst_u", "inq_u"):
        d[name] = rng.random((q, n))
    return d


def _poisson_icdf(u, lam):
    from scipy.stats import poisson

    return poisson.ppf(u, lam)


def _features(cfg, d, risk, delinquent):
    """Feature matrices, shape (quarters, borrowers, features)."""
    q, n = risk.shape
    size = d["size"][None, :]
    x = np.zeros((q, n, len(FEATURES)))
    months = d["history0"][None, :] + 3.0 * np.arange(q)[:, None]
    has_mortgage = (d["mortgage_u"] < expit(1.6 * d["size"] - 0.2)).astype(float)[None, :]

    mild = (d["status_u"] < expit(1.2 * risk - 2.5)).astype(float)
    status_current = mild * (1.0 + (d["status_u2"] < 0.4))
    status_default = 3.0 + (d["status_u2"] < expit(risk - 2.0))
    x[..., _IDX["worst_present_status"]] = np.where(delinquent, status_default, status_current)
    x[..., _IDX["past_due_90_now"]] = delinquent
    x[..., _IDX["delinquencies_90_last_24m"]] = (
        _poisson_icdf(d["delinq_u"], np.exp(-1.6 + 0.9 * risk)) + delinquent
    )
    had = delinquent | (d["had_delinq_u"] < expit(1.5 * risk - 1.0))
    elapsed = np.floor(12.0 * np.exp(-0.3 * risk) * d["recent_gamma"])
    elapsed = np.minimum(elapsed, months)
    elapsed = np.where(delinquent, np.floor(3 * d["status_u2"]), elapsed)
    x[..., _IDX["months_since_recent_90dpd"]] = np.where(had, elapsed, -1.0)
    x[..., _IDX["bankruptcy_flag"]] = d["bk_u"] < expit(-4.0 + 1.2 * risk)
    x[..., _IDX["collections_balance"]] = np.where(
        d["coll_u"] < expit(-2.5 + 1.2 * risk), np.round(np.exp(6.5 + d["coll_eps"]), 2), 0.0
    )
    debt = np.round(np.exp(10.3 + 1.1 * size + 0.25 * d["debt_eps"]), 2)
    x[..., _IDX["total_debt_balance"]] = debt
    x[..., _IDX["monthly_payment_all_debt"]] = np.round(
        0.0075 * debt * np.exp(0.08 * d["pay_eps"]), 2
    )
    x[..., _IDX["mortgage_balance"]] = np.round(
        has_mortgage * debt * d["mortgage_share"][None, :], 2
    )
    x[..., _IDX["credit_card_balance"]] = np.round(
        np.exp(7.8 + 0.6 * size + 0.5 * risk + 0.6 * d["cc_eps"]), 2
    )
    x[..., _IDX["credit_card_utilization"]] = np.clip(
        1.15 * expit(0.9 * risk + 0.3 * d["util_eps"] - 0.6), 0.0, 1.5
    )
    x[..., _IDX["months_since_oldest_trade"]] = months
    x[..., _IDX["open_credit_card_trades"]] = _poisson_icdf(
        d["cards_u"], np.exp(1.1 + 0.35 * size - 0.15 * risk)
    )
    x[..., _IDX["installment_trades"]] = _poisson_icdf(
        d["inst_u"], np.exp(0.4 + 0.25 * size) * np.ones_like(risk)
    )
    x[..., _IDX["has_mortgage"]] = has_mortgage
    x[..., _IDX["inquiries_last_12m"]] = _poisson_icdf(d["inq_u"], np.exp(0.2 + 0.35 * risk))
    return x


def linear_score(x):
    """Part of the default log-odds that is linear in the raw features."""
    c = _IDX
    return (
        0.45 * x[..., c["worst_present_status"]]
        + 0.25 * x[..., c["delinquencies_90_last_24m"]]
        + 0.8 * x[..., c["bankruptcy_flag"]]
        + 0.0001 * x[..., c["collections_balance"]]
        + 1.4 * x[..., c["credit_card_utilization"]]
        - 0.004 * x[..., c["months_since_oldest_trade"]]
        - 0.08 * x[..., c["open_credit_card_trades"]]
        + 0.12 * x[..., c["inquiries_last_12m"]]
        - 2.0e-6 * x[..., c["total_debt_balance"]]
        - 0.25 * x[..., c["has_mortgage"]]
        - 0.6
    )


def nonlinear_score(x):
    """Threshold effects and pairwise interactions."""
    c = _IDX
    util = x[..., c["credit_card_utilization"]]
    log_debt = np.log1p(x[..., c["total_debt_balance"]])
    log_cc = np.log1p(x[..., c["credit_card_balance"]])
    cards = x[..., c["open_credit_card_trades"]]
    months = x[..., c["months_since_oldest_trade"]]
    recent = x[..., c["months_since_recent_90dpd"]]
    status = x[..., c["worst_present_status"]]
    inquiries = x[..., c["inquiries_last_12m"]]
    mortgage = x[..., c["has_mortgage"]]
    return (
        1.2 * (util > 0.9)
        + 0.9 * (months < 36)
        + 1.0 * ((recent >= 0) & (recent <= 12))
        + 2.4 * (util - 0.5) * np.tanh(log_debt - 10.3)
        - 0.8 * np.tanh((cards - 3.0) / 2.0) * np.tanh(log_cc - 7.8)
        + 0.35 * (log_debt - 10.3) ** 2
        + 0.8 * ((status >= 1) & (mortgage == 0) & (inquiries >= 2))
        - 0.9
    )


def latent_score(x, strength):
    return linear_score(x) + strength * nonlinear_score(x)


def _solve_intercept(score, target):
    if target <= 0.0 or target >= 1.0:
        raise ConfigError(f"state default rate {target} must lie strictly inside (0, 1)", "persistence")
    return brentq(lambda b: expit(score + b).mean() - target, -60.0, 60.0, xtol=1e-12)


@dataclass(frozen=True)
class DefaultMechanism:
    """Closed-form default probability of a generated panel."""

    strength: float
    intercept_current: float
    intercept_default: float

    def probability(self, rows):
        rows = np.asarray(rows, dtype=float)
        delinquent = rows[..., _IDX["past_due_90_now"]] > 0.5
        b = np.where(delinquent, self.intercept_default, self.intercept_current)
        return expit(latent_score(rows, self.strength) + b)


def _credit_scores(x, eps):
    c = _IDX
    raw = (
        0.5 * x[..., c["worst_present_status"]]
        + 0.35 * x[..., c["delinquencies_90_last_24m"]]
        + 0.9 * x[..., c["bankruptcy_flag"]]
        + 1.6 * x[..., c["credit_card_utilization"]]
        + 0.1 * x[..., c["inquiries_last_12m"]]
        - 0.006 * x[..., c["months_since_oldest_trade"]]
        + 0.6 * ((x[..., c["months_since_recent_90dpd"]] >= 0))
        + 0.5 * eps
    ).ravel()
    # Safest borrowers get the highest score.
    order = np.argsort(-raw, kind="stable")
    pct = np.empty_like(raw)
    pct[order] = (np.arange(raw.size) + 0.5) / raw.size
    xs, ys = zip(*_SCORE_ANCHORS)
    return np.round(np.interp(pct, xs, ys)).reshape(x.shape[:-1])


def synthesize(config: SyntheticPanelConfig):
    """Generate a panel and return ``(table, mechanism)``."""
    cfg = config
    d = _draws(cfg)
    pi = cfg.delinquent_share()
    cut = ndtri(1.0 - pi)
    z = d["latent"]
    stress = cfg.stress_path()[:, None]

    # Intercepts are calibrated on the unstressed population so the default
    # mechanism is the same in every quarter.
    ref_delinq = z > cut
    ref_x = _features(cfg, d, z, ref_delinq)
    s_ref = latent_score(ref_x, cfg.nonlinearity_strength)
    stay_current, stay_default = cfg.persistence
    b_cur = _solve_intercept(s_ref[~ref_delinq], 1.0 - stay_current) if (~ref_delinq).any() else 0.0
    b_def = _solve_intercept(s_ref[ref_delinq], stay_default) if ref_delinq.any() else 0.0
    mech = DefaultMechanism(float(cfg.nonlinearity_strength), float(b_cur), float(b_def))

    if np.any(stress != 0):
        risk = z + stress
        delinquent = risk > cut
        x = _features(cfg, d, risk, delinquent)
    else:
        delinquent, x = ref_delinq, ref_x
    p = mech.probability(x)
    y = (d["label_u"] < p).astype(np.int8)
    score = _credit_scores(x, d["score_eps"])

    q, n = z.shape
    table = ObservationTable(
        schema=SCHEMA,
        rows=x.reshape(q * n, -1),
        labels=y.ravel(),
        quarter=np.repeat(np.arange(q), n),
        borrower_id=np.tile(np.arange(n), q),
        current_flag=~delinquent.ravel(),
        extra={"credit_score": score.ravel(), "true_pd": p.ravel()},
    )
    return table, mech


def synthesize_panel(config: SyntheticPanelConfig) -> ObservationTable:
    return synthesize(config)[0]
