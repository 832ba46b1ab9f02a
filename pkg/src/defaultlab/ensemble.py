"""Probability-averaging hybrid of a neural network and a boosted ensemble."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn, trees
from .data import ObservationTable
from .errors import DimensionError, InsufficientDataError, ModelError
from .metrics import PredictionSet, cross_entropy, write_rows_csv

DEFAULT_GRID = tuple(round(0.1 * k, 1) for k in range(1, 10))


@dataclass(frozen=True, eq=False)
class HybridModel:
    dnn: nn.NetworkModel
    gbt: trees.TreeEnsembleModel
    weight_dnn: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.weight_dnn <= 1.0:
            raise ModelError("weight_dnn must lie in [0, 1]")
        if self.dnn.input_dim != self.gbt.n_features:
            raise DimensionError(
                f"network expects {self.dnn.input_dim} features, trees expect {self.gbt.n_features}"
            )

    @property
    def n_features(self):
        return self.dnn.input_dim

    def predict(self, x):
        w = self.weight_dnn
        return combine(nn.predict(self.dnn, x), self.gbt.predict(x), w)

    def components(self, x):
        return nn.predict(self.dnn, x), self.gbt.predict(x)


def combine(p_dnn, p_gbt, w=0.5):
    p_dnn = np.asarray(p_dnn, dtype=np.float64)
    p_gbt = np.asarray(p_gbt, dtype=np.float64)
    if p_dnn.shape != p_gbt.shape:
        raise DimensionError("component predictions differ in length")
    return w * p_dnn + (1.0 - w) * p_gbt


def hybrid_predict(model: HybridModel, table: ObservationTable) -> PredictionSet:
    if table.schema.n_features != model.n_features:
        raise DimensionError("table schema does not match the hybrid's components")
    return PredictionSet.from_table(model.predict(table.rows), table)


def weight_sweep(dnn_preds, gbt_preds, labels=None, grid=DEFAULT_GRID):
    """Cross-entropy of ``w * p_dnn + (1 - w) * p_gbt`` for every ``w`` in ``grid``.

    Accepts PredictionSets or raw probability arrays.  Returns
    ``(rows, best_w)`` where rows are ``{"w", "loss"}`` dicts.
    """
    grid = list(grid)
    if not grid:
        raise InsufficientDataError("weight grid is empty")
    pd = getattr(dnn_preds, "probabilities", dnn_preds)
    pg = getattr(gbt_preds, "probabilities", gbt_preds)
    if labels is None:
        labels = dnn_preds.labels
    rows = [{"w": float(w), "loss": cross_entropy(combine(pd, pg, w), labels)} for w in grid]
    best = min(rows, key=lambda r: r["loss"])["w"]
    return rows, best


def write_sweep_csv(rows, path):
    write_rows_csv(rows, path, ["w", "loss"])
