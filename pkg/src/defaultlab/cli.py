"""Command-line pipeline: synth, train, evaluate, explain, value, run.

Each command reads the same YAML config and writes into the output
directory, along with a manifest recording the config hash, seed, package
versions and a checksum of every file it wrote.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
from dataclasses import asdict, replace

import numpy as np
import scipy

from . import __version__, economics, ensemble, interpret, metrics, nn, synth, trees
from .config import RunConfig, load_config
from .data import (
    apply_scaling, compute_scaling, compute_transition_matrix, emit_csv, ingest_csv,
    make_split, quarter_label, read_schema, write_json, ScalingParams,
)
from .errors import ConfigError, DataError, MissingModelError, ModelError
from .seeding import derive_rng

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_MODEL = 0, 2, 3, 4
MODEL_DIR = "models"


class _Run:
    """Shared state for one command invocation."""

    def __init__(self, cfg: RunConfig, command):
        self.cfg = cfg
        self.command = command
        self.out = cfg.output_dir
        self.written = []
        os.makedirs(self.out, exist_ok=True)

    def path(self, *parts):
        p = os.path.join(self.out, *parts)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        self.written.append(os.path.join(*parts))
        return p

    def json(self, payload, *parts):
        write_json(self.path(*parts), payload)

    def manifest(self):
        files = {}
        for rel in sorted(set(self.written)):
            with open(os.path.join(self.out, rel), "rb") as fh:
                files[rel] = hashlib.sha256(fh.read()).hexdigest()
        write_json(os.path.join(self.out, f"manifest_{self.command}.json"), {
            "command": self.command,
            "config_sha256": self.cfg.digest(),
            "seed": self.cfg.seed,
            "versions": {
                "defaultlab": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "python": platform.python_version(),
            },
            "outputs": files,
        })


# -- data ----------------------------------------------------------------------

def load_table(cfg: RunConfig):
    if cfg.synthetic is not None:
        return synth.synthesize_panel(cfg.synthetic)
    if not os.path.exists(cfg.csv.path):
        raise DataError(f"data file not found: {cfg.csv.path}")
    return ingest_csv(cfg.csv.path, read_schema(cfg.csv.schema))


def split_tables(cfg: RunConfig, table):
    return make_split(table, cfg.split)


def _window_label(quarters):
    qs = sorted(set(int(q) for q in quarters))
    if not qs:
        return ""
    if len(qs) == 1:
        return quarter_label(qs[0])
    return f"{quarter_label(qs[0])}-{quarter_label(qs[-1])}"


# -- models --------------------------------------------------------------------

def _write_history(run, rows, name):
    metrics.write_rows_csv(rows, run.path(MODEL_DIR, f"history_{name}.csv"))


def _fit_network(run, name, spec, train, val, logistic=False):
    arch, tcfg = spec.resolve(run.cfg.seed, logistic=logistic)
    model = nn.init_network(arch, train.n_features, seed=run.cfg.seed)
    model, hist = nn.train(model, train, val, tcfg)
    _write_history(run, hist, name)
    write_json(run.path(MODEL_DIR, f"{name}.json"), model.to_dict())


def _fit_tree(run, name, train, val):
    spec = run.cfg.model
    if name == "gbt":
        model, hist = trees.fit_gbt(train, val, spec.gbt.resolve(run.cfg.seed))
        _write_history(run, hist, name)
    elif name == "cart":
        model = trees.fit_cart(train, spec.cart.max_depth, spec.cart.min_leaf)
    else:
        f = spec.forest
        model = trees.fit_random_forest(train, f.n_trees, f.max_depth, run.cfg.seed, f.min_leaf,
                                        max_bins=f.max_bins)
    write_json(run.path(MODEL_DIR, f"{name}.json"), model.to_dict())


def components(kind):
    return ("dnn", "gbt") if kind == "hybrid" else (kind,)


def _read_json(path):
    if not os.path.exists(path):
        raise MissingModelError(f"model file not found: {path} (run 'train' first)")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def load_component(out, name):
    doc = _read_json(os.path.join(out, MODEL_DIR, f"{name}.json"))
    if name in ("dnn", "logistic"):
        return nn.NetworkModel.from_dict(doc)
    return trees.TreeEnsembleModel.from_dict(doc)


def load_model(out):
    """Returns ``(kind, predictor_object, scaling)`` from a trained output directory."""
    index = _read_json(os.path.join(out, MODEL_DIR, "index.json"))
    scaling = ScalingParams.from_dict(_read_json(os.path.join(out, MODEL_DIR, "scaling.json")))
    kind = index["kind"]
    if kind == "hybrid":
        model = ensemble.HybridModel(load_component(out, "dnn"), load_component(out, "gbt"),
                                     index["weight_dnn"])
    else:
        model = load_component(out, kind)
    return kind, model, scaling


def _prepared(cfg):
    table = load_table(cfg)
    train, val, test = split_tables(cfg, table)
    scaling = compute_scaling(train)
    return table, train, val, test, scaling


def cmd_synth(run: _Run):
    cfg = run.cfg
    if cfg.synthetic is None:
        raise ConfigError("synth needs data.synthetic", "data")
    table, mech = synth.synthesize(cfg.synthetic)
    emit_csv(table, run.path("panel.csv"))
    run.json(table.schema.to_dict(), "schema.json")
    run.json({
        "generator": cfg.synthetic.to_dict(),
        "mechanism": asdict(mech),
        "rows": len(table),
        "default_rate": float(table.labels.mean()),
    }, "generator.json")


def cmd_train(run: _Run):
    cfg = run.cfg
    _, train, val, _, scaling = _prepared(cfg)
    strain, sval = apply_scaling(train, scaling), apply_scaling(val, scaling)
    run.json(scaling.to_dict(), MODEL_DIR, "scaling.json")
    kind = cfg.model.kind
    for name in components(kind):
        if name == "dnn":
            _fit_network(run, "dnn", cfg.model.dnn, strain, sval)
        elif name == "logistic":
            _fit_network(run, "logistic", cfg.model.logistic, strain, sval, logistic=True)
        else:
            _fit_tree(run, name, strain, sval)
    if kind != "logistic":
        _fit_network(run, "logistic", cfg.model.logistic, strain, sval, logistic=True)
    run.json({
        "kind": kind,
        "components": list(components(kind)),
        "weight_dnn": cfg.model.weight_dnn,
        "train_window": _window_label(train.quarter),
        "n_train": len(train),
        "n_validation": len(val),
    }, MODEL_DIR, "index.json")


def _test_predictions(cfg, out):
    kind, model, scaling = load_model(out)
    table, train, _, test, _ = _prepared(cfg)
    stest = apply_scaling(test, scaling)
    f = interpret.as_predictor(model)
    preds = metrics.PredictionSet.from_table(f(stest.rows), test)
    return kind, model, scaling, table, train, test, stest, preds


def cmd_evaluate(run: _Run):
    cfg = run.cfg
    ev = cfg.evaluate
    kind, model, scaling, table, train, test, stest, preds = _test_predictions(cfg, run.out)
    tw = _window_label(train.quarter)
    runs = [(tw, _window_label(test.quarter), preds)]
    if ev.per_quarter and len(np.unique(test.quarter)) > 1:
        for q in np.unique(test.quarter):
            runs.append((tw, quarter_label(int(q)), preds.take(preds.quarter == q)))
    rows = metrics.metrics_over_windows(runs, ev.threshold)
    cols = list(metrics.WINDOW_COLUMNS)
    metrics.write_rows_csv(rows, run.path("metrics_windows.csv"), cols)
    metrics.write_rows_json(rows, run.path("metrics_windows.json"))
    mf_cols = ["train_window", "test_window", "n", "default_rate", "predicted_default_rate",
               "mean_forecast_defaulters", "mean_forecast_nondefaulters"]
    metrics.write_rows_csv(rows, run.path("mean_forecast.csv"), mf_cols)
    if ev.current_only:
        cur = metrics.metrics_over_windows(runs, ev.threshold, current_only=True)
        metrics.write_rows_csv(cur, run.path("metrics_current_only.csv"), cols)
    metrics.roc_curve(preds).write_csv(run.path("roc.csv"))
    bins = metrics.bin_by_quantile(preds, min(ev.calibration_bins, len(preds)))
    metrics.write_rows_csv([asdict(b) for b in bins], run.path("calibration.csv"),
                           ["key", "count", "positives", "mean_prediction", "realized_rate"])
    summary = {
        "kind": kind,
        "auc": metrics.auc_rank(preds),
        "gini": metrics.gini(preds),
        "brier": metrics.brier(preds),
        "loss": metrics.log_loss(preds),
        "calibration_rank_correlation": metrics.rank_correlation(bins) if len(bins) > 1 else None,
    }
    if "credit_score" in test.extra:
        scores = test.extra["credit_score"]
        summary["credit_score_gini"] = metrics.gini(preds.with_probabilities(
            1.0 - (scores - scores.min()) / max(np.ptp(scores), 1.0)))
        groups = metrics.group_by_score(scores, test.labels)
        summary["credit_score_rank_correlation"] = metrics.rank_correlation(groups, negate=True)
        ct = metrics.band_crosstab(preds, scores)
        metrics.write_rows_csv(ct.rows(), run.path("band_crosstab.csv"))
    g_q = metrics.gini_by_period(preds)
    g_y = metrics.gini_by_period(preds, lambda q: quarter_label(q)[:4])
    gini_rows = [{"period": quarter_label(k), "gini": v} for k, v in g_q.items()]
    gini_rows += [{"period": k, "gini": v} for k, v in g_y.items()]
    metrics.write_rows_csv(gini_rows, run.path("gini_by_period.csv"), ["period", "gini"])
    run.json(compute_transition_matrix(table).to_dict(), "transition_matrix.json")
    if kind == "hybrid":
        p_dnn, p_gbt = model.components(stest.rows)
        sweep, best = ensemble.weight_sweep(p_dnn, p_gbt, test.labels, ev.sweep_grid)
        ensemble.write_sweep_csv(sweep, run.path("weight_sweep.csv"))
        summary["best_weight_dnn"] = best
    run.json(summary, "summary.json")


def cmd_explain(run: _Run):
    cfg = run.cfg
    it = cfg.interpret
    kind, model, scaling, table, train, test, stest, preds = _test_predictions(cfg, run.out)
    names = list(test.schema.names)
    rep = interpret.permutation_importance(
        model, stest, it.n_repeats, it.sample_size, cfg.seed, cfg.evaluate.threshold
    )
    rep.write_csv(run.path("importance.csv"))
    strain = apply_scaling(train, scaling)
    grouping = interpret.group_features(strain, it.group_threshold)
    grouping.write_json(run.path("feature_groups.json"))
    pick = np.sort(derive_rng(cfg.seed, "explain-instances").choice(
        len(stest), min(it.n_instances, len(stest)), replace=False))
    inst = stest.rows[pick]
    ids = [f"{int(b)}@{quarter_label(int(q))}" for b, q in zip(stest.borrower_id[pick], stest.quarter[pick])]
    kw = dict(background_size=it.background_size, n_permutations=it.n_permutations,
              seed=cfg.seed, instance_ids=ids)
    if kind == "hybrid":
        e_dnn = interpret.shapley_sampled(model.dnn, inst, strain, **kw)
        e_gbt = interpret.shapley_sampled(model.gbt, inst, strain, **kw)
        expl = interpret.hybrid_shap(e_dnn, e_gbt, model.weight_dnn)
    else:
        expl = interpret.shapley_sampled(model, inst, strain, **kw)
    expl.write_csv(run.path("shap_values.csv"))
    interpret.write_aggregate_csv(interpret.aggregate_shap(expl, None, "mean_abs"),
                                  run.path("shap_ranked.csv"))
    interpret.write_aggregate_csv(interpret.aggregate_shap(expl, grouping, "mean_abs"),
                                  run.path("shap_groups.csv"))
    if test.schema.groups:
        cats = interpret.grouping_from_categories(names, list(test.schema.groups))
        interpret.write_aggregate_csv(
            interpret.aggregate_shap(expl, cats, "mean_abs", within="abs", normalize=True),
            run.path("shap_categories.csv"),
        )


def cmd_value(run: _Run):
    cfg = run.cfg
    ec = cfg.economics
    thr = cfg.evaluate.threshold
    kind, model, scaling, table, train, test, stest, preds = _test_predictions(cfg, run.out)
    cm = metrics.confusion_at_threshold(preds, thr)
    surface = economics.value_added_surface(cm, ec.r_grid, ec.runup_grid, ec.n_periods)
    economics.write_surface_csv(ec.r_grid, ec.runup_grid, surface, run.path("va_surface.csv"))
    params = ec.params(thr)
    va_rows = [{"model": kind, "value_added": economics.value_added(cm, params)}]
    if kind != "logistic":
        logit_model = load_component(run.out, "logistic")
        lp = preds.with_probabilities(nn.predict(logit_model, stest.rows))
        cm_l = metrics.confusion_at_threshold(lp, thr)
        va_rows.append({"model": "logistic", "value_added": economics.value_added(cm_l, params)})
        va_rows.append({"model": f"{kind}-minus-logistic",
                        "value_added": economics.comparative_value(cm, cm_l, params)})
    metrics.write_rows_csv(va_rows, run.path("value_added.csv"), ["model", "value_added"])
    f = interpret.as_predictor(model)
    stable = apply_scaling(table, scaling)
    all_preds = metrics.PredictionSet.from_table(f(stable.rows), table)
    economics.aggregate_default_rate(all_preds).write_csv(run.path("aggregate_risk.csv"))
    if "credit_score" in test.extra:
        spec = ec.savings(cfg.seed)
        if spec.balance_column in test.schema.names or spec.balance_column in test.extra:
            economics.borrower_savings(test, preds, spec).write_csv(run.path("borrower_savings.csv"))


COMMANDS = {
    "synth": [cmd_synth],
    "train": [cmd_train],
    "evaluate": [cmd_evaluate],
    "explain": [cmd_explain],
    "value": [cmd_value],
    "run": [cmd_train, cmd_evaluate, cmd_explain, cmd_value],
}


def build_parser():
    p = argparse.ArgumentParser(prog="defaultlab", description="Consumer default prediction pipeline.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="YAML run configuration")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--seed", type=int, help="global seed (overrides seed)")
    p.add_argument("--model", choices=("dnn", "gbt", "cart", "forest", "logistic", "hybrid"),
                   help="model kind (overrides model.kind)")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed, args.out)
        if args.model is not None:
            cfg = replace(cfg, model=replace(cfg.model, kind=args.model),
                          source_text=cfg.source_text + f"|model={args.model}")
        if args.command == "run" and cfg.synthetic is not None:
            steps = [cmd_synth] + COMMANDS["run"]
        else:
            steps = COMMANDS[args.command]
        for step in steps:
            run = _Run(cfg, step.__name__[4:])
            step(run)
            run.manifest()
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ModelError as e:
        print(f"model error: {e}", file=sys.stderr)
        return EXIT_MODEL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
