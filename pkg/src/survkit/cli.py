"""Config-driven pipelines: survkit <task> --config cfg.json --out results/

Every task reads one JSON config, writes its artifacts atomically into the
output directory and finishes with ``run.json``: the effective config (with
absolute paths and the seed actually used) plus SHA-256 digests of every
artifact.  Passing that ``run.json`` back as ``--config`` repeats the run.
"""

import argparse
import csv
import io
import json
import logging
import math
import os
import sys

import numpy as np

from . import __version__
from .coxph import CounterfactualPair
from .data import PreprocessorState, Schema, fit_preprocessor, load_csv, transform
from .metrics import (InestimableError, auc_td, brier_ipcw, concordance_td, integrated_brier,
                      phenotype_purity)
from .nonparam import StepCurve, kaplan_meier, write_curves_csv
from .phenotyping import (clustering_phenotype, intersectional_phenotype, phenotype_effect_report,
                          supervised_phenotype, virtual_twins)
from .serialize import atomic_write_text, dumps, sha256_file, write_json
from .shiftcv import (MODELS, censoring_gap, counterfactual_cv, default_horizons, fit_model,
                      importance_weights, model_from_dict, survival_regression_cv,
                      weighted_resample)
from .simulate import SimSpec, csv_text, generate
from .treatment import METRICS, iptw_weights, propensity_scores, treatment_effect

TASKS = ("fit", "evaluate", "phenotype", "effect", "cv", "shift", "simulate")
FIT_MODELS = MODELS + ("cmhe",)
PHENOTYPERS = ("intersectional", "clustering", "supervised", "virtual_twins")
CENSORING_GAP_WARNING = 0.10

log = logging.getLogger("survkit")


class ConfigError(ValueError):
    def __init__(self, errors):
        super().__init__("; ".join(errors))
        self.errors = list(errors)


# ---------------------------------------------------------------------------
# validation

def _csv_header(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return [h.strip() for h in next(csv.reader(fh), [])]


def _is_number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _check_data(block, where, errors, need_treatment=False, inherit=None):
    if not isinstance(block, dict):
        errors.append(f"{where}: must be an object with 'path' and 'schema'")
        return
    path = block.get("path")
    if not isinstance(path, str):
        errors.append(f"{where}.path: required string")
        return
    if not os.path.isfile(path):
        errors.append(f"{where}.path: file not found: {path}")
        return
    schema = block.get("schema", inherit)
    if not isinstance(schema, dict):
        errors.append(f"{where}.schema: required object")
        return
    for key in ("time", "event"):
        if not isinstance(schema.get(key), str):
            errors.append(f"{where}.schema.{key}: required column name")
    if need_treatment and not isinstance(schema.get("treatment"), str):
        errors.append(f"{where}.schema.treatment: this task needs a treatment column")
    header = _csv_header(path)
    named = [schema.get(k) for k in ("time", "event", "treatment")]
    for key in ("numeric", "categorical", "exclude"):
        cols = schema.get(key, [])
        if not isinstance(cols, list) or not all(isinstance(c, str) for c in cols):
            errors.append(f"{where}.schema.{key}: must be a list of column names")
        else:
            named += cols
    for col in named:
        if isinstance(col, str) and col not in header:
            errors.append(f"{where}.schema: column {col!r} not in {path}")


def _check_model(block, where, errors, names, grid=False):
    if not isinstance(block, dict) or block.get("name") not in names:
        got = block.get("name") if isinstance(block, dict) else block
        errors.append(f"{where}.name: must be one of {list(names)}, got {got!r}")
        return
    key = "grid" if grid else "params"
    value = block.get(key, {})
    if not isinstance(value, dict):
        errors.append(f"{where}.{key}: must be an object")
    elif grid and not all(isinstance(v, list) and v for v in value.values()):
        errors.append(f"{where}.grid: every entry must be a non-empty list")


def _check_horizons(value, where, errors, required=False):
    if value is None:
        if required:
            errors.append(f"{where}: required list of positive times")
        return
    if (not isinstance(value, list) or not value
            or not all(_is_number(h) and h > 0 for h in value)):
        errors.append(f"{where}: must be a non-empty list of positive numbers")
    elif any(b <= a for a, b in zip(value, value[1:])):
        errors.append(f"{where}: must be strictly increasing")


def validate_config(cfg, task):
    """Every problem with ``cfg`` for ``task``, as ``field: message`` strings."""
    errors = []
    if not isinstance(cfg, dict):
        return ["config: must be a JSON object"]
    if cfg.get("task", task) != task:
        errors.append(f"task: config is for {cfg.get('task')!r}, invoked as {task!r}")
    seed = cfg.get("seed")
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2 ** 64:
        errors.append("seed: required non-negative integer")
    n_jobs = cfg.get("n_jobs", 1)
    if not isinstance(n_jobs, int) or isinstance(n_jobs, bool) or n_jobs == 0:
        errors.append("n_jobs: must be a non-zero integer")

    if task == "simulate":
        spec = cfg.get("simulate")
        if not isinstance(spec, dict):
            errors.append("simulate: required object of scenario settings")
        else:
            try:
                SimSpec(**{**spec, "seed": 0})
            except (TypeError, ValueError) as exc:
                errors.append(f"simulate: {exc}")
        return errors

    need_treatment = task == "effect" or (
        task == "phenotype" and isinstance(cfg.get("phenotyper"), dict)
        and cfg["phenotyper"].get("method") == "virtual_twins")
    need_treatment = need_treatment or (task == "cv" and bool(cfg.get("cv", {}).get("counterfactual")))
    _check_data(cfg.get("data"), "data", errors, need_treatment)
    inherit = cfg.get("data", {}).get("schema") if isinstance(cfg.get("data"), dict) else None

    if task == "fit":
        _check_model(cfg.get("model"), "model", errors, FIT_MODELS)
    elif task == "evaluate":
        if "model_path" in cfg:
            if not isinstance(cfg["model_path"], str) or not os.path.isfile(cfg["model_path"]):
                errors.append("model_path: file not found")
        else:
            _check_model(cfg.get("model"), "model", errors, FIT_MODELS)
        if "test_data" in cfg:
            _check_data(cfg["test_data"], "test_data", errors, inherit=inherit)
        _check_horizons(cfg.get("horizons"), "horizons", errors, required=True)
    elif task == "cv":
        _check_model(cfg.get("model"), "model", errors, MODELS, grid=True)
        cv = cfg.get("cv", {})
        if not isinstance(cv, dict):
            errors.append("cv: must be an object")
        else:
            folds = cv.get("folds", 5)
            if not isinstance(folds, int) or folds < 2:
                errors.append("cv.folds: integer >= 2")
            _check_horizons(cv.get("horizons"), "cv.horizons", errors)
    elif task == "shift":
        _check_model(cfg.get("model"), "model", errors, FIT_MODELS)
        _check_data(cfg.get("target"), "target", errors, inherit=inherit)
        sh = cfg.get("shift", {})
        gamma = sh.get("gamma", 1.0)
        if not _is_number(gamma) or not 0 < gamma <= 1:
            errors.append("shift.gamma: must lie in (0, 1]")
        factor = sh.get("resample_factor")
        if factor is not None and (not _is_number(factor) or factor <= 0):
            errors.append("shift.resample_factor: positive number or null")
        if factor is None and cfg.get("model", {}).get("name") == "rsf":
            errors.append("shift.resample_factor: the survival forest needs resampling, not weights")
        _check_horizons(sh.get("horizons"), "shift.horizons", errors)
    elif task == "effect":
        eff = cfg.get("effect")
        if not isinstance(eff, dict):
            errors.append("effect: required object")
        else:
            metric = eff.get("metric")
            if metric not in METRICS:
                errors.append(f"effect.metric: must be one of {list(METRICS)}")
            if metric in ("restricted_mean", "risk_at_time") and not _is_number(eff.get("horizon")):
                errors.append(f"effect.horizon: required for {metric}")
            if metric == "time_at_risk" and not _is_number(eff.get("level")):
                errors.append("effect.level: required for time_at_risk")
            nb = eff.get("n_bootstrap", 500)
            if not isinstance(nb, int) or nb < 1:
                errors.append("effect.n_bootstrap: positive integer")
            prop = eff.get("propensity", "logistic")
            if prop not in ("logistic", "none") and not (
                    isinstance(prop, dict) and isinstance(prop.get("column"), str)):
                errors.append("effect.propensity: 'logistic', 'none' or {\"column\": name}")
    elif task == "phenotype":
        ph = cfg.get("phenotyper")
        if not isinstance(ph, dict) or ph.get("method") not in PHENOTYPERS:
            errors.append(f"phenotyper.method: must be one of {list(PHENOTYPERS)}")
        elif ph["method"] == "supervised":
            _check_model(ph.get("model"), "phenotyper.model", errors, ("dsm", "dcm"))
        elif ph["method"] == "virtual_twins" and not _is_number(ph.get("horizon")):
            errors.append("phenotyper.horizon: required for virtual_twins")
        elif ph["method"] == "intersectional" and not (ph.get("cat_vars") or ph.get("num_vars")):
            errors.append("phenotyper: intersectional needs cat_vars or num_vars")
        purity = cfg.get("purity")
        if purity is not None:
            _check_horizons(purity.get("horizons"), "purity.horizons", errors, required=True)
            if purity.get("strategy", "integrated") not in ("instantaneous", "integrated"):
                errors.append("purity.strategy: 'instantaneous' or 'integrated'")
    return errors


# ---------------------------------------------------------------------------
# config loading

def _absolute(cfg, base):
    """Resolve relative ``path`` entries against the config file's directory."""
    if isinstance(cfg, dict):
        out = {}
        for k, v in cfg.items():
            if k in ("path", "model_path") and isinstance(v, str) and not os.path.isabs(v):
                v = os.path.normpath(os.path.join(base, v))
            out[k] = _absolute(v, base)
        return out
    if isinstance(cfg, list):
        return [_absolute(v, base) for v in cfg]
    return cfg


def load_config(path, task, seed=None):
    with open(path, encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"config: not valid JSON ({exc})"]) from None
    if isinstance(cfg, dict) and "artifacts" in cfg and isinstance(cfg.get("config"), dict):
        cfg = cfg["config"]  # replaying a run.json
    cfg = _absolute(cfg, os.path.dirname(os.path.abspath(path)))
    if isinstance(cfg, dict):
        cfg["task"] = cfg.get("task", task)
        if seed is not None:
            cfg["seed"] = seed
    errors = validate_config(cfg, task)
    if errors:
        raise ConfigError(errors)
    return cfg


# ---------------------------------------------------------------------------
# data helpers

def load_table(block, inherit=None):
    """Load a CSV; without numeric/categorical lists every other column is a feature."""
    schema = dict(block.get("schema") or inherit)
    table = load_csv(block["path"], Schema.from_dict(schema))
    if not schema.get("numeric") and not schema.get("categorical"):
        skip = {schema.get("time"), schema.get("event"), schema.get("treatment")}
        skip |= set(schema.get("exclude", []))
        cols = [c for c in table.column_names if c not in skip]
        schema["numeric"] = [c for c in cols if table[c].kind == "numeric"]
        schema["categorical"] = [c for c in cols if table[c].kind == "categorical"]
    return table, schema


def prepare(block, state=None, inherit=None):
    """``(table, preprocessor, dataset)``; the preprocessor is fitted unless given."""
    table, schema = load_table(block, inherit)
    if state is None:
        state = fit_preprocessor(table, schema["numeric"], schema["categorical"])
    missing = [c for c in state.numeric + state.categorical if c not in table.column_names]
    if missing:
        raise ValueError(f"{block['path']}: feature column(s) {missing} are missing")
    return table, state, transform(state, table)


def predict_survival(model, dataset, times):
    if getattr(model, "kind", None) == "cmhe":
        return model.predict_survival(dataset.features, times, treatment=dataset.treatment)
    return model.predict_survival(dataset.features, times)


def mean_curve(model, dataset, times):
    times = np.unique(np.asarray(times, dtype=float))
    return StepCurve(times, predict_survival(model, dataset, times).mean(axis=0), 1.0)


def event_grid(dataset):
    return np.unique(dataset.times[dataset.events == 1])


def _model_record(state, model):
    return {"preprocessor": state.to_dict(), "model": model.to_dict()}


# ---------------------------------------------------------------------------
# tasks; each returns {artifact name: text}

def _json(obj):
    return dumps(obj)


def _curves(curves):
    return write_curves_csv(io.StringIO(), curves)


def task_simulate(cfg):
    spec = SimSpec(**{**cfg["simulate"], "seed": cfg["seed"]})
    ds, truth = generate(spec)
    sink = {"data.csv": csv_text(ds)}
    sink["truth.json"] = _json({
        "spec": spec.to_dict(),
        "censoring_rate": truth.censoring_rate, "realized_censoring": truth.realized_censoring,
        "groups": None if truth.groups is None else truth.groups.tolist(),
        "propensity": None if truth.propensity is None else truth.propensity.tolist()})
    sink["curves.csv"] = _curves({"km": kaplan_meier(ds.times, ds.events)})
    return sink


def task_fit(cfg):
    _, state, ds = prepare(cfg["data"])
    spec = cfg["model"]
    model = fit_model(spec["name"], ds, spec.get("params"), cfg["seed"])
    return {"model.json": _json(_model_record(state, model)),
            "curves.csv": _curves({"km": kaplan_meier(ds.times, ds.events),
                                   "model_mean": mean_curve(model, ds, event_grid(ds))})}


def _safe(fn, *args):
    try:
        return float(fn(*args)), None
    except (InestimableError, ValueError) as exc:
        return None, str(exc)


def task_evaluate(cfg):
    if "model_path" in cfg:
        with open(cfg["model_path"], encoding="utf-8") as fh:
            record = json.load(fh)
        state = PreprocessorState.from_dict(record["preprocessor"])
        model = model_from_dict(record["model"])
        _, _, train = prepare(cfg["data"], state)
    else:
        _, state, train = prepare(cfg["data"])
        spec = cfg["model"]
        model = fit_model(spec["name"], train, spec.get("params"), cfg["seed"])
    inherit = cfg["data"].get("schema")
    test = prepare(cfg["test_data"], state, inherit)[2] if "test_data" in cfg else train
    horizons = np.asarray(cfg["horizons"], dtype=float)
    S = predict_survival(model, test, horizons)
    records = []
    for j, h in enumerate(horizons):
        for name, fn, arg in (("brier", brier_ipcw, S[:, j]), ("auc", auc_td, 1.0 - S[:, j]),
                              ("concordance", concordance_td, 1.0 - S[:, j])):
            value, err = _safe(fn, train, test, arg, float(h))
            rec = {"metric": name, "horizon": float(h), "value": value}
            if err:
                rec["error"] = err
            records.append(rec)
    out = {"task": "evaluate", "model": record["model"]["model"] if "model_path" in cfg
           else cfg["model"]["name"], "n_test": test.n, "records": records}
    if horizons.size > 1:
        out["integrated_brier"], err = _safe(integrated_brier, train, test, S, horizons)
        if err:
            out["integrated_brier_error"] = err
    return {"metrics.json": _json(out),
            "curves.csv": _curves({"km": kaplan_meier(test.times, test.events),
                                   "model_mean": mean_curve(model, test, event_grid(train))})}


def task_phenotype(cfg):
    table, state, ds = prepare(cfg["data"])
    ph = dict(cfg["phenotyper"])
    method, seed = ph.pop("method"), cfg["seed"]
    if method == "intersectional":
        assignment = intersectional_phenotype(table, ph.get("cat_vars", ()), ph.get("num_vars", ()),
                                              ph.get("quantiles", (0.0, 0.5, 1.0)))
    elif method == "clustering":
        assignment = clustering_phenotype(ds.features, seed=seed, **ph)
    elif method == "supervised":
        spec = ph["model"]
        model = fit_model(spec["name"], ds, spec.get("params"), seed)
        assignment = supervised_phenotype(model, ds.features)
    else:
        assignment = virtual_twins(ds, ph.pop("horizon"), seed=seed, n_jobs=cfg.get("n_jobs", 1),
                                   **ph)
    groups = assignment.groups_record()
    labels = assignment.labels
    purity = cfg.get("purity")
    if purity is not None:
        hs = purity["horizons"]
        values = phenotype_purity(assignment.probabilities, ds, hs,
                                  purity.get("strategy", "integrated"))
        groups["purity"] = {"strategy": purity.get("strategy", "integrated"),
                            "horizons": hs, "values": values.tolist()}
    if "report" in cfg:
        rep = dict(cfg["report"])
        groups["report"] = phenotype_effect_report(assignment, ds, seed=seed, **rep)
    curves = {f"group{k}": kaplan_meier(ds.times[labels == k], ds.events[labels == k])
              for k in range(assignment.K) if np.any(labels == k)}
    return {"phenotypes.csv": assignment.to_csv(), "groups.json": _json(groups),
            "curves.csv": _curves(curves)}


def task_effect(cfg):
    table, state, ds = prepare(cfg["data"])
    eff = cfg["effect"]
    opts = dict(metric=eff["metric"], horizon=eff.get("horizon"), level=eff.get("level"),
                n_bootstrap=eff.get("n_bootstrap", 500), seed=cfg["seed"],
                clip=tuple(eff.get("clip", (0.01, 0.99))), n_jobs=cfg.get("n_jobs", 1))
    outcomes = (ds.times, ds.events)
    out = {"task": "effect", "unadjusted": treatment_effect(outcomes=outcomes, treatment=ds.treatment,
                                                            **opts).to_dict()}
    curves = {f"arm{a}": kaplan_meier(ds.times[ds.treatment == a], ds.events[ds.treatment == a])
              for a in (1, 0)}
    prop = eff.get("propensity", "logistic")
    if prop != "none":
        if prop == "logistic":
            e = propensity_scores(ds.features, ds.treatment, l2=eff.get("propensity_l2", 1.0))
        else:
            e = table[prop["column"]].values.astype(float)
        out["adjusted"] = treatment_effect(outcomes=outcomes, treatment=ds.treatment,
                                           propensity=e, **opts).to_dict()
        w = iptw_weights(ds.treatment, e, opts["clip"])
        for a in (1, 0):
            sel = ds.treatment == a
            curves[f"arm{a}_iptw"] = kaplan_meier(ds.times[sel], ds.events[sel], w[sel])
    return {"metrics.json": _json(out), "curves.csv": _curves(curves)}


def task_cv(cfg):
    _, state, ds = prepare(cfg["data"])
    cv = cfg.get("cv", {})
    spec = cfg["model"]
    args = (spec["name"], spec.get("grid", {}), ds, cv.get("folds", 5), cv.get("horizons"),
            cfg["seed"], cfg.get("n_jobs", 1))
    if cv.get("counterfactual"):
        rep_t, rep_c, pair = counterfactual_cv(*args)
        metrics = {"task": "cv", "treated": rep_t.to_dict(False), "control": rep_c.to_dict(False)}
        model = pair
    else:
        report = survival_regression_cv(*args)
        metrics = {"task": "cv", **report.to_dict(False)}
        model = report.final_model
    out = {"metrics.json": _json(metrics), "model.json": _json(_model_record(state, model))}
    if not isinstance(model, CounterfactualPair):
        out["curves.csv"] = _curves({"km": kaplan_meier(ds.times, ds.events),
                                     "model_mean": mean_curve(model, ds, event_grid(ds))})
    return out


def task_shift(cfg):
    _, state, src = prepare(cfg["data"])
    _, _, tgt = prepare(cfg["target"], state, cfg["data"].get("schema"))
    sh = cfg.get("shift", {})
    spec = cfg["model"]
    seed = cfg["seed"]
    warnings = []
    gap = censoring_gap(src, tgt)
    if gap > CENSORING_GAP_WARNING:
        msg = (f"censoring rates differ by {100 * gap:.1f} percentage points between source and "
               "target; importance weights only correct covariate shift")
        log.warning(msg)
        warnings.append(msg)
    clip = tuple(sh.get("clip", (0.01, 0.99)))
    w = importance_weights(src.features, tgt.features, sh.get("l2", 1.0), sh.get("gamma", 1.0), clip)
    base = fit_model(spec["name"], src, spec.get("params"), seed)
    factor = sh.get("resample_factor")
    if factor is None:
        adjusted = fit_model(spec["name"], src, spec.get("params"), seed, weights=w)
    else:
        adjusted = fit_model(spec["name"], weighted_resample(src, w, factor, seed),
                             spec.get("params"), seed)
    horizons = (default_horizons(tgt) if sh.get("horizons") is None
                else np.asarray(sh["horizons"], dtype=float))
    scores = {}
    for name, model in (("unweighted", base), ("weighted", adjusted)):
        scores[name], err = _safe(integrated_brier, tgt, tgt, predict_survival(model, tgt, horizons),
                                  horizons)
        if err:
            scores[f"{name}_error"] = err
    metrics = {"task": "shift", "model": spec["name"], "gamma": sh.get("gamma", 1.0),
               "horizons": horizons.tolist(), "integrated_brier": scores,
               "censoring_gap": gap, "weights": {"min": float(w.min()), "max": float(w.max()),
                                                 "mean": float(w.mean())},
               "warnings": warnings}
    return {"metrics.json": _json(metrics), "model.json": _json(_model_record(state, adjusted)),
            "curves.csv": _curves({"km_source": kaplan_meier(src.times, src.events),
                                   "km_source_weighted": kaplan_meier(src.times, src.events, w),
                                   "km_target": kaplan_meier(tgt.times, tgt.events)})}


TASK_FUNCTIONS = {"fit": task_fit, "evaluate": task_evaluate, "phenotype": task_phenotype,
                  "effect": task_effect, "cv": task_cv, "shift": task_shift,
                  "simulate": task_simulate}


def run(task, cfg, out_dir):
    """Execute one validated task and write its artifacts plus ``run.json``."""
    artifacts = TASK_FUNCTIONS[task](cfg)
    os.makedirs(out_dir, exist_ok=True)
    digests = {}
    for name in sorted(artifacts):
        path = os.path.join(out_dir, name)
        atomic_write_text(path, artifacts[name])
        digests[name] = sha256_file(path)
    write_json(os.path.join(out_dir, "run.json"),
               {"version": __version__, "task": task, "seed": cfg["seed"], "config": cfg,
                "artifacts": digests})
    return digests


# ---------------------------------------------------------------------------
# entry point

def build_parser():
    parser = argparse.ArgumentParser(prog="survkit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="task", metavar="task", required=True)
    for task in TASKS:
        p = sub.add_parser(task, help=f"run the {task} pipeline")
        p.add_argument("--config", required=True, help="JSON config (or a previous run.json)")
        p.add_argument("--out", help="output directory (required unless --check-config)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--verbose", action="store_true", help="log progress to stderr")
        p.add_argument("--check-config", action="store_true",
                       help="validate the config and exit")
    return parser


def _fail(kind, messages, code):
    record = {"status": "error", "error": kind, "messages": messages}
    sys.stderr.write(json.dumps(record) + "\n")
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="survkit: %(levelname)s: %(message)s", stream=sys.stderr)
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        return _fail("ConfigError", ["--seed: must be an unsigned 64-bit integer"], 2)
    try:
        cfg = load_config(args.config, args.task, args.seed)
    except ConfigError as exc:
        return _fail("ConfigError", exc.errors, 2)
    except OSError as exc:
        return _fail(type(exc).__name__, [str(exc)], 2)
    if args.check_config:
        sys.stdout.write(json.dumps({"status": "ok", "task": args.task}) + "\n")
        return 0
    if not args.out:
        return _fail("ConfigError", ["--out: required"], 2)
    log.info("running %s with seed %d", args.task, cfg["seed"])
    try:
        digests = run(args.task, cfg, args.out)
    except (ValueError, OSError, RuntimeError, KeyError, TypeError) as exc:
        return _fail(type(exc).__name__, [str(exc)], 1)
    log.info("wrote %s", ", ".join(sorted(digests)))
    return 0


if __name__ == "__main__":
    sys.exit(main())
