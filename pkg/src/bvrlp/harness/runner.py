"""Experiment orchestration, tuning selection and result files."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
import csv
import json
import logging
import math
import os
import platform
from pathlib import Path

import numpy as np

from .. import __version__
from .._jit import BACKEND, NUMBA_AVAILABLE
from ..diagnostics import scan_history_for_sosp
from ..optimizers import ALGORITHMS, RunAborted
from ..problems import build_problem

log = logging.getLogger(__name__)

CRITERIA = ("train_grad_norm", "train_loss", "train_accuracy",
            "test_grad_norm", "test_loss", "test_accuracy")
LEDGER_COLS = ("budget_units", "raw_grad_evals", "comm_events", "comm_rounds")
ID_COLS = ("algorithm", "eta", "r", "trial", "restart", "seed", "round", "s", "t")


@dataclass(frozen=True)
class RunSpec:
    algorithm: str
    eta: float
    r: float
    trial: int
    restart: int = 0


@dataclass
class RunResult:
    spec: RunSpec
    seed: int
    trace: object
    status: str
    error: str = ""


def metric_columns(problem):
    return CRITERIA if problem.has_accuracy else ("train_grad_norm", "train_loss")


def raw_header(metric_cols):
    return ID_COLS + tuple(metric_cols) + LEDGER_COLS + ("status", "error")


def agg_header(metric_cols):
    cols = ["algorithm", "eta", "r", "round", "n_runs"]
    for m in metric_cols:
        cols += [f"{m}_mean", f"{m}_std"]
    return tuple(cols) + tuple(f"{c}_mean" for c in LEDGER_COLS)


# ------------------------------------------------------------------ execution


def plan(exp, algorithms=None, points=None, trials=None, restarts=None):
    """Run specs in a fixed order: algorithm, grid point, restart, trial."""
    specs = []
    for a in algorithms or exp.algorithms:
        grid = points[a] if points else exp.grid(a)
        for eta, r in grid:
            for rs in range(restarts or exp.restarts):
                for tr in range(trials or exp.n_trials):
                    specs.append(RunSpec(a, eta, r, tr, rs))
    return specs


def execute(exp, problem, specs, threads=1, checkpoints=False):
    """Run every spec; results come back in spec order whatever ``threads`` is."""

    def one(spec):
        cfg = exp.run_config(spec.algorithm, spec.eta, spec.r, spec.trial, spec.restart)
        if checkpoints and not cfg.checkpoint_every:
            cfg = cfg.with_(checkpoint_every=1)
        try:
            trace = ALGORITHMS[spec.algorithm](cfg, problem)
            return RunResult(spec, cfg.master_seed, trace, "ok")
        except RunAborted as exc:
            log.warning("run %s aborted: %s", spec, exc)
            return RunResult(spec, cfg.master_seed, exc.trace, "aborted", str(exc))

    if threads <= 1:
        return [one(s) for s in specs]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(one, specs))


def result_rows(results, metric_cols):
    rows = []
    for res in results:
        sp = res.spec
        ids = dict(algorithm=sp.algorithm, eta=sp.eta, r=sp.r, trial=sp.trial,
                   restart=sp.restart, seed=res.seed)
        for rec in res.trace.records:
            row = dict(ids, round=rec.round, s=rec.s, t=rec.t, status=res.status, error="")
            for m in metric_cols:
                row[m] = rec.metrics.get(m)
            for c in LEDGER_COLS:
                row[c] = getattr(rec, c)
            rows.append(row)
        if res.status != "ok":
            rows.append(dict(ids, status=res.status, error=res.error))
    return rows


# ------------------------------------------------------------ aggregation


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in header])


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _ok_records(rows):
    return [r for r in rows if r.get("status") == "ok" and r.get("round") not in (None, "")]


def _groups(rows, key):
    out = {}
    for r in rows:
        out.setdefault(key(r), []).append(r)
    return out


def aggregate(rows, metric_cols):
    """Mean and population std (ddof=0) over runs, per algorithm, grid point and round."""
    out = []
    grouped = _groups(_ok_records(rows), lambda r: (r["algorithm"], float(r["eta"]), float(r["r"]), int(r["round"])))
    for (a, eta, r, rnd), grp in grouped.items():
        row = dict(algorithm=a, eta=eta, r=r, round=rnd, n_runs=len(grp))
        for m in metric_cols:
            vals = np.array([float(g[m]) for g in grp])
            row[f"{m}_mean"] = float(vals.mean())
            row[f"{m}_std"] = float(vals.std())
        for c in LEDGER_COLS:
            row[f"{c}_mean"] = float(np.mean([float(g[c]) for g in grp]))
        out.append(row)
    return out


def _has_metric(rows, name):
    return any(r.get(name) not in (None, "") for r in _ok_records(rows))


@dataclass(frozen=True)
class Selection:
    eta: float
    r: float
    score: float
    rule: str


def tune_select(rows, rule="max_min_train_accuracy"):
    """Chosen ``(eta, r)`` per algorithm.

    ``max_min_train_accuracy`` averages train accuracy over runs at each round
    and scores a grid point by the minimum of that curve over rounds; the
    highest score wins. ``min_final_train_loss`` scores by the run-averaged
    train loss at the last round; the lowest wins. Grid points with an
    aborted run are never chosen unless nothing else is left. Ties go to the
    smaller eta, then the smaller r.
    """
    if rule == "max_min_train_accuracy" and not _has_metric(rows, "train_accuracy"):
        log.warning("no train_accuracy in results; falling back to min_final_train_loss")
        rule = "min_final_train_loss"
    by_point = _groups(rows, lambda r: (r["algorithm"], float(r["eta"]), float(r["r"])))
    scored = {}
    for (a, eta, r), grp in by_point.items():
        if any(g.get("status") != "ok" for g in grp):
            score = -math.inf
        else:
            curve = {}
            for g in grp:
                m = "train_accuracy" if rule == "max_min_train_accuracy" else "train_loss"
                curve.setdefault(int(g["round"]), []).append(float(g[m]))
            if rule == "max_min_train_accuracy":
                score = min(float(np.mean(v)) for v in curve.values())
            else:
                score = -float(np.mean(curve[max(curve)]))
            if math.isnan(score):
                score = -math.inf
        scored.setdefault(a, []).append((-score, eta, r))
    out = {}
    for a, cands in scored.items():
        neg, eta, r = min(cands)
        score = -neg if rule == "max_min_train_accuracy" else neg
        out[a] = Selection(eta, r, score, rule)
    return out


def emit_plot_data(rows, out_dir, metric_cols):
    """One long-format file per criterion: ``algorithm, round, mean, std``.

    The label is the algorithm name when it has one grid point, otherwise
    ``name@eta=..,r=..``.
    """
    agg = aggregate(rows, metric_cols)
    points = _groups(agg, lambda r: r["algorithm"])
    multi = {a for a, g in points.items() if len({(x["eta"], x["r"]) for x in g}) > 1}

    def label(row):
        if row["algorithm"] in multi:
            return f"{row['algorithm']}@eta={row['eta']:g},r={row['r']:g}"
        return row["algorithm"]

    paths = {}
    for m in metric_cols:
        path = Path(out_dir) / f"plot_{m}.csv"
        data = [dict(algorithm=label(r), round=r["round"], mean=r[f"{m}_mean"], std=r[f"{m}_std"]) for r in agg]
        write_csv(path, ("algorithm", "round", "mean", "std"), data)
        paths[m] = path
    return paths


# ------------------------------------------------------------ persistence


def versions():
    v = {"bvrlp": __version__, "python": platform.python_version(), "numpy": np.__version__}
    if NUMBA_AVAILABLE:
        import numba
        v["numba"] = numba.__version__
    return v


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _trace_name(res):
    sp = res.spec
    return f"{sp.algorithm}_eta{sp.eta:g}_r{sp.r:g}_trial{sp.trial}_restart{sp.restart}.npz"


def save_checkpoints(results, out_dir):
    d = Path(out_dir) / "traces"
    d.mkdir(parents=True, exist_ok=True)
    for res in results:
        cps = res.trace.checkpoints
        idx = np.array([i for i, _ in cps], dtype=np.int64)
        X = np.array([x for _, x in cps]) if cps else np.zeros((0, 0))
        np.savez_compressed(d / _trace_name(res), index=idx, x=X,
                            spec=json.dumps(asdict(res.spec)), status=res.status)


def certify_results(problem, results, eps, rho):
    reports = []
    for res in results:
        found, i, rep = scan_history_for_sosp(res.trace, problem, eps, rho)
        reports.append(dict(asdict(res.spec), seed=res.seed, status=res.status, found=found,
                            index=i, report=None if rep is None else asdict(rep)))
    return reports


def certify_saved(out_dir, eps, rho):
    """SOSP scan over checkpoints saved by a previous run in ``out_dir``."""
    from .config import validate

    manifest = json.loads((Path(out_dir) / "manifest.json").read_text())
    problem = build_problem(validate(manifest["config"]).problem)
    reports = []
    for f in sorted((Path(out_dir) / "traces").glob("*.npz")):
        z = np.load(f)
        cps = list(zip(z["index"].tolist(), z["x"]))
        found, i, rep = scan_history_for_sosp(cps, problem, eps, rho)
        reports.append(dict(json.loads(str(z["spec"])), status=str(z["status"]), found=found,
                            index=i, report=None if rep is None else asdict(rep)))
    reports.sort(key=lambda r: (r["algorithm"], r["eta"], r["r"], r["restart"], r["trial"]))
    write_json(Path(out_dir) / "sosp_reports.json", reports)
    return reports


def summarize_restarts(reports):
    """Per (algorithm, grid point, trial): found if any restart certified an SOSP."""
    out = {}
    for rep in reports:
        key = f"{rep['algorithm']}|eta={rep['eta']:g}|r={rep['r']:g}|trial={rep['trial']}"
        out[key] = out.get(key, False) or rep["found"]
    return out


# ------------------------------------------------------------ experiments


def run_experiment(exp, out_dir, mode="run", threads=1, certify=None, command=None):
    """Execute an experiment and write its files; returns a summary dict.

    ``run`` executes every algorithm x grid point x restart x trial.
    ``sweep`` does the same and adds the tuning selection. ``compare`` tunes on
    ``tuning.tune_trials`` trials first, then reruns each algorithm's chosen
    point for ``n_trials`` trials; the main files describe the second stage.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    problem = build_problem(exp.problem)
    cols = metric_columns(problem)
    certify = certify or exp.certify
    extra = {}

    reused = None
    if mode == "compare":
        tune_specs = plan(exp, trials=exp.tuning.tune_trials, restarts=1)
        tune_results = execute(exp, problem, tune_specs, threads)
        tune_rows = result_rows(tune_results, cols)
        write_csv(out / "tuning_raw.csv", raw_header(cols), tune_rows)
        sel = tune_select(tune_rows, exp.tuning.selection_rule)
        points = {a: [(s.eta, s.r)] for a, s in sel.items()}
        specs = plan(exp, points=points)
        extra["selection"] = {a: asdict(s) for a, s in sel.items()}
        if exp.tuning.tune_trials == exp.n_trials and exp.restarts == 1 and not certify:
            # the second stage would repeat these exact runs (same seeds)
            by_spec = {r.spec: r for r in tune_results}
            reused = [by_spec[s] for s in specs]
    else:
        specs = plan(exp)

    results = reused or execute(exp, problem, specs, threads, checkpoints=bool(certify))
    rows = result_rows(results, cols)
    write_csv(out / "raw.csv", raw_header(cols), rows)
    write_csv(out / "agg.csv", agg_header(cols), aggregate(rows, cols))
    emit_plot_data(rows, out, cols)

    if mode == "sweep":
        extra["selection"] = {a: asdict(s) for a, s in tune_select(rows, exp.tuning.selection_rule).items()}
    if "selection" in extra:
        write_json(out / "selection.json", extra["selection"])

    failed = [asdict(r.spec) | {"error": r.error} for r in results if r.status != "ok"]
    if certify:
        save_checkpoints(results, out)
        reports = certify_results(problem, results, certify["eps"], certify["rho"])
        write_json(out / "sosp_reports.json", reports)
        extra["sosp_summary"] = summarize_restarts(reports)

    manifest = {
        "manifest_version": 1,
        "mode": mode,
        "command": command,
        "config": exp.to_dict(),
        "config_hash": exp.digest(),
        "runs": [dict(asdict(r.spec), seed=r.seed, status=r.status) for r in results],
        "failed_runs": failed,
        "versions": versions(),
        "backend": BACKEND,
        "threads": threads,
        "certify": certify,
        **extra,
    }
    write_json(out / "manifest.json", manifest)
    return {"exit_code": 1 if failed else 0, "results": results, "rows": rows, **extra}


def default_threads():
    return max(1, min(4, os.cpu_count() or 1))
