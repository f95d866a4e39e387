"""Experiment configuration: YAML (or JSON) with nested sections.

Example::

    problem: {kind: mlp-softplus, P: 8, q: 0.35, n: 5000, seed: 0}
    algorithms: [bvr_l_psgd, bvr_l_sgd, minibatch_sgd]
    run: {b: 16, K: 64, T: 2, budget_B: 1024, master_seed: 0}
    n_trials: 5
    rounds_budget: 200
    tuning:
      eta_grid: [0.005, 0.01, 0.05, 0.1, 0.5, 1.0]
      r_grid: [0.5, 2.5, 12.5]
      selection_rule: max_min_train_accuracy
    output: {dir: results}

A ``manifest.json`` written by a previous run is accepted too; its stored
config is used as-is.
"""

from dataclasses import asdict, dataclass, field
import copy
import hashlib
import json

import yaml

from ..optimizers import ALGORITHMS, USES_RADIUS, RunConfig
from ..problems import BUILDERS, ContractError

SELECTION_RULES = ("max_min_train_accuracy", "min_final_train_loss")

# RunConfig fields that the harness owns and that may not appear under ``run``
_HARNESS_OWNED = {"eta", "r", "S", "P", "master_seed", "x0", "notes", "threads"}
_RUN_FIELDS = set(RunConfig.__dataclass_fields__) - _HARNESS_OWNED | {"master_seed"}


class ConfigError(ContractError):
    """Invalid experiment configuration; the message names the field."""


@dataclass
class Tuning:
    eta_grid: list
    r_grid: list = field(default_factory=lambda: [0.0])
    selection_rule: str = "max_min_train_accuracy"
    tune_trials: int = 1


@dataclass
class ExperimentConfig:
    problem: dict
    algorithms: list
    run: dict
    tuning: Tuning
    n_trials: int = 5
    rounds_budget: int = 200
    restarts: int = 1
    certify: dict | None = None
    output: dict = field(default_factory=lambda: {"dir": "results"})

    @property
    def T(self):
        return int(self.run.get("T", 1))

    @property
    def S(self):
        return self.rounds_budget // self.T

    @property
    def master_seed(self):
        return int(self.run.get("master_seed", 0))

    def grid(self, algorithm):
        """``(eta, r)`` points for ``algorithm``; radius-free methods use ``r = 0``."""
        rs = self.tuning.r_grid if algorithm in USES_RADIUS else [0.0]
        return [(float(e), float(r)) for e in self.tuning.eta_grid for r in rs]

    def seed(self, trial, restart=0):
        return self.master_seed + 1000 * restart + trial

    def run_config(self, algorithm, eta, r, trial, restart=0, threads=1):
        kw = {k: v for k, v in self.run.items() if k != "master_seed"}
        return RunConfig(eta=eta, r=r if algorithm in USES_RADIUS else 0.0,
                         S=self.S, P=int(self.problem.get("P", 1)),
                         master_seed=self.seed(trial, restart), threads=threads, **kw)

    def to_dict(self):
        return asdict(self)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _need(cond, where, msg):
    if not cond:
        raise ConfigError(f"field '{where}': {msg}")


def _positive_int(v, where):
    _need(isinstance(v, int) and not isinstance(v, bool) and v >= 1, where,
          f"must be an integer >= 1, got {v!r}")


def validate(raw):
    """Check a parsed mapping and return an :class:`ExperimentConfig`."""
    _need(isinstance(raw, dict), "<root>", "config must be a mapping")
    known = {"problem", "algorithms", "run", "tuning", "n_trials", "rounds_budget",
             "restarts", "certify", "output"}
    for k in raw:
        _need(k in known, k, f"unknown section; expected one of {sorted(known)}")

    problem = raw.get("problem")
    _need(isinstance(problem, dict), "problem", "missing or not a mapping")
    _need(problem.get("kind") in BUILDERS, "problem.kind",
          f"must be one of {sorted(BUILDERS)}, got {problem.get('kind')!r}")
    _need("P" in problem, "problem.P", "worker count is required")
    _positive_int(problem["P"], "problem.P")

    algos = raw.get("algorithms")
    _need(isinstance(algos, list) and len(algos) > 0, "algorithms", "must be a non-empty list")
    for i, a in enumerate(algos):
        _need(a in ALGORITHMS, f"algorithms[{i}]", f"unknown algorithm {a!r}; expected one of {sorted(ALGORITHMS)}")
    _need(len(set(algos)) == len(algos), "algorithms", "duplicate entries")

    run = raw.get("run", {})
    _need(isinstance(run, dict), "run", "must be a mapping")
    for k in run:
        _need(k in _RUN_FIELDS, f"run.{k}",
              "set by the harness (tuning grids, rounds_budget, problem.P)" if k in _HARNESS_OWNED
              else f"unknown field; expected one of {sorted(_RUN_FIELDS)}")

    tun = raw.get("tuning")
    _need(isinstance(tun, dict), "tuning", "missing or not a mapping")
    for k in tun:
        _need(k in Tuning.__dataclass_fields__, f"tuning.{k}", "unknown field")
    eta_grid = tun.get("eta_grid")
    _need(isinstance(eta_grid, list) and eta_grid, "tuning.eta_grid", "must be a non-empty list")
    for i, e in enumerate(eta_grid):
        _need(isinstance(e, (int, float)) and e > 0, f"tuning.eta_grid[{i}]", f"must be > 0, got {e!r}")
    r_grid = tun.get("r_grid", [0.0])
    _need(isinstance(r_grid, list) and r_grid, "tuning.r_grid", "must be a non-empty list")
    for i, r in enumerate(r_grid):
        _need(isinstance(r, (int, float)) and r >= 0, f"tuning.r_grid[{i}]", f"must be >= 0, got {r!r}")
    rule = tun.get("selection_rule", "max_min_train_accuracy")
    _need(rule in SELECTION_RULES, "tuning.selection_rule", f"must be one of {SELECTION_RULES}")
    tuning = Tuning(eta_grid=list(eta_grid), r_grid=list(r_grid), selection_rule=rule,
                    tune_trials=tun.get("tune_trials", 1))
    _positive_int(tuning.tune_trials, "tuning.tune_trials")

    for k in ("n_trials", "rounds_budget", "restarts"):
        if k in raw:
            _positive_int(raw[k], k)

    cert = raw.get("certify")
    if cert is not None:
        _need(isinstance(cert, dict) and set(cert) >= {"eps", "rho"}, "certify",
              "must be a mapping with eps and rho")
        _need(cert["eps"] > 0 and cert["rho"] > 0, "certify", "eps and rho must be positive")

    out = raw.get("output", {"dir": "results"})
    _need(isinstance(out, dict), "output", "must be a mapping")

    cfg = ExperimentConfig(
        problem=dict(problem), algorithms=list(algos), run=dict(run), tuning=tuning,
        n_trials=raw.get("n_trials", 5), rounds_budget=raw.get("rounds_budget", 200),
        restarts=raw.get("restarts", 1), certify=cert, output=dict(out),
    )
    _need(cfg.rounds_budget % cfg.T == 0, "rounds_budget",
          f"{cfg.rounds_budget} is not a multiple of run.T={cfg.T}")
    # every grid point must give a valid RunConfig
    for a in cfg.algorithms:
        for eta, r in cfg.grid(a):
            try:
                cfg.run_config(a, eta, r, 0)
            except (ContractError, TypeError) as exc:
                raise ConfigError(f"field 'run' (algorithm {a}, eta={eta}, r={r}): {exc}") from None
    return cfg


def parse_text(text, name="<config>"):
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ConfigError(f"{name}: cannot parse ({where}): {getattr(exc, 'problem', exc)}") from None
    if isinstance(raw, dict) and "manifest_version" in raw:
        raw = raw["config"]
    return raw


def apply_overrides(raw, overrides):
    """Apply ``key.sub=value`` strings; values are parsed as YAML scalars/lists."""
    raw = copy.deepcopy(raw)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, val = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: '{p}' is not a section")
        node[parts[-1]] = yaml.safe_load(val)
    return raw


def load(path, overrides=()):
    with open(path, encoding="utf-8") as fh:
        raw = parse_text(fh.read(), str(path))
    return validate(apply_overrides(raw, overrides))
