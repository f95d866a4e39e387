"""Optimizer drivers on the simulated cluster.

``run_bvr_l_psgd`` executes the bias-variance reduced local perturbed SGD
loop literally: per epoch ``s`` exact local gradients are aggregated, then for
each of ``T`` rounds every worker evaluates a ``K*b``-sample pair, the server
aggregates, one uniformly chosen worker runs ``K`` perturbed local steps and
the resulting model is broadcast. The baselines share the cluster, ledger and
trace machinery.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
import hashlib
import math

import numpy as np

from .estimators import (
    LocalEstimator,
    NonFiniteError,
    local_step,
    perturbed_update,
    sample_ball,
    schedule_total,
    server_round_update,
    start_epoch,
)
from .oracle import CostLedger, RngStream, full_local_gradient, grad_pair, sample_minibatch
from .problems import ContractError, OperatingRegionError
from .simnet import Cluster


@dataclass(frozen=True)
class RunConfig:
    eta: float
    b: int
    K: int
    T: int
    S: int
    r: float = 0.0
    P: int = 1
    d: int | None = None
    master_seed: int = 0
    budget_B: int | None = None
    record_every: int = 1
    checkpoint_every: int = 0
    full_batch: bool = False
    init: str = "default"
    x0: tuple | None = None
    probe_deviation: bool = False
    threads: int = field(default=1, compare=False)
    notes: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        bad = []
        if not (self.eta > 0 and math.isfinite(self.eta)):
            bad.append(f"eta={self.eta} must be > 0")
        for name in ("b", "K", "T", "S", "P", "record_every", "threads"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                bad.append(f"{name}={v} must be an integer >= 1")
        if self.r < 0:
            bad.append(f"r={self.r} must be >= 0")
        if self.checkpoint_every < 0:
            bad.append("checkpoint_every must be >= 0")
        if self.budget_B is not None and self.K * self.b > self.budget_B:
            bad.append(f"K*b={self.K * self.b} exceeds budget_B={self.budget_B}")
        if bad:
            raise ContractError("invalid RunConfig: " + "; ".join(bad))

    @property
    def budget(self):
        """Per-round sample budget used by the baselines (``budget_B`` or ``K*b``)."""
        return self.budget_B if self.budget_B is not None else self.K * self.b

    @property
    def rounds(self):
        return self.T * self.S

    def with_(self, **kw):
        return replace(self, **kw)


@dataclass
class TraceRecord:
    round: int
    s: int
    t: int
    metrics: dict
    budget_units: int
    raw_grad_evals: int
    comm_events: int
    comm_rounds: int
    lambda_min: float = float("nan")


@dataclass
class Trace:
    algorithm: str
    config: RunConfig
    records: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)  # (i, x_tilde_i)
    deviation: list = field(default_factory=list)  # (i, |v_i - grad f(x_i)|, envelope)
    selected_workers: list = field(default_factory=list)
    x_final: np.ndarray | None = None
    comm_events_by_kind: dict = field(default_factory=dict)
    status: str = "ok"
    error: str = ""

    def fingerprint(self):
        """Hash of every recorded number; equal for bit-identical runs."""
        h = hashlib.sha256()
        for rec in self.records:
            h.update(repr(sorted(asdict(rec).items())).encode())
        for i, x in self.checkpoints:
            h.update(str(i).encode())
            h.update(np.ascontiguousarray(x).tobytes())
        for row in self.deviation:
            h.update(np.asarray(row, dtype=float).tobytes())
        h.update(repr(self.selected_workers).encode())
        if self.x_final is not None:
            h.update(self.x_final.tobytes())
        return h.hexdigest()


class RunAborted(RuntimeError):
    """Raised when a run stops early; ``trace`` holds everything recorded so far."""

    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


class _Driver:
    """Shared bookkeeping: ledgers, records, checkpoints, guards."""

    def __init__(self, name, config, problem):
        if config.d is not None and config.d != problem.dim:
            raise ContractError(f"config d={config.d} does not match problem dim {problem.dim}")
        if config.P != problem.P:
            raise ContractError(f"config P={config.P} does not match problem P={problem.P}")
        self.cfg = config
        self.problem = problem
        self.ledger = CostLedger()
        self.cluster = Cluster(problem.P)
        self.trace = Trace(name, config)
        self.pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None

    def per_worker(self, fn):
        """``[fn(p) for p in range(P)]``, concurrently when ``threads > 1``.

        Results come back in worker order, and each ``fn(p)`` touches only
        its own RNG streams, so the output does not depend on scheduling.
        """
        if self.pool is None:
            return [fn(p) for p in range(self.problem.P)]
        return list(self.pool.map(fn, range(self.problem.P)))

    def initial_point(self):
        cfg = self.cfg
        if cfg.x0 is not None:
            x0 = np.array(cfg.x0, dtype=float)
            if x0.shape != (self.problem.dim,):
                raise ContractError(f"x0 has length {len(x0)}, expected {self.problem.dim}")
            return x0
        return self.problem.initial_point(RngStream(cfg.master_seed, "init").gen, cfg.init)

    def checkpoint(self, i, x_tilde):
        every = self.cfg.checkpoint_every
        if every and i % every == 0:
            self.trace.checkpoints.append((i, x_tilde.copy()))

    def guard(self, x, where):
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(f"non-finite iterate at {where}")
        R = self.problem.R_op
        if R is not None and np.linalg.norm(x) > R:
            raise OperatingRegionError(f"iterate left the operating ball |x| <= {R} at {where}")

    def record(self, rnd, s, t, x, force=False):
        self.ledger.close_round()
        if not force and rnd % self.cfg.record_every:
            return
        metrics = self.problem.evaluate(x)
        f_star = self.problem.f_star
        if metrics["train_loss"] < f_star - 1e-9 * (1 + abs(f_star)):
            raise ContractError(f"loss {metrics['train_loss']} below declared lower bound {f_star}")
        cl = self.cluster.ledger
        self.trace.records.append(TraceRecord(
            round=rnd, s=s, t=t, metrics=metrics,
            budget_units=self.ledger.budget_units, raw_grad_evals=self.ledger.raw_grad_evals,
            comm_events=cl.total_events, comm_rounds=cl.rounds,
        ))

    def run(self, body):
        try:
            with np.errstate(over="raise", invalid="raise", divide="raise"):
                x = body()
        except (NonFiniteError, FloatingPointError, ContractError) as exc:
            self.trace.status = "aborted"
            self.trace.error = str(exc)
            self._finish(None)
            raise RunAborted(str(exc), self.trace) from exc
        self._finish(x)
        return self.trace

    def _finish(self, x):
        if self.pool is not None:
            self.pool.shutdown()
        self.trace.x_final = None if x is None else x.copy()
        self.trace.comm_events_by_kind = dict(self.cluster.ledger.events)


def run_bvr_l_psgd(config, problem, name="bvr_l_psgd"):
    """Bias-variance reduced local perturbed SGD.

    Iterate index ``i = k + K t + K T s``. The pre-noise iterates
    ``x_tilde_i`` are checkpointed every ``config.checkpoint_every`` steps
    (``i = 0`` is the starting point).
    """
    drv = _Driver(name, config, problem)
    cfg, P, K, b = config, problem.P, config.K, config.b
    seed = cfg.master_seed
    full = cfg.full_batch

    def body():
        x_tilde = drv.initial_point()
        drv.checkpoint(0, x_tilde)
        x = x_tilde + cfg.eta * sample_ball(RngStream(seed, "init_noise"), problem.dim, cfg.r)
        drv.guard(x, "init")
        rnd = 0
        for s in range(cfg.S):
            grads = drv.per_worker(lambda p: full_local_gradient(problem, p, x, drv.ledger))
            est = start_epoch(grads, x, drv.cluster, tag=(s, 0, "epoch"))
            x_epoch = x.copy()
            for t in range(cfg.T):
                # at t = 0 the pair result is discarded, so the reference
                # point is immaterial; the current point is used
                x_ref = x if t == 0 else est.anchor_x

                def pair(p, s=s, t=t, x=x, x_ref=x_ref):
                    ds = problem.datasets[p]
                    batch = ds.samples if full else sample_minibatch(
                        RngStream(seed, "server_batch", p, s, t), ds, K * b)
                    return grad_pair(problem, batch, x, x_ref, drv.ledger)

                pairs = drv.per_worker(pair)
                est = server_round_update(est, pairs, x, drv.cluster, tag=(s, t, "server"))

                p_ts = int(RngStream(seed, "select", s, t).gen.integers(P))
                drv.trace.selected_workers.append(p_ts)
                batch_stream = RngStream(seed, "local_batch", s, t)
                noise_stream = RngStream(seed, "noise", s, t)
                loc = LocalEstimator(v=est.v, prev_x=x.copy())
                for k in range(K):
                    loc, _ = local_step(loc, problem, p_ts, k, x, b, K, drv.ledger, batch_stream, full)
                    i = k + K * t + K * cfg.T * s
                    if cfg.probe_deviation:
                        _probe(drv, problem, i, loc.v, x, x_epoch)
                    x_tilde, x = perturbed_update(x, loc.v, cfg.eta, cfg.r, noise_stream)
                    drv.guard(x, (k, t, s))
                    drv.checkpoint(i + 1, x_tilde)
                drv.cluster.broadcast(x, tag=(s, t, "model"))
                rnd += 1
                drv.record(rnd, s, t, x, force=(rnd == cfg.rounds))
        return x

    return drv.run(body)


def _probe(drv, problem, i, v, x, anchor):
    c = problem.constants
    dist = float(np.linalg.norm(x - anchor))
    dev = float(np.linalg.norm(v - problem.grad(x)))
    env = c.zeta * dist + c.L * dist / math.sqrt(drv.cfg.b)
    drv.trace.deviation.append((i, dev, env))


def run_bvr_l_sgd(config, problem):
    """The same loop without perturbation (``r = 0``)."""
    return run_bvr_l_psgd(config.with_(r=0.0), problem, name="bvr_l_sgd")


def run_minibatch_sarah(config, problem):
    """Minibatch SARAH: one local step per round, no perturbation."""
    return run_bvr_l_psgd(config.with_(K=1, r=0.0), problem, name="minibatch_sarah")


def _run_minibatch(config, problem, name, noisy):
    drv = _Driver(name, config, problem)
    cfg = config
    B = cfg.budget
    seed = cfg.master_seed

    def body():
        x = drv.initial_point()
        drv.checkpoint(0, x)
        for rnd in range(cfg.rounds):
            def grad(p, rnd=rnd, x=x):
                ds = problem.datasets[p]
                if cfg.full_batch:
                    batch = ds.samples
                else:
                    batch = sample_minibatch(RngStream(seed, "minibatch", p, rnd), ds, B)
                drv.ledger.charge(len(batch), len(batch))
                return problem.batch_grad(x, batch)

            grads = drv.per_worker(grad)
            g = drv.cluster.allreduce_average(grads, tag=(rnd, "grad"))
            x_tilde = x - cfg.eta * g
            if noisy and cfg.r > 0:
                x = x_tilde + cfg.eta * sample_ball(RngStream(seed, "noise", rnd), problem.dim, cfg.r)
            else:
                x = x_tilde.copy()
            drv.guard(x, rnd)
            drv.checkpoint(rnd + 1, x_tilde)
            drv.record(rnd + 1, rnd // cfg.T, rnd % cfg.T, x, force=(rnd + 1 == cfg.rounds))
        return x

    return drv.run(body)


def run_minibatch_sgd(config, problem):
    """Each round: every worker averages a ``budget``-sample gradient at the shared model."""
    return _run_minibatch(config, problem, "minibatch_sgd", noisy=False)


def run_noisy_minibatch_sgd(config, problem):
    """Minibatch SGD plus server-side ball noise ``eta * xi`` each round."""
    return _run_minibatch(config, problem, "noisy_minibatch_sgd", noisy=True)


def run_local_sgd(config, problem):
    """Each worker takes ``budget // b`` local SGD steps; the server averages models."""
    drv = _Driver("local_sgd", config, problem)
    cfg = config
    B = cfg.budget
    if B % cfg.b:
        raise ContractError(f"local SGD needs budget {B} divisible by b={cfg.b}")
    steps = B // cfg.b
    seed = cfg.master_seed

    def body():
        x = drv.initial_point()
        drv.checkpoint(0, x)
        for rnd in range(cfg.rounds):
            def local(p, rnd=rnd, x=x):
                ds = problem.datasets[p]
                stream = RngStream(seed, "local_sgd", p, rnd)
                xp = x.copy()
                for _ in range(steps):
                    batch = ds.samples if cfg.full_batch else sample_minibatch(stream, ds, cfg.b)
                    xp = xp - cfg.eta * problem.batch_grad(xp, batch)
                    drv.ledger.charge(len(batch), len(batch))
                    drv.guard(xp, (rnd, p))
                return xp

            models = drv.per_worker(local)
            x = drv.cluster.allreduce_average(models, tag=(rnd, "model"))
            drv.checkpoint(rnd + 1, x)
            drv.record(rnd + 1, rnd // cfg.T, rnd % cfg.T, x, force=(rnd + 1 == cfg.rounds))
        return x

    return drv.run(body)


ALGORITHMS = {
    "bvr_l_psgd": run_bvr_l_psgd,
    "bvr_l_sgd": run_bvr_l_sgd,
    "minibatch_sarah": run_minibatch_sarah,
    "minibatch_sgd": run_minibatch_sgd,
    "noisy_minibatch_sgd": run_noisy_minibatch_sgd,
    "local_sgd": run_local_sgd,
}

# algorithms whose behaviour depends on the noise radius
USES_RADIUS = {"bvr_l_psgd", "noisy_minibatch_sgd"}


def budget_per_round_per_worker(config, n):
    """Expected average fresh samples per worker per round for the BVR loop.

    ``n/(P T)`` for the epoch-start gradients, ``K b`` for the server pairs
    and ``sum_k b_k / P`` for the single sampled worker's local steps.
    Returned as an exact ``Fraction``.
    """
    from fractions import Fraction

    P, K, b, T = config.P, config.K, config.b, config.T
    return Fraction(n, P * T) + K * b + Fraction(schedule_total(K, b), P)


def recommend_hyperparameters(L, zeta, rho, G, eps, budget_B, P, n, f_gap,
                              c_eta=0.5, c_r=1.0, K=None, b=None, master_seed=0):
    """Hyperparameters shaped by the convergence theory, with explicit constants.

    ``T = ceil(1 + n/(B P))``, ``b = ceil(sqrt(B))``, ``K = max(1, floor(B/b))``,
    ``eta = c_eta * min(1/L, 1/(K zeta), sqrt(b/K)/L, sqrt(P b)/(sqrt(K T) L))``,
    ``r = c_r * eps`` and ``S = ceil(1 + f_gap / (eta K T eps^2))``. ``K`` and
    ``b`` may be overridden. ``G`` enters the theory only through log factors
    and is not used.

    ``notes['b_lower_bound_violated']`` is set when ``b`` is below
    ``max(K, 1/(sqrt(K) rho eps), T/(P K))``.
    """
    for name, v in dict(L=L, rho=rho, eps=eps, P=P, n=n).items():
        if not v > 0:
            raise ContractError(f"{name} must be positive")
    if zeta < 0 or f_gap < 0:
        raise ContractError("zeta and f_gap must be nonnegative")
    if budget_B < 1:
        raise ContractError("budget_B must be >= 1")
    T = math.ceil(1 + n / (budget_B * P))
    if b is None:
        b = math.ceil(math.sqrt(budget_B))
    if K is None:
        K = max(1, budget_B // b)
    terms = {
        "1/L": 1 / L,
        "1/(K zeta)": math.inf if zeta == 0 else 1 / (K * zeta),
        "sqrt(b/K)/L": math.sqrt(b / K) / L,
        "sqrt(Pb)/(sqrt(KT)L)": math.sqrt(P * b) / (math.sqrt(K * T) * L),
    }
    eta = c_eta * min(terms.values())
    r = c_r * eps
    S = math.ceil(1 + f_gap / (eta * K * T * eps**2))
    lower = max(K, 1 / (math.sqrt(K) * rho * eps), T / (P * K))
    notes = {"eta_terms": terms, "b_lower_bound": lower, "b_lower_bound_violated": b < lower}
    return RunConfig(eta=eta, b=b, K=K, T=T, S=S, r=r, P=P, master_seed=master_seed,
                     budget_B=budget_B if K * b <= budget_B else None, notes=notes)
