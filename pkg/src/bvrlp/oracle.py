"""Sampling and gradient evaluation with cost accounting."""

from dataclasses import dataclass, field
import threading

import numpy as np

from .problems import ContractError

# Purpose tags for keyed streams. Values are part of the stream key: never
# renumber existing entries.
PURPOSES = {
    "init": 0,
    "init_noise": 1,
    "server_batch": 2,
    "select": 3,
    "local_batch": 4,
    "noise": 5,
    "minibatch": 6,
    "local_sgd": 7,
    "diagnostic": 8,
}


class RngStream:
    """Counter-based stream keyed by ``(master_seed, purpose, *indices)``.

    Backed by Philox, so streams with different keys are independent and a
    stream's output depends only on its key and the order it is consumed in.
    """

    def __init__(self, master_seed, purpose, *indices):
        if purpose not in PURPOSES:
            raise ContractError(f"unknown stream purpose {purpose!r}")
        key = (PURPOSES[purpose],) + tuple(int(i) for i in indices)
        self.stream_id = (purpose,) + tuple(int(i) for i in indices)
        seq = np.random.SeedSequence(int(master_seed), spawn_key=key)
        self.gen = np.random.Generator(np.random.Philox(seq))

    def __repr__(self):
        return f"RngStream{self.stream_id}"


@dataclass
class CostLedger:
    """Counts of single-sample gradient work.

    ``budget_units`` counts fresh samples; ``raw_grad_evals`` counts gradient
    evaluations, so a same-sample pair costs 1 unit and 2 evaluations.
    """

    budget_units: int = 0
    raw_grad_evals: int = 0
    per_round: list = field(default_factory=list)
    _round_start: tuple = (0, 0)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def charge(self, units, raw):
        with self._lock:
            self.budget_units += int(units)
            self.raw_grad_evals += int(raw)

    def close_round(self):
        """Store this round's (budget_units, raw_grad_evals) increment."""
        b0, r0 = self._round_start
        self.per_round.append((self.budget_units - b0, self.raw_grad_evals - r0))
        self._round_start = (self.budget_units, self.raw_grad_evals)


def sample_minibatch(stream, dataset, m):
    """``m`` sample ids drawn i.i.d. uniformly (with replacement) from ``dataset``."""
    if m < 1:
        raise ContractError("batch size must be >= 1")
    if len(dataset) == 0:
        raise ContractError(f"worker {dataset.worker_id} has an empty dataset")
    return dataset.samples[stream.gen.integers(0, len(dataset), size=m)]


def grad_pair(problem, batch, x_cur, x_ref, ledger):
    """Minibatch-mean gradients at ``x_cur`` and ``x_ref`` on the same samples."""
    if x_cur.shape != (problem.dim,) or x_ref.shape != (problem.dim,):
        raise ContractError("grad_pair: dimension mismatch")
    g = problem.batch_grad(x_cur, batch)
    g_ref = problem.batch_grad(x_ref, batch)
    ledger.charge(len(batch), 2 * len(batch))
    return g, g_ref


def full_local_gradient(problem, p, x, ledger):
    """Exact ``grad f_p(x)``; charges ``n/P`` units and evaluations."""
    g = problem.local_grad(p, x)
    ledger.charge(problem.m, problem.m)
    return g
