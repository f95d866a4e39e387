"""Server- and worker-level bias-variance reduced estimators, plus the ball
perturbation applied after every local step."""

from dataclasses import dataclass, replace
import math

import numpy as np

from .oracle import grad_pair, sample_minibatch
from .problems import ContractError
from .simnet import ProtocolError


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in an estimator or iterate."""


def batch_size_schedule(k, K, b):
    """``b_k``: ``ceil(sqrt(K)) * b`` when ``k % ceil(sqrt(K)) == 0``, else ``b``."""
    c = math.isqrt(K - 1) + 1 if K > 1 else 1
    return c * b if k % c == 0 else b


def schedule_total(K, b):
    """Closed form of ``sum_{k<K} b_k``."""
    c = math.isqrt(K - 1) + 1 if K > 1 else 1
    return b * (K + (c - 1) * -(-K // c))


def sample_ball(stream, d, r):
    """Uniform draw from the radius-``r`` Euclidean ball in ``R^d``.

    ``r = 0`` returns zeros without consuming the stream.
    """
    if r < 0:
        raise ContractError("radius must be nonnegative")
    if r == 0:
        return np.zeros(d)
    g = stream.gen.standard_normal(d)
    u = stream.gen.random()
    return g * (r * u ** (1.0 / d) / np.linalg.norm(g))


def _finite(v, where):
    if not np.all(np.isfinite(v)):
        raise NonFiniteError(f"non-finite values in {where}")


@dataclass(frozen=True)
class ServerEstimator:
    """Aggregated estimate of the global gradient at the start of round ``t``.

    ``worker_v0`` keeps the exact local gradients from the epoch start, used
    again by the ``t = 0`` branch.
    """

    v: np.ndarray
    anchor_x: np.ndarray
    t_index: int
    worker_v0: tuple


def start_epoch(full_local_grads, x, cluster, tag=()):
    """Aggregate exact local gradients into the epoch's first estimate."""
    v = cluster.gather_average(full_local_grads, tag)
    return ServerEstimator(v=v, anchor_x=x.copy(), t_index=0, worker_v0=tuple(full_local_grads))


def server_round_update(est, pairs, x_cur, cluster, tag=()):
    """One server-level recursion step and its aggregation.

    ``pairs`` holds ``(g, g_ref)`` per worker, evaluated at ``x_cur`` and
    ``est.anchor_x`` on shared samples. For ``t >= 1`` each worker sends
    ``g - g_ref + v`` and the server averages; at ``t = 0`` workers resend
    their exact epoch-start gradients instead.
    """
    if len(pairs) != cluster.P:
        raise ProtocolError(f"round {tag}: expected {cluster.P} pairs, got {len(pairs)}")
    if est.t_index == 0:
        contributions = list(est.worker_v0)
    else:
        contributions = [g - g_ref + est.v for g, g_ref in pairs]
    v = cluster.gather_average(contributions, tag)
    _finite(v, f"server estimator {tag}")
    return replace(est, v=v, anchor_x=x_cur.copy(), t_index=est.t_index + 1)


@dataclass(frozen=True)
class LocalEstimator:
    v: np.ndarray
    prev_x: np.ndarray
    k_index: int = 0


def local_step(est, problem, p, k, x_cur, b, K, ledger, stream, full_batch=False):
    """Evaluate step ``k`` of the local recursion on worker ``p``.

    Draws ``b_k`` samples and evaluates the pair at ``(x_cur, est.prev_x)``.
    At ``k = 0`` the pair is charged but the estimate stays equal to the
    server's. Returns the updated estimator and the batch size used.
    """
    bk = batch_size_schedule(k, K, b)
    ds = problem.datasets[p]
    batch = ds.samples if full_batch else sample_minibatch(stream, ds, bk)
    g, g_ref = grad_pair(problem, batch, x_cur, est.prev_x, ledger)
    v = est.v if k == 0 else g - g_ref + est.v
    _finite(v, f"local estimator k={k}")
    return LocalEstimator(v=v, prev_x=x_cur.copy(), k_index=k + 1), len(batch)


def perturbed_update(x, v, eta, r, stream):
    """Gradient step then ball noise: returns ``(x_tilde, x_next)``."""
    if not eta > 0 or r < 0:
        raise ContractError("need eta > 0 and r >= 0")
    _finite(v, "update direction")
    x_tilde = x - eta * v
    if r == 0:
        return x_tilde, x_tilde.copy()
    return x_tilde, x_tilde + eta * sample_ball(stream, len(x), r)
