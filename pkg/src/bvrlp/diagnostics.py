"""Second-order certification and estimator probes.

Nothing here is charged to a run's cost ledger.
"""

from dataclasses import dataclass
import itertools
import math

import numpy as np

from .oracle import RngStream
from .problems import ContractError


@dataclass(frozen=True)
class SospReport:
    grad_norm: float
    lambda_min: float
    eps: float
    rho: float
    certificate_tol: float
    verdict: bool

    @staticmethod
    def decide(grad_norm, lambda_min, eps, rho, certificate_tol):
        return bool(grad_norm <= eps and lambda_min >= -math.sqrt(rho * eps) - certificate_tol)


def full_gradient_norm(problem, x):
    return float(np.linalg.norm(problem.grad(x)))


def _lanczos(matvec, v0, m, rng):
    """``m`` Lanczos steps with full reorthogonalization.

    On breakdown the basis is extended with a fresh random vector orthogonal
    to it, so ``m = d`` always spans the whole space.
    """
    d = v0.shape[0]
    Q = np.zeros((m, d))
    alpha = np.zeros(m)
    beta = np.zeros(max(m - 1, 0))
    q = v0 / np.linalg.norm(v0)
    scale = 0.0
    for j in range(m):
        Q[j] = q
        w = matvec(q)
        alpha[j] = q @ w
        w -= Q[: j + 1].T @ (Q[: j + 1] @ w)
        w -= Q[: j + 1].T @ (Q[: j + 1] @ w)
        scale = max(scale, abs(alpha[j]))
        if j == m - 1:
            break
        bj = np.linalg.norm(w)
        if bj <= 1e-12 * max(scale, 1.0):
            w = rng.standard_normal(d)
            w -= Q[: j + 1].T @ (Q[: j + 1] @ w)
            w -= Q[: j + 1].T @ (Q[: j + 1] @ w)
            beta[j] = 0.0
            q = w / np.linalg.norm(w)
        else:
            beta[j] = bj
            q = w / bj
    return Q, alpha, beta


def _smallest_eig(matvec, d, tol, krylov_dim, max_restarts, seed):
    rng = RngStream(seed, "diagnostic", d).gen
    m = min(d, krylov_dim)
    v = rng.standard_normal(d)
    best = (math.inf, None, math.inf)
    for _ in range(max_restarts + 1):
        Q, alpha, beta = _lanczos(matvec, v, m, rng)
        Tm = np.diag(alpha) + np.diag(beta, 1) + np.diag(beta, -1)
        theta, S = np.linalg.eigh(Tm)
        y = Q.T @ S[:, 0]
        y /= np.linalg.norm(y)
        lam = float(y @ matvec(y))
        res = float(np.linalg.norm(matvec(y) - lam * y))
        if res < best[2]:
            best = (lam, y, res)
        if res <= tol * (1 + abs(lam)):
            return lam, res, True
        v = y
    return best[0], best[2], False


def min_eigenvalue(problem, x, tol=1e-8, scope=None, krylov_dim=60, max_restarts=8, seed=0):
    """Smallest Hessian eigenvalue at ``x`` by restarted Lanczos on HVPs.

    Returns ``(lambda_min, residual, converged)`` where ``residual`` is
    ``|H y - lambda y|`` for the returned unit Ritz vector ``y``.
    """
    if not tol > 0:
        raise ContractError("tol must be positive")
    x = np.asarray(x, dtype=float)

    def hv(v):
        return problem.hessian_vector_product(x, v, scope)

    return _smallest_eig(hv, problem.dim, tol, krylov_dim, max_restarts, seed)


def spectral_norm(matvec, d, tol=1e-8, krylov_dim=60, max_restarts=8, seed=0):
    """Spectral norm of a symmetric operator from its two extreme eigenvalues.

    Returns ``(norm, residual, converged)``.
    """
    lo, res_lo, ok_lo = _smallest_eig(matvec, d, tol, krylov_dim, max_restarts, seed)
    hi, res_hi, ok_hi = _smallest_eig(lambda v: -matvec(v), d, tol, krylov_dim, max_restarts, seed)
    hi = -hi
    if abs(lo) >= abs(hi):
        return abs(lo), res_lo, ok_lo
    return abs(hi), res_hi, ok_hi


def estimate_zeta(problem, x, tol=1e-8, seed=0):
    """``max_{p,p'} ||hess f_p(x) - hess f_p'(x)||`` over all worker pairs."""
    x = np.asarray(x, dtype=float)
    best = 0.0
    for p, q in itertools.combinations(range(problem.P), 2):
        def diff(v, p=p, q=q):
            return (problem.hessian_vector_product(x, v, p)
                    - problem.hessian_vector_product(x, v, q))

        best = max(best, spectral_norm(diff, problem.dim, tol=tol, seed=seed)[0])
    return best


def assemble_hessian(problem, x, scope=None):
    """Dense Hessian built column by column from HVPs on basis vectors."""
    eye = np.eye(problem.dim)
    H = np.column_stack([problem.hessian_vector_product(x, eye[i], scope) for i in range(problem.dim)])
    return (H + H.T) / 2


def check_sosp(problem, x, eps, rho, tol=1e-8):
    """Certify ``x`` as an eps-second-order stationary point (or not)."""
    g = full_gradient_norm(problem, x)
    lam, res, _ = min_eigenvalue(problem, x, tol=tol)
    return SospReport(g, lam, eps, rho, res, SospReport.decide(g, lam, eps, rho, res))


def scan_history_for_sosp(trace, problem, eps, rho, tol=1e-8):
    """First checkpointed pre-noise iterate that certifies as an eps-SOSP.

    ``trace`` is a Trace or a list of ``(i, x)`` pairs. Returns
    ``(found, index, report)``; ``index`` and ``report`` are None when no
    checkpoint qualifies. The eigenvalue is computed only for checkpoints that
    pass the gradient test.
    """
    checkpoints = getattr(trace, "checkpoints", trace)
    for i, x in checkpoints:
        g = full_gradient_norm(problem, x)
        if g > eps:
            continue
        lam, res, _ = min_eigenvalue(problem, x, tol=tol)
        verdict = SospReport.decide(g, lam, eps, rho, res)
        if verdict:
            return True, i, SospReport(g, lam, eps, rho, res, True)
    return False, None, None


def estimator_deviation_probe(config, problem):
    """Run BVR-L-PSGD with the deviation probe enabled.

    Returns arrays ``(index, deviation, envelope)`` where deviation is
    ``|v_i - grad f(x_i)|`` at every local step and envelope is
    ``zeta |x_i - x_anchor| + L |x_i - x_anchor| / sqrt(b)`` with the anchor at
    the epoch start.
    """
    from .optimizers import run_bvr_l_psgd

    trace = run_bvr_l_psgd(config.with_(probe_deviation=True), problem)
    arr = np.asarray(trace.deviation, dtype=float).reshape(-1, 3)
    return arr[:, 0].astype(int), arr[:, 1], arr[:, 2]
