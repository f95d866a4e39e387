"""Small hand-checkable problems and independent oracles shared by the tests."""

import numpy as np

from bvrlp.problems import Constants, Problem, SoftmaxRegression


class Quadratic(Problem):
    """``f_p(x) = x^T diag(D) x / 2 + c_z . x`` with per-sample linear terms.

    The linear terms sum to zero within each worker, so every ``f_p`` has the
    same diagonal Hessian and minibatch gradients are genuinely noisy.
    """

    kind = "quadratic"

    def __init__(self, D, P=1, m=4, noise=1.0, seed=0):
        D = np.asarray(D, dtype=float)
        rng = np.random.default_rng(seed)
        c = noise * rng.standard_normal((P * m, len(D)))
        for p in range(P):
            c[p * m:(p + 1) * m] -= c[p * m:(p + 1) * m].mean(axis=0)
        self.D, self.c = D, c
        L = float(np.abs(D).max())
        # the mean linear term is zero, so f = x^T diag(D) x / 2
        f_star = 0.0 if D.min() >= 0 else -np.inf
        super().__init__(len(D), P, m, Constants(L=L, rho=0.0, G=1.0, zeta=0.0), f_star=f_star)

    def batch_loss_grad(self, x, idx):
        cz = self.c[idx]
        loss = 0.5 * x @ (self.D * x) + float(np.mean(cz @ x))
        return loss, self.D * x + cz.mean(axis=0)

    def batch_hvp(self, x, v, idx):
        return self.D * v


def identical_sample_softmax(P, d_in=3, C=3, seed=0):
    """Softmax regression where every worker holds one copy of the same sample."""
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal(d_in)
    X = np.tile(x0, (P, 1))
    y = np.zeros(P, dtype=np.int64)
    return SoftmaxRegression(X, y, X[:1].copy(), y[:1].copy(), P, q=1.0 / C, seed=seed, n_classes=C)


def quartic_loss_oracle(pr, x, z):
    """Per-sample quartic loss written out directly from the stored pieces."""
    p = z // pr.m
    u = pr.U[z]
    return (0.5 * x @ pr.H[p] @ x + 0.5 * pr.noise * pr.w[z] * (u @ x) ** 2
            + 0.25 * pr.gamma * (x @ x) ** 2)


def quartic_grad_oracle(pr, x):
    """Global gradient: mean of worker Hessians (noise terms cancel) plus the quartic term."""
    Hm = pr.H.mean(axis=0)
    return Hm @ x + pr.gamma * (x @ x) * x


def fd_grad(f, x, h):
    g = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g
