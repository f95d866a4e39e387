"""Finite-sum objectives split across workers.

Every problem stores its samples in one table; a sample ``z`` is an integer
row id into that table. Worker ``p`` owns a contiguous block of rows, so the
local objective is ``f_p(x) = mean_{z in D_p} loss(x, z)`` and the global
objective is ``f = (1/P) sum_p f_p``.
"""

from dataclasses import dataclass
import math

import numpy as np

from . import kernels


class ContractError(ValueError):
    """Raised when an input violates a documented precondition."""


class OperatingRegionError(ContractError):
    """An iterate left the ball on which the declared constants hold."""


@dataclass(frozen=True)
class Constants:
    """Declared smoothness/heterogeneity constants.

    ``certified`` is False when the values are numerical estimates rather
    than proven bounds (the MLP).
    """

    L: float
    rho: float
    G: float
    zeta: float
    certified: bool = True

    def __post_init__(self):
        for name in ("L", "rho", "G", "zeta"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ContractError(f"constant {name}={v!r} must be finite and nonnegative")
        if self.zeta > 2 * self.L * (1 + 1e-12):
            raise ContractError(f"zeta={self.zeta} exceeds 2L={2 * self.L}")


@dataclass(frozen=True)
class WorkerDataset:
    worker_id: int
    samples: np.ndarray

    def __len__(self):
        return len(self.samples)


def _blocks(P, m):
    datasets = []
    for p in range(P):
        ids = np.arange(p * m, (p + 1) * m, dtype=np.int64)
        ids.setflags(write=False)
        datasets.append(WorkerDataset(p, ids))
    return datasets


class Problem:
    """Base class. Subclasses implement :meth:`batch_loss_grad` and friends.

    Batches passed to the ``batch_*`` methods must come from one worker.
    """

    kind = "abstract"
    has_accuracy = False

    def __init__(self, dim, P, m_per_worker, constants, f_star, R_op=None):
        self.dim = int(dim)
        self.P = int(P)
        self.m = int(m_per_worker)
        self.datasets = _blocks(self.P, self.m)
        self.constants = constants
        self.f_star = float(f_star)
        self.R_op = R_op

    @property
    def n(self):
        return self.P * self.m

    def owner(self, z):
        return int(z) // self.m

    def _check_x(self, x, name="x"):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ContractError(f"{name} has shape {x.shape}, expected ({self.dim},)")
        return x

    def _check_z(self, z):
        z = int(z)
        if not 0 <= z < self.n:
            raise ContractError(f"sample id {z} out of range [0, {self.n})")
        return z

    # -- batch interface -------------------------------------------------

    def batch_loss_grad(self, x, idx):
        raise NotImplementedError

    def batch_grad(self, x, idx):
        return self.batch_loss_grad(x, idx)[1]

    def batch_loss(self, x, idx):
        return self.batch_loss_grad(x, idx)[0]

    def batch_hvp(self, x, v, idx):
        """Central finite difference of :meth:`batch_grad` along ``v``."""
        vn = np.linalg.norm(v)
        if vn == 0.0:
            return np.zeros(self.dim)
        delta = 1e-4 * (1.0 + np.linalg.norm(x)) / max(vn, 1e-12)
        gp = self.batch_grad(x + delta * v, idx)
        gm = self.batch_grad(x - delta * v, idx)
        return (gp - gm) / (2.0 * delta)

    # -- per-sample, per-worker and global views --------------------------

    def eval_loss(self, x, z):
        x = self._check_x(x)
        z = self._check_z(z)
        return float(self.batch_loss(x, np.array([z])))

    def eval_grad(self, x, z):
        x = self._check_x(x)
        z = self._check_z(z)
        return self.batch_grad(x, np.array([z]))

    def local_slice(self, p):
        return slice(p * self.m, (p + 1) * self.m)

    def local_loss(self, p, x):
        return float(self.batch_loss(x, self.datasets[p].samples))

    def local_grad(self, p, x):
        return self.batch_grad(x, self.datasets[p].samples)

    def loss(self, x):
        x = self._check_x(x)
        return sum(self.local_loss(p, x) for p in range(self.P)) / self.P

    def grad(self, x):
        x = self._check_x(x)
        g = np.zeros(self.dim)
        for p in range(self.P):
            g += self.local_grad(p, x)
        return g / self.P

    def hessian_vector_product(self, x, v, scope=None):
        """``H v`` for the global objective (scope None) or worker ``scope``."""
        x = self._check_x(x)
        v = self._check_x(v, "v")
        if not np.any(v):
            return np.zeros(self.dim)
        if scope is not None:
            return self.batch_hvp(x, v, self.datasets[scope].samples)
        out = np.zeros(self.dim)
        for p in range(self.P):
            out += self.batch_hvp(x, v, self.datasets[p].samples)
        return out / self.P

    def evaluate(self, x):
        """Diagnostic metrics at ``x`` (not charged to any run ledger)."""
        g = self.grad(x)
        return {"train_loss": self.loss(x), "train_grad_norm": float(np.linalg.norm(g))}

    def initial_point(self, rng, how="default"):
        if how in ("zeros", "saddle"):
            return np.zeros(self.dim)
        raise ContractError(f"unknown init {how!r} for {self.kind}")


# ----------------------------------------------------------------- quartic


class QuarticSaddle(Problem):
    """``f_p(x) = x^T H_p x / 2 + gamma/4 |x|^4`` with an exact saddle at 0.

    ``H_p = Hbar + s_p (zeta/2) E`` where ``Hbar = diag(-lambda_neg, 1, ..., 1)``,
    ``E`` is a fixed symmetric matrix with unit spectral norm and ``s_p = +1``
    for the first half of the workers, ``-1`` for the second. Each sample adds
    a rank-1 term ``noise * w_j (u_j . x)^2 / 2`` with ``w_j = +-1`` occurring
    in pairs sharing ``u_j``, so it averages out exactly over a worker's data.
    """

    kind = "quartic-saddle"

    def __init__(self, d, P, lambda_neg=1.0, gamma=1.0, zeta=0.0, seed=0,
                 n_per_worker=None, noise=1.0, R_op=None):
        if d < 2:
            raise ContractError("quartic-saddle needs d >= 2")
        if not lambda_neg > 0 or not gamma > 0:
            raise ContractError("lambda_neg and gamma must be positive")
        if zeta < 0 or noise < 0:
            raise ContractError("zeta and noise must be nonnegative")
        if zeta > 0 and P % 2:
            raise ContractError("quartic-saddle with zeta > 0 needs an even worker count")
        m = 2 * d if n_per_worker is None else int(n_per_worker)
        if m < 2 or m % 2:
            raise ContractError("n_per_worker must be a positive even number")

        rng = np.random.default_rng(seed)
        A = rng.standard_normal((d, d))
        E = (A + A.T) / 2
        E /= np.linalg.norm(E, 2)
        self.E = E
        self.lambda_neg = float(lambda_neg)
        self.gamma = float(gamma)
        self.noise = float(noise)
        self.zeta_constructed = float(zeta)
        self.H_bar = np.diag(np.r_[-lambda_neg, np.ones(d - 1)])
        signs = np.array([1.0 if p < P // 2 else -1.0 for p in range(P)]) if P > 1 else np.zeros(1)
        self.H = np.stack([self.H_bar + s * (zeta / 2) * E for s in signs])

        U = rng.standard_normal((P * m // 2, d))
        U /= np.linalg.norm(U, axis=1, keepdims=True)
        self.U = np.repeat(U, 2, axis=0)
        self.w = np.tile([1.0, -1.0], P * m // 2)

        if R_op is None:
            R_op = 3.0 * max(1.0, math.sqrt(lambda_neg / gamma))
        Hn = max(np.linalg.norm(Hp, 2) for Hp in self.H)
        L = Hn + noise + 3 * gamma * R_op**2
        consts = Constants(
            L=L,
            rho=6 * gamma * R_op,
            G=(Hn + noise) * R_op + gamma * R_op**3,
            zeta=float(zeta),
        )
        super().__init__(d, P, m, consts, f_star=-lambda_neg**2 / (4 * gamma), R_op=float(R_op))

    def batch_loss_grad(self, x, idx):
        p = idx[0] // self.m
        Ub = self.U[idx]
        wb = self.w[idx]
        Hx = self.H[p] @ x
        ux = Ub @ x
        sq = x @ x
        loss = 0.5 * x @ Hx + 0.5 * self.noise * np.mean(wb * ux * ux) + 0.25 * self.gamma * sq * sq
        g = Hx + self.noise * kernels.quartic_noise_grad(x, Ub, wb) + self.gamma * sq * x
        return float(loss), g

    def batch_grad(self, x, idx):
        p = idx[0] // self.m
        return (self.H[p] @ x
                + self.noise * kernels.quartic_noise_grad(x, self.U[idx], self.w[idx])
                + self.gamma * (x @ x) * x)

    def batch_hvp(self, x, v, idx):
        p = idx[0] // self.m
        Ub = self.U[idx]
        wb = self.w[idx]
        return (self.H[p] @ v
                + self.noise * Ub.T @ (wb * (Ub @ v)) / len(idx)
                + self.gamma * ((x @ x) * v + 2 * (x @ v) * x))

    def dense_hessian(self, x, scope=None):
        x = self._check_x(x)
        quart = self.gamma * ((x @ x) * np.eye(self.dim) + 2 * np.outer(x, x))
        workers = range(self.P) if scope is None else [scope]
        out = np.zeros((self.dim, self.dim))
        for p in workers:
            sl = self.local_slice(p)
            Ub, wb = self.U[sl], self.w[sl]
            out += self.H[p] + self.noise * (Ub.T * wb) @ Ub / self.m
        return out / len(workers) + quart

    def initial_point(self, rng, how="default"):
        if how in ("default", "saddle", "zeros"):
            return np.zeros(self.dim)
        if how == "random":
            x = rng.standard_normal(self.dim)
            return x / np.linalg.norm(x) * min(1.0, self.R_op / 2)
        raise ContractError(f"unknown init {how!r} for {self.kind}")


def build_quartic_saddle(d, P, lambda_neg=1.0, gamma=1.0, zeta=0.0, seed=0, **kw):
    return QuarticSaddle(d, P, lambda_neg=lambda_neg, gamma=gamma, zeta=zeta, seed=seed, **kw)


# ------------------------------------------------------- classification data


def make_gaussian_classes(n, d_in, C, sep=2.0, seed=0):
    """Balanced Gaussian clusters: class means ``sep * N(0, I/d_in)``, unit noise."""
    rng = np.random.default_rng(seed)
    means = sep * rng.standard_normal((C, d_in))
    y = np.arange(n) % C
    rng.shuffle(y)
    X = means[y] + rng.standard_normal((n, d_in))
    return X, y.astype(np.int64)


def train_test_split(X, y, seed=0, train_frac=0.8):
    perm = np.random.default_rng(seed).permutation(len(y))
    n_tr = int(round(train_frac * len(y)))
    tr, te = perm[:n_tr], perm[n_tr:]
    return X[tr], y[tr], X[te], y[te]


def _even_shares(total, workers, capacity, offset):
    """Split ``total`` units as evenly as possible over ``workers`` (water-filling).

    Never exceeds ``capacity``; returns the per-worker amounts and the unplaced
    remainder.
    """
    give = {p: 0 for p in workers}
    left = total
    active = [p for p in workers if capacity[p] > 0]
    while left > 0 and active:
        share = left // len(active)
        if share == 0:
            rot = offset % len(active)
            ordered = active[rot:] + active[:rot]
            for p in ordered[:left]:
                give[p] += 1
            left = 0
            break
        for p in active:
            take = min(share, capacity[p] - give[p])
            give[p] += take
            left -= take
        active = [p for p in active if capacity[p] - give[p] > 0]
    return give, left


def partition_label_skew(labels, P, q, seed=0, n_classes=None):
    """Split sample ids into ``P`` equal-size worker datasets with label skew.

    Worker ``p`` has dominant class ``p mod C``. It receives ``round(q * n/P)``
    samples of that class; its remaining slots are spread as evenly as
    possible over the other classes. ``q = 1/C`` gives (near-)uniform class
    histograms, ``q = 1`` with ``P = C`` gives one class per worker.

    Returns a list of ``P`` int arrays indexing into ``labels``.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if P < 1 or n % P:
        raise ContractError(f"n={n} is not divisible by P={P}")
    if not 0.0 <= q <= 1.0:
        raise ContractError("q must lie in [0, 1]")
    C = int(labels.max()) + 1 if n_classes is None else int(n_classes)
    m = n // P
    rng = np.random.default_rng(seed)
    pools = [list(rng.permutation(np.flatnonzero(labels == c))) for c in range(C)]
    dominant = [p % C for p in range(P)]

    counts = np.zeros((P, C), dtype=np.int64)
    for p in range(P):
        c = dominant[p]
        take = min(int(round(q * m)), len(pools[c]) - int(counts[:, c].sum()))
        counts[p, c] = take
    target = counts[np.arange(P), dominant].copy()
    capacity = {p: m - int(counts[p].sum()) for p in range(P)}
    leftover = [len(pools[c]) - int(counts[:, c].sum()) for c in range(C)]

    def n_eligible(c):
        return sum(1 for p in range(P) if dominant[p] != c)

    for c in sorted(range(C), key=lambda c: (n_eligible(c), c)):
        elig = [p for p in range(P) if dominant[p] != c]
        give, rest = _even_shares(leftover[c], elig, capacity, offset=c)
        if rest:
            spill, rest = _even_shares(rest, list(range(P)), {p: capacity[p] - give.get(p, 0) for p in range(P)}, c)
            for p, k in spill.items():
                give[p] = give.get(p, 0) + k
        for p, k in give.items():
            counts[p, c] += k
            capacity[p] -= k
        assert rest == 0

    # spill-over can land a class on its own dominant worker; swap it against
    # a non-dominant unit held elsewhere so dominant counts hit their target
    for p in range(P):
        c = dominant[p]
        excess = int(counts[p, c]) - int(target[p])
        for p2 in range(P):
            if excess <= 0:
                break
            if dominant[p2] == c:
                continue
            for c2 in range(C):
                if c2 in (c, dominant[p2]) or excess <= 0:
                    continue
                k = min(excess, int(counts[p2, c2]))
                counts[p2, c2] -= k
                counts[p, c2] += k
                counts[p2, c] += k
                counts[p, c] -= k
                excess -= k

    parts = []
    cursor = [0] * C
    for p in range(P):
        ids = []
        for c in range(C):
            k = int(counts[p, c])
            ids.extend(pools[c][cursor[c]:cursor[c] + k])
            cursor[c] += k
        parts.append(rng.permutation(np.asarray(ids, dtype=np.int64)))
    return parts


class _Classification(Problem):
    has_accuracy = True

    def __init__(self, dim, X, y, X_test, y_test, P, q, seed, n_classes, constants_fn):
        parts = partition_label_skew(y, P, q, seed=seed, n_classes=n_classes)
        order = np.concatenate(parts)
        self.X = np.ascontiguousarray(X[order])
        self.y = np.ascontiguousarray(y[order])
        self.X_test = np.ascontiguousarray(X_test)
        self.y_test = np.ascontiguousarray(y_test)
        self.C = n_classes
        self.d_in = X.shape[1]
        self.q = q
        super().__init__(dim, P, len(y) // P, None, f_star=0.0)
        self.constants = constants_fn()

    def _kernel(self, x, X, y):
        raise NotImplementedError

    def batch_loss_grad(self, x, idx):
        loss, g, _ = self._kernel(x, self.X[idx], self.y[idx])
        return loss, g

    def local_loss(self, p, x):
        sl = self.local_slice(p)
        return float(self._kernel(x, self.X[sl], self.y[sl])[0])

    def local_grad(self, p, x):
        sl = self.local_slice(p)
        return self._kernel(x, self.X[sl], self.y[sl])[1]

    def class_histogram(self, p):
        return np.bincount(self.y[self.local_slice(p)], minlength=self.C)

    def evaluate(self, x):
        # equal worker sizes: the mean over all rows is (1/P) sum_p f_p
        loss, g, correct = self._kernel(x, self.X, self.y)
        tl, tg, tc = self._kernel(x, self.X_test, self.y_test)
        return {
            "train_loss": float(loss),
            "train_grad_norm": float(np.linalg.norm(g)),
            "train_accuracy": correct / len(self.y),
            "test_loss": float(tl),
            "test_grad_norm": float(np.linalg.norm(tg)),
            "test_accuracy": tc / len(self.y_test),
        }


class SoftmaxRegression(_Classification):
    """Multinomial logistic regression (convex)."""

    kind = "softmax-regression"

    def __init__(self, X, y, X_test, y_test, P, q=0.1, seed=0, n_classes=None):
        C = int(max(y.max(), y_test.max())) + 1 if n_classes is None else n_classes
        dim = kernels.softmax_num_params(X.shape[1], C)
        super().__init__(dim, X, y, X_test, y_test, P, q, seed, C, self._constants)

    def _constants(self):
        At = np.hstack([self.X, np.ones((len(self.X), 1))])
        sq = np.einsum("ij,ij->i", At, At)
        # Hessian of CE is (diag(p) - p p^T) (x) a a^T with ||diag(p) - p p^T|| <= 1/2;
        # local Hessians are PSD so ||H_p - H_p'|| <= max_p ||H_p||.
        zeta = max(0.5 * np.linalg.norm(At[self.local_slice(p)].T @ At[self.local_slice(p)] / self.m, 2)
                   for p in range(self.P))
        return Constants(L=0.5 * sq.max(), rho=2 * sq.max() ** 1.5, G=math.sqrt(2 * sq.max()), zeta=zeta)

    def _kernel(self, x, X, y):
        return kernels.softmax_loss_grad(x, X, y, self.d_in, self.C)

    def batch_hvp(self, x, v, idx):
        X = self.X[idx]
        d_in, C = self.d_in, self.C
        o = d_in * C
        Z = X @ x[:o].reshape(d_in, C) + x[o:]
        Z -= Z.max(axis=1, keepdims=True)
        Pm = np.exp(Z)
        Pm /= Pm.sum(axis=1, keepdims=True)
        dZ = X @ v[:o].reshape(d_in, C) + v[o:]
        dP = Pm * (dZ - np.sum(Pm * dZ, axis=1, keepdims=True))
        out = np.empty(self.dim)
        out[:o] = (X.T @ dP).ravel() / len(idx)
        out[o:] = dP.mean(axis=0)
        return out

    def dense_hessian(self, x, scope=None):
        eye = np.eye(self.dim)
        return np.column_stack([self.hessian_vector_product(x, eye[i], scope) for i in range(self.dim)])

    def initial_point(self, rng, how="default"):
        if how in ("default", "zeros"):
            return np.zeros(self.dim)
        if how == "random":
            return 0.1 * rng.standard_normal(self.dim)
        raise ContractError(f"unknown init {how!r} for {self.kind}")


class MLPSoftplus(_Classification):
    """Two hidden softplus layers, cross-entropy loss, hand-written backprop."""

    kind = "mlp-softplus"

    def __init__(self, X, y, X_test, y_test, P, q=0.35, seed=0, hidden=16,
                 n_classes=None, init_scale=0.01):
        C = int(max(y.max(), y_test.max())) + 1 if n_classes is None else n_classes
        self.hidden = hidden
        self.init_scale = init_scale
        dim = kernels.mlp_num_params(X.shape[1], hidden, C)
        super().__init__(dim, X, y, X_test, y_test, P, q, seed, C, self._constants)

    def _constants(self):
        # No closed-form bounds: estimated lazily by estimate_constants().
        return Constants(L=1.0, rho=1.0, G=1.0, zeta=0.0, certified=False)

    def estimate_constants(self, x=None, seed=0):
        """Replace the placeholder constants with numerical estimates at ``x``.

        L is the spectral norm of the global Hessian, zeta the largest pairwise
        local-Hessian gap, G the largest local gradient norm; rho has no cheap
        estimate and is set to L.
        """
        from .diagnostics import estimate_zeta, spectral_norm

        if x is None:
            x = self.initial_point(np.random.default_rng(seed))
        L = spectral_norm(lambda v: self.hessian_vector_product(x, v), self.dim, seed=seed)[0]
        zeta = min(estimate_zeta(self, x, seed=seed), 2 * L)
        G = max(np.linalg.norm(self.local_grad(p, x)) for p in range(self.P))
        self.constants = Constants(L=L, rho=L, G=G, zeta=zeta, certified=False)
        return self.constants

    def _kernel(self, x, X, y):
        return kernels.mlp_loss_grad(x, X, y, self.d_in, self.hidden, self.C)

    def initial_point(self, rng, how="default"):
        if how in ("default", "uniform"):
            return rng.uniform(-self.init_scale, self.init_scale, self.dim)
        if how == "zeros":
            return np.zeros(self.dim)
        raise ContractError(f"unknown init {how!r} for {self.kind}")


def _classification_data(n, d_in, C, sep, data_seed, P):
    X, y = make_gaussian_classes(n, d_in, C, sep=sep, seed=data_seed)
    Xtr, ytr, Xte, yte = train_test_split(X, y, seed=data_seed + 1)
    if len(ytr) % P:
        raise ContractError(f"training size {len(ytr)} (80% of n={n}) is not divisible by P={P}")
    return Xtr, ytr, Xte, yte


def build_softmax_regression(P, q=0.1, n=1000, d_in=8, C=4, sep=2.0, seed=0):
    Xtr, ytr, Xte, yte = _classification_data(n, d_in, C, sep, seed, P)
    return SoftmaxRegression(Xtr, ytr, Xte, yte, P, q=q, seed=seed, n_classes=C)


def build_mlp_softplus(P, q=0.35, n=5000, d_in=16, C=10, hidden=16, sep=2.0, seed=0,
                       init_scale=0.01):
    Xtr, ytr, Xte, yte = _classification_data(n, d_in, C, sep, seed, P)
    return MLPSoftplus(Xtr, ytr, Xte, yte, P, q=q, seed=seed, hidden=hidden,
                       n_classes=C, init_scale=init_scale)


BUILDERS = {
    "quartic-saddle": build_quartic_saddle,
    "softmax-regression": build_softmax_regression,
    "mlp-softplus": build_mlp_softplus,
}


def build_problem(spec):
    """Build a problem from a mapping with a ``kind`` key plus builder kwargs."""
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind not in BUILDERS:
        raise ContractError(f"unknown problem kind {kind!r}; expected one of {sorted(BUILDERS)}")
    try:
        return BUILDERS[kind](**spec)
    except TypeError as exc:
        raise ContractError(f"bad parameters for {kind}: {exc}") from None
