"""Batch loss/gradient kernels.

Each kernel has a vectorized numpy implementation and a loop-based
implementation compiled with numba. The public names route small batches to
the compiled version and large ones to numpy, unless JIT is disabled (see
:mod:`bvrlp._jit`), in which case numpy handles everything. Both paths
compute the same quantities; they agree to rounding, not bitwise.

Parameter layout for the MLP (flat vector ``x``)::

    W1 (d_in, h) | b1 (h) | W2 (h, h) | b2 (h) | W3 (h, C) | b3 (C)

and for softmax regression::

    W (d_in, C) | b (C)
"""

import numpy as np

from ._jit import USE_NUMBA, njit


def mlp_num_params(d_in, h, C):
    return d_in * h + h + h * h + h + h * C + C


def softmax_num_params(d_in, C):
    return d_in * C + C


# ---------------------------------------------------------------- numpy path


def _softplus_sigmoid(z):
    """Softplus and its derivative from a single exp."""
    e = np.exp(-np.abs(z))
    sp = np.maximum(z, 0.0) + np.log1p(e)
    e += 1.0
    sig = np.where(z >= 0, 1.0, e - 1.0)
    sig /= e
    return sp, sig


def _ce_head(logits, y):
    """Mean cross-entropy, d(loss)/d(logits) and number of correct argmaxes."""
    m = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    sumexp = expz.sum(axis=1)
    rows = np.arange(m)
    loss = np.mean(np.log(sumexp) - shifted[rows, y])
    probs = expz / sumexp[:, None]
    probs[rows, y] -= 1.0
    correct = int(np.count_nonzero(np.argmax(logits, axis=1) == y))
    return loss, probs / m, correct


def _mlp_loss_grad_np(x, X, y, d_in, h, C):
    o1 = d_in * h
    o2 = o1 + h
    o3 = o2 + h * h
    o4 = o3 + h
    o5 = o4 + h * C
    W1 = x[:o1].reshape(d_in, h)
    b1 = x[o1:o2]
    W2 = x[o2:o3].reshape(h, h)
    b2 = x[o3:o4]
    W3 = x[o4:o5].reshape(h, C)
    b3 = x[o5:]

    A1, S1 = _softplus_sigmoid(X @ W1 + b1)
    A2, S2 = _softplus_sigmoid(A1 @ W2 + b2)
    Z3 = A2 @ W3 + b3
    loss, dZ3, correct = _ce_head(Z3, y)

    g = np.empty_like(x)
    g[o4:o5] = (A2.T @ dZ3).ravel()
    g[o5:] = dZ3.sum(axis=0)
    dZ2 = (dZ3 @ W3.T) * S2
    g[o2:o3] = (A1.T @ dZ2).ravel()
    g[o3:o4] = dZ2.sum(axis=0)
    dZ1 = (dZ2 @ W2.T) * S1
    g[:o1] = (X.T @ dZ1).ravel()
    g[o1:o2] = dZ1.sum(axis=0)
    return loss, g, correct


def _softmax_loss_grad_np(x, X, y, d_in, C):
    o1 = d_in * C
    W = x[:o1].reshape(d_in, C)
    b = x[o1:]
    loss, dZ, correct = _ce_head(X @ W + b, y)
    g = np.empty_like(x)
    g[:o1] = (X.T @ dZ).ravel()
    g[o1:] = dZ.sum(axis=0)
    return loss, g, correct


def _quartic_noise_grad_np(x, U, w):
    """Mean over rows of ``w_j (u_j . x) u_j``."""
    return U.T @ (w * (U @ x)) / U.shape[0]


# ---------------------------------------------------------------- numba path


@njit
def _ce_head_loops(logits, y):
    m, C = logits.shape
    loss = 0.0
    correct = 0
    d = np.empty((m, C))
    for i in range(m):
        mx = logits[i, 0]
        am = 0
        for c in range(1, C):
            if logits[i, c] > mx:
                mx = logits[i, c]
                am = c
        s = 0.0
        for c in range(C):
            d[i, c] = np.exp(logits[i, c] - mx)
            s += d[i, c]
        loss += np.log(s) - (logits[i, y[i]] - mx)
        for c in range(C):
            d[i, c] /= s
        d[i, y[i]] -= 1.0
        if am == y[i]:
            correct += 1
    for i in range(m):
        for c in range(C):
            d[i, c] /= m
    return loss / m, d, correct


@njit
def _softplus_sigmoid_loops(Z):
    m, h = Z.shape
    A = np.empty((m, h))
    S = np.empty((m, h))
    for i in range(m):
        for j in range(h):
            z = Z[i, j]
            e = np.exp(-abs(z))
            A[i, j] = max(z, 0.0) + np.log1p(e)
            if z >= 0:
                S[i, j] = 1.0 / (1.0 + e)
            else:
                S[i, j] = e / (1.0 + e)
    return A, S


@njit
def _add_bias(Z, b):
    m, k = Z.shape
    for i in range(m):
        for j in range(k):
            Z[i, j] += b[j]


@njit
def _col_sum(D, out):
    m, k = D.shape
    for j in range(k):
        out[j] = 0.0
    for i in range(m):
        for j in range(k):
            out[j] += D[i, j]


@njit
def _mlp_loss_grad_jit(x, X, y, d_in, h, C):
    o1 = d_in * h
    o2 = o1 + h
    o3 = o2 + h * h
    o4 = o3 + h
    o5 = o4 + h * C
    W1 = np.ascontiguousarray(x[:o1]).reshape((d_in, h))
    b1 = x[o1:o2]
    W2 = np.ascontiguousarray(x[o2:o3]).reshape((h, h))
    b2 = x[o3:o4]
    W3 = np.ascontiguousarray(x[o4:o5]).reshape((h, C))
    b3 = x[o5:]

    Z1 = np.dot(X, W1)
    _add_bias(Z1, b1)
    A1, S1 = _softplus_sigmoid_loops(Z1)
    Z2 = np.dot(A1, W2)
    _add_bias(Z2, b2)
    A2, S2 = _softplus_sigmoid_loops(Z2)
    Z3 = np.dot(A2, W3)
    _add_bias(Z3, b3)
    loss, dZ3, correct = _ce_head_loops(Z3, y)

    g = np.empty(x.shape[0])
    g[o4:o5] = np.dot(A2.T, dZ3).ravel()
    _col_sum(dZ3, g[o5:])
    dZ2 = np.dot(dZ3, W3.T) * S2
    g[o2:o3] = np.dot(A1.T, dZ2).ravel()
    _col_sum(dZ2, g[o3:o4])
    dZ1 = np.dot(dZ2, W2.T) * S1
    g[:o1] = np.dot(X.T, dZ1).ravel()
    _col_sum(dZ1, g[o1:o2])
    return loss, g, correct


@njit
def _softmax_loss_grad_jit(x, X, y, d_in, C):
    o1 = d_in * C
    W = np.ascontiguousarray(x[:o1]).reshape((d_in, C))
    Z = np.dot(X, W)
    _add_bias(Z, x[o1:])
    loss, dZ, correct = _ce_head_loops(Z, y)
    g = np.empty(x.shape[0])
    g[:o1] = np.dot(X.T, dZ).ravel()
    _col_sum(dZ, g[o1:])
    return loss, g, correct


@njit
def _quartic_noise_grad_jit(x, U, w):
    m, d = U.shape
    out = np.zeros(d)
    for i in range(m):
        s = 0.0
        for j in range(d):
            s += U[i, j] * x[j]
        s *= w[i]
        for j in range(d):
            out[j] += s * U[i, j]
    for j in range(d):
        out[j] /= m
    return out


NUMPY_KERNELS = {
    "mlp_loss_grad": _mlp_loss_grad_np,
    "softmax_loss_grad": _softmax_loss_grad_np,
    "quartic_noise_grad": _quartic_noise_grad_np,
}
JIT_KERNELS = {
    "mlp_loss_grad": _mlp_loss_grad_jit,
    "softmax_loss_grad": _softmax_loss_grad_jit,
    "quartic_noise_grad": _quartic_noise_grad_jit,
}

# Above this many rows the vectorized numpy path beats the scalar numba
# loops (crossovers measured by benchmarks/bench_kernels.py).
JIT_MAX_ROWS = {
    "mlp_loss_grad": 160,
    "softmax_loss_grad": 4096,
    "quartic_noise_grad": 1024,
}


def backend_for(name, rows):
    """Which implementation ``name`` uses for a batch of ``rows`` rows."""
    return "numba" if USE_NUMBA and rows <= JIT_MAX_ROWS[name] else "numpy"


def _dispatch(name):
    jit_k = JIT_KERNELS[name]
    np_k = NUMPY_KERNELS[name]
    if not USE_NUMBA:
        return np_k
    limit = JIT_MAX_ROWS[name]

    def kernel(x, X, *args):
        if X.shape[0] <= limit:
            return jit_k(x, X, *args)
        return np_k(x, X, *args)

    kernel.__name__ = name
    kernel.__doc__ = np_k.__doc__
    return kernel


mlp_loss_grad = _dispatch("mlp_loss_grad")
softmax_loss_grad = _dispatch("softmax_loss_grad")
quartic_noise_grad = _dispatch("quartic_noise_grad")
