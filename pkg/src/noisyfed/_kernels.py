"""Hot loops for local SGD.

Two interchangeable backends compute the same minibatch step:

* a numba ``@njit`` path that runs a whole epoch without returning to Python;
* a pure-numpy path with a Python loop over minibatches.

The numba path is used when numba imports and ``NOISYFED_NUMBA`` is not set
to ``0``. Both follow the same operation order, so they agree to rounding
error, but bitwise equality is only guaranteed within a backend.

Parameters are one flat float64 vector holding every weight matrix in
row-major order; ``dims`` holds the layer widths ``d_0 .. d_{L+1}``.
When ``hidden_bias`` is set, the last row of every non-output matrix feeds a
constant unit and is frozen (its gradient is forced to zero).
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


def _env_wants_numba() -> bool:
    return os.environ.get("NOISYFED_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


NUMBA_AVAILABLE = numba is not None
USE_NUMBA = NUMBA_AVAILABLE and _env_wants_numba()


def layer_offsets(dims: np.ndarray) -> np.ndarray:
    offs = np.zeros(len(dims), dtype=np.int64)
    for l in range(len(dims) - 1):
        offs[l + 1] = offs[l] + dims[l + 1] * dims[l]
    return offs


# ---------------------------------------------------------------------------
# numpy backend


def forward_backward_numpy(params, dims, hidden_bias, xb, yb, grad):
    """Mean cross-entropy of the batch; writes the gradient into ``grad``."""
    nw = len(dims) - 1
    offs = layer_offsets(dims)
    batch = xb.shape[0]
    weights = [params[offs[l]:offs[l + 1]].reshape(dims[l + 1], dims[l]) for l in range(nw)]

    acts = [xb]
    pre = []
    a = xb
    for l in range(nw):
        z = a @ weights[l].T
        pre.append(z)
        if l < nw - 1:
            a = np.maximum(z, 0.0)
            acts.append(a)

    logits = pre[-1]
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    s = e.sum(axis=1, keepdims=True)
    rows = np.arange(batch)
    loss = float(np.sum((m[:, 0] + np.log(s[:, 0])) - logits[rows, yb])) / batch

    delta = e / s
    delta[rows, yb] -= 1.0
    delta /= batch
    for l in range(nw - 1, -1, -1):
        g = delta.T @ acts[l]
        if hidden_bias and l < nw - 1:
            g[-1, :] = 0.0
        grad[offs[l]:offs[l + 1]] = g.ravel()
        if l > 0:
            delta = (delta @ weights[l]) * (pre[l - 1] > 0.0)
    return loss


def train_epoch_numpy(params, dims, hidden_bias, X, y, order, lr, batch_size, corr, use_corr):
    """One pass over ``order`` in minibatches, updating ``params`` in place.

    Returns ``(sum of minibatch mean losses, number of steps)``.
    """
    n = order.shape[0]
    grad = np.empty_like(params)
    total = 0.0
    steps = 0
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        total += forward_backward_numpy(params, dims, hidden_bias, X[idx], y[idx], grad)
        if use_corr:
            params -= lr * (grad + corr)
        else:
            params -= lr * grad
        steps += 1
    return total, steps


# ---------------------------------------------------------------------------
# numba backend


def _forward_backward_loops(params, dims, hidden_bias, xb, yb, grad):
    nw = dims.shape[0] - 1
    offs = np.zeros(nw + 1, dtype=np.int64)
    for l in range(nw):
        offs[l + 1] = offs[l] + dims[l + 1] * dims[l]
    batch = xb.shape[0]

    acts = [xb]
    pre = []
    a = xb
    for l in range(nw):
        w = params[offs[l]:offs[l + 1]].reshape((dims[l + 1], dims[l]))
        z = np.dot(a, w.T)
        pre.append(z)
        if l < nw - 1:
            a = np.maximum(z, 0.0)
            acts.append(a)

    logits = pre[nw - 1]
    ncls = logits.shape[1]
    delta = np.empty((batch, ncls))
    loss = 0.0
    for i in range(batch):
        m = logits[i, 0]
        for j in range(1, ncls):
            if logits[i, j] > m:
                m = logits[i, j]
        s = 0.0
        for j in range(ncls):
            e = np.exp(logits[i, j] - m)
            delta[i, j] = e
            s += e
        loss += (m + np.log(s)) - logits[i, yb[i]]
        for j in range(ncls):
            delta[i, j] = delta[i, j] / s
        delta[i, yb[i]] -= 1.0
    delta /= batch

    for l in range(nw - 1, -1, -1):
        g = np.dot(delta.T, acts[l])
        if hidden_bias and l < nw - 1:
            g[g.shape[0] - 1, :] = 0.0
        grad[offs[l]:offs[l + 1]] = g.ravel()
        if l > 0:
            w = params[offs[l]:offs[l + 1]].reshape((dims[l + 1], dims[l]))
            back = np.dot(delta, w)
            z = pre[l - 1]
            for i in range(back.shape[0]):
                for j in range(back.shape[1]):
                    if not z[i, j] > 0.0:
                        back[i, j] = 0.0
            delta = back
    return loss / batch


def _train_epoch_loops(params, dims, hidden_bias, X, y, order, lr, batch_size, corr, use_corr):
    n = order.shape[0]
    grad = np.empty_like(params)
    total = 0.0
    steps = 0
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        idx = order[start:stop]
        total += forward_backward_numba(params, dims, hidden_bias, X[idx], y[idx], grad)
        if use_corr:
            for j in range(params.shape[0]):
                params[j] -= lr * (grad[j] + corr[j])
        else:
            for j in range(params.shape[0]):
                params[j] -= lr * grad[j]
        steps += 1
    return total, steps


if NUMBA_AVAILABLE:
    forward_backward_numba = numba.njit(cache=True, nogil=True)(_forward_backward_loops)
    train_epoch_numba = numba.njit(cache=True, nogil=True)(_train_epoch_loops)
else:  # pragma: no cover
    forward_backward_numba = None
    train_epoch_numba = None


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"


def forward_backward(params, dims, hidden_bias, xb, yb, grad, use_numba=None):
    if use_numba is None:
        use_numba = USE_NUMBA
    if use_numba:
        return forward_backward_numba(params, dims, hidden_bias, xb, yb, grad)
    return forward_backward_numpy(params, dims, hidden_bias, xb, yb, grad)


def train_epoch(params, dims, hidden_bias, X, y, order, lr, batch_size, corr=None, use_numba=None):
    if use_numba is None:
        use_numba = USE_NUMBA
    use_corr = corr is not None
    if corr is None:
        corr = np.zeros(0)
    fn = train_epoch_numba if use_numba else train_epoch_numpy
    return fn(params, dims, hidden_bias, X, y, order, float(lr), int(batch_size), corr, use_corr)
