"""Low-level array kernels with an optional numba fast path.

Every kernel exists twice: a numba ``@njit`` body and a plain numpy body.
The numba path is used when numba imports cleanly and the environment
variable ``MIRRORMETA_DISABLE_NUMBA`` is unset (or ``0``).  Both paths are
exposed so the benchmark and the tests can compare them directly.
"""

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is optional
    HAVE_NUMBA = False


def _flag_disabled():
    return os.environ.get("MIRRORMETA_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")


USE_NUMBA = HAVE_NUMBA and not _flag_disabled()


# ---------------------------------------------------------------- numpy path

def scatter_add_numpy(values, index, size):
    out = np.zeros(size)
    np.add.at(out, index, values)
    return out


def logistic_numpy(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_softmax_rows_numpy(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_xent_numpy(logits, labels):
    logp = log_softmax_rows_numpy(logits)
    return -logp[np.arange(logits.shape[0]), labels].mean()


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def scatter_add_numba(values, index, size):
        out = np.zeros(size)
        for k in range(index.shape[0]):
            out[index[k]] += values[k]
        return out

    @njit(cache=True)
    def logistic_numba(x):
        out = np.empty_like(x)
        for k in range(x.shape[0]):
            v = x[k]
            if v >= 0:
                out[k] = 1.0 / (1.0 + np.exp(-v))
            else:
                e = np.exp(v)
                out[k] = e / (1.0 + e)
        return out

    @njit(cache=True)
    def log_softmax_rows_numba(logits):
        n, m = logits.shape
        out = np.empty_like(logits)
        for i in range(n):
            mx = logits[i, 0]
            for j in range(1, m):
                if logits[i, j] > mx:
                    mx = logits[i, j]
            acc = 0.0
            for j in range(m):
                acc += np.exp(logits[i, j] - mx)
            lse = mx + np.log(acc)
            for j in range(m):
                out[i, j] = logits[i, j] - lse
        return out

    @njit(cache=True)
    def softmax_xent_numba(logits, labels):
        logp = log_softmax_rows_numba(logits)
        total = 0.0
        for i in range(logits.shape[0]):
            total -= logp[i, labels[i]]
        return total / logits.shape[0]

else:  # pragma: no cover
    scatter_add_numba = scatter_add_numpy
    logistic_numba = logistic_numpy
    log_softmax_rows_numba = log_softmax_rows_numpy
    softmax_xent_numba = softmax_xent_numpy


# ---------------------------------------------------------------- dispatch

def scatter_add(values, index, size):
    """Sum ``values`` into a zero vector of length ``size`` at ``index`` (flat, repeats allowed)."""
    values = np.ascontiguousarray(values, dtype=np.float64).ravel()
    index = np.ascontiguousarray(index, dtype=np.int64).ravel()
    if USE_NUMBA:
        return scatter_add_numba(values, index, size)
    return scatter_add_numpy(values, index, size)


def logistic(x):
    x = np.asarray(x, dtype=np.float64)
    flat = np.ascontiguousarray(x).ravel()
    out = logistic_numba(flat) if USE_NUMBA else logistic_numpy(flat)
    return out.reshape(x.shape)


def log_softmax_rows(logits):
    logits = np.ascontiguousarray(logits, dtype=np.float64)
    if USE_NUMBA:
        return log_softmax_rows_numba(logits)
    return log_softmax_rows_numpy(logits)


def softmax_xent(logits, labels):
    logits = np.ascontiguousarray(logits, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    if USE_NUMBA:
        return float(softmax_xent_numba(logits, labels))
    return float(softmax_xent_numpy(logits, labels))


def warmup():
    """Trigger compilation of every numba kernel on tiny inputs."""
    if not USE_NUMBA:
        return
    scatter_add(np.ones(2), np.array([0, 0]), 1)
    logistic(np.array([-1.0, 1.0]))
    softmax_xent(np.zeros((1, 2)), np.array([0]))
