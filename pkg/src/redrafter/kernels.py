"""Dense float32 kernels used by the base models.

Every reduction here runs in a fixed, data-independent order: single-precision
accumulation, left to right.  The exact-output guarantee of the decode loop
relies on the packed-verification path and the plain causal path producing
bitwise-identical logits, which only holds if masked-out attention entries
contribute exact zeros to sums taken in the same order.

The hot kernels (``matmul``, ``row_softmax``) have numba-compiled versions.
Backend selection happens at import time: numba when available, unless
``REDRAFTER_BACKEND=numpy`` forces the pure-numpy fallback.  Both lanes
implement the same fixed-order arithmetic; within one process all calls go
through the same lane.
"""

import os

import numpy as np

from .errors import ShapeError

_NEG_BIAS = np.float32(-1e9)  # additive mask penalty; exp() underflows to exact 0.0


def _as_f32(a):
    return np.ascontiguousarray(a, dtype=np.float32)


# ---------------------------------------------------------------------------
# pure-numpy lane
# ---------------------------------------------------------------------------

def _matmul_numpy(a, b):
    # Accumulate over k sequentially so every output element sees the same
    # rounding sequence as the naive i,j,k triple loop.
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float32)
    for k in range(a.shape[1]):
        out += a[:, k, None] * b[None, k, :]
    return out


def _attend_numpy(q, keys, vals, bias, n_heads, scale):
    n, d = q.shape
    dh = d // n_heads
    out = np.empty_like(q)
    for head in range(n_heads):
        sl = slice(head * dh, (head + 1) * dh)
        scores = _matmul_numpy(q[:, sl], np.ascontiguousarray(keys[:, sl].T)) * scale + bias
        probs = _row_softmax_numpy(scores)
        out[:, sl] = _matmul_numpy(probs, vals[:, sl])
    return out


def _row_softmax_numpy(scores):
    m = scores.max(axis=1, keepdims=True)
    e = np.exp(scores - m)
    total = np.zeros(scores.shape[0], dtype=np.float32)
    for j in range(scores.shape[1]):  # sequential sum: exact zeros are identity
        total += e[:, j]
    return e / total[:, None]


# ---------------------------------------------------------------------------
# numba lane
# ---------------------------------------------------------------------------

try:
    from numba import njit

    HAVE_NUMBA = True

    @njit(cache=True)
    def _matmul_numba(a, b):
        m, kk = a.shape
        n = b.shape[1]
        out = np.zeros((m, n), dtype=np.float32)
        for i in range(m):
            for j in range(n):
                acc = np.float32(0.0)
                for k in range(kk):
                    p = a[i, k] * b[k, j]
                    acc = acc + p
                out[i, j] = acc
        return out

    @njit(cache=True)
    def _row_softmax_numba(scores):
        n, m = scores.shape
        out = np.empty((n, m), dtype=np.float32)
        for i in range(n):
            mx = scores[i, 0]
            for j in range(1, m):
                if scores[i, j] > mx:
                    mx = scores[i, j]
            total = np.float32(0.0)
            for j in range(m):
                e = np.exp(scores[i, j] - mx)
                out[i, j] = e
                total = total + e
            for j in range(m):
                out[i, j] = out[i, j] / total
        return out

    @njit(cache=True)
    def _attend_numba(q, keys, vals, bias, n_heads, scale):
        n, d = q.shape
        m = keys.shape[0]
        dh = d // n_heads
        out = np.empty((n, d), dtype=np.float32)
        w = np.empty(m, dtype=np.float32)
        for head in range(n_heads):
            lo = head * dh
            for i in range(n):
                mx = np.float32(-np.inf)
                for j in range(m):
                    acc = np.float32(0.0)
                    for k in range(dh):
                        acc = acc + q[i, lo + k] * keys[j, lo + k]
                    s = acc * scale + bias[i, j]
                    w[j] = s
                    if s > mx:
                        mx = s
                total = np.float32(0.0)
                for j in range(m):
                    e = np.exp(w[j] - mx)
                    w[j] = e
                    total = total + e
                for j in range(m):
                    w[j] = w[j] / total
                for k in range(dh):
                    acc = np.float32(0.0)
                    for j in range(m):
                        acc = acc + w[j] * vals[j, lo + k]
                    out[i, lo + k] = acc
        return out

except ImportError:  # pragma: no cover - exercised only without numba installed
    HAVE_NUMBA = False
    _matmul_numba = None
    _row_softmax_numba = None
    _attend_numba = None


_LANES = {"numpy": (_matmul_numpy, _row_softmax_numpy, _attend_numpy)}
if HAVE_NUMBA:
    _LANES["numba"] = (_matmul_numba, _row_softmax_numba, _attend_numba)

_requested = os.environ.get("REDRAFTER_BACKEND", "")
if _requested:
    if _requested not in _LANES:
        raise ImportError(f"REDRAFTER_BACKEND={_requested!r} not available "
                          f"(choices: {sorted(_LANES)})")
    BACKEND = _requested
else:
    BACKEND = "numba" if HAVE_NUMBA else "numpy"

_matmul_impl, _row_softmax_impl, _attend_impl = _LANES[BACKEND]


def get_lane(name):
    """Return (matmul, row_softmax, attend) for an explicit lane; used by the
    backend benchmark."""
    return _LANES[name]


def available_lanes():
    return sorted(_LANES)


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Float32 matrix product with fixed-order accumulation.

    Bitwise-equal to the naive triple loop; no data-dependent reordering.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return _matmul_impl(_as_f32(a), _as_f32(b))


def row_softmax(scores):
    """Row-wise softmax with sequential float32 summation.

    Entries at ``scores + _NEG_BIAS`` exp-underflow to exact 0.0 and therefore
    do not perturb the remaining rows' rounding sequence.
    """
    scores = np.asarray(scores)
    if scores.ndim != 2 or scores.shape[1] == 0:
        raise ShapeError(f"row_softmax expects a non-empty 2-D array, got {scores.shape}")
    return _row_softmax_impl(_as_f32(scores))


def log_softmax(v):
    """Numerically stabilized log-softmax of a vector (max subtraction)."""
    v = np.asarray(v)
    if v.ndim != 1 or v.size == 0:
        raise ShapeError(f"log_softmax expects a non-empty vector, got shape {v.shape}")
    s = v - v.max()
    return (s - np.log(np.exp(s).sum())).astype(v.dtype if v.dtype.kind == "f" else np.float64)


def argmax_tie_low(v):
    """Index of the maximum value; ties break toward the lowest index."""
    v = np.asarray(v)
    if v.ndim != 1 or v.size == 0:
        raise ShapeError(f"argmax_tie_low expects a non-empty vector, got shape {v.shape}")
    return int(np.argmax(v))


def top_k(v, k):
    """The k largest values, sorted descending; equal values keep ascending index order."""
    v = np.asarray(v)
    if v.ndim != 1 or v.size == 0:
        raise ShapeError(f"top_k expects a non-empty vector, got shape {v.shape}")
    if not 1 <= k <= v.size:
        raise ShapeError(f"top_k: k={k} out of range for vector of length {v.size}")
    order = np.argsort(-v, kind="stable")[:k]
    return order, v[order]


def attend(q, keys, vals, bias, n_heads, scale):
    """Multi-head scaled-dot attention over an explicit key/value set.

    ``bias`` is additive per (query, key); disallowed keys carry the large
    negative penalty and end up with softmax weight exactly 0.0, so the
    surviving keys see the same rounding sequence as a dense causal row.
    """
    if q.shape[0] != bias.shape[0] or keys.shape[0] != bias.shape[1]:
        raise ShapeError(f"attend: bias {bias.shape} does not match "
                         f"q {q.shape} / keys {keys.shape}")
    if keys.shape != vals.shape or q.shape[1] != keys.shape[1]:
        raise ShapeError(f"attend: incompatible shapes q {q.shape}, keys {keys.shape}, "
                         f"vals {vals.shape}")
    return _attend_impl(_as_f32(q), _as_f32(keys), _as_f32(vals), _as_f32(bias),
                        n_heads, np.float32(scale))


def masked_bias(allowed):
    """Boolean mask -> additive float32 bias (0 where allowed, large negative otherwise)."""
    return np.where(allowed, np.float32(0.0), _NEG_BIAS)
