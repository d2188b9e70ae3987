# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: fused LSTM gate math and DTW accumulation.

Signatures and results mirror :mod:`sblm._kernels_py` exactly.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


_affine_cache = {}


def _gate_affine(H, dtype):
    """Per-column scale/offset turning ``tanh`` into the gate activations
    (sigmoid(x) = 0.5 * tanh(x / 2) + 0.5 for i, f, o; plain tanh for g)."""
    key = (H, np.dtype(dtype).str)
    if key not in _affine_cache:
        half = np.full(H, 0.5, dtype=dtype)
        one = np.ones(H, dtype=dtype)
        zero = np.zeros(H, dtype=dtype)
        _affine_cache[key] = (np.concatenate([half, half, one, half]),
                              np.concatenate([half, half, zero, half]))
    return _affine_cache[key]


def lstm_gates_forward(real[:, ::1] pre, real[:, ::1] c_prev):
    """Activate pre-gates (order i, f, g, o) and advance the cell state.

    The transcendental work goes through numpy's vectorized ``tanh``, which
    is far faster than scalar libm calls; the gate affine and cell update
    are fused here.
    """
    cdef Py_ssize_t B = pre.shape[0]
    cdef Py_ssize_t H = c_prev.shape[1]
    if pre.shape[1] != 4 * H or c_prev.shape[0] != B:
        raise ValueError("gate/state shape mismatch")
    dtype = np.float32 if real is float else np.float64
    scale, _ = _gate_affine(H, dtype)
    gates_a = np.tanh(np.multiply(pre, scale))
    c_a = np.empty((B, H), dtype=dtype)
    cdef real[:, ::1] gates = gates_a
    cdef real[:, ::1] c = c_a
    cdef Py_ssize_t b, k
    cdef real i_, f_, g_, o_, half = 0.5
    with nogil:
        for b in range(B):
            for k in range(H):
                i_ = gates[b, k] * half + half
                f_ = gates[b, H + k] * half + half
                g_ = gates[b, 2 * H + k]
                o_ = gates[b, 3 * H + k] * half + half
                gates[b, k] = i_
                gates[b, H + k] = f_
                gates[b, 3 * H + k] = o_
                c[b, k] = f_ * c_prev[b, k] + i_ * g_
    tc_a = np.tanh(c_a)
    h_a = np.multiply(gates_a[:, 3 * H:], tc_a)
    return gates_a, c_a, tc_a, h_a


def lstm_gates_backward(real[:, ::1] gates, real[:, ::1] c_prev,
                        real[:, ::1] tanh_c, real[:, ::1] dh,
                        real[:, ::1] dc_next):
    """Backpropagate through one activated cell; returns (dpre, dc_prev)."""
    cdef Py_ssize_t B = dh.shape[0]
    cdef Py_ssize_t H = dh.shape[1]
    dtype = np.float32 if real is float else np.float64
    dpre_a = np.empty((B, 4 * H), dtype=dtype)
    dcp_a = np.empty((B, H), dtype=dtype)
    cdef real[:, ::1] dpre = dpre_a
    cdef real[:, ::1] dcp = dcp_a
    cdef Py_ssize_t b, k
    cdef real i_, f_, g_, o_, t, dc, one = 1.0
    with nogil:
        for b in range(B):
            for k in range(H):
                i_ = gates[b, k]
                f_ = gates[b, H + k]
                g_ = gates[b, 2 * H + k]
                o_ = gates[b, 3 * H + k]
                t = tanh_c[b, k]
                dc = dc_next[b, k] + dh[b, k] * o_ * (one - t * t)
                dpre[b, k] = dc * g_ * i_ * (one - i_)
                dpre[b, H + k] = dc * c_prev[b, k] * f_ * (one - f_)
                dpre[b, 2 * H + k] = dc * i_ * (one - g_ * g_)
                dpre[b, 3 * H + k] = dh[b, k] * t * o_ * (one - o_)
                dcp[b, k] = dc * f_
    return dpre_a, dcp_a


def dtw(double[:, ::1] cost):
    """Cumulative DTW cost with steps (1,0), (0,1), (1,1) and the optimal path."""
    cdef Py_ssize_t n = cost.shape[0]
    cdef Py_ssize_t m = cost.shape[1]
    if n == 0 or m == 0:
        raise ValueError("empty cost matrix")
    acc_a = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] acc = acc_a
    cdef Py_ssize_t i, j
    cdef double best
    with nogil:
        acc[0, 0] = cost[0, 0]
        for j in range(1, m):
            acc[0, j] = acc[0, j - 1] + cost[0, j]
        for i in range(1, n):
            acc[i, 0] = acc[i - 1, 0] + cost[i, 0]
            for j in range(1, m):
                best = acc[i - 1, j - 1]
                if acc[i - 1, j] < best:
                    best = acc[i - 1, j]
                if acc[i, j - 1] < best:
                    best = acc[i, j - 1]
                acc[i, j] = best + cost[i, j]

    path_a = np.empty((n + m - 1, 2), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] path = path_a
    cdef Py_ssize_t L = 0
    i = n - 1
    j = m - 1
    with nogil:
        while True:
            path[L, 0] = i
            path[L, 1] = j
            L += 1
            if i == 0 and j == 0:
                break
            if i == 0:
                j -= 1
            elif j == 0:
                i -= 1
            else:
                best = acc[i - 1, j - 1]
                if acc[i - 1, j] < best and acc[i - 1, j] <= acc[i, j - 1]:
                    i -= 1
                elif acc[i, j - 1] < best:
                    j -= 1
                else:
                    i -= 1
                    j -= 1
    return acc_a, path_a[:L][::-1].copy()
