"""Pure-Python/numpy fallback for the compiled kernels in ``_kernels.pyx``."""
import numpy as np


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


def lstm_gates_forward(pre, c_prev):
    """Activate pre-gates (order i, f, g, o) and advance the cell state."""
    B, H = c_prev.shape
    if pre.shape != (B, 4 * H):
        raise ValueError("gate/state shape mismatch")
    scale, offset = _gate_affine(H, pre.dtype)
    gates = np.tanh(pre * scale) * scale + offset
    i, f, g, o = gates[:, :H], gates[:, H:2 * H], gates[:, 2 * H:3 * H], gates[:, 3 * H:]
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    return gates, c, tanh_c, o * tanh_c


def lstm_gates_backward(gates, c_prev, tanh_c, dh, dc_next):
    """Backpropagate through one activated cell; returns (dpre, dc_prev)."""
    H = dh.shape[1]
    i, f, g, o = gates[:, :H], gates[:, H:2 * H], gates[:, 2 * H:3 * H], gates[:, 3 * H:]
    dc = dc_next + dh * o * (1.0 - tanh_c * tanh_c)
    dpre = np.empty_like(gates)
    dpre[:, :H] = dc * g * i * (1.0 - i)
    dpre[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
    dpre[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
    dpre[:, 3 * H:] = dh * tanh_c * o * (1.0 - o)
    return dpre, dc * f


def dtw(cost):
    """Cumulative DTW cost with steps (1,0), (0,1), (1,1) and the optimal path."""
    n, m = cost.shape
    if n == 0 or m == 0:
        raise ValueError("empty cost matrix")
    c = cost.tolist()
    acc = [[0.0] * m for _ in range(n)]
    acc[0][0] = c[0][0]
    for j in range(1, m):
        acc[0][j] = acc[0][j - 1] + c[0][j]
    for i in range(1, n):
        prev, row, ci = acc[i - 1], acc[i], c[i]
        row[0] = prev[0] + ci[0]
        for j in range(1, m):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if row[j - 1] < best:
                best = row[j - 1]
            row[j] = best + ci[j]

    path = []
    i, j = n - 1, m - 1
    while True:
        path.append((i, j))
        if i == 0 and j == 0:
            break
        if i == 0:
            j -= 1
        elif j == 0:
            i -= 1
        else:
            best = acc[i - 1][j - 1]
            up, left = acc[i - 1][j], acc[i][j - 1]
            if up < best and up <= left:
                i -= 1
            elif left < best:
                j -= 1
            else:
                i -= 1
                j -= 1
    return np.array(acc, dtype=np.float64), np.array(path[::-1], dtype=np.int64)
