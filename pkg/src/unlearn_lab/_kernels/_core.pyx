# Compiled kernel core. Mirrors np_ref.py; see that module for the
# readable statement of each kernel's contract.

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, sqrt, tanh

cnp.import_array()

BACKEND_NAME = "compiled"

cdef double GELU_C = 0.7978845608028654  # sqrt(2/pi)
cdef double GELU_A = 0.044715


def gelu_fwd(cnp.ndarray x_arr):
    pyshape = (<object> x_arr).shape
    cdef double[::1] x = np.ascontiguousarray(x_arr, dtype=np.float64).reshape(-1)
    cdef Py_ssize_t n = x.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    t_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double[::1] t = t_arr
    cdef Py_ssize_t i
    cdef double xi, ti
    for i in range(n):
        xi = x[i]
        ti = tanh(GELU_C * (xi + GELU_A * xi * xi * xi))
        t[i] = ti
        out[i] = 0.5 * xi * (1.0 + ti)
    return out_arr.reshape(pyshape), t_arr.reshape(pyshape)


def gelu_bwd(cnp.ndarray g_arr, cnp.ndarray x_arr, cnp.ndarray t_arr):
    pyshape = (<object> g_arr).shape
    cdef double[::1] g = np.ascontiguousarray(g_arr, dtype=np.float64).reshape(-1)
    cdef double[::1] x = np.ascontiguousarray(x_arr, dtype=np.float64).reshape(-1)
    cdef double[::1] t = np.ascontiguousarray(t_arr, dtype=np.float64).reshape(-1)
    cdef Py_ssize_t n = x.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    cdef double xi, ti, dinner
    for i in range(n):
        xi = x[i]
        ti = t[i]
        dinner = GELU_C * (1.0 + 3.0 * GELU_A * xi * xi)
        out[i] = g[i] * (0.5 * (1.0 + ti) + 0.5 * xi * (1.0 - ti * ti) * dinner)
    return out_arr.reshape(pyshape)


def lcs_len(cnp.ndarray a_arr, cnp.ndarray b_arr):
    cdef cnp.int64_t[::1] a = np.ascontiguousarray(a_arr, dtype=np.int64)
    cdef cnp.int64_t[::1] b = np.ascontiguousarray(b_arr, dtype=np.int64)
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t m = b.shape[0]
    if n == 0 or m == 0:
        return 0
    cdef cnp.int64_t[::1] prev = np.zeros(m + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] cur = np.zeros(m + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] tmp
    cdef Py_ssize_t i, j
    cdef cnp.int64_t ai, up, left
    for i in range(1, n + 1):
        ai = a[i - 1]
        for j in range(1, m + 1):
            if ai == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                up = prev[j]
                left = cur[j - 1]
                cur[j] = up if up >= left else left
        tmp = prev
        prev = cur
        cur = tmp
    return int(prev[m])


def softmax_xent_fwd(cnp.ndarray logits_arr, cnp.ndarray targets_arr, cnp.ndarray mask_arr):
    cdef double[:, ::1] logits = np.ascontiguousarray(logits_arr, dtype=np.float64)
    cdef cnp.int64_t[::1] targets = np.ascontiguousarray(targets_arr, dtype=np.int64)
    cdef double[::1] mask = np.ascontiguousarray(mask_arr, dtype=np.float64)
    cdef Py_ssize_t n = logits.shape[0]
    cdef Py_ssize_t v = logits.shape[1]
    probs_arr = np.empty((n, v), dtype=np.float64)
    cdef double[:, ::1] probs = probs_arr
    cdef double nll_sum = 0.0
    cdef double row_max, denom, val
    cdef Py_ssize_t i, j
    for i in range(n):
        row_max = logits[i, 0]
        for j in range(1, v):
            if logits[i, j] > row_max:
                row_max = logits[i, j]
        denom = 0.0
        for j in range(v):
            val = exp(logits[i, j] - row_max)
            probs[i, j] = val
            denom += val
        for j in range(v):
            probs[i, j] /= denom
        if mask[i] != 0.0:
            nll_sum -= mask[i] * (logits[i, targets[i]] - row_max - log(denom))
    return float(nll_sum), probs_arr


def softmax_xent_bwd(cnp.ndarray probs_arr, cnp.ndarray targets_arr, cnp.ndarray mask_arr, double scale):
    cdef double[:, ::1] probs = np.ascontiguousarray(probs_arr, dtype=np.float64)
    cdef cnp.int64_t[::1] targets = np.ascontiguousarray(targets_arr, dtype=np.int64)
    cdef double[::1] mask = np.ascontiguousarray(mask_arr, dtype=np.float64)
    cdef Py_ssize_t n = probs.shape[0]
    cdef Py_ssize_t v = probs.shape[1]
    grad_arr = np.zeros((n, v), dtype=np.float64)
    cdef double[:, ::1] grad = grad_arr
    cdef double coeff
    cdef Py_ssize_t i, j
    for i in range(n):
        coeff = mask[i] * scale
        if coeff == 0.0:
            continue
        for j in range(v):
            grad[i, j] = probs[i, j] * coeff
        grad[i, targets[i]] -= coeff
    return grad_arr


def scatter_add_rows(cnp.ndarray out_arr, cnp.ndarray ids_arr, cnp.ndarray vals_arr):
    cdef double[:, ::1] out = out_arr
    cdef cnp.int64_t[::1] ids = np.ascontiguousarray(ids_arr, dtype=np.int64)
    cdef double[:, ::1] vals = np.ascontiguousarray(vals_arr, dtype=np.float64)
    cdef Py_ssize_t n = ids.shape[0]
    cdef Py_ssize_t d = vals.shape[1]
    cdef Py_ssize_t i, j
    cdef cnp.int64_t row
    for i in range(n):
        row = ids[i]
        for j in range(d):
            out[row, j] += vals[i, j]


def adamw_step(cnp.ndarray theta_arr, cnp.ndarray grad_arr, cnp.ndarray m_arr,
               cnp.ndarray v_arr, long step, double lr, double beta1,
               double beta2, double eps, double weight_decay):
    cdef double[::1] theta = theta_arr
    cdef double[::1] grad = np.ascontiguousarray(grad_arr, dtype=np.float64)
    cdef double[::1] m = m_arr
    cdef double[::1] v = v_arr
    cdef Py_ssize_t n = theta.shape[0]
    cdef double bc1 = 1.0 - beta1**step
    cdef double bc2 = 1.0 - beta2**step
    cdef double g, mhat, vhat
    cdef Py_ssize_t i
    for i in range(n):
        g = grad[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * g
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
        mhat = m[i] / bc1
        vhat = v[i] / bc2
        theta[i] -= lr * (mhat / (sqrt(vhat) + eps) + weight_decay * theta[i])
