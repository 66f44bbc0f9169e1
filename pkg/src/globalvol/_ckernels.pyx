# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops. Mirrors ``_kernels_py`` function for function."""

import numpy as np

from libc.math cimport exp, log, sqrt, tanh, fabs
from scipy.linalg.cython_blas cimport dgemm

cdef int KIND_GARCH = 0
cdef int KIND_GJR = 1
cdef int KIND_EGARCH = 2

cdef double EGARCH_ABS_MEAN = sqrt(2.0 / 3.141592653589793)
cdef double EGARCH_LOGVAR_BOUND = 30.0
cdef double HALF_LOG_2PI = 0.5 * log(2.0 * 3.141592653589793)


cdef inline double _sigmoid(double x) nogil:
    cdef double e
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


cdef inline double _next_variance(int kind, double omega, double alpha, double beta,
                                  double gamma, double s2, double y) nogil:
    cdef double v = omega + alpha * (y * y) + beta * s2
    if kind == KIND_GJR and y < 0.0:
        v = v + gamma * (y * y)
    return v


cdef inline double _next_logvar(double omega, double alpha, double beta, double gamma,
                                double lv, double y) nogil:
    cdef double z = y / exp(0.5 * lv)
    return omega + beta * lv + alpha * (fabs(z) - EGARCH_ABS_MEAN) + gamma * z


cdef inline int _clamp(double* lv) nogil:
    if lv[0] > EGARCH_LOGVAR_BOUND:
        lv[0] = EGARCH_LOGVAR_BOUND
        return 1
    if lv[0] < -EGARCH_LOGVAR_BOUND:
        lv[0] = -EGARCH_LOGVAR_BOUND
        return 1
    return 0


def garch_simulate(int kind, double omega, double alpha, double beta, double gamma,
                   double sigma1_sq, eps):
    cdef double[::1] e = np.ascontiguousarray(eps, dtype=np.float64)
    cdef Py_ssize_t n = e.shape[0], t
    y_arr = np.empty(n)
    sig_arr = np.empty(n)
    cdef double[::1] y = y_arr
    cdef double[::1] sigma = sig_arr
    cdef double s2 = sigma1_sq, s, lv
    with nogil:
        if kind == KIND_EGARCH:
            lv = log(sigma1_sq)
            for t in range(n):
                s = exp(0.5 * lv)
                sigma[t] = s
                y[t] = s * e[t]
                lv = _next_logvar(omega, alpha, beta, gamma, lv, y[t])
                _clamp(&lv)
        else:
            for t in range(n):
                s = sqrt(s2)
                sigma[t] = s
                y[t] = s * e[t]
                s2 = _next_variance(kind, omega, alpha, beta, gamma, s2, y[t])
    return y_arr, sig_arr


def garch_variance(int kind, double omega, double alpha, double beta, double gamma,
                   y_in, double sigma1_sq):
    cdef double[::1] y = np.ascontiguousarray(y_in, dtype=np.float64)
    cdef Py_ssize_t n = y.shape[0], t
    out_arr = np.empty(n)
    cdef double[::1] out = out_arr
    cdef double s2 = sigma1_sq, lv
    cdef int clamped = 0
    with nogil:
        if kind == KIND_EGARCH:
            lv = log(sigma1_sq)
            for t in range(n):
                out[t] = exp(lv)
                if t + 1 < n:
                    lv = _next_logvar(omega, alpha, beta, gamma, lv, y[t])
                    clamped += _clamp(&lv)
        else:
            for t in range(n):
                out[t] = s2
                s2 = _next_variance(kind, omega, alpha, beta, gamma, s2, y[t])
    return out_arr, clamped


def garch_nll_grad(int kind, theta, y_in, lengths_in, sigma1_in):
    cdef double omega = float(theta[0]), alpha = float(theta[1])
    cdef double beta = float(theta[2]), gamma = float(theta[3])
    cdef double[:, ::1] y = np.ascontiguousarray(y_in, dtype=np.float64)
    cdef long[::1] lengths = np.ascontiguousarray(lengths_in, dtype=np.int64)
    cdef double[::1] sigma1 = np.ascontiguousarray(sigma1_in, dtype=np.float64)
    cdef Py_ssize_t n_series = y.shape[0], n, t
    nll_arr = np.zeros(n_series)
    grad_arr = np.zeros((n_series, 4))
    cdef double[::1] nll = nll_arr
    cdef double[:, ::1] grad = grad_arr
    cdef double total, g0, g1, g2, g3, d0, d1, d2, d3, nd0, nd1, nd2, nd3
    cdef double yt, y2, s2, lv, lv_next, ratio, w, z, az, sgn, k, lev
    cdef int clamped = 0
    with nogil:
        for n in range(n_series):
            total = 0.0
            g0 = 0.0
            g1 = 0.0
            g2 = 0.0
            g3 = 0.0
            d0 = 0.0
            d1 = 0.0
            d2 = 0.0
            d3 = 0.0
            if kind == KIND_EGARCH:
                lv = log(sigma1[n])
                for t in range(lengths[n]):
                    yt = y[n, t]
                    s2 = exp(lv)
                    ratio = yt * yt / s2
                    total += HALF_LOG_2PI + 0.5 * lv + 0.5 * ratio
                    w = 0.5 - 0.5 * ratio
                    g0 += w * d0
                    g1 += w * d1
                    g2 += w * d2
                    g3 += w * d3
                    z = yt / exp(0.5 * lv)
                    az = fabs(z)
                    if z > 0.0:
                        sgn = 1.0
                    elif z < 0.0:
                        sgn = -1.0
                    else:
                        sgn = 0.0
                    k = (alpha * sgn + gamma) * (-0.5 * z)
                    nd0 = 1.0 + (beta + k) * d0
                    nd1 = (az - EGARCH_ABS_MEAN) + (beta + k) * d1
                    nd2 = lv + (beta + k) * d2
                    nd3 = z + (beta + k) * d3
                    lv_next = omega + beta * lv + alpha * (az - EGARCH_ABS_MEAN) + gamma * z
                    if _clamp(&lv_next):
                        clamped += 1
                        nd0 = 0.0
                        nd1 = 0.0
                        nd2 = 0.0
                        nd3 = 0.0
                    lv = lv_next
                    d0 = nd0
                    d1 = nd1
                    d2 = nd2
                    d3 = nd3
            else:
                s2 = sigma1[n]
                for t in range(lengths[n]):
                    yt = y[n, t]
                    y2 = yt * yt
                    ratio = y2 / s2
                    total += HALF_LOG_2PI + 0.5 * log(s2) + 0.5 * ratio
                    w = (0.5 - 0.5 * ratio) / s2
                    g0 += w * d0
                    g1 += w * d1
                    g2 += w * d2
                    g3 += w * d3
                    if kind == KIND_GJR and yt < 0.0:
                        lev = y2
                    else:
                        lev = 0.0
                    d0 = 1.0 + beta * d0
                    d1 = y2 + beta * d1
                    d2 = s2 + beta * d2
                    d3 = lev + beta * d3
                    s2 = _next_variance(kind, omega, alpha, beta, gamma, s2, yt)
            nll[n] = total
            grad[n, 0] = g0
            grad[n, 1] = g1
            grad[n, 2] = g2
            grad[n, 3] = g3
    return nll_arr, grad_arr, clamped


# ---------------------------------------------------------------------------
# Recurrent scans, time-major. BLAS handles the recurrent products: a
# row-major X(r, c) is the column-major X^T, hence the operand order below.
# ---------------------------------------------------------------------------

cdef inline double _tanh(double x) nogil:
    # libm tanh is ~4x slower than exp; absolute error stays ~1e-16
    cdef double ax = fabs(x), x2, e
    if ax < 0.01:
        x2 = x * x
        return x * (1.0 - x2 * (1.0 / 3.0 - x2 * (2.0 / 15.0 - x2 * (17.0 / 315.0))))
    e = exp(-2.0 * ax)
    if x >= 0:
        return (1.0 - e) / (1.0 + e)
    return (e - 1.0) / (1.0 + e)


def fast_tanh(x_in):
    """Vectorised form of the scan kernels' tanh (exposed for testing)."""
    cdef double[::1] x = np.ascontiguousarray(x_in, dtype=np.float64).ravel()
    out_arr = np.empty(x.shape[0])
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    for i in range(x.shape[0]):
        out[i] = _tanh(x[i])
    return out_arr.reshape(np.shape(x_in))


cdef inline void _gemm(char* ta, char* tb, int m, int n, int k,
                       double* a, int lda, double* b, int ldb,
                       double beta, double* c, int ldc) nogil:
    cdef double one = 1.0
    dgemm(ta, tb, &m, &n, &k, &one, a, &lda, b, &ldb, &beta, c, &ldc)


cdef _prev(states):
    out = np.empty_like(states)
    out[0] = 0.0
    out[1:] = states[:-1]
    return out


def rnn_scan_forward(xp, w_h_in):
    cdef double[:, ::1] w = np.ascontiguousarray(w_h_in, dtype=np.float64)
    hs_arr = np.array(xp, dtype=np.float64, order="C", copy=True)
    cdef double[:, :, ::1] hs = hs_arr
    cdef int T = hs.shape[0], B = hs.shape[1], H = hs.shape[2]
    cdef int t, b, j
    with nogil:
        for t in range(T):
            if t > 0:
                _gemm(b"N", b"N", H, B, H, &w[0, 0], H, &hs[t - 1, 0, 0], H,
                      1.0, &hs[t, 0, 0], H)
            for b in range(B):
                for j in range(H):
                    hs[t, b, j] = _sigmoid(hs[t, b, j])
    return hs_arr


def rnn_scan_backward(w_h_in, hs_in, dhs_in):
    cdef double[:, ::1] w = np.ascontiguousarray(w_h_in, dtype=np.float64)
    hs_arr = np.ascontiguousarray(hs_in, dtype=np.float64)
    cdef double[:, :, ::1] hs = hs_arr
    cdef double[:, :, ::1] dh = np.ascontiguousarray(dhs_in, dtype=np.float64)
    cdef int T = hs.shape[0], B = hs.shape[1], H = hs.shape[2]
    da_arr = np.empty((T, B, H))
    carry_arr = np.zeros((B, H))
    cdef double[:, :, ::1] da = da_arr
    cdef double[:, ::1] carry = carry_arr
    cdef int t, b, j
    cdef double h
    with nogil:
        for t in range(T - 1, -1, -1):
            for b in range(B):
                for j in range(H):
                    h = hs[t, b, j]
                    da[t, b, j] = (dh[t, b, j] + carry[b, j]) * h * (1.0 - h)
            if t > 0:
                _gemm(b"T", b"N", H, B, H, &w[0, 0], H, &da[t, 0, 0], H,
                      0.0, &carry[0, 0], H)
    dw = _prev(hs_arr).reshape(T * B, H).T @ da_arr.reshape(T * B, H)
    return da_arr, dw


def gru_scan_forward(xp, w_h_in):
    cdef double[:, ::1] w = np.ascontiguousarray(w_h_in, dtype=np.float64)
    gates_arr = np.array(xp, dtype=np.float64, order="C", copy=True)
    cdef double[:, :, ::1] gates = gates_arr
    cdef int T = gates.shape[0], B = gates.shape[1], G = gates.shape[2]
    cdef int H = G // 3
    hs_arr = np.empty((T, B, H))
    rh_arr = np.zeros((B, H))
    cdef double[:, :, ::1] hs = hs_arr
    cdef double[:, ::1] rh = rh_arr
    cdef int t, b, j
    cdef double hp, z, n
    with nogil:
        for t in range(T):
            if t > 0:
                _gemm(b"N", b"N", 2 * H, B, H, &w[0, 0], G, &hs[t - 1, 0, 0], H,
                      1.0, &gates[t, 0, 0], G)
            for b in range(B):
                for j in range(2 * H):
                    gates[t, b, j] = _sigmoid(gates[t, b, j])
                if t > 0:
                    for j in range(H):
                        rh[b, j] = gates[t, b, j] * hs[t - 1, b, j]
            if t > 0:
                _gemm(b"N", b"N", H, B, H, &w[0, 2 * H], G, &rh[0, 0], H,
                      1.0, &gates[t, 0, 2 * H], G)
            for b in range(B):
                for j in range(H):
                    n = _tanh(gates[t, b, 2 * H + j])
                    gates[t, b, 2 * H + j] = n
                    z = gates[t, b, H + j]
                    hp = hs[t - 1, b, j] if t > 0 else 0.0
                    hs[t, b, j] = z * hp + (1.0 - z) * n
    return hs_arr, gates_arr


def gru_scan_backward(w_h_in, hs_in, gates_in, dhs_in):
    cdef double[:, ::1] w = np.ascontiguousarray(w_h_in, dtype=np.float64)
    hs_arr = np.ascontiguousarray(hs_in, dtype=np.float64)
    gt_arr = np.ascontiguousarray(gates_in, dtype=np.float64)
    cdef double[:, :, ::1] hs = hs_arr
    cdef double[:, :, ::1] gt = gt_arr
    cdef double[:, :, ::1] dh_in = np.ascontiguousarray(dhs_in, dtype=np.float64)
    cdef int T = hs.shape[0], B = hs.shape[1], H = hs.shape[2]
    cdef int G = 3 * H
    da_arr = np.empty((T, B, G))
    carry_arr = np.zeros((B, H))
    drh_arr = np.zeros((B, H))
    dh_arr = np.zeros((B, H))
    cdef double[:, :, ::1] da = da_arr
    cdef double[:, ::1] carry = carry_arr
    cdef double[:, ::1] drh = drh_arr
    cdef double[:, ::1] dh = dh_arr
    cdef int t, b, j
    cdef double r, z, n, hp
    with nogil:
        for t in range(T - 1, -1, -1):
            for b in range(B):
                for j in range(H):
                    dh[b, j] = dh_in[t, b, j] + carry[b, j]
                    z = gt[t, b, H + j]
                    n = gt[t, b, 2 * H + j]
                    da[t, b, 2 * H + j] = dh[b, j] * (1.0 - z) * (1.0 - n * n)
            _gemm(b"T", b"N", H, B, H, &w[0, 2 * H], G, &da[t, 0, 2 * H], G,
                  0.0, &drh[0, 0], H)
            for b in range(B):
                for j in range(H):
                    r = gt[t, b, j]
                    z = gt[t, b, H + j]
                    n = gt[t, b, 2 * H + j]
                    hp = hs[t - 1, b, j] if t > 0 else 0.0
                    da[t, b, j] = drh[b, j] * hp * r * (1.0 - r)
                    da[t, b, H + j] = dh[b, j] * (hp - n) * z * (1.0 - z)
                    carry[b, j] = dh[b, j] * z + drh[b, j] * r
            _gemm(b"T", b"N", H, B, 2 * H, &w[0, 0], G, &da[t, 0, 0], G,
                  1.0, &carry[0, 0], H)
    h_prev = _prev(hs_arr)
    flat_prev = h_prev.reshape(T * B, H)
    dw = np.empty((H, G))
    dw[:, : 2 * H] = flat_prev.T @ da_arr[:, :, : 2 * H].reshape(T * B, 2 * H)
    rh = (gt_arr[:, :, :H] * h_prev).reshape(T * B, H)
    dw[:, 2 * H:] = rh.T @ da_arr[:, :, 2 * H:].reshape(T * B, H)
    return da_arr, dw


def lstm_scan_forward(xp, w_h_in):
    cdef double[:, ::1] w = np.ascontiguousarray(w_h_in, dtype=np.float64)
    gates_arr = np.array(xp, dtype=np.float64, order="C", copy=True)
    cdef double[:, :, ::1] gates = gates_arr
    cdef int T = gates.shape[0], B = gates.shape[1], G = gates.shape[2]
    cdef int H = G // 4
    hs_arr = np.empty((T, B, H))
    cs_arr = np.empty((T, B, H))
    cdef double[:, :, ::1] hs = hs_arr
    cdef double[:, :, ::1] cs = cs_arr
    cdef int t, b, j
    cdef double f, i, o, g, c, cp
    with nogil:
        for t in range(T):
            if t > 0:
                _gemm(b"N", b"N", G, B, H, &w[0, 0], G, &hs[t - 1, 0, 0], H,
                      1.0, &gates[t, 0, 0], G)
            for b in range(B):
                for j in range(3 * H):
                    gates[t, b, j] = _sigmoid(gates[t, b, j])
                for j in range(H):
                    g = _tanh(gates[t, b, 3 * H + j])
                    gates[t, b, 3 * H + j] = g
                    f = gates[t, b, j]
                    i = gates[t, b, H + j]
                    o = gates[t, b, 2 * H + j]
                    cp = cs[t - 1, b, j] if t > 0 else 0.0
                    c = f * cp + i * g
                    cs[t, b, j] = c
                    hs[t, b, j] = o * _tanh(c)
    return hs_arr, cs_arr, gates_arr


def lstm_scan_backward(w_h_in, hs_in, cs_in, gates_in, dhs_in):
    cdef double[:, ::1] w = np.ascontiguousarray(w_h_in, dtype=np.float64)
    hs_arr = np.ascontiguousarray(hs_in, dtype=np.float64)
    cdef double[:, :, ::1] cs = np.ascontiguousarray(cs_in, dtype=np.float64)
    cdef double[:, :, ::1] gt = np.ascontiguousarray(gates_in, dtype=np.float64)
    cdef double[:, :, ::1] dh_in = np.ascontiguousarray(dhs_in, dtype=np.float64)
    cdef int T = cs.shape[0], B = cs.shape[1], H = cs.shape[2]
    cdef int G = 4 * H
    da_arr = np.empty((T, B, G))
    dhc_arr = np.zeros((B, H))
    dcc_arr = np.zeros((B, H))
    cdef double[:, :, ::1] da = da_arr
    cdef double[:, ::1] dh_carry = dhc_arr
    cdef double[:, ::1] dc_carry = dcc_arr
    cdef int t, b, j
    cdef double f, i, o, g, cp, tc, dh, dc
    with nogil:
        for t in range(T - 1, -1, -1):
            for b in range(B):
                for j in range(H):
                    f = gt[t, b, j]
                    i = gt[t, b, H + j]
                    o = gt[t, b, 2 * H + j]
                    g = gt[t, b, 3 * H + j]
                    cp = cs[t - 1, b, j] if t > 0 else 0.0
                    tc = _tanh(cs[t, b, j])
                    dh = dh_in[t, b, j] + dh_carry[b, j]
                    dc = dc_carry[b, j] + dh * o * (1.0 - tc * tc)
                    da[t, b, j] = dc * cp * f * (1.0 - f)
                    da[t, b, H + j] = dc * g * i * (1.0 - i)
                    da[t, b, 2 * H + j] = dh * tc * o * (1.0 - o)
                    da[t, b, 3 * H + j] = dc * i * (1.0 - g * g)
                    dc_carry[b, j] = dc * f
            if t > 0:
                _gemm(b"T", b"N", H, B, G, &w[0, 0], G, &da[t, 0, 0], G,
                      0.0, &dh_carry[0, 0], H)
    dw = _prev(hs_arr).reshape(T * B, H).T @ da_arr.reshape(T * B, G)
    return da_arr, dw


def stationary_bootstrap_means(losses_in, u_in, starts_in, double p):
    cdef double[:, ::1] losses = np.ascontiguousarray(losses_in, dtype=np.float64)
    cdef double[:, ::1] u = np.ascontiguousarray(u_in, dtype=np.float64)
    cdef long[:, ::1] starts = np.ascontiguousarray(starts_in, dtype=np.int64)
    cdef Py_ssize_t T = losses.shape[0], K = losses.shape[1]
    cdef Py_ssize_t n_boot = u.shape[0], length = u.shape[1]
    out_arr = np.zeros((n_boot, K))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t b, t, k, idx = 0
    with nogil:
        for b in range(n_boot):
            for t in range(length):
                if t == 0 or u[b, t] < p:
                    idx = starts[b, t]
                else:
                    idx = idx + 1
                    if idx == T:
                        idx = 0
                for k in range(K):
                    out[b, k] += losses[idx, k]
            for k in range(K):
                out[b, k] = out[b, k] / length
    return out_arr
