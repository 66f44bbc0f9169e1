"""Pure NumPy implementations of the hot loops.

Every function here has a twin with the same name and signature in the
compiled ``_ckernels`` extension. The two must agree to rounding; the
GARCH recursions agree bit-for-bit because they perform the same scalar
operations in the same order.
"""

from __future__ import annotations

import math

import numpy as np

KIND_GARCH = 0
KIND_GJR = 1
KIND_EGARCH = 2

EGARCH_ABS_MEAN = math.sqrt(2.0 / math.pi)
EGARCH_LOGVAR_BOUND = 30.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# ---------------------------------------------------------------------------
# GARCH family recursions
# ---------------------------------------------------------------------------

def _next_variance(kind, omega, alpha, beta, gamma, s2, y):
    v = omega + alpha * (y * y) + beta * s2
    if kind == KIND_GJR and y < 0.0:
        v = v + gamma * (y * y)
    return v


def _next_logvar(omega, alpha, beta, gamma, lv, y):
    z = y / math.exp(0.5 * lv)
    return omega + beta * lv + alpha * (abs(z) - EGARCH_ABS_MEAN) + gamma * z


def _clamp_logvar(lv):
    if lv > EGARCH_LOGVAR_BOUND:
        return EGARCH_LOGVAR_BOUND, 1
    if lv < -EGARCH_LOGVAR_BOUND:
        return -EGARCH_LOGVAR_BOUND, 1
    return lv, 0


def garch_simulate(kind, omega, alpha, beta, gamma, sigma1_sq, eps):
    """Run the recursion forward driven by standard normal shocks ``eps``.

    Returns ``(y, sigma)`` of the same length as ``eps``.
    """
    eps = np.ascontiguousarray(eps, dtype=np.float64)
    n = eps.shape[0]
    y = np.empty(n)
    sigma = np.empty(n)
    if kind == KIND_EGARCH:
        lv = math.log(sigma1_sq)
        for t in range(n):
            s = math.exp(0.5 * lv)
            sigma[t] = s
            y[t] = s * eps[t]
            lv, _ = _clamp_logvar(_next_logvar(omega, alpha, beta, gamma, lv, y[t]))
        return y, sigma
    s2 = sigma1_sq
    for t in range(n):
        s = math.sqrt(s2)
        sigma[t] = s
        y[t] = s * eps[t]
        s2 = _next_variance(kind, omega, alpha, beta, gamma, s2, y[t])
    return y, sigma


def garch_variance(kind, omega, alpha, beta, gamma, y, sigma1_sq):
    """Conditional variance path for observed ``y``; returns ``(sigma2, n_clamped)``."""
    y = np.ascontiguousarray(y, dtype=np.float64)
    n = y.shape[0]
    out = np.empty(n)
    clamped = 0
    if kind == KIND_EGARCH:
        lv = math.log(sigma1_sq)
        for t in range(n):
            out[t] = math.exp(lv)
            if t + 1 < n:
                lv, c = _clamp_logvar(_next_logvar(omega, alpha, beta, gamma, lv, y[t]))
                clamped += c
        return out, clamped
    s2 = sigma1_sq
    for t in range(n):
        out[t] = s2
        s2 = _next_variance(kind, omega, alpha, beta, gamma, s2, y[t])
    return out, clamped


def garch_nll_grad(kind, theta, y, lengths, sigma1_sq):
    """Summed Gaussian NLL and its gradient for a panel of series.

    ``theta`` is ``(omega, alpha, beta, gamma)``; ``y`` is ``(N, T_max)``
    right-padded, ``lengths`` gives the valid prefix of each row. Returns
    per-series NLL sums ``(N,)``, gradients ``(N, 4)`` and the number of
    clamped EGARCH steps.
    """
    omega, alpha, beta, gamma = (float(v) for v in theta)
    y = np.ascontiguousarray(y, dtype=np.float64)
    n_series = y.shape[0]
    nll = np.zeros(n_series)
    grad = np.zeros((n_series, 4))
    clamped = 0
    for n in range(n_series):
        row = y[n]
        total = 0.0
        g0 = g1 = g2 = g3 = 0.0
        # d state / d theta
        d0 = d1 = d2 = d3 = 0.0
        if kind == KIND_EGARCH:
            lv = math.log(sigma1_sq[n])
            for t in range(int(lengths[n])):
                yt = row[t]
                s2 = math.exp(lv)
                ratio = yt * yt / s2
                total += HALF_LOG_2PI + 0.5 * lv + 0.5 * ratio
                w = 0.5 - 0.5 * ratio
                g0 += w * d0
                g1 += w * d1
                g2 += w * d2
                g3 += w * d3
                z = yt / math.exp(0.5 * lv)
                az = abs(z)
                sgn = 1.0 if z > 0.0 else (-1.0 if z < 0.0 else 0.0)
                k = (alpha * sgn + gamma) * (-0.5 * z)
                nd0 = 1.0 + (beta + k) * d0
                nd1 = (az - EGARCH_ABS_MEAN) + (beta + k) * d1
                nd2 = lv + (beta + k) * d2
                nd3 = z + (beta + k) * d3
                lv_next = omega + beta * lv + alpha * (az - EGARCH_ABS_MEAN) + gamma * z
                lv_next, c = _clamp_logvar(lv_next)
                if c:
                    clamped += 1
                    nd0 = nd1 = nd2 = nd3 = 0.0
                lv = lv_next
                d0, d1, d2, d3 = nd0, nd1, nd2, nd3
        else:
            s2 = sigma1_sq[n]
            for t in range(int(lengths[n])):
                yt = row[t]
                y2 = yt * yt
                ratio = y2 / s2
                total += HALF_LOG_2PI + 0.5 * math.log(s2) + 0.5 * ratio
                w = (0.5 - 0.5 * ratio) / s2
                g0 += w * d0
                g1 += w * d1
                g2 += w * d2
                g3 += w * d3
                lev = y2 if (kind == KIND_GJR and yt < 0.0) else 0.0
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
    return nll, grad, clamped


# ---------------------------------------------------------------------------
# Recurrent scans. Arrays are time-major: inputs (T, B, G*H), states
# (T, B, H). The recurrent weight uses the row convention h_{t-1} @ W with
# W of shape (H, G*H). Initial hidden and cell states are zero.
# ---------------------------------------------------------------------------

def _prev(states):
    T, B, H = states.shape
    out = np.empty_like(states)
    out[0] = 0.0
    out[1:] = states[:-1]
    return out


def rnn_scan_forward(xp, w_h):
    T, B, H = xp.shape
    hs = np.empty((T, B, H))
    h = np.zeros((B, H))
    for t in range(T):
        h = _sigmoid(xp[t] + h @ w_h)
        hs[t] = h
    return hs


def rnn_scan_backward(w_h, hs, dhs):
    """Returns ``(dxp, dw_h)``."""
    T, B, H = hs.shape
    da = np.empty((T, B, H))
    carry = np.zeros((B, H))
    w_t = w_h.T
    for t in range(T - 1, -1, -1):
        h = hs[t]
        g = (dhs[t] + carry) * h * (1.0 - h)
        da[t] = g
        carry = g @ w_t
    dw = _prev(hs).reshape(T * B, H).T @ da.reshape(T * B, H)
    return da, dw


def gru_scan_forward(xp, w_h):
    """Returns ``(hs, gates)``; gates hold ``[r, z, n]`` per step."""
    T, B, G = xp.shape
    H = G // 3
    hs = np.empty((T, B, H))
    gates = np.empty((T, B, G))
    h = np.zeros((B, H))
    w_rz = w_h[:, : 2 * H]
    w_n = w_h[:, 2 * H:]
    for t in range(T):
        x = xp[t]
        rz = _sigmoid(x[:, : 2 * H] + h @ w_rz)
        r = rz[:, :H]
        z = rz[:, H:]
        n = np.tanh(x[:, 2 * H:] + (r * h) @ w_n)
        h = z * h + (1.0 - z) * n
        hs[t] = h
        gates[t, :, : 2 * H] = rz
        gates[t, :, 2 * H:] = n
    return hs, gates


def gru_scan_backward(w_h, hs, gates, dhs):
    T, B, H = hs.shape
    da = np.empty((T, B, 3 * H))
    carry = np.zeros((B, H))
    w_rz_t = w_h[:, : 2 * H].T
    w_n_t = w_h[:, 2 * H:].T
    h_prev_all = _prev(hs)
    for t in range(T - 1, -1, -1):
        h_prev = h_prev_all[t]
        r = gates[t, :, :H]
        z = gates[t, :, H: 2 * H]
        n = gates[t, :, 2 * H:]
        dh = dhs[t] + carry
        da_n = dh * (1.0 - z) * (1.0 - n * n)
        d_rh = da_n @ w_n_t
        da[t, :, :H] = d_rh * h_prev * r * (1.0 - r)
        da[t, :, H: 2 * H] = dh * (h_prev - n) * z * (1.0 - z)
        da[t, :, 2 * H:] = da_n
        carry = dh * z + d_rh * r + da[t, :, : 2 * H] @ w_rz_t
    flat_prev = h_prev_all.reshape(T * B, H)
    dw = np.empty((H, 3 * H))
    dw[:, : 2 * H] = flat_prev.T @ da[:, :, : 2 * H].reshape(T * B, 2 * H)
    rh = (gates[:, :, :H] * h_prev_all).reshape(T * B, H)
    dw[:, 2 * H:] = rh.T @ da[:, :, 2 * H:].reshape(T * B, H)
    return da, dw


def lstm_scan_forward(xp, w_h):
    """Returns ``(hs, cs, gates)``; gates hold ``[f, i, o, g]`` per step."""
    T, B, G = xp.shape
    H = G // 4
    hs = np.empty((T, B, H))
    cs = np.empty((T, B, H))
    gates = np.empty((T, B, G))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    for t in range(T):
        a = xp[t] + h @ w_h
        fio = _sigmoid(a[:, : 3 * H])
        g = np.tanh(a[:, 3 * H:])
        c = fio[:, :H] * c + fio[:, H: 2 * H] * g
        h = fio[:, 2 * H:] * np.tanh(c)
        hs[t] = h
        cs[t] = c
        gates[t, :, : 3 * H] = fio
        gates[t, :, 3 * H:] = g
    return hs, cs, gates


def lstm_scan_backward(w_h, hs, cs, gates, dhs):
    T, B, H = hs.shape
    da = np.empty((T, B, 4 * H))
    dh_carry = np.zeros((B, H))
    dc_carry = np.zeros((B, H))
    w_t = w_h.T
    c_prev_all = _prev(cs)
    for t in range(T - 1, -1, -1):
        f = gates[t, :, :H]
        i = gates[t, :, H: 2 * H]
        o = gates[t, :, 2 * H: 3 * H]
        g = gates[t, :, 3 * H:]
        tc = np.tanh(cs[t])
        dh = dhs[t] + dh_carry
        dc = dc_carry + dh * o * (1.0 - tc * tc)
        da[t, :, :H] = dc * c_prev_all[t] * f * (1.0 - f)
        da[t, :, H: 2 * H] = dc * g * i * (1.0 - i)
        da[t, :, 2 * H: 3 * H] = dh * tc * o * (1.0 - o)
        da[t, :, 3 * H:] = dc * i * (1.0 - g * g)
        dc_carry = dc * f
        dh_carry = da[t] @ w_t
    dw = _prev(hs).reshape(T * B, H).T @ da.reshape(T * B, 4 * H)
    return da, dw


# ---------------------------------------------------------------------------
# Stationary bootstrap
# ---------------------------------------------------------------------------

def stationary_bootstrap_means(losses, u, starts, p):
    """Column means of ``losses`` under stationary-bootstrap resampling.

    Row ``b`` of ``u``/``starts`` drives replicate ``b``: the index restarts
    at ``starts[b, t]`` when ``t == 0`` or ``u[b, t] < p`` and otherwise
    advances by one (wrapping). Returns ``(B, K)``.
    """
    losses = np.ascontiguousarray(losses, dtype=np.float64)
    T = losses.shape[0]
    n_boot, length = u.shape
    restart = u < p
    restart[:, 0] = True
    pos = np.broadcast_to(np.arange(length), (n_boot, length))
    last = np.maximum.accumulate(np.where(restart, pos, 0), axis=1)
    base = np.take_along_axis(starts, last, axis=1)
    idx = (base + (pos - last)) % T
    out = np.empty((n_boot, losses.shape[1]))
    for k in range(losses.shape[1]):
        col = losses[:, k]
        out[:, k] = col[idx].sum(axis=1) / length
    return out
