"""Hot inner loops, each with a numba kernel and a pure-numpy twin.

The numba path is used when numba imports cleanly and ``KDRANK_DISABLE_NUMBA``
is unset (or ``0``).  Both paths are always importable as ``NUMPY_KERNELS`` and
``NUMBA_KERNELS`` so tests and ``benchmarks/bench_kernels.py`` can compare them.

Kernels
-------
lstm_forward(gx, u, lengths) -> (h, c, gates)
    One-direction LSTM over pre-projected inputs ``gx`` (B, L, 4h), gate order
    [input, forget, cell, output].  Steps ``t >= lengths[b]`` output zeros.
lstm_backward(dh, u, c, gates, lengths) -> (dgx, du)
    Backprop through time for ``lstm_forward``.
scatter_add_rows(src, index, n_rows) -> out
    ``out[index[i]] += src[i]`` with repeated indices accumulating.
max_pool(x, lengths) -> (out, argmax)
    Column-wise max over the first ``lengths[b]`` rows, ties to lowest row.
adam_update(param, grad, m, v, lr, beta1, beta2, eps, step)
    In-place bias-corrected Adam update.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np


def _numba_requested() -> bool:
    return os.environ.get("KDRANK_DISABLE_NUMBA", "0").strip().lower() in ("", "0", "false", "no")


# ----------------------------------------------------------------------------
# numpy path
# ----------------------------------------------------------------------------


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _lstm_forward_np(gx, u, lengths):
    B, L, four_h = gx.shape
    hd = four_h // 4
    h_all = np.zeros((B, L, hd))
    c_all = np.zeros((B, L, hd))
    gates = np.zeros((B, L, four_h))
    h = np.zeros((B, hd))
    c = np.zeros((B, hd))
    for t in range(L):
        live = t < lengths
        if not live.any():
            break
        z = gx[:, t, :] + h @ u
        i = _sigmoid(z[:, :hd])
        f = _sigmoid(z[:, hd:2 * hd])
        g = np.tanh(z[:, 2 * hd:3 * hd])
        o = _sigmoid(z[:, 3 * hd:])
        c = f * c + i * g
        h = o * np.tanh(c)
        m = live[:, None]
        h = np.where(m, h, 0.0)
        c = np.where(m, c, 0.0)
        h_all[:, t] = h
        c_all[:, t] = c
        gates[:, t] = np.where(m, np.concatenate([i, f, g, o], axis=1), 0.0)
    return h_all, c_all, gates


def _lstm_backward_np(dh_all, u, c_all, gates, lengths):
    B, L, four_h = gates.shape
    hd = four_h // 4
    dgx = np.zeros((B, L, four_h))
    du = np.zeros_like(u)
    dh_next = np.zeros((B, hd))
    dc_next = np.zeros((B, hd))
    zeros = np.zeros((B, hd))
    for t in range(L - 1, -1, -1):
        m = (t < lengths)[:, None]
        if not m.any():
            continue
        i = gates[:, t, :hd]
        f = gates[:, t, hd:2 * hd]
        g = gates[:, t, 2 * hd:3 * hd]
        o = gates[:, t, 3 * hd:]
        tc = np.tanh(c_all[:, t])
        c_prev = c_all[:, t - 1] if t > 0 else zeros
        dh = np.where(m, dh_all[:, t] + dh_next, 0.0)
        dc = np.where(m, dc_next + dh * o * (1.0 - tc * tc), 0.0)
        dz = dgx[:, t]
        dz[:, :hd] = dc * g * i * (1.0 - i)
        dz[:, hd:2 * hd] = dc * c_prev * f * (1.0 - f)
        dz[:, 2 * hd:3 * hd] = dc * i * (1.0 - g * g)
        dz[:, 3 * hd:] = dh * tc * o * (1.0 - o)
        if t > 0:
            h_prev = gates[:, t - 1, 3 * hd:] * np.tanh(c_prev)
            du += h_prev.T @ dz
        dh_next = dz @ u.T
        dc_next = dc * f
    return dgx, du


def _scatter_add_rows_np(src, index, n_rows):
    out = np.zeros((n_rows,) + src.shape[1:])
    np.add.at(out, index, src)
    return out


def _max_pool_np(x, lengths):
    B, L, d = x.shape
    valid = np.arange(L)[None, :] < lengths[:, None]
    masked = np.where(valid[:, :, None], x, -np.inf)
    arg = np.argmax(masked, axis=1)
    out = np.take_along_axis(x, arg[:, None, :], axis=1)[:, 0, :]
    return out, arg


def _adam_update_np(param, grad, m, v, lr, beta1, beta2, eps, step):
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


NUMPY_KERNELS = SimpleNamespace(
    name="numpy",
    lstm_forward=_lstm_forward_np,
    lstm_backward=_lstm_backward_np,
    scatter_add_rows=_scatter_add_rows_np,
    max_pool=_max_pool_np,
    adam_update=_adam_update_np,
)


# ----------------------------------------------------------------------------
# numba path
# ----------------------------------------------------------------------------


def _build_numba_kernels():
    import math

    from numba import njit

    @njit(cache=True)
    def _sig(x):
        return 0.5 * (1.0 + math.tanh(0.5 * x))

    @njit(cache=True)
    def lstm_forward(gx, u, lengths):
        B, L, four_h = gx.shape
        hd = four_h // 4
        h_all = np.zeros((B, L, hd))
        c_all = np.zeros((B, L, hd))
        gates = np.zeros((B, L, four_h))
        z = np.empty(four_h)
        for b in range(B):
            for t in range(lengths[b]):
                for j in range(four_h):
                    acc = gx[b, t, j]
                    if t > 0:
                        for k in range(hd):
                            acc += h_all[b, t - 1, k] * u[k, j]
                    z[j] = acc
                for k in range(hd):
                    i = _sig(z[k])
                    f = _sig(z[hd + k])
                    g = math.tanh(z[2 * hd + k])
                    o = _sig(z[3 * hd + k])
                    c_prev = c_all[b, t - 1, k] if t > 0 else 0.0
                    c = f * c_prev + i * g
                    c_all[b, t, k] = c
                    h_all[b, t, k] = o * math.tanh(c)
                    gates[b, t, k] = i
                    gates[b, t, hd + k] = f
                    gates[b, t, 2 * hd + k] = g
                    gates[b, t, 3 * hd + k] = o
        return h_all, c_all, gates

    @njit(cache=True)
    def lstm_backward(dh_all, u, c_all, gates, lengths):
        B, L, four_h = gates.shape
        hd = four_h // 4
        dgx = np.zeros((B, L, four_h))
        du = np.zeros(u.shape)
        dh_next = np.zeros(hd)
        dc_next = np.zeros(hd)
        for b in range(B):
            dh_next[:] = 0.0
            dc_next[:] = 0.0
            for t in range(lengths[b] - 1, -1, -1):
                for k in range(hd):
                    i = gates[b, t, k]
                    f = gates[b, t, hd + k]
                    g = gates[b, t, 2 * hd + k]
                    o = gates[b, t, 3 * hd + k]
                    c = c_all[b, t, k]
                    c_prev = c_all[b, t - 1, k] if t > 0 else 0.0
                    tc = math.tanh(c)
                    dh = dh_all[b, t, k] + dh_next[k]
                    dc = dc_next[k] + dh * o * (1.0 - tc * tc)
                    dgx[b, t, k] = dc * g * i * (1.0 - i)
                    dgx[b, t, hd + k] = dc * c_prev * f * (1.0 - f)
                    dgx[b, t, 2 * hd + k] = dc * i * (1.0 - g * g)
                    dgx[b, t, 3 * hd + k] = dh * tc * o * (1.0 - o)
                    dc_next[k] = dc * f
                if t > 0:
                    for k in range(hd):
                        hp = gates[b, t - 1, 3 * hd + k] * math.tanh(c_all[b, t - 1, k])
                        for j in range(four_h):
                            du[k, j] += hp * dgx[b, t, j]
                for k in range(hd):
                    acc = 0.0
                    for j in range(four_h):
                        acc += dgx[b, t, j] * u[k, j]
                    dh_next[k] = acc
        return dgx, du

    @njit(cache=True)
    def scatter_add_rows(src, index, n_rows):
        out = np.zeros((n_rows, src.shape[1]))
        for r in range(src.shape[0]):
            row = index[r]
            for j in range(src.shape[1]):
                out[row, j] += src[r, j]
        return out

    @njit(cache=True)
    def max_pool(x, lengths):
        B, L, d = x.shape
        out = np.empty((B, d))
        arg = np.zeros((B, d), dtype=np.int64)
        for b in range(B):
            for j in range(d):
                best = x[b, 0, j]
                at = 0
                for t in range(1, lengths[b]):
                    if x[b, t, j] > best:
                        best = x[b, t, j]
                        at = t
                out[b, j] = best
                arg[b, j] = at
        return out, arg

    @njit(cache=True)
    def adam_update(param, grad, m, v, lr, beta1, beta2, eps, step):
        bc1 = 1.0 - beta1 ** step
        bc2 = 1.0 - beta2 ** step
        p = param.ravel()
        gr = grad.ravel()
        mm = m.ravel()
        vv = v.ravel()
        for i in range(p.size):
            mm[i] = beta1 * mm[i] + (1.0 - beta1) * gr[i]
            vv[i] = beta2 * vv[i] + (1.0 - beta2) * gr[i] * gr[i]
            p[i] -= lr * (mm[i] / bc1) / (math.sqrt(vv[i] / bc2) + eps)

    def _scatter(src, index, n_rows):
        flat = np.ascontiguousarray(src.reshape(src.shape[0], -1))
        out = scatter_add_rows(flat, np.ascontiguousarray(index, dtype=np.int64), n_rows)
        return out.reshape((n_rows,) + src.shape[1:])

    def _pool(x, lengths):
        return max_pool(np.ascontiguousarray(x), np.ascontiguousarray(lengths, dtype=np.int64))

    def _fwd(gx, u, lengths):
        return lstm_forward(np.ascontiguousarray(gx), np.ascontiguousarray(u),
                            np.ascontiguousarray(lengths, dtype=np.int64))

    def _bwd(dh, u, c_all, gates, lengths):
        return lstm_backward(np.ascontiguousarray(dh), np.ascontiguousarray(u), c_all, gates,
                             np.ascontiguousarray(lengths, dtype=np.int64))

    return SimpleNamespace(
        name="numba",
        lstm_forward=_fwd,
        lstm_backward=_bwd,
        scatter_add_rows=_scatter,
        max_pool=_pool,
        adam_update=adam_update,
    )


try:
    NUMBA_KERNELS = _build_numba_kernels()
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_KERNELS = None

KERNELS = NUMBA_KERNELS if (NUMBA_KERNELS is not None and _numba_requested()) else NUMPY_KERNELS
BACKEND = KERNELS.name
