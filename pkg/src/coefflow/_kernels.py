"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Set ``COEFFLOW_DISABLE_NUMBA=1`` before import to force the numpy path.
Both paths compute the same quantities; results agree to round-off, and
each path is bit-deterministic on its own.
"""
from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DISABLED = os.environ.get("COEFFLOW_DISABLE_NUMBA", "0").lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - depends on environment
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _DISABLED

# status codes returned by the integrators
OK = 0
NONFINITE = 1
NEGATIVE = 2


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------

def _euler_sis_np(A, x0, beta, gamma, dt, n_steps):
    n = x0.shape[0]
    out = np.empty((n_steps + 1, n))
    out[0] = x0
    x = x0.copy()
    clamped = 0.0
    for t in range(n_steps):
        dx = -gamma * x + beta * (1.0 - x) * (A @ x)
        x = x + dt * dx
        if not np.all(np.isfinite(x)):
            return out, clamped, NONFINITE, t + 1
        lo = x < 0.0
        hi = x > 1.0
        if lo.any() or hi.any():
            clamped += float(np.sum(-x[lo])) + float(np.sum(x[hi] - 1.0))
            x = np.clip(x, 0.0, 1.0)
        out[t + 1] = x
    return out, clamped, OK, -1


def _euler_hill_np(A, x0, a, h, B, dt, n_steps):
    n = x0.shape[0]
    out = np.empty((n_steps + 1, n))
    out[0] = x0
    x = x0.copy()
    for t in range(n_steps):
        xh = x ** h
        dx = -B * x ** a + A @ (xh / (1.0 + xh))
        x = x + dt * dx
        if not np.all(np.isfinite(x)):
            return out, NONFINITE, t + 1
        if np.any(x < 0.0):
            return out, NEGATIVE, t + 1
        out[t + 1] = x
    return out, OK, -1


def _conv_fwd_np(x, w):
    # x: (R, T, Cin), w: (Cout, Cin, k) -> (R, T-k+1, Cout)
    k = w.shape[2]
    win = sliding_window_view(x, k, axis=1)  # (R, T', Cin, k)
    R, Tp = win.shape[0], win.shape[1]
    cols = win.reshape(R * Tp, -1)
    return (cols @ w.reshape(w.shape[0], -1).T).reshape(R, Tp, w.shape[0])


def _conv_bwd_np(x, w, g):
    k = w.shape[2]
    win = sliding_window_view(x, k, axis=1)
    R, Tp = win.shape[0], win.shape[1]
    cols = win.reshape(R * Tp, -1)
    g2 = g.reshape(R * Tp, -1)
    gw = (g2.T @ cols).reshape(w.shape)
    gx = np.zeros_like(x)
    for j in range(k):
        gx[:, j:j + Tp, :] += g @ w[:, :, j]
    return gx, gw


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if USE_NUMBA:

    @njit(cache=True)
    def _euler_sis_nb(A, x0, beta, gamma, dt, n_steps):
        n = x0.shape[0]
        out = np.empty((n_steps + 1, n))
        x = x0.copy()
        for i in range(n):
            out[0, i] = x[i]
        clamped = 0.0
        dx = np.empty(n)
        for t in range(n_steps):
            for i in range(n):
                s = 0.0
                for j in range(n):
                    s += A[i, j] * x[j]
                dx[i] = -gamma * x[i] + beta * (1.0 - x[i]) * s
            for i in range(n):
                v = x[i] + dt * dx[i]
                if not np.isfinite(v):
                    return out, clamped, 1, t + 1
                if v < 0.0:
                    clamped += -v
                    v = 0.0
                elif v > 1.0:
                    clamped += v - 1.0
                    v = 1.0
                x[i] = v
                out[t + 1, i] = v
        return out, clamped, 0, -1

    @njit(cache=True)
    def _euler_hill_nb(A, x0, a, h, B, dt, n_steps):
        n = x0.shape[0]
        out = np.empty((n_steps + 1, n))
        x = x0.copy()
        for i in range(n):
            out[0, i] = x[i]
        act = np.empty(n)
        for t in range(n_steps):
            for j in range(n):
                xh = x[j] ** h
                act[j] = xh / (1.0 + xh)
            for i in range(n):
                s = 0.0
                for j in range(n):
                    s += A[i, j] * act[j]
                v = x[i] + dt * (-B * x[i] ** a + s)
                if not np.isfinite(v):
                    return out, 1, t + 1
                if v < 0.0:
                    return out, 2, t + 1
                out[t + 1, i] = v
            for i in range(n):
                x[i] = out[t + 1, i]
        return out, 0, -1

    @njit(cache=True)
    def _conv_fwd_nb(x, w):
        R, T, Cin = x.shape
        Cout, _, k = w.shape
        Tp = T - k + 1
        # (k, Cin, Cout) layout keeps the innermost loop contiguous
        wt = np.empty((k, Cin, Cout))
        for o in range(Cout):
            for c in range(Cin):
                for j in range(k):
                    wt[j, c, o] = w[o, c, j]
        out = np.zeros((R, Tp, Cout))
        for r in range(R):
            for t in range(Tp):
                for j in range(k):
                    for c in range(Cin):
                        xv = x[r, t + j, c]
                        for o in range(Cout):
                            out[r, t, o] += xv * wt[j, c, o]
        return out

    @njit(cache=True)
    def _conv_bwd_nb(x, w, g):
        R, T, Cin = x.shape
        Cout, _, k = w.shape
        Tp = T - k + 1
        wk = np.empty((k, Cout, Cin))
        for o in range(Cout):
            for c in range(Cin):
                for j in range(k):
                    wk[j, o, c] = w[o, c, j]
        gx = np.zeros_like(x)
        gwt = np.zeros((k, Cin, Cout))
        for r in range(R):
            for t in range(Tp):
                for j in range(k):
                    for o in range(Cout):
                        gv = g[r, t, o]
                        for c in range(Cin):
                            gx[r, t + j, c] += gv * wk[j, o, c]
                    for c in range(Cin):
                        xv = x[r, t + j, c]
                        for o in range(Cout):
                            gwt[j, c, o] += xv * g[r, t, o]
        gw = np.empty_like(w)
        for o in range(Cout):
            for c in range(Cin):
                for j in range(k):
                    gw[o, c, j] = gwt[j, c, o]
        return gx, gw


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def euler_sis(A, x0, beta, gamma, dt, n_steps, use_numba=None):
    """Clamped forward-Euler SIS integration.

    Returns ``(states, clamped_mass, status, step)`` where ``states`` has
    ``n_steps + 1`` rows and ``step`` is the failing step when ``status != OK``.
    """
    A = np.ascontiguousarray(A, dtype=np.float64)
    x0 = np.ascontiguousarray(x0, dtype=np.float64)
    if USE_NUMBA if use_numba is None else (use_numba and USE_NUMBA):
        out, clamped, status, step = _euler_sis_nb(A, x0, float(beta), float(gamma), float(dt), int(n_steps))
    else:
        out, clamped, status, step = _euler_sis_np(A, x0, beta, gamma, dt, n_steps)
    return out, float(clamped), int(status), int(step)


def euler_hill(A, x0, a, h, B, dt, n_steps, use_numba=None):
    """Forward-Euler Hill integration; returns ``(states, status, step)``."""
    A = np.ascontiguousarray(A, dtype=np.float64)
    x0 = np.ascontiguousarray(x0, dtype=np.float64)
    if USE_NUMBA if use_numba is None else (use_numba and USE_NUMBA):
        out, status, step = _euler_hill_nb(A, x0, float(a), float(h), float(B), float(dt), int(n_steps))
    else:
        out, status, step = _euler_hill_np(A, x0, a, h, B, dt, n_steps)
    return out, int(status), int(step)


# with a single input channel the im2col matmul is already cheap and the
# numba loops lose, so that case stays on numpy unless forced
_CONV_NUMBA_MIN_CIN = 4


def conv1d_forward(x, w, use_numba=None):
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w)
    if use_numba is None:
        use_numba = USE_NUMBA and w.shape[1] >= _CONV_NUMBA_MIN_CIN
    if use_numba and USE_NUMBA:
        return _conv_fwd_nb(x, w)
    return _conv_fwd_np(x, w)


def conv1d_backward(x, w, g, use_numba=None):
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w)
    g = np.ascontiguousarray(g)
    if use_numba is None:
        use_numba = USE_NUMBA and w.shape[1] >= _CONV_NUMBA_MIN_CIN
    if use_numba and USE_NUMBA:
        return _conv_bwd_nb(x, w, g)
    return _conv_bwd_np(x, w, g)
