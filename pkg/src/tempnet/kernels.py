"""Compiled inner loops for differential TEMP layers.

The layer kernels operate on "rows": each row is one input vector seen by
a set of units sharing weight matrices.  Dense layers use one row per
sample, convolutions one row per (sample, output pixel).

``solve_row`` finds the causal set with a Newton iteration from the right
(the membrane is convex and piecewise linear, so the iteration shrinks the
candidate set monotonically and stops in a handful of passes), then
re-derives the answer with the sorted sequential arithmetic of
``core.solve_spike_time``.  If the re-derivation disagrees it falls back to
a full sort, so the result is always identical to the scalar solver.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _solve_sorted(buf, gamma):
    s = np.sort(buf)
    total = 0.0
    K = s.shape[0]
    for k in range(K):
        total += s[k]
        cand = (gamma + total) / (k + 1)
        if k + 1 == K or cand <= s[k + 1]:
            return cand, k + 1
    return np.inf, 0


@njit(cache=True)
def solve_row(buf, gamma, work):
    K = buf.shape[0]
    if K == 0:
        return np.inf, 0
    lo = buf[0]
    for k in range(1, K):
        if buf[k] < lo:
            lo = buf[k]
    t = lo + gamma
    n = 0
    for k in range(K):
        if buf[k] < t:
            work[n] = buf[k]
            n += 1
    while True:
        total = 0.0
        for k in range(n):
            total += work[k]
        tn = (gamma + total) / n
        if tn >= t:
            break
        t = tn
        m = 0
        for k in range(n):
            if work[k] < t:
                work[m] = work[k]
                m += 1
        n = m
    nxt = np.inf
    for k in range(K):
        a = buf[k]
        if a >= t and a < nxt:
            nxt = a
    c = np.sort(work[:n])
    total = 0.0
    for k in range(n):
        total += c[k]
        cand = (gamma + total) / (k + 1)
        nx = c[k + 1] if k + 1 < n else nxt
        if cand <= nx:
            if k + 1 == n:
                return cand, n
            break
    return _solve_sorted(buf, gamma)


@njit(cache=True)
def layer_forward_rows(tp, tm, wp, wm, gamma, time_out):
    """Raw rail times and causal counts for every (row, unit).

    ``tp``/``tm``: (R, K) input rail times; ``wp``/``wm``: (U, K) delays.
    Plus rail sees ``tp+wp`` and ``tm+wm``; minus rail sees ``tp+wm`` and
    ``tm+wp``.  Times at or beyond ``time_out`` come back as inf with count 0.
    """
    R, K = tp.shape
    U = wp.shape[0]
    out_p = np.empty((R, U))
    out_m = np.empty((R, U))
    cnt_p = np.zeros((R, U), dtype=np.int64)
    cnt_m = np.zeros((R, U), dtype=np.int64)
    buf = np.empty(2 * K)
    work = np.empty(2 * K)
    for r in range(R):
        for u in range(U):
            for j in range(K):
                buf[j] = tp[r, j] + wp[u, j]
                buf[K + j] = tm[r, j] + wm[u, j]
            t, n = solve_row(buf, gamma, work)
            if t < time_out:
                out_p[r, u] = t
                cnt_p[r, u] = n
            else:
                out_p[r, u] = np.inf
            for j in range(K):
                buf[j] = tp[r, j] + wm[u, j]
                buf[K + j] = tm[r, j] + wp[u, j]
            t, n = solve_row(buf, gamma, work)
            if t < time_out:
                out_m[r, u] = t
                cnt_m[r, u] = n
            else:
                out_m[r, u] = np.inf
    return out_p, out_m, cnt_p, cnt_m


@njit(cache=True)
def layer_backward_rows(tp, tm, wp, wm, out_p, out_m, cnt_p, cnt_m, g_p, g_m):
    """Backpropagate raw-rail gradients through the causal sets.

    ``g_p``/``g_m`` are dL/d(raw rail time); they must already be zero for
    rails that did not fire.  Each causal arrival receives ``g / |C|``,
    which flows to both its input time and its delay.
    """
    R, K = tp.shape
    U = wp.shape[0]
    dwp = np.zeros((U, K))
    dwm = np.zeros((U, K))
    dtp = np.zeros((R, K))
    dtm = np.zeros((R, K))
    for r in range(R):
        for u in range(U):
            gp = g_p[r, u]
            if gp != 0.0 and cnt_p[r, u] > 0:
                a = gp / cnt_p[r, u]
                t = out_p[r, u]
                for j in range(K):
                    if tp[r, j] + wp[u, j] < t:
                        dwp[u, j] += a
                        dtp[r, j] += a
                    if tm[r, j] + wm[u, j] < t:
                        dwm[u, j] += a
                        dtm[r, j] += a
            gm = g_m[r, u]
            if gm != 0.0 and cnt_m[r, u] > 0:
                b = gm / cnt_m[r, u]
                t = out_m[r, u]
                for j in range(K):
                    if tp[r, j] + wm[u, j] < t:
                        dwm[u, j] += b
                        dtp[r, j] += b
                    if tm[r, j] + wp[u, j] < t:
                        dwp[u, j] += b
                        dtm[r, j] += b
    return dwp, dwm, dtp, dtm
