"""numba-compiled per-point kernels; same contracts as ``_numpy``."""
import math

import numpy as np
from numba import njit

_OPTS = dict(cache=True, nogil=True, fastmath=False)


@njit(**_OPTS)
def _psi_point(mu, s, Z, sf2, alpha, psi1, psi2):
    m, q = Z.shape
    delta = True
    for k in range(q):
        if s[k] != 0.0:
            delta = False
            break
    pref1 = 1.0
    for k in range(q):
        pref1 *= alpha[k] * s[k] + 1.0
    pref1 = sf2 / math.sqrt(pref1)
    for j in range(m):
        acc = 0.0
        for k in range(q):
            diff = mu[k] - Z[j, k]
            acc += alpha[k] * diff * diff / (alpha[k] * s[k] + 1.0)
        psi1[j] = pref1 * math.exp(-0.5 * acc)
    if delta:
        for j in range(m):
            for l in range(m):
                psi2[j, l] = psi1[j] * psi1[l]
        return
    pref2 = 1.0
    for k in range(q):
        pref2 *= 2.0 * alpha[k] * s[k] + 1.0
    pref2 = sf2 * sf2 / math.sqrt(pref2)
    for j in range(m):
        for l in range(j, m):
            acc = 0.0
            for k in range(q):
                a2 = 2.0 * alpha[k] * s[k] + 1.0
                dz = Z[j, k] - Z[l, k]
                md = mu[k] - 0.5 * (Z[j, k] + Z[l, k])
                acc += -0.25 * alpha[k] * dz * dz - alpha[k] * md * md / a2
            v = pref2 * math.exp(acc)
            psi2[j, l] = v
            psi2[l, j] = v


@njit(**_OPTS)
def psi_stats(mu, s, Z, sf2, alpha):
    n = mu.shape[0]
    m = Z.shape[0]
    psi1 = np.empty((n, m))
    psi2 = np.empty((n, m, m))
    for i in range(n):
        _psi_point(mu[i], s[i], Z, sf2, alpha, psi1[i], psi2[i])
    return psi1, psi2


@njit(**_OPTS)
def _contrib(y, mu, s, Z, sf2, alpha, with_kl, psi1, psi2, out):
    m, q = Z.shape
    d = y.shape[0]
    _psi_point(mu, s, Z, sf2, alpha, psi1, psi2)
    o_psi1y = m * m
    o_psi0 = o_psi1y + m * d
    o_yy = o_psi0 + 1
    o_kl = o_yy + 1
    o_d1z = o_kl + 1
    o_d1a = o_d1z + m * d * q
    o_d2z = o_d1a + m * d * q
    o_d2a = o_d2z + m * m * q
    for j in range(m):
        for l in range(m):
            out[j * m + l] = psi2[j, l]
        for c in range(d):
            out[o_psi1y + j * d + c] = psi1[j] * y[c]
    out[o_psi0] = sf2
    yy = 0.0
    for c in range(d):
        yy += y[c] * y[c]
    out[o_yy] = yy
    if with_kl:
        kl = 0.0
        mm = 0.0
        for k in range(q):
            kl += s[k] - math.log(s[k])
            mm += mu[k] * mu[k]
        out[o_kl] = 0.5 * (kl + mm - q)
    else:
        out[o_kl] = 0.0
    for j in range(m):
        for k in range(q):
            a1 = alpha[k] * s[k] + 1.0
            diff = mu[k] - Z[j, k]
            dz = psi1[j] * (alpha[k] * diff / a1)
            r = diff / a1
            da = -0.5 * psi1[j] * (r * r + s[k] / a1)
            for c in range(d):
                out[o_d1z + (j * d + c) * q + k] = dz * y[c]
                out[o_d1a + (j * d + c) * q + k] = da * y[c]
    for j in range(m):
        for l in range(m):
            p = psi2[j, l]
            for k in range(q):
                a2 = 2.0 * alpha[k] * s[k] + 1.0
                dz = Z[j, k] - Z[l, k]
                md = mu[k] - 0.5 * (Z[j, k] + Z[l, k])
                e = alpha[k] * md / a2
                out[o_d2z + (j * m + l) * q + k] = p * (-0.5 * alpha[k] * dz + e)
                out[o_d2a + (j * m + l) * q + k] = p * (
                    -0.25 * dz * dz - md * md / (a2 * a2) - s[k] / a2)


@njit(**_OPTS)
def point_contributions(Y, mu, s, Z, sf2, alpha, with_kl):
    n, d = Y.shape
    m, q = Z.shape
    width = m * m + m * d + 3 + 2 * m * d * q + 2 * m * m * q
    out = np.empty((n, width))
    psi1 = np.empty(m)
    psi2 = np.empty((m, m))
    for i in range(n):
        _contrib(Y[i], mu[i], s[i], Z, sf2, alpha, with_kl, psi1, psi2, out[i])
    return out


@njit(**_OPTS)
def _grow(P, cnt, x):
    """Exact in-place add of ``x`` into column expansions; -1 on overflow."""
    kmax = P.shape[0]
    for e in range(x.shape[0]):
        v = x[e]
        if v == 0.0:
            continue
        k = 0
        for t in range(cnt[e]):
            y = P[t, e]
            hi = v + y
            bv = hi - v
            lo = (v - (hi - bv)) + (y - bv)
            if lo != 0.0:
                P[k, e] = lo
                k += 1
            v = hi
        if v != 0.0:
            if k >= kmax:
                return -1
            P[k, e] = v
            k += 1
        for t in range(k, cnt[e]):
            P[t, e] = 0.0
        cnt[e] = k
    return 0


@njit(**_OPTS)
def shard_partials(Y, mu, s, Z, sf2, alpha, with_kl, kmax):
    """Fused per-point contributions + exact accumulation; returns (P, status)."""
    n, d = Y.shape
    m, q = Z.shape
    width = m * m + m * d + 3 + 2 * m * d * q + 2 * m * m * q
    P = np.zeros((kmax, width))
    cnt = np.zeros(width, dtype=np.int64)
    row = np.empty(width)
    psi1 = np.empty(m)
    psi2 = np.empty((m, m))
    for i in range(n):
        _contrib(Y[i], mu[i], s[i], Z, sf2, alpha, with_kl, psi1, psi2, row)
        if _grow(P, cnt, row) != 0:
            return P, -1
    used = 0
    for e in range(width):
        if cnt[e] > used:
            used = cnt[e]
    return P[:used].copy(), 0


@njit(**_OPTS)
def grow_rows(P0, X, kmax):
    E = X.shape[1]
    P = np.zeros((kmax, E))
    cnt = np.zeros(E, dtype=np.int64)
    for t in range(P0.shape[0]):
        if _grow(P, cnt, P0[t]) != 0:
            return P, -1
    for i in range(X.shape[0]):
        if _grow(P, cnt, X[i]) != 0:
            return P, -1
    used = 0
    for e in range(E):
        if cnt[e] > used:
            used = cnt[e]
    return P[:used].copy(), 0


@njit(**_OPTS)
def local_grads(Y, mu, s, Z, sf2, alpha, G2, GB):
    n, d = Y.shape
    m, q = Z.shape
    g_mu = np.zeros((n, q))
    g_s = np.zeros((n, q))
    psi1 = np.empty(m)
    psi2 = np.empty((m, m))
    gy = np.empty(m)
    for i in range(n):
        _psi_point(mu[i], s[i], Z, sf2, alpha, psi1, psi2)
        for j in range(m):
            acc = 0.0
            for c in range(d):
                acc += GB[j, c] * Y[i, c]
            gy[j] = acc
        for k in range(q):
            a1 = alpha[k] * s[i, k] + 1.0
            a2 = 2.0 * alpha[k] * s[i, k] + 1.0
            gm = 0.0
            gs = 0.0
            for j in range(m):
                c1 = alpha[k] * (mu[i, k] - Z[j, k]) / a1
                w = gy[j] * psi1[j]
                gm += -w * c1
                gs += w * (0.5 * c1 * c1 - 0.5 * alpha[k] / a1)
            for j in range(m):
                for l in range(m):
                    e = alpha[k] * (mu[i, k] - 0.5 * (Z[j, k] + Z[l, k])) / a2
                    w = G2[j, l] * psi2[j, l]
                    gm += w * (-2.0 * e)
                    gs += w * (2.0 * e * e - alpha[k] / a2)
            g_mu[i, k] = gm
            g_s[i, k] = gs
    return g_mu, g_s
