"""Pure-numpy per-point kernels (vectorised over points)."""
import numpy as np


def psi_stats(mu, s, Z, sf2, alpha):
    """psi1 (n, m) and psi2 (n, m, m) for a batch of diagonal Gaussians.

    Points whose variance is identically zero take the delta-density path,
    where psi2 is the exact outer product of psi1.
    """
    n, _ = mu.shape
    delta = np.all(s == 0.0, axis=1)
    diff = mu[:, None, :] - Z[None, :, :]
    a1 = alpha * s + 1.0
    pref1 = sf2 / np.sqrt(np.prod(a1, axis=1))
    psi1 = pref1[:, None] * np.exp(-0.5 * np.sum(alpha * diff ** 2 / a1[:, None, :], axis=2))

    m = Z.shape[0]
    psi2 = np.empty((n, m, m))
    if np.any(delta):
        p1 = psi1[delta]
        psi2[delta] = p1[:, :, None] * p1[:, None, :]
    gen = ~delta
    if np.any(gen):
        a2 = 2.0 * alpha * s[gen] + 1.0
        dZ = Z[:, None, :] - Z[None, :, :]
        zbar = 0.5 * (Z[:, None, :] + Z[None, :, :])
        mdiff = mu[gen][:, None, None, :] - zbar[None]
        expo = -0.25 * alpha * dZ ** 2 - alpha * mdiff ** 2 / a2[:, None, None, :]
        pref2 = sf2 * sf2 / np.sqrt(np.prod(a2, axis=1))
        psi2[gen] = pref2[:, None, None] * np.exp(np.sum(expo, axis=3))
    return psi1, psi2


def psi_derivs(mu, s, Z, alpha, psi1, psi2):
    """Per-point partial derivatives of psi1 and psi2.

    psi1 blocks are (n, m, q); entry [i, j, k] of ``d1_Z`` is the derivative
    of psi1_j w.r.t. Z_jk (all other Z rows give zero). ``d2_Zrow[i, j, l, k]``
    is d psi2_jl / d Z_jk; by symmetry the same value is d psi2_lj / d Z_jk.
    """
    diff = mu[:, None, :] - Z[None, :, :]
    a1 = (alpha * s + 1.0)[:, None, :]
    c1 = alpha * diff / a1
    p1 = psi1[:, :, None]
    d1_Z = p1 * c1
    d1_mu = -d1_Z
    d1_alpha = -0.5 * p1 * ((diff / a1) ** 2 + s[:, None, :] / a1)
    d1_s = p1 * (0.5 * c1 ** 2 - 0.5 * alpha / a1)

    a2 = (2.0 * alpha * s + 1.0)[:, None, None, :]
    dZ = Z[:, None, :] - Z[None, :, :]
    zbar = 0.5 * (Z[:, None, :] + Z[None, :, :])
    mdiff = mu[:, None, None, :] - zbar[None]
    e = alpha * mdiff / a2
    p2 = psi2[..., None]
    d2_Zrow = p2 * (-0.5 * alpha * dZ + e)
    d2_mu = p2 * (-2.0 * e)
    d2_s = p2 * (2.0 * e ** 2 - alpha / a2)
    d2_alpha = p2 * (-0.25 * dZ ** 2 - mdiff ** 2 / a2 ** 2 - s[:, None, None, :] / a2)
    return {
        "d1_Z": d1_Z, "d1_mu": d1_mu, "d1_alpha": d1_alpha, "d1_s": d1_s,
        "d2_Zrow": d2_Zrow, "d2_mu": d2_mu, "d2_alpha": d2_alpha, "d2_s": d2_s,
    }


def kl_points(mu, s):
    q = mu.shape[1]
    return 0.5 * (np.sum(s - np.log(s), axis=1) + np.sum(mu * mu, axis=1) - q)


def point_contributions(Y, mu, s, Z, sf2, alpha, with_kl):
    """Per-point summands of every reduced quantity, one row per point.

    Row layout follows :class:`dvgp._kernels.StatsLayout`.
    """
    n, d = Y.shape
    m, q = Z.shape
    psi1, psi2 = psi_stats(mu, s, Z, sf2, alpha)
    der = psi_derivs(mu, s, Z, alpha, psi1, psi2)
    kl = kl_points(mu, s) if with_kl else np.zeros(n)
    yy = np.sum(Y * Y, axis=1)
    Yb = Y[:, None, :, None]
    parts = [
        psi2.reshape(n, m * m),
        (psi1[:, :, None] * Y[:, None, :]).reshape(n, m * d),
        np.full((n, 1), float(sf2)),
        yy[:, None],
        kl[:, None],
        (der["d1_Z"][:, :, None, :] * Yb).reshape(n, m * d * q),
        (der["d1_alpha"][:, :, None, :] * Yb).reshape(n, m * d * q),
        der["d2_Zrow"].reshape(n, m * m * q),
        der["d2_alpha"].reshape(n, m * m * q),
    ]
    return np.concatenate(parts, axis=1)


def local_grads(Y, mu, s, Z, sf2, alpha, G2, GB):
    """d F / d mu and d F / d s through psi1 and psi2 (no KL part)."""
    psi1, psi2 = psi_stats(mu, s, Z, sf2, alpha)
    der = psi_derivs(mu, s, Z, alpha, psi1, psi2)
    gy = Y @ GB.T
    g_mu = np.einsum("ij,ijk->ik", gy, der["d1_mu"]) + np.einsum("jl,ijlk->ik", G2, der["d2_mu"])
    g_s = np.einsum("ij,ijk->ik", gy, der["d1_s"]) + np.einsum("jl,ijlk->ik", G2, der["d2_s"])
    return g_mu, g_s


def _two_sum(a, b):
    hi = a + b
    bv = hi - a
    lo = (a - (hi - bv)) + (b - bv)
    return hi, lo


def grow_rows(P, X):
    """Add each row of ``X`` exactly into the column-wise expansions ``P``.

    ``P`` is (K, E), zero padded; the result keeps nonzero components packed
    at the top of each column in increasing magnitude.
    """
    P = np.asarray(P, dtype=float)
    for x in np.asarray(X, dtype=float):
        rows = []
        v = x
        for y in P:
            v, lo = _two_sum(v, y)
            rows.append(lo)
        rows.append(v)
        P = np.vstack(rows)
        nz = P != 0.0
        if not nz.all():
            order = np.argsort(~nz, axis=0, kind="stable")
            P = np.take_along_axis(P, order, axis=0)
            keep = np.count_nonzero(nz, axis=0).max() if nz.any() else 0
            P = P[:keep]
    return P
