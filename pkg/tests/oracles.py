"""Independent reference implementations used as test oracles.

Nothing here imports the package's bound or statistics code: the psi
statistics are written out as scalar loops and the bound is assembled from
full dense matrices with explicit solves.
"""
import math

import numpy as np
from dvgp.kernel import JITTER


def rbf_loop(X1, X2, sf2, alpha):
    out = np.empty((len(X1), len(X2)))
    for a in range(len(X1)):
        for b in range(len(X2)):
            r = sum(alpha[k] * (X1[a][k] - X2[b][k]) ** 2 for k in range(len(alpha)))
            out[a, b] = sf2 * math.exp(-0.5 * r)
    return out


def psi1_loop(mu, s, Z, sf2, alpha):
    """(n, m) expected kernel values under N(mu_i, diag(s_i))."""
    n, m, q = len(mu), len(Z), len(alpha)
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            v = sf2
            for k in range(q):
                den = alpha[k] * s[i][k] + 1.0
                v *= math.exp(-0.5 * alpha[k] * (mu[i][k] - Z[j][k]) ** 2 / den) / math.sqrt(den)
            out[i, j] = v
    return out


def psi2_loop(mu, s, Z, sf2, alpha):
    """(n, m, m) expected outer products of kernel rows."""
    n, m, q = len(mu), len(Z), len(alpha)
    out = np.empty((n, m, m))
    for i in range(n):
        for j in range(m):
            for l in range(m):
                v = sf2 * sf2
                for k in range(q):
                    den = 2.0 * alpha[k] * s[i][k] + 1.0
                    zbar = 0.5 * (Z[j][k] + Z[l][k])
                    v *= math.exp(-0.25 * alpha[k] * (Z[j][k] - Z[l][k]) ** 2
                                  - alpha[k] * (mu[i][k] - zbar) ** 2 / den) / math.sqrt(den)
                out[i, j, l] = v
    return out


def kl_diag(mu, s):
    return 0.5 * float(np.sum(s - np.log(s) + mu ** 2 - 1.0))


def dense_bound(Y, mu, s, Z, sf2, alpha, beta, include_kl):
    """Collapsed bound from full n x m matrices and explicit inverses."""
    Y = np.asarray(Y, dtype=float)
    n, d = Y.shape
    m = len(Z)
    K = rbf_loop(Z, Z, sf2, alpha) + JITTER * sf2 * np.eye(m)
    P1 = psi1_loop(mu, s, Z, sf2, alpha)
    P2 = psi2_loop(mu, s, Z, sf2, alpha).sum(axis=0)
    A = K + beta * P2
    B = P1.T @ Y
    _, ldK = np.linalg.slogdet(K)
    _, ldA = np.linalg.slogdet(A)
    F = (-0.5 * n * d * math.log(2 * math.pi) + 0.5 * n * d * math.log(beta)
         + 0.5 * d * ldK - 0.5 * d * ldA
         - 0.5 * beta * np.sum(Y * Y)
         + 0.5 * beta ** 2 * np.trace(B.T @ np.linalg.solve(A, B))
         - 0.5 * beta * d * n * sf2
         + 0.5 * beta * d * np.trace(np.linalg.solve(K, P2)))
    if include_kl:
        F -= kl_diag(np.asarray(mu), np.asarray(s))
    return float(F)


def exact_lml(X, Y, sf2, alpha, beta):
    """Log marginal likelihood of the full GP, summed over output columns."""
    Y = np.asarray(Y, dtype=float)
    n, d = Y.shape
    C = rbf_loop(X, X, sf2, alpha) + np.eye(n) / beta
    L = np.linalg.cholesky(C)
    W = np.linalg.solve(L, Y)
    return float(-0.5 * np.sum(W * W) - d * np.sum(np.log(np.diag(L)))
                 - 0.5 * n * d * math.log(2 * math.pi))


def exact_posterior(X, Y, Xs, sf2, alpha, beta):
    """Full-GP predictive mean (n*, d) and latent variance (n*,)."""
    n = len(X)
    C = rbf_loop(X, X, sf2, alpha) + np.eye(n) / beta
    Ks = rbf_loop(X, Xs, sf2, alpha)
    mean = Ks.T @ np.linalg.solve(C, Y)
    var = sf2 - np.sum(Ks * np.linalg.solve(C, Ks), axis=0)
    return mean, var
