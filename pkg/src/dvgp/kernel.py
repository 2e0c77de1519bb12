"""RBF-ARD kernel, its expectations under diagonal Gaussian inputs, and derivatives.

The kernel is ``k(x, x') = sf2 * exp(-0.5 * sum_q alpha_q (x_q - x'_q)^2)``
where ``alpha`` holds per-dimension precisions (inverse squared lengthscales).
"""
from dataclasses import dataclass

import numpy as np

from ._kernels import _numpy

#: Relative jitter added to K_mm (scaled by sf2) before any factorization.
JITTER = 1e-9


class ContractError(ValueError):
    """An input violated a documented precondition."""


@dataclass(frozen=True)
class KernelHyperparams:
    """Signal variance and ARD precisions, stored in log space."""

    log_sf2: float
    log_alpha: np.ndarray

    def __post_init__(self):
        la = np.atleast_1d(np.asarray(self.log_alpha, dtype=float)).copy()
        la.setflags(write=False)
        object.__setattr__(self, "log_alpha", la)
        object.__setattr__(self, "log_sf2", float(self.log_sf2))
        # log_alpha = -inf (zero precision) is admitted: the dimension is ignored
        if not np.isfinite(self.log_sf2) or np.any(np.isnan(la)) or np.any(la == np.inf):
            raise ContractError("kernel hyperparameters must be finite in log space")

    @classmethod
    def from_natural(cls, sf2, alpha):
        alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
        if not sf2 > 0 or np.any(alpha < 0):
            raise ContractError("sf2 must be positive and alpha nonnegative")
        with np.errstate(divide="ignore"):
            return cls(np.log(sf2), np.log(alpha))

    @property
    def sf2(self):
        return float(np.exp(self.log_sf2))

    @property
    def alpha(self):
        return np.exp(self.log_alpha)

    @property
    def lengthscales(self):
        return 1.0 / np.sqrt(self.alpha)

    @property
    def q(self):
        return self.log_alpha.shape[0]


@dataclass(frozen=True)
class InducingSet:
    Z: np.ndarray

    def __post_init__(self):
        Z = np.atleast_2d(np.asarray(self.Z, dtype=float)).copy()
        if Z.shape[0] < 1:
            raise ContractError("need at least one inducing point")
        if len(np.unique(Z, axis=0)) != Z.shape[0]:
            raise ContractError("inducing points must be distinct")
        Z.setflags(write=False)
        object.__setattr__(self, "Z", Z)

    @property
    def m(self):
        return self.Z.shape[0]


@dataclass(frozen=True)
class VariationalEmbedding:
    """Mean and diagonal variance of q(X_i); ``s = 0`` is a point mass."""

    mu: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float)).copy()
        s = np.atleast_1d(np.asarray(self.s, dtype=float)).copy()
        if mu.shape != s.shape or mu.ndim != 1:
            raise ContractError("mu and s must be vectors of equal length")
        if np.any(s < 0):
            raise ContractError("variances must be nonnegative")
        mu.setflags(write=False)
        s.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "s", s)

    @classmethod
    def point_mass(cls, x):
        x = np.asarray(x, dtype=float)
        return cls(x, np.zeros_like(x))

    @property
    def is_point_mass(self):
        return bool(np.all(self.s == 0.0))


@dataclass(frozen=True)
class PsiPoint:
    psi0: float
    psi1: np.ndarray
    psi2: np.ndarray


@dataclass(frozen=True)
class KmmGrads:
    """Dense derivatives of K_mm: ``dZ[j, k]`` is dK/dZ_jk (m, m)."""

    dZ: np.ndarray       # (m, q, m, m)
    dsf2: np.ndarray     # (m, m)
    dalpha: np.ndarray   # (q, m, m)


@dataclass(frozen=True)
class PsiGrads:
    """Derivatives of one point's psi statistics.

    psi0 only depends on sf2 (derivative 1). psi1 blocks are indexed
    ``[j, k]``; for Z only the diagonal entry d psi1_j / d Z_jk is stored.
    ``psi2_dZ_row[j, l, k]`` is d psi2_jl / d Z_jk; the full derivative
    matrix for Z_jk is that row plus its transpose (see :meth:`psi2_dZ`).
    """

    psi0_dsf2: float
    psi1_dZ: np.ndarray
    psi1_dsf2: np.ndarray
    psi1_dalpha: np.ndarray
    psi1_dmu: np.ndarray
    psi1_ds: np.ndarray
    psi2_dZ_row: np.ndarray
    psi2_dsf2: np.ndarray
    psi2_dalpha: np.ndarray
    psi2_dmu: np.ndarray
    psi2_ds: np.ndarray

    def psi1_dZ_dense(self):
        m, q = self.psi1_dZ.shape
        out = np.zeros((m, q, m))
        for j in range(m):
            out[j, :, j] = self.psi1_dZ[j]
        return out

    def psi2_dZ(self):
        """Dense (m, q, m, m) array; entry [j, k] is d psi2 / d Z_jk."""
        m, _, q = self.psi2_dZ_row.shape
        out = np.zeros((m, q, m, m))
        for j in range(m):
            for k in range(q):
                out[j, k, j, :] += self.psi2_dZ_row[j, :, k]
                out[j, k, :, j] += self.psi2_dZ_row[j, :, k]
        return out


def _check_dims(X, theta, what="inputs"):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != theta.q:
        raise ContractError(
            f"{what} have {X.shape[1]} columns but the kernel has {theta.q} ARD dimensions")
    return X


def kernel_matrix(X1, X2, theta):
    X1 = _check_dims(X1, theta)
    X2 = _check_dims(X2, theta)
    diff = X1[:, None, :] - X2[None, :, :]
    return theta.sf2 * np.exp(-0.5 * np.sum(theta.alpha * diff ** 2, axis=2))


def jittered_kmm(Z, theta):
    Zm = Z.Z if isinstance(Z, InducingSet) else Z
    K = kernel_matrix(Zm, Zm, theta)
    return K + JITTER * theta.sf2 * np.eye(K.shape[0])


def kmm_grads(Z, theta):
    Zm = _check_dims(Z.Z if isinstance(Z, InducingSet) else Z, theta)
    K = kernel_matrix(Zm, Zm, theta)
    m, q = Zm.shape
    alpha = theta.alpha
    dZ = np.zeros((m, q, m, m))
    diff = Zm[:, None, :] - Zm[None, :, :]  # (m, m, q): Z_a - Z_b
    for j in range(m):
        for k in range(q):
            row = -alpha[k] * diff[j, :, k] * K[j, :]
            dZ[j, k, j, :] += row
            dZ[j, k, :, j] += row
            dZ[j, k, j, j] = 0.0
    dalpha = np.moveaxis(-0.5 * K[:, :, None] * diff ** 2, 2, 0)
    return KmmGrads(dZ=dZ, dsf2=K / theta.sf2, dalpha=dalpha)


def psi_point(e, Z, theta):
    Zm = Z.Z if isinstance(Z, InducingSet) else np.atleast_2d(Z)
    _check_dims(e.mu[None, :], theta, "embedding")
    _check_dims(Zm, theta, "inducing points")
    psi1, psi2 = _numpy.psi_stats(e.mu[None, :], e.s[None, :], Zm, theta.sf2, theta.alpha)
    return PsiPoint(psi0=theta.sf2, psi1=psi1[0], psi2=psi2[0])


def psi_grads(e, Z, theta):
    Zm = Z.Z if isinstance(Z, InducingSet) else np.atleast_2d(Z)
    _check_dims(e.mu[None, :], theta, "embedding")
    _check_dims(Zm, theta, "inducing points")
    mu, s = e.mu[None, :], e.s[None, :]
    psi1, psi2 = _numpy.psi_stats(mu, s, Zm, theta.sf2, theta.alpha)
    der = _numpy.psi_derivs(mu, s, Zm, theta.alpha, psi1, psi2)
    sf2 = theta.sf2
    return PsiGrads(
        psi0_dsf2=1.0,
        psi1_dZ=der["d1_Z"][0],
        psi1_dsf2=psi1[0] / sf2,
        psi1_dalpha=der["d1_alpha"][0],
        psi1_dmu=der["d1_mu"][0],
        psi1_ds=der["d1_s"][0],
        psi2_dZ_row=der["d2_Zrow"][0],
        psi2_dsf2=2.0 * psi2[0] / sf2,
        psi2_dalpha=der["d2_alpha"][0],
        psi2_dmu=der["d2_mu"][0],
        psi2_ds=der["d2_s"][0],
    )


__all__ = [
    "JITTER", "ContractError", "KernelHyperparams", "InducingSet", "VariationalEmbedding",
    "PsiPoint", "KmmGrads", "PsiGrads", "kernel_matrix", "jittered_kmm", "kmm_grads",
    "psi_point", "psi_grads",
]
