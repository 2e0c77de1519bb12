"""Factorised variational lower bound, optimal q(u), and its gradients.

Everything the bound needs from the data enters through a handful of sums
over points (:class:`SufficientStats`). Those sums are carried as exact
floating-point expansions until they are read, so adding statistics from
different shards gives bit-identical results however the data was split.
"""
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from . import _kernels
from .kernel import ContractError, InducingSet, jittered_kmm, kernel_matrix

LOG_2PI = math.log(2.0 * math.pi)


class SingularKernelError(np.linalg.LinAlgError):
    """Cholesky factorisation failed even after jitter."""

    def __init__(self, matrix_name):
        super().__init__(f"{matrix_name} is not positive definite after jitter")
        self.matrix_name = matrix_name


@dataclass(frozen=True, eq=False)
class SufficientStats:
    sum_psi2: np.ndarray
    sum_psi1T_Y: np.ndarray
    sum_psi0: float
    sum_yy: float
    sum_kl: float
    n_points: int
    _partials: np.ndarray = field(default=None, repr=False)
    _layout: object = field(default=None, repr=False)

    @property
    def m(self):
        return self.sum_psi2.shape[0]

    @property
    def d(self):
        return self.sum_psi1T_Y.shape[1]

    def __add__(self, other):
        if other.n_points == 0 and other._partials is not None and other._partials.size == 0:
            return self
        if self.n_points == 0 and self._partials is not None and self._partials.size == 0:
            return other
        if self._partials is not None and other._partials is not None:
            if self._layout != other._layout:
                raise ContractError("cannot add statistics with different shapes")
            return _ShardSums(np.vstack([self._partials, other._partials]),
                              self.n_points + other.n_points, self._layout).stats
        return SufficientStats(
            self.sum_psi2 + other.sum_psi2,
            self.sum_psi1T_Y + other.sum_psi1T_Y,
            self.sum_psi0 + other.sum_psi0,
            self.sum_yy + other.sum_yy,
            self.sum_kl + other.sum_kl,
            self.n_points + other.n_points,
        )


@dataclass(frozen=True)
class PsiGradSums:
    """Summed psi derivatives w.r.t. the global parameters Z and alpha.

    ``dpsi1Y_dZ[j, c, k]`` = sum_i d(psi1_ij) / dZ_jk * Y_ic and
    ``dpsi2_dZ[j, l, k]`` = sum_i d(psi2_i)_jl / dZ_jk (row form).
    """

    dpsi1Y_dZ: np.ndarray
    dpsi1Y_dalpha: np.ndarray
    dpsi2_dZ: np.ndarray
    dpsi2_dalpha: np.ndarray


@dataclass(frozen=True, eq=False)
class QuDistribution:
    mean: np.ndarray
    cov: np.ndarray
    # same distribution for v = L^-1 u, where K_mm = L L^T
    white_mean: np.ndarray = None
    white_cov: np.ndarray = None


@dataclass(frozen=True)
class BoundReport:
    elbo: float
    grad_Z: np.ndarray
    grad_theta: np.ndarray  # [d/d sf2, d/d alpha_1..q]
    grad_beta: float
    grad_mu: np.ndarray = None
    grad_s: np.ndarray = None

    def is_finite(self):
        blocks = [self.grad_Z, self.grad_theta, np.atleast_1d(self.grad_beta)]
        blocks += [b for b in (self.grad_mu, self.grad_s) if b is not None]
        return bool(np.isfinite(self.elbo) and all(np.all(np.isfinite(b)) for b in blocks))


class _ShardSums:
    """Exact expansions of one or more shards' summed contributions."""

    def __init__(self, partials, n_points, layout):
        self.partials = partials
        self.n_points = int(n_points)
        self.layout = layout
        flat = _kernels.round_expansions(partials)
        if flat.size == 0:
            flat = np.zeros(layout.width)
        self._blocks = layout.unpack(flat)

    @property
    def stats(self):
        b = self._blocks
        return SufficientStats(b["sum_psi2"], b["sum_psi1T_Y"], b["sum_psi0"], b["sum_yy"],
                               b["sum_kl"], self.n_points, self.partials, self.layout)

    @property
    def grad_sums(self):
        b = self._blocks
        return PsiGradSums(b["dpsi1Y_dZ"], b["dpsi1Y_dalpha"], b["dpsi2_dZ"], b["dpsi2_dalpha"])


def _zmat(Z):
    return Z.Z if isinstance(Z, InducingSet) else np.atleast_2d(np.asarray(Z, dtype=float))


def _resolve_kl(s, include_kl):
    has_mass = bool(np.any(np.all(s == 0.0, axis=1))) if s.size else False
    if include_kl is None:
        return not has_mass and s.size > 0
    if include_kl and np.any(s <= 0.0):
        raise ContractError("KL term needs strictly positive variances")
    return bool(include_kl)


def shard_sums(Y, mu, s, Z, theta, include_kl=None):
    """Exact partial sums for one shard given as arrays (rows are points)."""
    Zm = _zmat(Z)
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    mu = np.asarray(mu, dtype=float).reshape(Y.shape[0], -1)
    s = np.asarray(s, dtype=float).reshape(mu.shape)
    if mu.shape[1] != theta.q or Zm.shape[1] != theta.q:
        raise ContractError("latent dimension mismatch between embeddings, Z and kernel")
    kl = _resolve_kl(s, include_kl)
    layout = _kernels.StatsLayout(Zm.shape[0], Y.shape[1], Zm.shape[1])
    P = _kernels.shard_partials(Y, mu, s, Zm, theta.sf2, theta.alpha, kl)
    return _ShardSums(P, Y.shape[0], layout)


def merge_shard_sums(parts, layout):
    """Exactly combine shard sums (order-independent)."""
    parts = list(parts)
    if not parts:
        return _ShardSums(np.zeros((0, layout.width)), 0, layout)
    return _ShardSums(np.vstack([p.partials for p in parts]),
                      sum(p.n_points for p in parts), layout)


def accumulate_stats(shard, Z, theta, include_kl=None, d=1):
    """Sum per-point statistics over a shard of ``(Y_i, embedding_i)`` pairs.

    ``d`` only sets the output width of the all-zero result for an empty shard.
    """
    Zm = _zmat(Z)
    shard = list(shard)
    if not shard:
        m, q = Zm.shape
        layout = _kernels.StatsLayout(m, d, q)
        return _ShardSums(np.zeros((0, layout.width)), 0, layout).stats
    ds = {np.atleast_1d(y).shape[0] for y, _ in shard}
    if len(ds) != 1:
        raise ContractError("all outputs in a shard must share the output dimension")
    qs = {e.mu.shape[0] for _, e in shard}
    if len(qs) != 1:
        raise ContractError("all embeddings must share the latent dimension")
    Y = np.array([np.atleast_1d(np.asarray(y, dtype=float)) for y, _ in shard])
    mu = np.array([e.mu for _, e in shard])
    s = np.array([e.s for _, e in shard])
    return shard_sums(Y, mu, s, Zm, theta, include_kl).stats


def _chol(M, name):
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise SingularKernelError(name) from None


def _check(stats, beta):
    if stats.n_points < 1:
        raise ContractError("the bound needs at least one contributing point")
    if not beta > 0:
        raise ContractError("noise precision beta must be positive")


@dataclass(frozen=True)
class _Factors:
    """Cholesky factors in whitened coordinates.

    With ``K = L L^T``, ``Phi = L^-1 sum_psi2 L^-T`` and ``b = L^-1 B``, the
    bound only needs ``At = I + beta Phi`` (eigenvalues >= 1) and never an
    explicit inverse of the possibly ill-conditioned K.
    """

    Kj: np.ndarray
    L_K: np.ndarray
    Phi: np.ndarray
    b: np.ndarray
    L_At: np.ndarray
    c: np.ndarray  # At^-1 b


def _whiten(L, M):
    """L^-1 M L^-T, symmetrised."""
    W = solve_triangular(L, M, lower=True)
    W = solve_triangular(L, W.T, lower=True)
    return 0.5 * (W + W.T)


def _unwhiten(L, G):
    """L^-T G L^-1 for symmetric G."""
    W = solve_triangular(L, G, lower=True, trans="T")
    W = solve_triangular(L, W.T, lower=True, trans="T")
    return 0.5 * (W + W.T)


def _factors(stats, Zm, theta, beta):
    Kj = jittered_kmm(Zm, theta)
    L_K = _chol(Kj, "K_mm")
    Phi = _whiten(L_K, stats.sum_psi2)
    b = solve_triangular(L_K, stats.sum_psi1T_Y, lower=True)
    L_At = _chol(np.eye(Kj.shape[0]) + beta * Phi, "A = K_mm + beta * sum_psi2")
    c = cho_solve((L_At, True), b)
    return _Factors(Kj, L_K, Phi, b, L_At, c)


def aggregate_A(f, beta):
    """A = K_mm + beta * sum_psi2 rebuilt from the factors (for broadcasting)."""
    A = f.Kj + beta * (f.L_K @ f.Phi @ f.L_K.T)
    return 0.5 * (A + A.T)


def _bound_from_factors(stats, f, beta):
    d = stats.d
    n = stats.n_points
    logdet_At = 2.0 * np.sum(np.log(np.diag(f.L_At)))
    return (-0.5 * d * logdet_At
            - 0.5 * n * d * (LOG_2PI - math.log(beta))
            - 0.5 * beta * (stats.sum_yy + d * stats.sum_psi0 - d * np.trace(f.Phi))
            + 0.5 * beta ** 2 * np.sum(f.b * f.c)
            - stats.sum_kl)


def assemble_bound(stats, Z, theta, beta, d=None):
    """Lower bound F from reduced statistics."""
    _check(stats, beta)
    if d is not None and d != stats.d:
        raise ContractError(f"output dimension {d} does not match statistics ({stats.d})")
    f = _factors(stats, _zmat(Z), theta, float(beta))
    return float(_bound_from_factors(stats, f, float(beta)))


def optimal_qu(stats, Z, theta, beta):
    """q(u) with mean beta K A^-1 B and covariance K A^-1 K.

    The whitened form (u = L v, q(v) = N(beta c, At^-1)) rides along for
    prediction, where it avoids K^-1.
    """
    _check(stats, beta)
    f = _factors(stats, _zmat(Z), theta, float(beta))
    m = f.Kj.shape[0]
    At_inv = cho_solve((f.L_At, True), np.eye(m))
    At_inv = 0.5 * (At_inv + At_inv.T)
    cov = f.L_K @ At_inv @ f.L_K.T
    white_mean = beta * f.c
    return QuDistribution(mean=f.L_K @ white_mean, cov=0.5 * (cov + cov.T),
                          white_mean=white_mean, white_cov=At_inv)


def kl_term(e):
    """KL(q(X_i) || N(0, I)) for a diagonal Gaussian, with its gradients."""
    mu, s = e.mu, e.s
    if np.any(s <= 0):
        raise ContractError("KL term needs strictly positive variances")
    value = 0.5 * (np.sum(s - np.log(s)) + mu @ mu - mu.shape[0])
    return float(value), mu.copy(), 0.5 * (1.0 - 1.0 / s)


@dataclass(frozen=True)
class BoundPartials:
    """F together with its partial derivatives w.r.t. the reduced terms."""

    elbo: float
    dF_dpsi2: np.ndarray
    dF_dB: np.ndarray
    dF_dpsi0: float
    dF_dK: np.ndarray
    dF_dbeta: float
    factors: _Factors


def bound_partials(stats, Z, theta, beta):
    _check(stats, beta)
    beta = float(beta)
    Zm = _zmat(Z)
    f = _factors(stats, Zm, theta, beta)
    return partials_from_factors(stats, f, beta)


def _whitened_partials(L_At, c, beta, d):
    """dF/dPhi and dF/db."""
    m = L_At.shape[0]
    At_inv = cho_solve((L_At, True), np.eye(m))
    G_Phi = 0.5 * beta * d * (np.eye(m) - At_inv) - 0.5 * beta ** 3 * (c @ c.T)
    return 0.5 * (G_Phi + G_Phi.T), beta ** 2 * c, At_inv


def partials_from_factors(stats, f, beta):
    d = stats.d
    n = stats.n_points
    F = _bound_from_factors(stats, f, beta)
    G_Phi, G_b, At_inv = _whitened_partials(f.L_At, f.c, beta, d)
    G2 = _unwhiten(f.L_K, G_Phi)
    GB = solve_triangular(f.L_K, G_b, lower=True, trans="T")
    # K enters only through L: d Phi = -M Phi - Phi M^T, d b = -M b with
    # M = L^-1 dL = lower-triangular half of L^-1 dK L^-T
    H = 2.0 * f.Phi @ G_Phi + f.b @ G_b.T
    S = np.triu(H, 1)
    S = 0.5 * (S + S.T) + 0.5 * np.diag(np.diag(H))
    GK = -_unwhiten(f.L_K, S)
    dbeta = (0.5 * n * d / beta
             - 0.5 * d * np.sum(At_inv * f.Phi)
             - 0.5 * stats.sum_yy - 0.5 * d * stats.sum_psi0
             + 0.5 * d * np.trace(f.Phi)
             + beta * np.sum(f.b * f.c)
             - 0.5 * beta ** 2 * np.sum(f.c * (f.Phi @ f.c)))
    return BoundPartials(
        elbo=float(F),
        dF_dpsi2=G2,
        dF_dB=GB,
        dF_dpsi0=-0.5 * beta * d,
        dF_dK=GK,
        dF_dbeta=float(dbeta),
        factors=f,
    )


def dF_from_aggregates(A, B, Kj, beta, L_K=None, L_At=None):
    """dF/dsum_psi2 and dF/dB from the broadcast aggregates alone.

    Passing the master's Cholesky factors skips refactorising and keeps
    the result identical to the master's own partials.
    """
    d = B.shape[1]
    if L_K is None:
        L_K = _chol(Kj, "K_mm")
    if L_At is None:
        L_At = _chol(_whiten(L_K, A), "A = K_mm + beta * sum_psi2")
    b = solve_triangular(L_K, B, lower=True)
    c = cho_solve((L_At, True), b)
    G_Phi, G_b, _ = _whitened_partials(L_At, c, beta, d)
    return _unwhiten(L_K, G_Phi), solve_triangular(L_K, G_b, lower=True, trans="T")


def global_grads(bp, stats, gs, Z, theta):
    """Chain the reduced-term partials into d F / d (Z, sf2, alpha)."""
    Zm = _zmat(Z)
    m, q = Zm.shape
    sf2, alpha = theta.sf2, theta.alpha
    K = kernel_matrix(Zm, Zm, theta)
    G2, GB, GK = bp.dF_dpsi2, bp.dF_dB, bp.dF_dK
    diff = Zm[:, None, :] - Zm[None, :, :]

    gZ = np.einsum("jc,jck->jk", GB, gs.dpsi1Y_dZ)
    gZ += 2.0 * np.einsum("jl,jlk->jk", G2, gs.dpsi2_dZ)
    gZ += 2.0 * np.einsum("jl,jlk->jk", GK * K, -alpha * diff)

    g_sf2 = (np.sum(GK * bp.factors.Kj) + np.sum(GB * stats.sum_psi1T_Y)
             + 2.0 * np.sum(G2 * stats.sum_psi2)) / sf2 + bp.dF_dpsi0 * stats.n_points
    g_alpha = (np.einsum("jc,jck->k", GB, gs.dpsi1Y_dalpha)
               + np.einsum("jl,jlk->k", G2, gs.dpsi2_dalpha)
               + np.einsum("jl,jlk->k", GK * K, -0.5 * diff ** 2))
    return gZ, np.concatenate([[g_sf2], g_alpha])


def local_grads(G2, GB, Y, mu, s, Z, theta, include_kl):
    """d F / d mu_i and d F / d s_i for the given points."""
    g_mu, g_s = _kernels.local_grads(Y, mu, s, _zmat(Z), theta.sf2, theta.alpha, G2, GB)
    if include_kl:
        g_mu = g_mu - mu
        g_s = g_s - 0.5 * (1.0 - 1.0 / s)
    return g_mu, g_s


def bound_grads(stats, grad_sums, Z, theta, beta, Y=None, mu=None, s=None, include_kl=None):
    """Full report: F and the gradient of every block.

    ``Y, mu, s`` are only needed for the per-point (GPLVM) gradients; leave
    them out in regression mode.
    """
    bp = bound_partials(stats, Z, theta, beta)
    gZ, gtheta = global_grads(bp, stats, grad_sums, Z, theta)
    g_mu = g_s = None
    if mu is not None:
        mu = np.asarray(mu, dtype=float)
        s = np.asarray(s, dtype=float)
        kl = _resolve_kl(s, include_kl)
        g_mu, g_s = local_grads(bp.dF_dpsi2, bp.dF_dB, Y, mu, s, Z, theta, kl)
    return BoundReport(bp.elbo, gZ, gtheta, bp.dF_dbeta, g_mu, g_s)


def evaluate(Y, mu, s, Z, theta, beta, include_kl=None, local=None):
    """Single-process bound and gradients for arrays of points.

    ``local`` controls whether per-point gradients are reported; by default
    they are when any point has nonzero variance.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    mu = np.asarray(mu, dtype=float).reshape(Y.shape[0], -1)
    s = np.asarray(s, dtype=float).reshape(mu.shape)
    sums = shard_sums(Y, mu, s, Z, theta, include_kl)
    if local is None:
        local = bool(np.any(s > 0))
    if local:
        return bound_grads(sums.stats, sums.grad_sums, Z, theta, beta, Y, mu, s, include_kl)
    return bound_grads(sums.stats, sums.grad_sums, Z, theta, beta)
