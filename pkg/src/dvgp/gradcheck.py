"""Finite-difference audits of the analytic gradients.

Each check perturbs one variable group of the bound (or of the kernel
quantities) by central differences and reports the relative error of the
analytic block, so that a failure names the block that went wrong.
"""
import numpy as np

from . import elbo
from .kernel import (KernelHyperparams, VariationalEmbedding, kernel_matrix, kmm_grads,
                     psi_grads, psi_point)
from .optimizer import finite_diff_grad, relative_error


# Central differences of the bound lose about eps * cond(K_mm) * |F| / h to
# rounding, so the oracle is only trusted on reasonably conditioned K_mm.
MAX_KMM_COND = 1e4


def _spread_inducing(rng, m, q, theta, centres=None):
    # Inducing points sit near the data when it is given: a block whose
    # gradient is below the oracle's rounding floor cannot be checked at all.
    for attempt in range(1000):
        spread = 1.0 + attempt / 100.0
        if centres is None:
            Z = spread * rng.normal(size=(m, q))
        else:
            Z = centres[rng.integers(len(centres), size=m)] + spread * rng.normal(size=(m, q))
        if np.linalg.cond(kernel_matrix(Z, Z, theta)) < MAX_KMM_COND:
            return Z
    raise RuntimeError("could not draw well-conditioned inducing points")


def random_instance(rng, n, m, q, d, gplvm=True):
    """Random bound inputs; ``gplvm=False`` gives zero-variance (regression) points."""
    Y = rng.normal(size=(n, d))
    mu = rng.normal(size=(n, q))
    s = rng.uniform(0.05, 1.0, size=(n, q)) if gplvm else np.zeros((n, q))
    sf2 = rng.uniform(0.5, 2.0)
    alpha = rng.uniform(0.3, 2.0, size=q)
    beta = rng.uniform(0.5, 10.0)
    Z = _spread_inducing(rng, m, q, KernelHyperparams.from_natural(sf2, alpha), mu)
    return dict(Y=Y, mu=mu, s=s, Z=Z, sf2=sf2, alpha=alpha, beta=beta)


def bound_gradient_errors(inst, include_kl=None, h=1e-5):
    """Relative error of every analytic gradient block of the bound."""
    Y, mu, s, Z = inst["Y"], inst["mu"], inst["s"], inst["Z"]
    sf2, alpha, beta = inst["sf2"], np.asarray(inst["alpha"]), inst["beta"]
    gplvm = bool(np.any(s > 0))
    kl = gplvm if include_kl is None else include_kl

    def F(Z=Z, sf2=sf2, alpha=alpha, beta=beta, mu=mu, s=s):
        th = KernelHyperparams.from_natural(sf2, alpha)
        sums = elbo.shard_sums(Y, mu, s, Z, th, kl)
        return elbo.assemble_bound(sums.stats, Z, th, beta)

    th = KernelHyperparams.from_natural(sf2, alpha)
    rep = elbo.evaluate(Y, mu, s, Z, th, beta, include_kl=kl, local=gplvm)
    errs = {
        "Z": relative_error(rep.grad_Z, finite_diff_grad(lambda x: F(Z=x), Z, h)),
        "sf2": relative_error(rep.grad_theta[:1],
                              finite_diff_grad(lambda x: F(sf2=x[0]), np.array([sf2]), h)),
        "alpha": relative_error(rep.grad_theta[1:],
                                finite_diff_grad(lambda x: F(alpha=x), alpha, h)),
        "beta": relative_error(np.array([rep.grad_beta]),
                               finite_diff_grad(lambda x: F(beta=x[0]), np.array([beta]), h)),
    }
    if gplvm:
        errs["mu"] = relative_error(rep.grad_mu, finite_diff_grad(lambda x: F(mu=x), mu, h))
        errs["s"] = relative_error(rep.grad_s, finite_diff_grad(lambda x: F(s=x), s, h))
    return errs


def kernel_gradient_errors(rng, m, q, h=1e-5):
    """Relative errors of the K_mm and single-point psi derivative blocks."""
    sf2 = rng.uniform(0.5, 2.0)
    alpha = rng.uniform(0.3, 2.0, size=q)
    Z = _spread_inducing(rng, m, q, KernelHyperparams.from_natural(sf2, alpha))
    mu = rng.normal(size=q)
    s = rng.uniform(0.05, 1.0, size=q)

    def th(sf2=sf2, alpha=alpha):
        return KernelHyperparams.from_natural(sf2, alpha)

    def psi(Z=Z, sf2=sf2, alpha=alpha, mu=mu, s=s):
        p = psi_point(VariationalEmbedding(mu, s), Z, th(sf2, alpha))
        return np.concatenate([[p.psi0], p.psi1, p.psi2.ravel()])

    def jac(f, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        cols = []
        for idx in np.ndindex(x.shape):
            step = h * max(1.0, abs(x[idx]))
            xp = x.copy()
            xm = x.copy()
            xp[idx] += step
            xm[idx] -= step
            cols.append((f(xp) - f(xm)) / (2.0 * step))
        return np.array(cols)  # (n_vars, n_out)

    kg = kmm_grads(Z, th())
    errs = {}
    fd = jac(lambda x: kernel_matrix(x, x, th()).ravel(), Z)
    errs["K_dZ"] = relative_error(kg.dZ.reshape(m * q, -1), fd)
    fd = jac(lambda x: kernel_matrix(Z, Z, th(x[0])).ravel(), [sf2])
    errs["K_dsf2"] = relative_error(kg.dsf2.ravel(), fd.ravel())
    fd = jac(lambda x: kernel_matrix(Z, Z, th(alpha=x)).ravel(), alpha)
    errs["K_dalpha"] = relative_error(kg.dalpha.reshape(q, -1), fd)

    g = psi_grads(VariationalEmbedding(mu, s), Z, th())

    def pack(d0, d1, d2):
        return np.concatenate([np.atleast_1d(d0), d1, d2.ravel()])

    dZ = np.zeros((m, q, 1 + m + m * m))
    dense1 = g.psi1_dZ_dense()
    dense2 = g.psi2_dZ()
    for j in range(m):
        for k in range(q):
            dZ[j, k] = pack(0.0, dense1[j, k], dense2[j, k])
    errs["psi_dZ"] = relative_error(dZ.reshape(m * q, -1), jac(lambda x: psi(Z=x.reshape(m, q)), Z))
    errs["psi_dsf2"] = relative_error(pack(g.psi0_dsf2, g.psi1_dsf2, g.psi2_dsf2),
                                      jac(lambda x: psi(sf2=x[0]), [sf2])[0])
    da = np.stack([pack(0.0, g.psi1_dalpha[:, k], g.psi2_dalpha[:, :, k]) for k in range(q)])
    errs["psi_dalpha"] = relative_error(da, jac(lambda x: psi(alpha=x), alpha))
    dm = np.stack([pack(0.0, g.psi1_dmu[:, k], g.psi2_dmu[:, :, k]) for k in range(q)])
    errs["psi_dmu"] = relative_error(dm, jac(lambda x: psi(mu=x), mu))
    ds = np.stack([pack(0.0, g.psi1_ds[:, k], g.psi2_ds[:, :, k]) for k in range(q)])
    errs["psi_ds"] = relative_error(ds, jac(lambda x: psi(s=x), s))
    return errs


def run_suite(n_instances=100, seed=0, max_n=20, max_m=6, max_q=4, max_d=3):
    """Worst relative error per block over random bound and kernel instances."""
    rng = np.random.default_rng(seed)
    worst = {}
    for i in range(n_instances):
        n = int(rng.integers(1, max_n + 1))
        m = int(rng.integers(1, max_m + 1))
        q = int(rng.integers(1, max_q + 1))
        d = int(rng.integers(1, max_d + 1))
        inst = random_instance(rng, n, m, q, d, gplvm=bool(i % 2 == 0))
        for k, v in bound_gradient_errors(inst).items():
            worst[k] = max(worst.get(k, 0.0), v)
        for k, v in kernel_gradient_errors(rng, m, q).items():
            worst[k] = max(worst.get(k, 0.0), v)
    return worst


def data_gradient_errors(data, m, q, seed=0, h=1e-5):
    """Gradient audit at a data-driven starting point of a real dataset.

    Regression data uses its inputs as zero-variance embeddings; otherwise
    the embeddings are PCA scores with variance 0.1.
    """
    from .models import _output_variance, _pca_scores

    rng = np.random.default_rng(seed)
    Y = data.Y
    if data.is_regression:
        mu = data.X
        s = np.zeros_like(mu)
    else:
        mu = _pca_scores(Y, min(q, data.d))
        s = np.full_like(mu, 0.1)
    vy = _output_variance(Y)
    alpha = np.ones(mu.shape[1])
    Z = _spread_inducing(rng, m, mu.shape[1], KernelHyperparams.from_natural(vy, alpha), mu)
    inst = dict(Y=Y, mu=mu, s=s, Z=Z, sf2=vy, alpha=alpha, beta=10.0 / vy)
    return bound_gradient_errors(inst, h=h)
