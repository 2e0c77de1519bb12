"""Fitting sparse GP regression and the Bayesian GPLVM, prediction, and model files."""
import json
import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from . import elbo
from .distributed import Cluster, GlobalParams, IterationSkipped
from .kernel import ContractError, InducingSet, KernelHyperparams, VariationalEmbedding
from .kernel import jittered_kmm, kernel_matrix
from .optimizer import FlatParams, SCGOptions, scg_minimize

log = logging.getLogger(__name__)

FORMAT_VERSION = 1

# exp overflows just above 709; trial steps past this are rejected outright
_LOG_MAX = 700.0


@dataclass(frozen=True, eq=False)
class Dataset:
    """Outputs ``Y`` (n, d) and, for regression, inputs ``X`` (n, q)."""

    Y: np.ndarray
    X: np.ndarray = None

    def __post_init__(self):
        Y = np.asarray(self.Y, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        if Y.ndim != 2 or Y.shape[0] < 1 or Y.shape[1] < 1:
            raise ContractError("Y must be a non-empty (n, d) array")
        object.__setattr__(self, "Y", Y)
        if self.X is not None:
            X = np.asarray(self.X, dtype=float)
            if X.ndim == 1:
                X = X[:, None]
            if X.shape[0] != Y.shape[0]:
                raise ContractError(f"X has {X.shape[0]} rows but Y has {Y.shape[0]}")
            object.__setattr__(self, "X", X)

    @property
    def n(self):
        return self.Y.shape[0]

    @property
    def d(self):
        return self.Y.shape[1]

    @property
    def is_regression(self):
        return self.X is not None


@dataclass(frozen=True)
class FitOptions:
    max_iters: int = 500
    grad_tol: float = 1e-4
    value_tol: float = 1e-9
    n_workers: int = 1
    failure_rate: float = 0.0
    seed: int = 0
    fix_Z: bool = False
    # GPLVM only: keep the embeddings at their initial values
    fix_embeddings: bool = False
    include_kl: bool = True

    def scg(self):
        return SCGOptions(max_iters=self.max_iters, grad_tol=self.grad_tol,
                          value_tol=self.value_tol)


@dataclass(frozen=True, eq=False)
class FittedModel:
    mode: str  # "sgpr" or "gplvm"
    params: GlobalParams
    qu: elbo.QuDistribution
    elbo: float
    initial_elbo: float
    mu: np.ndarray = None
    s: np.ndarray = None
    seed: int = 0
    history: list = field(default_factory=list, repr=False)
    message: str = ""

    @property
    def ard_weights(self):
        return self.params.theta.alpha

    @property
    def embeddings(self):
        if self.mu is None:
            return None
        return [VariationalEmbedding(m, v) for m, v in zip(self.mu, self.s)]


# ---- initialisation ---------------------------------------------------------

def _pca_scores(Y, q):
    Y = np.asarray(Y, dtype=float)
    if q > Y.shape[1]:
        raise ContractError(f"latent dimension q={q} exceeds output dimension d={Y.shape[1]}")
    Yc = Y - Y.mean(axis=0)
    U, S, _ = np.linalg.svd(Yc, full_matrices=False)
    scores = U[:, :q] * S[:q]
    sd = scores.std(axis=0)
    tiny = sd <= 1e-12 * max(1.0, np.abs(Y).max(initial=0.0))
    scores[:, tiny] = 0.0
    scores[:, ~tiny] /= sd[~tiny]
    return scores


def init_embeddings(Y, q):
    """PCA scores rescaled to unit variance, with variance 0.1 in every dimension."""
    mu = _pca_scores(Y, q)
    return [VariationalEmbedding(row, np.full(q, 0.1)) for row in mu]


def _output_variance(Y):
    v = float(np.mean(np.var(Y, axis=0)))
    if v <= 0.0:
        warnings.warn("outputs have zero variance; using unit scale for initialisation",
                      stacklevel=3)
        v = 1.0
    return v


def _pick_inducing(points, m, rng):
    n, q = points.shape
    if m > n:
        warnings.warn(f"m={m} inducing points for only {n} data points", stacklevel=3)
        extra = points[rng.integers(0, n, m - n)]
        scale = points.std(axis=0) + 1.0
        extra = extra + 1e-2 * scale * rng.standard_normal(extra.shape)
        return np.vstack([points[rng.permutation(n)], extra])
    return points[rng.choice(n, size=m, replace=False)].copy()


def initial_params(Y, inputs, m, seed=0, gplvm=False):
    """Scale-free starting point: sf2 = var(Y), beta = 100/var(Y), Z from the inputs."""
    rng = np.random.default_rng(seed)
    vy = _output_variance(Y)
    q = inputs.shape[1]
    if gplvm:
        alpha = np.ones(q)
    else:
        vx = np.var(inputs, axis=0)
        alpha = 1.0 / np.where(vx > 0, vx, 1.0)
    Z = _pick_inducing(inputs, int(m), rng)
    theta = KernelHyperparams.from_natural(vy, alpha)
    return GlobalParams.from_natural(Z, theta, 100.0 / vy)


# ---- fitting ----------------------------------------------------------------

def _flat_layout(m, q, n, opts, gplvm):
    blocks = []
    if not opts.fix_Z:
        blocks.append(("Z", (m, q)))
    blocks += [("log_sf2", ()), ("log_alpha", (q,)), ("log_beta", ())]
    if gplvm and not opts.fix_embeddings:
        blocks += [("mu", (n, q)), ("log_s", (n, q))]
    return FlatParams(blocks)


def _full_elbo(Y, mu, s, params, include_kl):
    stats = elbo.shard_sums(Y, mu, s, params.Z, params.theta, include_kl).stats
    return elbo.assemble_bound(stats, params.Z, params.theta, params.beta), stats


def _fit(data_Y, mu0, s0, params0, opts, gplvm, include_kl, callback=None):
    Y = data_Y
    n, q = mu0.shape
    m = params0.Z.m
    flat = _flat_layout(m, q, n, opts, gplvm)
    fixed_Z = params0.Z
    mu_fixed, s_fixed = mu0, s0

    values = {"Z": params0.Z.Z, "log_sf2": params0.theta.log_sf2,
              "log_alpha": np.asarray(params0.theta.log_alpha), "log_beta": params0.log_beta}
    if "mu" in flat:
        values["mu"] = mu0
        values["log_s"] = np.log(s0)
    x0 = flat.pack(values)

    def decode(x):
        v = flat.unpack(x)
        Z = InducingSet(v["Z"]) if "Z" in flat else fixed_Z
        theta = KernelHyperparams(v["log_sf2"], v["log_alpha"])
        params = GlobalParams(Z, theta, v["log_beta"])
        if "mu" in flat:
            return params, v["mu"], np.exp(v["log_s"])
        return params, mu_fixed, s_fixed

    cluster = Cluster(Y, mu0, s0, n_workers=opts.n_workers, gplvm=gplvm, include_kl=include_kl,
                      failure_rate=opts.failure_rate, seed=opts.seed)

    def objective(x):
        # a wild trial step can overflow the exp of a log parameter or break a
        # factorisation; report it as non-finite and let the optimizer back off.
        # errstate does not reach the worker threads, hence the explicit check
        v = flat.unpack(x)
        if any(np.max(v[k]) > _LOG_MAX for k in v if k.startswith("log_")):
            return np.inf, np.full(x.shape, np.nan)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                params, mu, s = decode(x)
                if "mu" in flat:
                    cluster.set_embeddings(mu, s)
                report, _ = cluster.evaluate(params)
        except (IterationSkipped, ValueError, np.linalg.LinAlgError):
            return np.inf, np.full(x.shape, np.nan)
        theta = params.theta
        g = {"log_sf2": -report.grad_theta[0] * theta.sf2,
             "log_alpha": -report.grad_theta[1:] * theta.alpha,
             "log_beta": -report.grad_beta * params.beta}
        if "Z" in flat:
            g["Z"] = -report.grad_Z
        if "mu" in flat:
            g["mu"] = -report.grad_mu
            g["log_s"] = -report.grad_s * s
        return -report.elbo, flat.pack(g)

    history = []
    t0 = time.perf_counter()

    def on_iter(it, x, f, g):
        trace = cluster.last_trace
        rec = {"iter": it, "elbo": float(-f), "grad_norm": float(np.max(np.abs(g), initial=0.0)),
               "alive_workers": trace.n_alive if trace else cluster.n_workers,
               "elapsed_ms": 1000.0 * (time.perf_counter() - t0)}
        history.append(rec)
        if callback is not None:
            callback(rec)

    initial, _ = _full_elbo(Y, mu0, s0, params0, include_kl)
    try:
        res = scg_minimize(objective, x0, opts.scg(), callback=on_iter)
    finally:
        cluster.close()
    params, mu, s = decode(res.x)
    final, stats = _full_elbo(Y, mu, s, params, include_kl)
    qu = elbo.optimal_qu(stats, params.Z, params.theta, params.beta)
    return params, mu, s, qu, final, initial, history, res.message


def fit_sparse_gp(data, m, opts=None, init=None, callback=None):
    """Sparse GP regression; inputs enter as zero-variance embeddings.

    ``init`` overrides the default starting :class:`GlobalParams`.
    ``callback(record)`` receives each iteration's metrics as they happen.
    """
    opts = opts or FitOptions()
    if not data.is_regression:
        raise ContractError("regression needs inputs X; use fit_gplvm for outputs only")
    X = data.X
    params0 = init or initial_params(data.Y, X, m, opts.seed)
    params, _, _, qu, final, initial, history, msg = _fit(
        data.Y, X, np.zeros_like(X), params0, opts, gplvm=False, include_kl=False,
        callback=callback)
    return FittedModel("sgpr", params, qu, final, initial, seed=opts.seed,
                       history=history, message=msg)


def fit_gplvm(data, q, m, opts=None, init=None, mu0=None, s0=None, callback=None):
    """Bayesian GPLVM: joint fit of Z, kernel, noise and the embeddings q(X).

    Embeddings start from PCA (``mu0``/``s0`` override). With
    ``opts.fix_embeddings`` they stay put; ``s0 = 0`` then turns the model
    into regression on ``mu0``.
    """
    opts = opts or FitOptions()
    Y = data.Y
    if q < 1 or m < 1:
        raise ContractError("q and m must be at least 1")
    if mu0 is None:
        mu0 = _pca_scores(Y, q)
    mu0 = np.asarray(mu0, dtype=float).reshape(Y.shape[0], q)
    s0 = np.full_like(mu0, 0.1) if s0 is None else np.broadcast_to(
        np.asarray(s0, dtype=float), mu0.shape).copy()
    if np.any(s0 < 0) or (not opts.fix_embeddings and np.any(s0 <= 0)):
        raise ContractError("embedding variances must be positive when optimised")
    include_kl = opts.include_kl
    if include_kl and np.any(s0 <= 0):
        raise ContractError("the KL term needs positive embedding variances")
    params0 = init or initial_params(Y, mu0, m, opts.seed, gplvm=True)
    params, mu, s, qu, final, initial, history, msg = _fit(
        Y, mu0, s0, params0, opts, gplvm=True, include_kl=include_kl, callback=callback)
    return FittedModel("gplvm", params, qu, final, initial, mu=mu, s=s, seed=opts.seed,
                       history=history, message=msg)


# ---- prediction ---------------------------------------------------------------

def predict(model, Xstar, include_noise=False):
    """Predictive mean (n*, d) and variance (n*,) with q(u) integrated out."""
    if not isinstance(model, FittedModel):
        raise ContractError("predict needs a fitted model")
    p = model.params
    Xstar = np.atleast_2d(np.asarray(Xstar, dtype=float))
    if Xstar.shape[1] != p.theta.q:
        raise ContractError(f"inputs have {Xstar.shape[1]} columns, model expects {p.theta.q}")
    L = np.linalg.cholesky(jittered_kmm(p.Z, p.theta))
    qu = model.qu
    if qu.white_mean is None:
        w_mean = solve_triangular(L, qu.mean, lower=True)
        w_cov = solve_triangular(L, solve_triangular(L, qu.cov, lower=True).T, lower=True)
    else:
        w_mean, w_cov = qu.white_mean, qu.white_cov
    a = solve_triangular(L, kernel_matrix(p.Z.Z, Xstar, p.theta), lower=True)  # L^-1 K_m*
    mean = a.T @ w_mean
    var = p.theta.sf2 - np.sum(a * a, axis=0) + np.sum(a * (w_cov @ a), axis=0)
    var = np.maximum(var, 0.0)
    if include_noise:
        var = var + 1.0 / p.beta
    return mean, var


# ---- serialisation ------------------------------------------------------------

def save_model(model, path):
    """Write a self-describing ``.npz``: arrays plus a JSON ``meta`` record."""
    p = model.params
    meta = {"format": "dvgp-model", "version": FORMAT_VERSION, "mode": model.mode,
            "m": p.Z.m, "q": p.theta.q, "d": int(model.qu.mean.shape[1]),
            "seed": model.seed, "elbo": model.elbo, "initial_elbo": model.initial_elbo,
            "message": model.message}
    arrays = {"Z": p.Z.Z, "log_sf2": np.array(p.theta.log_sf2),
              "log_alpha": np.asarray(p.theta.log_alpha), "log_beta": np.array(p.log_beta),
              "qu_mean": model.qu.mean, "qu_cov": model.qu.cov}
    if model.qu.white_mean is not None:
        arrays["qu_white_mean"] = model.qu.white_mean
        arrays["qu_white_cov"] = model.qu.white_cov
    if model.mu is not None:
        arrays["mu"] = model.mu
        arrays["s"] = model.s
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)


def load_model(path):
    with np.load(path, allow_pickle=False) as f:
        meta = json.loads(str(f["meta"]))
        if meta.get("format") != "dvgp-model":
            raise ValueError(f"{path} is not a model file")
        if meta["version"] > FORMAT_VERSION:
            raise ValueError(f"model format version {meta['version']} is newer than supported")
        theta = KernelHyperparams(float(f["log_sf2"]), f["log_alpha"])
        params = GlobalParams(InducingSet(f["Z"]), theta, float(f["log_beta"]))
        white = [f[k] if k in f.files else None for k in ("qu_white_mean", "qu_white_cov")]
        qu = elbo.QuDistribution(f["qu_mean"], f["qu_cov"], *white)
        mu = f["mu"] if "mu" in f.files else None
        s = f["s"] if "s" in f.files else None
    return FittedModel(meta["mode"], params, qu, meta["elbo"], meta["initial_elbo"], mu=mu,
                       s=s, seed=meta["seed"], message=meta.get("message", ""))

