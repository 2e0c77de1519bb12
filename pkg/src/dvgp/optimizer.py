"""Scaled conjugate gradients and a central-difference gradient oracle."""
import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class NonFiniteObjective(FloatingPointError):
    pass


class FlatParams:
    """Ordered named blocks packed into one unconstrained vector.

    >>> fp = FlatParams([("Z", (2, 1)), ("log_beta", ())])
    >>> fp.size
    3
    """

    def __init__(self, blocks):
        self.blocks = []
        self.index = {}
        pos = 0
        for name, shape in blocks:
            shape = tuple(shape)
            size = int(np.prod(shape)) if shape else 1
            if name in self.index:
                raise ValueError(f"duplicate block {name!r}")
            self.index[name] = (slice(pos, pos + size), shape)
            self.blocks.append((name, shape))
            pos += size
        self.size = pos

    def pack(self, values):
        x = np.empty(self.size)
        for name, shape in self.blocks:
            sl, _ = self.index[name]
            x[sl] = np.reshape(np.asarray(values[name], dtype=float), -1)
        return x

    def unpack(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.size,):
            raise ValueError(f"expected vector of length {self.size}, got {x.shape}")
        out = {}
        for name, shape in self.blocks:
            sl, _ = self.index[name]
            out[name] = float(x[sl][0]) if shape == () else x[sl].reshape(shape).copy()
        return out

    def __contains__(self, name):
        return name in self.index


@dataclass
class SCGOptions:
    max_iters: int = 500
    grad_tol: float = 1e-4
    value_tol: float = 1e-9
    sigma0: float = 1e-4
    lambda0: float = 1e-9


@dataclass
class SCGResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    iterations: int
    n_evals: int
    message: str
    trace: list = field(default_factory=list)


_LAMBDA_MIN = 1e-15
_LAMBDA_MAX = 1e100


def scg_minimize(objective, x0, opts=None, callback=None):
    """Minimise ``objective(x) -> (value, grad)`` by scaled conjugate gradients.

    Curvature along the search direction comes from a gradient difference
    at a nearby point; a trust-region style scale ``lam`` is raised when the
    quadratic model predicts poorly (or the objective is non-finite) and
    lowered when it predicts well.

    ``trace`` holds the accepted objective value after every iteration, so
    it never increases. ``callback(it, x, f, g)`` runs once per iteration.
    """
    opts = opts or SCGOptions()
    x = np.array(x0, dtype=float)
    n_evals = 0

    def evaluate(z):
        nonlocal n_evals
        n_evals += 1
        f, g = objective(z)
        return float(f), np.asarray(g, dtype=float)

    fold, gnew = evaluate(x)
    if not np.isfinite(fold) or not np.all(np.isfinite(gnew)):
        raise NonFiniteObjective("objective is not finite at the starting point")
    fnow = fold
    gold = gnew.copy()
    direction = -gnew
    success = True
    lam = opts.lambda0
    trace = []
    mu = kappa = theta = 0.0
    message = "max_iters reached"
    it = 0

    if np.max(np.abs(gnew)) < opts.grad_tol:
        return SCGResult(x, fnow, gnew, 0, n_evals, "gradient tolerance reached", trace)

    for it in range(1, opts.max_iters + 1):
        if success:
            mu = direction @ gnew
            if mu >= 0:
                direction = -gnew
                mu = direction @ gnew
            kappa = direction @ direction
            if kappa < np.finfo(float).eps:
                message = "search direction vanished"
                trace.append(fnow)
                break
            sigma = opts.sigma0 / np.sqrt(kappa)
            _, gplus = evaluate(x + sigma * direction)
            theta = direction @ (gplus - gnew) / sigma
            if not np.isfinite(theta):
                theta = 0.0

        delta = theta + lam * kappa
        if delta <= 0:
            delta = lam * kappa
            lam = lam - theta / kappa
        alpha = -mu / delta

        xnew = x + alpha * direction
        fnew, gcand = evaluate(xnew)
        finite = np.isfinite(fnew) and np.all(np.isfinite(gcand))
        Delta = 2.0 * (fnew - fold) / (alpha * mu) if finite else -np.inf

        if Delta >= 0:
            success = True
            x = xnew
            fnow = fnew
        else:
            success = False
            fnow = fold

        trace.append(fnow)
        if callback is not None:
            callback(it, x, fnow, gcand if success else gnew)

        if success:
            rel_impr = abs(fnew - fold) / max(abs(fold), 1.0)
            gold = gnew
            gnew = gcand
            fold = fnew
            if np.max(np.abs(gnew)) < opts.grad_tol:
                message = "gradient tolerance reached"
                break
            if rel_impr < opts.value_tol:
                message = "value tolerance reached"
                break

        if Delta < 0.25:
            lam = min(4.0 * lam, _LAMBDA_MAX)
        if Delta > 0.75:
            lam = max(0.5 * lam, _LAMBDA_MIN)

        if success:
            # Powell restart once successive gradients stop being orthogonal;
            # a fixed restart every nparams steps throws away the finite
            # termination that rounding has not already destroyed
            if abs(gnew @ gold) >= 0.2 * (gnew @ gnew):
                direction = -gnew
            else:
                gamma = (gnew - gold) @ gnew / (gold @ gold)
                direction = gamma * direction - gnew

        if lam >= _LAMBDA_MAX:
            message = "scale parameter saturated"
            break

    log.debug("scg stopped after %d iterations: %s", it, message)
    return SCGResult(x, fnow, gnew, it, n_evals, message, trace)


def finite_diff_grad(f, x, h=1e-5):
    """Central differences with per-coordinate step ``h * max(1, |x_i|)``.

    Coordinates where an evaluation is non-finite come back as NaN.
    """
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        step = h * max(1.0, abs(x[idx]))
        xp = x.copy()
        xm = x.copy()
        xp[idx] += step
        xm[idx] -= step
        fp, fm = f(xp), f(xm)
        if np.isfinite(fp) and np.isfinite(fm):
            g[idx] = (fp - fm) / (2.0 * step)
        else:
            g[idx] = np.nan
    return g


def relative_error(analytic, numeric, floor=1e-12):
    """Max abs deviation scaled by the block's largest magnitude."""
    a = np.asarray(analytic, dtype=float)
    b = np.asarray(numeric, dtype=float)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), floor)
    return float(np.max(np.abs(a - b), initial=0.0) / scale)
