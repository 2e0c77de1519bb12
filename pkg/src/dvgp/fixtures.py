"""Seeded synthetic datasets used by the tests, the CLI and the shipped CSVs."""
from importlib import resources

import numpy as np

from .models import Dataset

BUNDLED = {
    "sine": "sine.csv",
    "kink": "kink.csv",
    "manifold": "manifold.csv",
    "gplvm": "gplvm.csv",
}


def sine(n=50, noise=0.1, seed=0):
    """y = sin(x) + noise with x uniform on [-3, 3]."""
    rng = np.random.default_rng(seed)
    x = np.sort(rng.uniform(-3.0, 3.0, n))
    y = np.sin(x) + noise * rng.standard_normal(n)
    return Dataset(y[:, None], x[:, None])


def kink(n=50, noise=0.01, seed=0):
    """y = |x| on an even grid over [-3, 3]; all the curvature sits at the origin."""
    rng = np.random.default_rng(seed)
    x = np.linspace(-3.0, 3.0, n)
    y = np.abs(x) + noise * rng.standard_normal(n)
    return Dataset(y[:, None], x[:, None])


def manifold(n=60, d=5, noise=0.05, seed=0):
    """Outputs of a smooth 1-D curve embedded in ``d`` dimensions.

    Returns the dataset and the latent coordinate ``t`` that generated it.
    """
    rng = np.random.default_rng(seed)
    t = np.sort(rng.uniform(-2.0, 2.0, n))
    freq = rng.uniform(0.5, 1.5, d)
    phase = rng.uniform(0.0, 2.0 * np.pi, d)
    Y = np.sin(np.outer(t, freq) + phase) + noise * rng.standard_normal((n, d))
    return Dataset(Y), t


def gplvm(n=40, d=5, q=2, noise=0.1, seed=0):
    """Outputs drawn from a GP over ``q`` standard-normal latent dimensions."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, q))
    sq = np.sum((X[:, None, :] - X[None, :, :]) ** 2, axis=-1)
    K = np.exp(-0.5 * sq) + 1e-8 * np.eye(n)
    F = np.linalg.cholesky(K) @ rng.standard_normal((n, d))
    Y = F + noise * rng.standard_normal((n, d))
    return Dataset(Y), X


def to_csv(data, path):
    cols, header = [], []
    if data.X is not None:
        cols.append(data.X)
        header += [f"x_{j}" for j in range(data.X.shape[1])]
    cols.append(data.Y)
    header += [f"y_{j}" for j in range(data.d)]
    np.savetxt(path, np.hstack(cols), delimiter=",", header=",".join(header), comments="",
               fmt="%.17g")


def bundled_path(name):
    """Filesystem path of a shipped fixture CSV."""
    if name not in BUNDLED:
        raise KeyError(f"unknown fixture {name!r}; choose from {sorted(BUNDLED)}")
    return resources.files("dvgp") / "data" / BUNDLED[name]


def generate_all():
    """The exact datasets written to the package's data directory."""
    return {
        "sine": sine(seed=0),
        "kink": kink(seed=0),
        "manifold": manifold(seed=0)[0],
        "gplvm": gplvm(seed=0)[0],
    }
