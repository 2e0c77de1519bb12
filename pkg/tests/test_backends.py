"""The numba kernels and the pure-numpy fallback must agree."""
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from dvgp import _accel
from dvgp._kernels import StatsLayout, _numpy, grow_rows, round_expansions

numba_impl = pytest.importorskip("dvgp._kernels._numba")


def inputs(seed, n=25, m=5, q=3, d=2, point_mass=False):
    rng = np.random.default_rng(seed)
    s = np.zeros((n, q)) if point_mass else rng.uniform(0.05, 1.0, (n, q))
    return (rng.standard_normal((n, d)), rng.standard_normal((n, q)), s,
            rng.standard_normal((m, q)), 1.4, rng.uniform(0.3, 2.0, q))


@pytest.mark.parametrize("point_mass", [False, True])
def test_psi_stats_agree(point_mass):
    Y, mu, s, Z, sf2, alpha = inputs(0, point_mass=point_mass)
    for a, b in zip(_numpy.psi_stats(mu, s, Z, sf2, alpha),
                    numba_impl.psi_stats(mu, s, Z, sf2, alpha)):
        np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-15)


@pytest.mark.parametrize("point_mass", [False, True])
def test_shard_sums_agree(point_mass):
    Y, mu, s, Z, sf2, alpha = inputs(1, point_mass=point_mass)
    layout = StatsLayout(Z.shape[0], Y.shape[1], Z.shape[1])
    rows = _numpy.point_contributions(Y, mu, s, Z, sf2, alpha, not point_mass)
    P_np = _numpy.grow_rows(np.zeros((0, layout.width)), rows)
    P_nb, status = numba_impl.shard_partials(Y, mu, s, Z, sf2, alpha, not point_mass, 64)
    assert status == 0
    np.testing.assert_allclose(round_expansions(P_np), round_expansions(P_nb),
                               rtol=1e-13, atol=1e-14)
    # each expansion rounds to the correctly rounded sum of its own rows
    np.testing.assert_array_equal(round_expansions(P_np), round_expansions(rows))


def test_local_grads_agree():
    Y, mu, s, Z, sf2, alpha = inputs(2)
    rng = np.random.default_rng(3)
    G2 = rng.standard_normal((5, 5))
    G2 = G2 + G2.T
    GB = rng.standard_normal((5, 2))
    for a, b in zip(_numpy.local_grads(Y, mu, s, Z, sf2, alpha, G2, GB),
                    numba_impl.local_grads(Y, mu, s, Z, sf2, alpha, G2, GB)):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)


def test_expansion_growth_handles_cancellation():
    # values spanning many binades force the numba path to widen its buffers
    col = np.array([1e300, 1.0, -1e300, 1e-300, 3.0, 1e200, -1e200] * 20)[:, None]
    for grow in (_numpy.grow_rows, grow_rows):
        out = grow(np.zeros((0, 1)), col)
        assert round_expansions(out)[0] == 80.0 + 20e-300


SCRIPT = """
import json, numpy as np
from dvgp import backend_name, elbo
from dvgp.kernel import KernelHyperparams
rng = np.random.default_rng(0)
Y, mu, s = rng.normal(size=(30, 3)), rng.normal(size=(30, 2)), rng.uniform(.1, 1, (30, 2))
Z = rng.normal(size=(5, 2))
r = elbo.evaluate(Y, mu, s, Z, KernelHyperparams.from_natural(1.2, [0.7, 1.3]), 4.0)
print(json.dumps({"backend": backend_name(), "elbo": r.elbo, "gZ": r.grad_Z.tolist(),
                  "gmu": r.grad_mu.tolist()}))
"""


def run_with(flag):
    env = dict(os.environ, DVGP_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", SCRIPT], env=env, capture_output=True,
                         text=True, check=True)
    return json.loads(out.stdout)


def test_environment_flag_selects_backend():
    off, on = run_with("0"), run_with("1")
    assert off["backend"] == "numpy" and on["backend"] == "numba"
    assert off["elbo"] == pytest.approx(on["elbo"], rel=1e-13)
    np.testing.assert_allclose(off["gZ"], on["gZ"], rtol=1e-11, atol=1e-12)
    np.testing.assert_allclose(off["gmu"], on["gmu"], rtol=1e-11, atol=1e-12)


def test_thread_cap_parsing(monkeypatch):
    monkeypatch.delenv("DVGP_THREADS", raising=False)
    assert _accel.max_threads(3) == 3
    monkeypatch.setenv("DVGP_THREADS", "5")
    assert _accel.max_threads() == 5
