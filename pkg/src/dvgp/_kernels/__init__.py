"""Hot per-point kernels with a numba path and a pure-numpy fallback.

Both backends expose the same functions; :data:`dvgp._accel.USE_NUMBA`
picks one at import time. Reductions over points are exact: every summed
quantity is carried as a column-wise floating-point expansion and rounded
once, so the rounded total does not depend on how points are grouped.
"""
import math
from dataclasses import dataclass

import numpy as np

from .. import _accel
from . import _numpy

if _accel.USE_NUMBA:
    from . import _numba as _impl
else:
    _impl = _numpy

_KMAX = 64


@dataclass(frozen=True)
class StatsLayout:
    """Offsets of each reduced quantity inside a flat contribution row."""

    m: int
    d: int
    q: int

    @property
    def blocks(self):
        m, d, q = self.m, self.d, self.q
        return (
            ("sum_psi2", (m, m)),
            ("sum_psi1T_Y", (m, d)),
            ("sum_psi0", ()),
            ("sum_yy", ()),
            ("sum_kl", ()),
            ("dpsi1Y_dZ", (m, d, q)),
            ("dpsi1Y_dalpha", (m, d, q)),
            ("dpsi2_dZ", (m, m, q)),
            ("dpsi2_dalpha", (m, m, q)),
        )

    @property
    def width(self):
        return sum(int(np.prod(shape)) for _, shape in self.blocks)

    def unpack(self, flat):
        out = {}
        pos = 0
        for name, shape in self.blocks:
            size = int(np.prod(shape))
            chunk = flat[pos:pos + size]
            out[name] = float(chunk[0]) if shape == () else chunk.reshape(shape)
            pos += size
        return out


def _as_f64(*arrays):
    return tuple(np.ascontiguousarray(a, dtype=np.float64) for a in arrays)


def psi_stats(mu, s, Z, sf2, alpha):
    mu, s, Z, alpha = _as_f64(mu, s, Z, alpha)
    return _impl.psi_stats(mu, s, Z, float(sf2), alpha)


def point_contributions(Y, mu, s, Z, sf2, alpha, with_kl):
    Y, mu, s, Z, alpha = _as_f64(Y, mu, s, Z, alpha)
    return _impl.point_contributions(Y, mu, s, Z, float(sf2), alpha, bool(with_kl))


def grow_rows(P, X):
    """Exactly add rows of ``X`` into the expansion ``P`` (both (., E))."""
    P, X = _as_f64(P, X)
    if not _accel.USE_NUMBA:
        return _numpy.grow_rows(P, X)
    kmax = _KMAX
    while True:
        out, status = _impl.grow_rows(P, X, kmax)
        if status == 0:
            return out
        kmax *= 2


def shard_partials(Y, mu, s, Z, sf2, alpha, with_kl):
    """Exact column expansions of the summed per-point contributions."""
    Y, mu, s, Z, alpha = _as_f64(Y, mu, s, Z, alpha)
    layout = StatsLayout(Z.shape[0], Y.shape[1], Z.shape[1])
    if Y.shape[0] == 0:
        return np.zeros((0, layout.width))
    if not _accel.USE_NUMBA:
        rows = _numpy.point_contributions(Y, mu, s, Z, float(sf2), alpha, bool(with_kl))
        return _numpy.grow_rows(np.zeros((0, layout.width)), rows)
    kmax = _KMAX
    while True:
        P, status = _impl.shard_partials(Y, mu, s, Z, float(sf2), alpha, bool(with_kl), kmax)
        if status == 0:
            return P
        kmax *= 2


def round_expansions(*partials):
    """Correctly rounded column sums of one or more stacked expansions."""
    stacked = np.vstack(partials) if partials else np.zeros((0, 0))
    return np.array([math.fsum(col) for col in stacked.T])


def local_grads(Y, mu, s, Z, sf2, alpha, G2, GB):
    Y, mu, s, Z, alpha, G2, GB = _as_f64(Y, mu, s, Z, alpha, G2, GB)
    if Y.shape[0] == 0:
        q = Z.shape[1]
        return np.zeros((0, q)), np.zeros((0, q))
    return _impl.local_grads(Y, mu, s, Z, float(sf2), alpha, G2, GB)
