"""Master/worker evaluation of the bound over sharded data.

Regression mode needs one round trip: the master broadcasts the global
parameters, every live worker replies with its partial sums, and the master
assembles the bound and all global gradients. GPLVM mode adds a second round
trip in which the master broadcasts the reduced aggregates (A, B) so that each
worker can differentiate the bound with respect to its own embeddings.

Workers run as in-process threads and talk to the master only through the
message classes below, each of which converts to and from a JSON-safe dict.
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _accel, _kernels, elbo
from .kernel import ContractError, InducingSet, KernelHyperparams, jittered_kmm

log = logging.getLogger(__name__)


class ProtocolError(RuntimeError):
    """A message arrived for the wrong iteration or the wrong worker."""


class IterationSkipped(RuntimeError):
    """Every worker failed, so there is nothing to reduce this iteration."""


@dataclass(frozen=True, eq=False)
class Shard:
    """Contiguous block of points ``start:stop`` owned by one worker."""

    shard_id: int
    start: int
    stop: int
    Y: np.ndarray
    mu: np.ndarray
    s: np.ndarray

    @property
    def indices(self):
        return range(self.start, self.stop)

    @property
    def n(self):
        return self.stop - self.start

    def with_embeddings(self, mu, s):
        return Shard(self.shard_id, self.start, self.stop, self.Y,
                     np.asarray(mu, dtype=float), np.asarray(s, dtype=float))


def partition(Y, n_workers, mu=None, s=None):
    """Split the rows of ``Y`` (and embeddings) into near-equal contiguous shards.

    With no embeddings given, ``mu`` must be supplied by the caller later;
    regression data passes ``mu = X`` and ``s = 0``.

    >>> [sh.n for sh in partition(np.zeros((10, 1)), 3)]
    [4, 3, 3]
    """
    if int(n_workers) != n_workers or n_workers < 1:
        raise ContractError("n_workers must be a positive integer")
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    n = Y.shape[0]
    mu = np.zeros((n, 0)) if mu is None else np.asarray(mu, dtype=float).reshape(n, -1)
    s = np.zeros_like(mu) if s is None else np.asarray(s, dtype=float).reshape(mu.shape)
    base, extra = divmod(n, int(n_workers))
    shards = []
    start = 0
    for w in range(int(n_workers)):
        stop = start + base + (1 if w < extra else 0)
        shards.append(Shard(w, start, stop, Y[start:stop], mu[start:stop], s[start:stop]))
        start = stop
    return shards


@dataclass(frozen=True, eq=False)
class GlobalParams:
    """Inducing points, kernel hyperparameters and noise precision.

    The noise precision is held as ``log_beta`` so that master and workers,
    which both exponentiate the broadcast value, see the same beta.
    """

    Z: InducingSet
    theta: KernelHyperparams
    log_beta: float

    def __post_init__(self):
        if not isinstance(self.Z, InducingSet):
            object.__setattr__(self, "Z", InducingSet(self.Z))
        if not np.isfinite(self.log_beta):
            raise ContractError("noise precision must be positive and finite")
        object.__setattr__(self, "log_beta", float(self.log_beta))

    @classmethod
    def from_natural(cls, Z, theta, beta):
        if not beta > 0:
            raise ContractError("noise precision beta must be positive")
        return cls(Z, theta, float(np.log(beta)))

    @property
    def beta(self):
        return float(np.exp(self.log_beta))


@dataclass(frozen=True)
class IterationTrace:
    iteration: int
    elbo: float
    alive: tuple
    duration_ms: float

    @property
    def n_alive(self):
        return sum(self.alive)


# ---- messages -------------------------------------------------------------

def _arr(a):
    return np.asarray(a, dtype=float).tolist()


@dataclass(frozen=True, eq=False)
class BroadcastParams:
    iter: int
    Z: np.ndarray
    log_theta: np.ndarray  # [log sf2, log alpha_1..q]
    log_beta: float

    @classmethod
    def from_params(cls, it, params):
        lt = np.concatenate([[params.theta.log_sf2], params.theta.log_alpha])
        return cls(int(it), params.Z.Z, lt, params.log_beta)

    def params(self):
        theta = KernelHyperparams(self.log_theta[0], self.log_theta[1:])
        return GlobalParams(InducingSet(self.Z), theta, self.log_beta)

    def to_wire(self):
        return {"type": "broadcast_params", "iter": self.iter, "Z": _arr(self.Z),
                "log_theta": _arr(self.log_theta), "log_beta": self.log_beta}

    @classmethod
    def from_wire(cls, msg):
        _expect(msg, "broadcast_params")
        return cls(int(msg["iter"]), np.array(msg["Z"], dtype=float),
                   np.array(msg["log_theta"], dtype=float), float(msg["log_beta"]))


@dataclass(frozen=True, eq=False)
class PartialReply:
    """A worker's exact partial sums.

    ``partials`` is a stack of floating-point expansions, one column per
    reduced quantity (statistics and the global-gradient sums); adding the
    columns up exactly gives the shard's totals.
    """

    iter: int
    shard_id: int
    n_points: int
    m: int
    d: int
    q: int
    partials: np.ndarray

    @property
    def layout(self):
        return _kernels.StatsLayout(self.m, self.d, self.q)

    def to_wire(self):
        return {"type": "partial_reply", "iter": self.iter, "shard_id": self.shard_id,
                "n_points": self.n_points, "dims": [self.m, self.d, self.q],
                "partials": _arr(self.partials)}

    @classmethod
    def from_wire(cls, msg):
        _expect(msg, "partial_reply")
        m, d, q = (int(v) for v in msg["dims"])
        width = _kernels.StatsLayout(m, d, q).width
        P = np.array(msg["partials"], dtype=float).reshape(-1, width)
        return cls(int(msg["iter"]), int(msg["shard_id"]), int(msg["n_points"]), m, d, q, P)


@dataclass(frozen=True, eq=False)
class BroadcastAggregates:
    """Reduced A and B, optionally with the master's Cholesky factors.

    ``L_K`` factors the jittered K_mm and ``L_At`` factors
    ``I + beta L_K^-1 sum_psi2 L_K^-T``; workers that get them skip
    refactorising and reproduce the master's partials exactly.
    """

    iter: int
    A: np.ndarray
    B: np.ndarray
    L_K: np.ndarray = None
    L_At: np.ndarray = None

    def to_wire(self):
        out = {"type": "broadcast_aggregates", "iter": self.iter,
               "A": _arr(self.A), "B": _arr(self.B)}
        if self.L_K is not None:
            out["L_K"] = _arr(self.L_K)
            out["L_At"] = _arr(self.L_At)
        return out

    @classmethod
    def from_wire(cls, msg):
        _expect(msg, "broadcast_aggregates")
        opt = {k: np.array(msg[k], dtype=float) for k in ("L_K", "L_At") if k in msg}
        return cls(int(msg["iter"]), np.array(msg["A"], dtype=float),
                   np.array(msg["B"], dtype=float), **opt)


@dataclass(frozen=True, eq=False)
class LocalGradReply:
    iter: int
    shard_id: int
    grad_mu: np.ndarray
    grad_s: np.ndarray

    def to_wire(self):
        return {"type": "local_grad_reply", "iter": self.iter, "shard_id": self.shard_id,
                "grad_mu": _arr(self.grad_mu), "grad_s": _arr(self.grad_s)}

    @classmethod
    def from_wire(cls, msg):
        _expect(msg, "local_grad_reply")
        return cls(int(msg["iter"]), int(msg["shard_id"]),
                   np.array(msg["grad_mu"], dtype=float), np.array(msg["grad_s"], dtype=float))


def _expect(msg, kind):
    if msg.get("type") != kind:
        raise ProtocolError(f"expected a {kind} message, got {msg.get('type')!r}")


# ---- worker ---------------------------------------------------------------

class Worker:
    """Owns one shard; answers parameter and aggregate broadcasts."""

    def __init__(self, shard, include_kl=False):
        self.shard = shard
        self.include_kl = bool(include_kl)
        self._current = None

    def on_params(self, msg):
        self._current = msg
        p = msg.params()
        sh = self.shard
        sums = elbo.shard_sums(sh.Y, sh.mu, sh.s, p.Z, p.theta, self.include_kl)
        layout = sums.layout
        return PartialReply(msg.iter, sh.shard_id, sh.n, layout.m, layout.d, layout.q,
                            sums.partials)

    def on_aggregates(self, msg):
        if self._current is None or msg.iter != self._current.iter:
            have = None if self._current is None else self._current.iter
            raise ProtocolError(
                f"worker {self.shard.shard_id}: aggregates for iteration {msg.iter} "
                f"but parameters are from iteration {have}")
        p = self._current.params()
        sh = self.shard
        Kj = jittered_kmm(p.Z, p.theta)
        G2, GB = elbo.dF_from_aggregates(msg.A, msg.B, Kj, p.beta, msg.L_K, msg.L_At)
        g_mu, g_s = elbo.local_grads(G2, GB, sh.Y, sh.mu, sh.s, p.Z, p.theta, self.include_kl)
        return LocalGradReply(msg.iter, sh.shard_id, g_mu, g_s)


# ---- master ---------------------------------------------------------------

def _fan_out(fn, items, executor):
    if executor is None or len(items) <= 1:
        return [fn(x) for x in items]
    return list(executor.map(fn, items))


def _check_mask(shards, failure_mask):
    if failure_mask is None:
        return np.zeros(len(shards), dtype=bool)
    mask = np.asarray(failure_mask, dtype=bool).reshape(-1)
    if mask.shape[0] != len(shards):
        raise ContractError(
            f"failure mask has {mask.shape[0]} entries for {len(shards)} shards")
    return mask


def _reduce(replies, it, layout):
    for r in replies:
        if r.iter != it:
            raise ProtocolError(
                f"reply from shard {r.shard_id} is for iteration {r.iter}, expected {it}")
    replies = sorted(replies, key=lambda r: r.shard_id)
    P = [r.partials for r in replies]
    n = sum(r.n_points for r in replies)
    stacked = np.vstack(P) if P else np.zeros((0, layout.width))
    return elbo._ShardSums(stacked, n, layout)


def _layout_for(params, shards):
    d = shards[0].Y.shape[1] if shards else 1
    m, q = params.Z.Z.shape
    return _kernels.StatsLayout(m, d, q)


def _map_reduce(params, workers, mask, it, executor):
    t0 = time.perf_counter()
    live = [w for w, dead in zip(workers, mask) if not dead]
    if not live or all(w.shard.n == 0 for w in live):
        raise IterationSkipped(f"iteration {it}: no surviving points")
    msg = BroadcastParams.from_params(it, params)
    replies = _fan_out(lambda w: w.on_params(msg), live, executor)
    sums = _reduce(replies, it, _layout_for(params, [w.shard for w in workers]))
    stats = sums.stats
    bp = elbo.bound_partials(stats, params.Z, params.theta, params.beta)
    gZ, gtheta = elbo.global_grads(bp, stats, sums.grad_sums, params.Z, params.theta)
    return live, stats, bp, gZ, gtheta, t0


def _trace(it, F, mask, t0):
    return IterationTrace(it, float(F), tuple(bool(not x) for x in mask),
                          1000.0 * (time.perf_counter() - t0))


def regression_iteration(params, shards, failure_mask=None, iteration=0, executor=None):
    """One map-reduce round: bound and global gradients from live shards."""
    mask = _check_mask(shards, failure_mask)
    workers = [Worker(sh, include_kl=False) for sh in shards]
    _, _, bp, gZ, gtheta, t0 = _map_reduce(params, workers, mask, iteration, executor)
    report = elbo.BoundReport(bp.elbo, gZ, gtheta, bp.dF_dbeta)
    return report, _trace(iteration, bp.elbo, mask, t0)


def gplvm_iteration(params, shards, failure_mask=None, iteration=0, executor=None,
                    include_kl=True):
    """Two map-reduce rounds; the second yields per-point embedding gradients.

    Points on failed workers get zero embedding gradients, so their
    embeddings stay put for this step.
    """
    mask = _check_mask(shards, failure_mask)
    workers = [Worker(sh, include_kl=include_kl) for sh in shards]
    live, stats, bp, gZ, gtheta, t0 = _map_reduce(params, workers, mask, iteration, executor)
    f = bp.factors
    agg = BroadcastAggregates(iteration, elbo.aggregate_A(f, params.beta), stats.sum_psi1T_Y,
                              f.L_K, f.L_At)
    local = _fan_out(lambda w: w.on_aggregates(agg), live, executor)
    n = sum(sh.n for sh in shards)
    q = params.Z.Z.shape[1]
    g_mu = np.zeros((n, q))
    g_s = np.zeros((n, q))
    for r in local:
        if r.iter != iteration:
            raise ProtocolError(f"local gradients from shard {r.shard_id} are stale")
        sh = shards[r.shard_id]
        g_mu[sh.start:sh.stop] = r.grad_mu
        g_s[sh.start:sh.stop] = r.grad_s
    report = elbo.BoundReport(bp.elbo, gZ, gtheta, bp.dF_dbeta, g_mu, g_s)
    return report, _trace(iteration, bp.elbo, mask, t0)


def failure_injector(rate, seed, n_workers):
    """Endless stream of per-worker failure masks (True = failed this round)."""
    if not 0.0 <= rate <= 1.0:
        raise ContractError("failure rate must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    while True:
        yield rng.random(n_workers) < rate


class Cluster:
    """Fixed set of shards plus a thread pool and an optional failure stream.

    Each call to :meth:`evaluate` is one map-reduce round and draws a fresh
    failure mask, so an optimizer that evaluates twice per iteration sees two
    independent draws.
    """

    def __init__(self, Y, mu, s, n_workers=1, gplvm=False, include_kl=None,
                 failure_rate=0.0, seed=0, threads=None):
        self.shards = partition(Y, n_workers, mu, s)
        self.gplvm = bool(gplvm)
        if include_kl is None:
            include_kl = self.gplvm
        self.include_kl = bool(include_kl)
        self.failures = failure_injector(failure_rate, seed, len(self.shards))
        cap = _accel.max_threads(threads)
        n_threads = len(self.shards) if cap is None else min(cap, len(self.shards))
        self._pool = ThreadPoolExecutor(n_threads) if n_threads > 1 else None
        self.rounds = 0
        self.last_trace = None

    @property
    def n_workers(self):
        return len(self.shards)

    def set_embeddings(self, mu, s):
        self.shards = [sh.with_embeddings(mu[sh.start:sh.stop], s[sh.start:sh.stop])
                       for sh in self.shards]

    def evaluate(self, params, failure_mask=None):
        if failure_mask is None:
            failure_mask = next(self.failures)
        it = self.rounds
        self.rounds += 1
        if self.gplvm:
            report, trace = gplvm_iteration(params, self.shards, failure_mask, it,
                                            self._pool, self.include_kl)
        else:
            report, trace = regression_iteration(params, self.shards, failure_mask, it,
                                                 self._pool)
        self.last_trace = trace
        return report, trace

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
