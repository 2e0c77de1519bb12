import numpy as np
import pytest

from dvgp import elbo
from dvgp.gradcheck import bound_gradient_errors, random_instance
from dvgp.kernel import ContractError, KernelHyperparams, VariationalEmbedding

from oracles import dense_bound, exact_lml, kl_diag


def th_of(inst):
    return KernelHyperparams.from_natural(inst["sf2"], inst["alpha"])


def stats_of(inst, include_kl=None):
    return elbo.shard_sums(inst["Y"], inst["mu"], inst["s"], inst["Z"], th_of(inst),
                           include_kl).stats


@pytest.mark.parametrize("gplvm", [False, True])
def test_matches_dense_oracle(gplvm):
    rng = np.random.default_rng(10 + gplvm)
    for _ in range(15):
        n, m, q, d = (int(rng.integers(1, 51)), int(rng.integers(1, 7)),
                      int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        inst = random_instance(rng, n, m, q, d, gplvm=gplvm)
        F = elbo.assemble_bound(stats_of(inst), inst["Z"], th_of(inst), inst["beta"])
        ref = dense_bound(inst["Y"], inst["mu"], inst["s"], inst["Z"], inst["sf2"],
                          inst["alpha"], inst["beta"], gplvm)
        assert abs(F - ref) <= 1e-10 * abs(ref)


def test_bound_below_exact_marginal_likelihood():
    rng = np.random.default_rng(12)
    for _ in range(25):
        n, m, q, d = int(rng.integers(2, 30)), int(rng.integers(1, 8)), int(rng.integers(1, 3)), 2
        inst = random_instance(rng, n, m, q, d, gplvm=False)
        F = elbo.evaluate(inst["Y"], inst["mu"], inst["s"], inst["Z"], th_of(inst),
                          inst["beta"]).elbo
        exact = exact_lml(inst["mu"], inst["Y"], inst["sf2"], inst["alpha"], inst["beta"])
        assert F <= exact + 1e-9 * abs(exact)


def test_tight_when_inducing_points_are_the_inputs():
    rng = np.random.default_rng(13)
    for _ in range(10):
        n, q = int(rng.integers(3, 25)), int(rng.integers(1, 3))
        X = rng.uniform(-3, 3, (n, q))
        Y = np.sin(X.sum(1, keepdims=True)) + 0.1 * rng.standard_normal((n, 1))
        th = KernelHyperparams.from_natural(1.0, np.full(q, 1.0))
        beta = rng.uniform(1, 10)
        F = elbo.evaluate(Y, X, np.zeros_like(X), X, th, beta).elbo
        exact = exact_lml(X, Y, 1.0, th.alpha, beta)
        assert abs(F - exact) / abs(exact) < 1e-6


def test_partition_invariance_is_bitwise():
    rng = np.random.default_rng(14)
    inst = random_instance(rng, 37, 5, 2, 3, gplvm=True)
    th = th_of(inst)
    whole = stats_of(inst)
    for k in (2, 4, 8):
        cuts = np.sort(rng.choice(np.arange(1, 37), k - 1, replace=False))
        parts = [elbo.shard_sums(Yp, mp, sp, inst["Z"], th) for Yp, mp, sp in
                 zip(*(np.split(inst[key], cuts) for key in ("Y", "mu", "s")))]
        layout = parts[0].layout
        merged = elbo.merge_shard_sums(parts[::-1], layout).stats
        np.testing.assert_array_equal(merged.sum_psi2, whole.sum_psi2)
        np.testing.assert_array_equal(merged.sum_psi1T_Y, whole.sum_psi1T_Y)
        for f in ("sum_psi0", "sum_yy", "sum_kl"):
            assert getattr(merged, f) == getattr(whole, f)
        assert (elbo.assemble_bound(merged, inst["Z"], th, inst["beta"])
                == elbo.assemble_bound(whole, inst["Z"], th, inst["beta"]))


def test_stats_addition_is_exact_and_associative():
    rng = np.random.default_rng(15)
    inst = random_instance(rng, 12, 3, 2, 2)
    th = th_of(inst)
    pieces = [elbo.shard_sums(inst["Y"][a:b], inst["mu"][a:b], inst["s"][a:b], inst["Z"],
                              th).stats for a, b in ((0, 3), (3, 7), (7, 12))]
    left = (pieces[0] + pieces[1]) + pieces[2]
    right = pieces[0] + (pieces[1] + pieces[2])
    np.testing.assert_array_equal(left.sum_psi2, right.sum_psi2)
    np.testing.assert_array_equal(left.sum_psi2, stats_of(inst).sum_psi2)


def test_accumulate_stats_from_pairs():
    rng = np.random.default_rng(16)
    inst = random_instance(rng, 6, 3, 2, 2)
    shard = [(y, VariationalEmbedding(m, s)) for y, m, s in zip(inst["Y"], inst["mu"], inst["s"])]
    a = elbo.accumulate_stats(shard, inst["Z"], th_of(inst))
    np.testing.assert_array_equal(a.sum_psi2, stats_of(inst).sum_psi2)
    empty = elbo.accumulate_stats([], inst["Z"], th_of(inst), d=2)
    assert empty.n_points == 0 and np.all(empty.sum_psi1T_Y == 0)
    with pytest.raises(ContractError):
        elbo.accumulate_stats(shard + [(np.zeros(3), shard[0][1])], inst["Z"], th_of(inst))


def test_gplvm_with_point_masses_reduces_to_regression():
    rng = np.random.default_rng(17)
    inst = random_instance(rng, 15, 4, 2, 2, gplvm=False)
    th = th_of(inst)
    reg = elbo.evaluate(inst["Y"], inst["mu"], inst["s"], inst["Z"], th, inst["beta"])
    gp = elbo.evaluate(inst["Y"], inst["mu"], inst["s"], inst["Z"], th, inst["beta"],
                       include_kl=False, local=True)
    assert reg.elbo == gp.elbo
    np.testing.assert_array_equal(reg.grad_Z, gp.grad_Z)
    assert reg.grad_mu is None and gp.grad_mu is not None


def test_gradients_on_small_instance():
    rng = np.random.default_rng(18)
    inst = random_instance(rng, 12, 4, 2, 3, gplvm=True)
    errs = bound_gradient_errors(inst)
    assert set(errs) == {"Z", "sf2", "alpha", "beta", "mu", "s"}
    assert max(errs.values()) < 1e-5, errs


def test_regression_gradients_and_no_local_blocks():
    rng = np.random.default_rng(19)
    inst = random_instance(rng, 12, 4, 2, 3, gplvm=False)
    assert max(bound_gradient_errors(inst).values()) < 1e-5
    rep = elbo.evaluate(inst["Y"], inst["mu"], inst["s"], inst["Z"], th_of(inst), inst["beta"])
    assert rep.grad_mu is None and rep.grad_s is None and rep.is_finite()


def test_kl_closed_form_against_monte_carlo():
    rng = np.random.default_rng(20)
    mu, s = rng.normal(size=3), rng.uniform(0.2, 2.0, 3)
    value, g_mu, g_s = elbo.kl_term(VariationalEmbedding(mu, s))
    assert value == pytest.approx(kl_diag(mu, s), rel=1e-14)
    x = mu + np.sqrt(s) * rng.standard_normal((400_000, 3))
    logq = -0.5 * np.sum((x - mu) ** 2 / s + np.log(2 * np.pi * s), axis=1)
    logp = -0.5 * np.sum(x ** 2 + np.log(2 * np.pi), axis=1)
    r = logq - logp
    assert abs(r.mean() - value) < 4 * r.std() / np.sqrt(len(r))
    np.testing.assert_array_equal(g_mu, mu)
    np.testing.assert_allclose(g_s, 0.5 * (1 - 1 / s))


def test_optimal_qu_against_explicit_formula():
    rng = np.random.default_rng(21)
    inst = random_instance(rng, 20, 4, 2, 2, gplvm=False)
    th = th_of(inst)
    st = stats_of(inst)
    qu = elbo.optimal_qu(st, inst["Z"], th, inst["beta"])
    K = elbo.jittered_kmm(inst["Z"], th)
    A = K + inst["beta"] * st.sum_psi2
    np.testing.assert_allclose(qu.cov, K @ np.linalg.solve(A, K), rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(qu.mean, inst["beta"] * K @ np.linalg.solve(A, st.sum_psi1T_Y),
                               rtol=1e-9, atol=1e-12)
    assert np.linalg.eigvalsh(qu.cov).min() > 0


def test_precondition_errors():
    rng = np.random.default_rng(22)
    inst = random_instance(rng, 5, 2, 1, 1)
    st = stats_of(inst)
    with pytest.raises(ContractError):
        elbo.assemble_bound(st, inst["Z"], th_of(inst), 0.0)
    with pytest.raises(ContractError):
        elbo.assemble_bound(st, inst["Z"], th_of(inst), 1.0, d=4)
    empty = elbo.accumulate_stats([], inst["Z"], th_of(inst))
    with pytest.raises(ContractError):
        elbo.assemble_bound(empty, inst["Z"], th_of(inst), 1.0)
    with pytest.raises(ContractError):
        elbo.evaluate(inst["Y"], inst["mu"], np.zeros_like(inst["s"]), inst["Z"], th_of(inst),
                      1.0, include_kl=True)


def test_failed_factorisation_names_the_matrix():
    with pytest.raises(elbo.SingularKernelError, match="K_mm"):
        elbo._chol(np.array([[1.0, 2.0], [2.0, 1.0]]), "K_mm")
