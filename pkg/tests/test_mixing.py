import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmdcusum.errors import AnalysisError, InputError, SizeError
from mmdcusum.kernels import GAUSSIAN_RBF, Kernel
from mmdcusum.mixing import (
    alpha_exact, alpha_hoeffding_bound, beta_hoeffding_bound, exact_kernel_mixing, fit_exponential_envelope,
    kernel_mixing_coefficients, kernel_mixing_sum, markov_mixing_coeffs, n_hat, phi_coefficient,
    phi_hoeffding_bound, phi_sum, stationary_distribution, verify_bound,
)
from mmdcusum.procsim import finite_markov_stream

P2 = np.array([[0.9, 0.1], [0.2, 0.8]])
RBF = Kernel(GAUSSIAN_RBF, 1.0)


def random_chain(seed, k=None):
    g = np.random.default_rng(seed)
    k = k or int(g.integers(2, 7))
    P = g.random((k, k)) + 0.02
    return P / P.sum(axis=1, keepdims=True)


def test_stationary_two_state():
    np.testing.assert_allclose(stationary_distribution(P2), [2 / 3, 1 / 3], atol=1e-14)


def test_two_state_closed_forms():
    # P^n(x, .) - pi = lambda^n (row deviation), lambda = 0.7
    prof = markov_mixing_coeffs(P2, 30)
    n = np.arange(1, 31)
    np.testing.assert_allclose(prof["phi"].coefficients, (2 / 3) * 0.7**n, atol=1e-14)
    np.testing.assert_allclose(prof["beta"].coefficients, (4 / 9) * 0.7**n, atol=1e-14)
    np.testing.assert_allclose(prof["alpha"].coefficients, (2 / 9) * 0.7**n, atol=1e-14)
    assert prof["phi"].at(1) == pytest.approx(0.4666666666666667, abs=1e-14)
    assert phi_sum(P2) == pytest.approx((2 / 3) / 0.3, abs=1e-11)


def test_iid_chain_has_zero_coefficients():
    P = np.array([[0.3, 0.7], [0.3, 0.7]])
    prof = markov_mixing_coeffs(P, 5)
    for kind in ("alpha", "beta", "phi"):
        assert np.all(np.abs(prof[kind].coefficients) <= 1e-15)


@pytest.mark.parametrize("P", [np.eye(2), [[0.0, 1.0], [1.0, 0.0]]])
def test_reducible_or_periodic_rejected(P):
    with pytest.raises(InputError):
        markov_mixing_coeffs(P, 3)


def test_alpha_size_limit():
    P = random_chain(0, k=11)
    with pytest.raises(SizeError):
        alpha_exact(P, 1)
    prof = markov_mixing_coeffs(P, 3)
    assert "beta/2" in prof["alpha"].note
    np.testing.assert_allclose(prof["alpha"].coefficients, prof["beta"].coefficients / 2)


@given(st.integers(0, 10**6))
@settings(max_examples=25)
def test_ordering_and_monotonicity(seed):
    P = random_chain(seed)
    prof = markov_mixing_coeffs(P, 15)
    a, b, f = (prof[k].coefficients for k in ("alpha", "beta", "phi"))
    assert np.all(2 * a <= b + 1e-12)
    assert np.all(a <= b + 1e-12) and np.all(b <= f + 1e-12)
    for c in (a, b, f):
        assert np.all((c >= -1e-15) & (c <= 1 + 1e-15))
    assert np.all(np.diff(f) <= 1e-12)
    assert np.all(np.diff(b) <= 1e-12)
    assert alpha_exact(P, 3) == pytest.approx(a[2], abs=1e-14)
    assert phi_coefficient(P, 4) == pytest.approx(f[3], abs=1e-14)


@given(st.integers(0, 10**6))
@settings(max_examples=20)
def test_kernel_mixing_below_alpha_bound(seed):
    P = random_chain(seed)
    g = np.random.default_rng(seed + 1)
    values = g.normal(size=P.shape[0])
    rho = exact_kernel_mixing(P, values, RBF, 12)
    alpha = markov_mixing_coeffs(P, 12)["alpha"].coefficients
    assert np.all(rho[1:] <= 10 * alpha * RBF.sup_bound**2 + 1e-10)


def test_kernel_mixing_sum_matches_exact():
    path = finite_markov_stream(P2, [2 / 3, 1 / 3], 200_000, seed=8).astype(float)
    exact = exact_kernel_mixing(P2, [0.0, 1.0], RBF, 60).sum()
    est = kernel_mixing_sum(path, RBF, 60)
    assert abs(est - exact) <= 0.10 * exact


def test_kernel_mixing_iid_and_constant():
    g = np.random.default_rng(3)
    N = 40_000
    x = g.normal(size=N)
    rho = kernel_mixing_coefficients(x, RBF, 5)
    # lag-n mean of k has sd about sd(k)/sqrt(N) plus the centring error
    kv = RBF.paired(x[:-1].reshape(-1, 1), x[1:].reshape(-1, 1))
    se = kv.std() / math.sqrt(N)
    assert np.all(rho[1:] <= 3 * 2 * se)
    assert np.all(kernel_mixing_coefficients(np.ones(500), RBF, 10) == 0.0)
    with pytest.raises(InputError):
        kernel_mixing_coefficients(np.ones(50), RBF, 10)


def test_phi_bound_examples():
    assert phi_hoeffding_bound(100, 0.1, 1.0, 0.0) == pytest.approx(math.exp(-2.0), rel=1e-14)
    assert phi_hoeffding_bound(100, 0.0, 1.0, 3.0) == 1.0
    assert phi_hoeffding_bound(100, 0.1, 1.0, 1.0) == pytest.approx(math.exp(-2 / 9), rel=1e-14)
    assert phi_hoeffding_bound(100, 0.1, 1.0, 1.0) == pytest.approx(0.8007, abs=1e-4)


def test_n_hat_example():
    assert n_hat(1000, 10, 1) == 31


@given(st.integers(1, 5000), st.floats(0.05, 50), st.floats(0.1, 3))
def test_n_hat_at_most_n(n, c, gamma):
    assert 0 <= n_hat(n, c, gamma) <= n


def test_n_hat_nondecreasing_between_block_count_jumps():
    # with the block count k fixed, floor(n / k) can only grow
    c, gamma = 10.0, 1.0
    vals = [(n, math.ceil((10 * n / c) ** 0.5), n_hat(n, c, gamma)) for n in range(1, 3000)]
    for (n1, k1, v1), (n2, k2, v2) in zip(vals, vals[1:]):
        if k1 == k2:
            assert v2 >= v1


@pytest.mark.xfail(strict=True, reason="floor(n / ceil(...)) drops by one whenever the ceiling steps up")
def test_n_hat_nondecreasing_everywhere():
    vals = [n_hat(n, 10, 1) for n in range(1, 3000)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_beta_alpha_bound_examples():
    with pytest.raises(InputError):
        beta_hoeffding_bound(1000, 1.0, 1.0, 0.5, 10, 1)
    assert beta_hoeffding_bound(1000, 0.1, 1.0, 0.0, 10, 1) == pytest.approx(math.exp(-2 * 31 * 0.01), rel=1e-14)
    assert alpha_hoeffding_bound(1000, 0.1, 1.0, 0.0, 10, 1) == beta_hoeffding_bound(1000, 0.1, 1.0, 0.0, 10, 1)
    two = alpha_hoeffding_bound(1000, 0.5, 1.0, math.e**2 / 4, 10, 1) / math.exp(-2 * 31 * 0.25)
    assert two == pytest.approx(2.0, rel=1e-12)
    val = alpha_hoeffding_bound(1000, 0.1, 1.0, 1.0, 10, 1)
    assert val == pytest.approx((1 + 4 * math.exp(-2)) * math.exp(-0.62), rel=1e-14)
    assert 1 + 4 * math.exp(-2) == pytest.approx(1.5413, abs=1e-4)


@given(st.integers(1, 2000), st.floats(0.01, 0.9), st.floats(0.01, 0.09))
def test_bounds_monotone(n, eps, step):
    e2 = min(eps + step, 0.99)
    fns = (lambda n, e: phi_hoeffding_bound(n, e, 1.0, 1.5),
           lambda n, e: beta_hoeffding_bound(n, e, 1.0, 0.4, 0.35, 1.0),
           lambda n, e: alpha_hoeffding_bound(n, e, 1.0, 0.2, 0.35, 1.0))
    for fn in fns:
        assert fn(n, e2) <= fn(n, eps)
        assert fn(n, eps) <= 1.0
    assert fns[0](n + 1, eps) <= fns[0](n, eps)
    # the beta / alpha bounds depend on n only through n_hat
    m1, m2 = n_hat(n, 0.35, 1.0), n_hat(n + 1, 0.35, 1.0)
    if m2 >= m1:
        assert fns[1](n + 1, eps) <= fns[1](n, eps)
        assert fns[2](n + 1, eps) <= fns[2](n, eps)


def test_envelope_dominates_and_zero_case():
    coef = (4 / 9) * 0.7 ** np.arange(1, 101)
    bar, c, gamma = fit_exponential_envelope(coef)
    assert gamma == pytest.approx(1.0)
    assert c == pytest.approx(-math.log(0.7), rel=1e-6)
    n = np.arange(1, 101)
    assert np.all(coef <= bar * np.exp(-c * n**gamma) * (1 + 1e-12))
    assert fit_exponential_envelope(np.zeros(10)) == (0.0, 1.0, 1.0)
    with pytest.raises(AnalysisError):
        fit_exponential_envelope(np.linspace(0.1, 0.9, 20))


@given(st.integers(0, 10**6))
@settings(max_examples=15)
def test_envelope_dominates_random_chains(seed):
    P = random_chain(seed)
    for kind in ("alpha", "beta"):
        coef = markov_mixing_coeffs(P, 60)[kind].coefficients
        bar, c, gamma = fit_exponential_envelope(coef)
        n = np.arange(1, 61)
        keep = coef > 1e-14
        assert np.all(coef[keep] <= bar * np.exp(-c * n[keep] ** gamma) * (1 + 1e-9))


def test_verify_iid_reduction():
    P = np.array([[0.5, 0.5], [0.5, 0.5]])
    rep = verify_bound(P, [1.0, 0.0], "phi", [0.05, 0.1, 0.2], 100, 10_000, seed=1)
    assert rep.params["Phi"] == pytest.approx(0.5)  # only the lag-0 term
    rep0 = verify_bound(P, [1.0, 0.0], "phi", [0.05, 0.1, 0.2], 100, 10_000, seed=1, override={"Phi": 0.0})
    assert rep0.all_dominated


def test_verify_two_state_n500():
    eps = [0.05, 0.1, 0.15, 0.2, 0.25, 0.3]
    for kind in ("phi", "beta", "alpha"):
        rep = verify_bound(P2, [1.0, 0.0], kind, eps, 500, 10_000, seed=2)
        assert rep.all_dominated, kind
        assert abs(rep.params["sp_f"] - 1.0) < 1e-15


def test_negative_control_iid_bound_on_dependent_chain():
    # Phi = 0 pretends the chain is independent; the classical bound then fails at small n
    rep = verify_bound(P2, [1.0, 0.0], "phi", [0.05, 0.1, 0.15, 0.2, 0.25, 0.3], 50, 10_000, seed=3,
                       override={"Phi": 0.0})
    assert not rep.all_dominated


@pytest.mark.xfail(strict=True, reason="the phi bound is loose enough that halving Phi still dominates")
def test_negative_control_halved_phi():
    Phi = phi_sum(P2)
    fails = False
    for n in (10, 20, 50, 100):
        rep = verify_bound(P2, [1.0, 0.0], "phi", [0.05, 0.1, 0.15, 0.2, 0.25, 0.3], n, 10_000, seed=4,
                           override={"Phi": Phi / 2})
        fails |= not rep.all_dominated
    assert fails
