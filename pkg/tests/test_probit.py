import math

import numpy as np
import pytest

from helpers import geweke_z, moments
from tprm import probit as pb


def phi(x):
    return math.exp(-x * x / 2) / math.sqrt(2 * math.pi)


def Phi_series(x, terms=200):
    """Standard normal CDF through the Maclaurin series of erf."""
    z = x / math.sqrt(2)
    s, term = 0.0, z
    for n in range(terms):
        s += term / (2 * n + 1)
        term *= -z * z / (n + 1)
    return 0.5 + s / math.sqrt(math.pi)


def analytic_lower(mu, sigma, lower=0.0):
    """Mean and variance of N(mu, sigma^2) truncated to [lower, inf)."""
    a = (lower - mu) / sigma
    tail = 1 - Phi_series(a) if a < 3 else 0.5 * math.erfc(a / math.sqrt(2))
    lam = phi(a) / tail
    return mu + sigma * lam, sigma**2 * (1 + a * lam - lam * lam)


# -------------------------------------------------------------- truncated normal


def test_truncated_normal_examples():
    rng = np.random.default_rng(0)
    x = pb.sample_truncated_normal(0.0, 1.0, "nonnegative", rng, size=1_000_000)
    assert x.min() >= 0 and x.mean() == pytest.approx(math.sqrt(2 / math.pi), rel=0.005)
    x = pb.sample_truncated_normal(10.0, 1.0, "nonnegative", rng, size=1_000_000)
    assert x.mean() == pytest.approx(10.0, rel=0.005) and x.var() == pytest.approx(1.0, rel=0.005)
    x = pb.sample_truncated_normal(-3.0, 1.0, "nonnegative", rng, size=1_000_000)
    m, _ = analytic_lower(-3.0, 1.0)
    assert x.mean() == pytest.approx(m, rel=0.01)


def test_truncated_normal_sides_and_far_tail():
    rng = np.random.default_rng(1)
    x = pb.sample_truncated_normal(2.0, 0.5, "nonpositive", rng, size=200_000)
    m, v = analytic_lower(-2.0, 0.5)
    assert x.max() <= 0 and -x.mean() == pytest.approx(m, rel=0.01)
    assert x.var() == pytest.approx(v, rel=0.02)
    # bound 8 sd away: exponential rejection branch
    x = pb.sample_truncated_normal(-8.0, 1.0, "nonnegative", rng, size=200_000)
    m, v = analytic_lower(-8.0, 1.0)
    assert x.min() >= 0 and x.mean() == pytest.approx(m, rel=0.01)
    assert x.var() == pytest.approx(v, rel=0.03)
    assert pb.truncnorm_moments(-8.0, 1.0, "nonnegative")[0] == pytest.approx(m, rel=1e-6)
    with pytest.raises(ValueError):
        pb.sample_truncated_normal(0.0, 0.0, "nonnegative", rng)
    with pytest.raises(ValueError):
        pb.sample_truncated_normal(0.0, 1.0, "left", rng)
    assert isinstance(pb.sample_truncated_normal(0.0, 1.0, "nonnegative", rng), float)


# -------------------------------------------------------------- (a.0)


def reg_state(N, K, q=0):
    return pb.RegressionState(np.zeros(N), np.zeros(K), np.ones(K, dtype=np.int64), 0.5,
                              np.zeros(q), 1.0)


def test_update_w_examples():
    rng = np.random.default_rng(2)
    N = 200_000
    st = reg_state(N, 1)
    G = np.zeros((N, 1))
    w = pb.update_w(st, np.ones(N, dtype=int), np.zeros((N, 0)), G, rng)
    assert w.min() >= 0 and w.mean() == pytest.approx(math.sqrt(2 / math.pi), rel=0.01)

    st.b[:] = -10.0
    w = pb.update_w(st, np.zeros(N, dtype=int), np.zeros((N, 0)), np.ones((N, 1)), rng)
    assert w.mean() == pytest.approx(-10.0, rel=0.005) and w.var() == pytest.approx(1.0, rel=0.02)

    y = rng.integers(0, 2, size=N)
    G = rng.normal(size=(N, 1))
    st.b[:] = 0.8
    w = pb.update_w(st, y, np.zeros((N, 0)), G, rng)
    assert np.all((w >= 0) == (y == 1))
    # moments of a narrow slice of the predictor against the analytic oracle
    sel = (y == 1) & (np.abs(G[:, 0] + 1.0) < 0.01)
    m, _ = analytic_lower(-0.8, 1.0)
    assert w[sel].mean() == pytest.approx(m, rel=0.03)


# -------------------------------------------------------------- (a.8)


def test_inclusion_probability_examples():
    h = pb.SelectHyper()
    p = pb.inclusion_probability(0.0, 0.5, h)
    assert p == pytest.approx(0.01 / (0.01 + 100), rel=1e-9)
    assert pb.inclusion_probability(0.0, 1 - 1e-15, h) > 0.9
    rng = np.random.default_rng(3)
    st = reg_state(1, 1)
    st.pi = 1.0 - 1e-12
    assert all(pb.update_delta(st, h, 0, rng) == 1 for _ in range(100))
    b = 0.05  # 5 spike sd: far into the slab region
    lp1 = math.log(0.5) - 0.5 * math.log(2 * math.pi * 1e4) - b * b / 2e4
    lp0 = math.log(0.5) - 0.5 * math.log(2 * math.pi * 1e-4) - b * b / 2e-4
    oracle = 1 / (1 + math.exp(lp0 - lp1))
    assert pb.inclusion_probability(b, 0.5, h) == pytest.approx(oracle, rel=1e-9)
    assert pb.inclusion_probability(1.0, 0.5, h) == pytest.approx(1.0)


# -------------------------------------------------------------- (a.9)


def test_b_conditional_examples():
    h = pb.SelectHyper(sigma2=1e12)
    rng = np.random.default_rng(4)
    N = 10
    G = np.zeros((N, 2))
    st = reg_state(N, 2)
    st.delta[:] = [1, 0]
    resid = rng.normal(size=N)
    assert pb.b_conditional(st, h, resid, G, 0) == (0.0, pytest.approx(1e12))
    draws = [pb.update_b(st, h, resid.copy(), G, 1, rng) for _ in range(20_000)]
    assert np.var(draws) == pytest.approx(h.eps, rel=0.05)

    g = np.zeros(N)
    g[:4] = 0.5  # unit norm
    G = np.column_stack([g, np.zeros(N)])
    st = reg_state(N, 2)
    st.b[0] = 0.3
    w_tilde = 2 * g
    resid = w_tilde - G @ st.b
    mean, var = pb.b_conditional(st, h, resid, G, 0)
    assert mean == pytest.approx(2.0, rel=1e-9) and var == pytest.approx(1.0, rel=1e-9)

    G = rng.normal(size=(N, 3))
    st = reg_state(N, 3)
    st.b[:] = rng.normal(size=3)
    st.delta[:] = [1, 0, 1]
    st.w = rng.normal(size=N)
    resid = st.w - G @ st.b
    for k in range(3):
        s = h.sigma2 if st.delta[k] else h.eps
        wt = [st.w[i] - sum(G[i, q] * st.b[q] for q in range(3) if q != k) for i in range(N)]
        prec = sum(G[i, k] ** 2 for i in range(N)) + 1 / s
        want = (sum(wt[i] * G[i, k] for i in range(N)) / prec, 1 / prec)
        assert np.allclose(pb.b_conditional(st, h, resid, G, k), want, rtol=1e-10)
        pb.update_b(st, h, resid, G, k, rng)
        assert np.allclose(resid, st.w - G @ st.b, atol=1e-12)


# -------------------------------------------------------------- (a.10)-(a.12)


class RecordingRNG:
    def __init__(self):
        self.calls = []

    def beta(self, a, b):
        self.calls.append(("beta", a, b))
        return 0.5

    def gamma(self, shape, scale):
        self.calls.append(("gamma", shape, 1 / scale))
        return 1.0


def test_pi_and_upsilon_parameters():
    h = pb.SelectHyper(alpha0=1.0, alpha1=1.0)
    st = reg_state(1, 10)
    rec = RecordingRNG()
    pb.update_pi(st, h, rec)
    st.delta[:] = 0
    pb.update_pi(st, h, rec)
    assert rec.calls == [("beta", 11.0, 1.0), ("beta", 1.0, 11.0)]

    rng = np.random.default_rng(5)
    st.delta[:] = [1, 0] * 5
    draws = [pb.update_pi(st, h, rng) for _ in range(50_000)]
    ref = np.random.default_rng(6).beta(6.0, 6.0, size=50_000)
    assert np.mean(draws) == pytest.approx(ref.mean(), abs=0.005)
    assert np.var(draws) == pytest.approx(ref.var(), rel=0.05)

    h = pb.SelectHyper(nu0=2.0, nu1=3.0)
    st = reg_state(1, 1, q=2)
    rec = RecordingRNG()
    pb.update_upsilon(st, h, rec)
    st.gamma = np.array([1.0, 1.0])
    pb.update_upsilon(st, h, rec)
    g = np.random.default_rng(7).normal(size=2)
    st.gamma = g
    pb.update_upsilon(st, h, rec)
    assert rec.calls[0] == ("gamma", 3.0, 3.0)
    assert rec.calls[1] == ("gamma", 3.0, pytest.approx(4.0))
    assert rec.calls[2][2] == pytest.approx(3.0 + (g[0] * g[0] + g[1] * g[1]) / 2)


def test_update_gamma_examples():
    rng = np.random.default_rng(8)
    h = pb.SelectHyper()
    st = reg_state(5, 1)
    assert pb.update_gamma(st, h, rng.normal(size=5), np.zeros((5, 0)), np.zeros((5, 1)), rng).size == 0

    N = 50
    Z = np.column_stack([np.ones(N), rng.normal(size=N)])
    G = rng.normal(size=(N, 2))
    st = reg_state(N, 2, q=2)
    st.b[:] = [0.5, -1.0]
    st.upsilon = 1e-12
    w = rng.normal(size=N)
    mean, prec = pb.gamma_conditional(st, h, w, Z, G)
    ols = np.linalg.lstsq(Z, w - G @ st.b, rcond=None)[0]
    assert np.allclose(mean, ols, rtol=1e-8)

    st.upsilon = 2.0
    h = pb.SelectHyper(gamma_star=np.array([1.0, -1.0]))
    mean, prec = pb.gamma_conditional(st, h, w, Z, G)
    A = 2.0 * np.eye(2) + Z.T @ Z
    want = np.linalg.solve(A, 2.0 * np.array([1.0, -1.0]) + Z.T @ (w - G @ st.b))
    assert np.allclose(mean, want) and np.allclose(prec, A)
    draws = np.array([pb.update_gamma(st, h, w, Z, G, rng).copy() for _ in range(40_000)])
    assert np.allclose(draws.mean(axis=0), want, atol=0.01)
    assert np.allclose(np.cov(draws.T), np.linalg.inv(A), atol=3e-4)


# -------------------------------------------------------------- whole block


def test_probit_geweke():
    N, K, q = 20, 4, 2
    h = pb.SelectHyper(sigma2=1.0, eps=0.04, alpha0=2.0, alpha1=2.0,
                       gamma_star=np.array([0.5, -0.5]), nu0=3.0, nu1=3.0)
    rng = np.random.default_rng(9)
    G = rng.normal(size=(N, K)) / 2
    Z = rng.normal(size=(N, q)) / 2

    def prior():
        ups = rng.gamma(h.nu0, 1 / h.nu1)
        gamma = h.prior_mean_gamma(q) + rng.standard_normal(q) / np.sqrt(ups)
        pi = rng.beta(h.alpha0, h.alpha1)
        delta = (rng.random(K) < pi).astype(np.int64)
        b = rng.standard_normal(K) * np.sqrt(np.where(delta == 1, h.sigma2, h.eps))
        return pb.RegressionState(np.zeros(N), b, delta, pi, gamma, ups)

    def draw_y(st):
        return (rng.random(N) < pb.ndtr(Z @ st.gamma + G @ st.b)).astype(np.int64)

    def g(st):
        return np.concatenate([moments(st.b), moments(st.delta), moments(st.pi),
                               moments(st.gamma), moments(st.upsilon)])

    marginal = [g(prior()) for _ in range(20_000)]
    st = prior()
    y = draw_y(st)
    successive = []
    for _ in range(60_000):
        pb.probit_sweep(st, y, Z, G, h, rng)
        assert np.all((st.w >= 0) == (y == 1))
        y = draw_y(st)
        successive.append(g(st))
    z = geweke_z(np.array(marginal), np.array(successive))
    assert np.max(np.abs(z)) < 4, np.round(z, 2)


def test_selection_consistency_small():
    rng = np.random.default_rng(10)
    N, P = 200, 20
    G = rng.normal(size=(N, P))
    beta = np.zeros(P)
    beta[:3] = 1.0
    y = (G @ beta + rng.standard_normal(N) > 0).astype(int)
    draws = pb.run_probit(G, y, iters=1500, burn_in=500, rng=rng)
    incl = draws["delta"].mean(axis=0)
    assert np.all(incl[:3] > 0.5) and np.all(incl[3:] < 0.5)
    assert np.array_equal(pb.selected(draws["b"]), incl > 0.5)


# -------------------------------------------------------------- prediction


def test_predict_and_accuracy():
    G = np.zeros((3, 2))
    assert np.allclose(pb.predict(np.ones((5, 2)), G), 0.5)
    assert pb.predict(np.array([[100.0]]), np.ones((1, 1)))[0] == pytest.approx(1.0)
    b = np.array([[0.3, -0.7]])
    g = np.array([[0.4, 0.9]])
    assert pb.predict(b, g)[0] == pytest.approx(Phi_series(0.3 * 0.4 - 0.7 * 0.9), rel=1e-12)
    z = np.array([[1.0], [2.0], [3.0]])
    assert np.allclose(pb.predict(np.zeros((2, 2)), G, np.array([[0.1], [0.1]]), z),
                       [Phi_series(0.1 * v) for v in (1, 2, 3)])

    y = np.array([1, 0, 1, 0])
    assert pb.accuracy(y, np.array([0.9, 0.1, 0.8, 0.2])) == 1.0
    assert pb.accuracy(y, np.array([0.1, 0.9, 0.2, 0.8])) == 0.0
    assert pb.accuracy(y, np.array([0.9, 0.9, 0.1, 0.1])) == 0.5
    # relabelling both the response and the predictor sign leaves accuracy unchanged
    p = np.array([0.7, 0.4, 0.2, 0.6])
    assert pb.accuracy(y, p) == pb.accuracy(1 - y, 1 - p)


def test_check_response():
    with pytest.raises(ValueError):
        pb.check_response([0, 2, 1])
    with pytest.raises(ValueError):
        pb.check_response([0, 1], N=3)
    assert pb.check_response([0.0, 1.0]).dtype == np.int64
