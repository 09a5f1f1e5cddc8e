"""Probit regression with a two-normal spike-and-slab prior.

Latent-variable (Albert-Chib) augmentation: w_i ~ N(z_i'gamma + g_i'b, 1),
y_i = 1(w_i > 0).  Coefficients b_k ~ (1 - delta_k) N(0, eps) +
delta_k N(0, sigma2), delta_k ~ Bernoulli(pi), pi ~ Beta(alpha0, alpha1),
gamma ~ N(gamma_star, I/upsilon), upsilon ~ Gamma(nu0, nu1).
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.special import expit, ndtr, ndtri
from scipy.stats import truncnorm

from .errors import ShapeError

# standardized bound beyond which inverse-CDF sampling is replaced by
# exponential rejection
TAIL_SWITCH = 5.0


@dataclass
class SelectHyper:
    sigma2: float = 1e4
    eps: float = 1e-4
    alpha0: float = 0.5
    alpha1: float = 0.5
    gamma_star: float | np.ndarray = 0.0
    nu0: float = 1.0
    nu1: float = 1.0

    def __post_init__(self):
        if not self.sigma2 > self.eps > 0:
            raise ValueError("need sigma2 > eps > 0")
        if min(self.alpha0, self.alpha1, self.nu0, self.nu1) <= 0:
            raise ValueError("Beta and Gamma hyperparameters must be positive")

    def prior_mean_gamma(self, q):
        g = np.broadcast_to(np.asarray(self.gamma_star, dtype=np.float64), (q,))
        return g.copy()


@dataclass
class RegressionState:
    w: np.ndarray
    b: np.ndarray
    delta: np.ndarray
    pi: float
    gamma: np.ndarray
    upsilon: float

    def copy(self):
        return RegressionState(
            self.w.copy(), self.b.copy(), self.delta.copy(), float(self.pi),
            self.gamma.copy(), float(self.upsilon),
        )


def _std_lower(a, rng):
    """Standard normal draws truncated to [a, inf), one per entry of a."""
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    out = np.empty(a.shape)
    inv = a < TAIL_SWITCH
    n_inv = int(inv.sum())
    if n_inv:
        u = 1.0 - rng.random(n_inv)
        p = np.minimum(u * ndtr(-a[inv]), np.nextafter(1.0, 0.0))
        out[inv] = -ndtri(p)
    if n_inv < a.size:
        out[~inv] = _robert_tail(a[~inv], rng)
    return out


def _robert_tail(a, rng):
    """Exponential-proposal rejection sampler for far tails (Robert, 1995)."""
    alpha = (a + np.sqrt(a * a + 4.0)) / 2.0
    out = np.empty(a.shape)
    todo = np.arange(a.size)
    while todo.size:
        z = a[todo] + rng.exponential(1.0 / alpha[todo])
        ok = rng.random(todo.size) <= np.exp(-0.5 * (z - alpha[todo]) ** 2)
        out[todo[ok]] = z[ok]
        todo = todo[~ok]
    return out


def sample_truncated_normal(mean, sd, side, rng, size=None):
    """Draw from N(mean, sd^2) restricted to x >= 0 or x <= 0.

    ``side`` is "nonnegative" or "nonpositive".  Bounds less than
    ``TAIL_SWITCH`` standard deviations from the mean use the inverse CDF on
    the upper tail; farther bounds use exponential rejection.
    """
    if np.any(np.asarray(sd) <= 0):
        raise ValueError("sd must be positive")
    if side not in ("nonnegative", "nonpositive"):
        raise ValueError(f"unknown side {side!r}")
    shape = np.broadcast_shapes(np.shape(mean), np.shape(sd)) if size is None else size
    mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), shape)
    sd = np.broadcast_to(np.asarray(sd, dtype=np.float64), shape)
    if side == "nonnegative":
        z = _std_lower((-mean / sd).ravel(), rng).reshape(shape)
        out = mean + sd * z
    else:
        z = _std_lower((mean / sd).ravel(), rng).reshape(shape)
        out = mean - sd * z
    return out if out.ndim else float(out)


def truncnorm_moments(mean, sd, side):
    """Analytic mean and variance of the half-line truncated normal."""
    if side == "nonnegative":
        a, b = (0.0 - mean) / sd, np.inf
    else:
        a, b = -np.inf, (0.0 - mean) / sd
    dist = truncnorm(a, b, loc=mean, scale=sd)
    return float(dist.mean()), float(dist.var())


def _design(Z, N):
    if Z is None:
        return np.zeros((N, 0))
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.shape[0] != N:
        raise ShapeError(f"Z has {Z.shape[0]} rows, expected {N}")
    return Z


def linear_predictor(state, Z, G):
    return Z @ state.gamma + G @ state.b


def update_w(state, y, Z, G, rng):
    """Latent utilities given the current linear predictor; sign(w) follows y."""
    eta = linear_predictor(state, Z, G)
    pos = y == 1
    a = np.where(pos, -eta, eta)
    z = _std_lower(a, rng)
    state.w = np.where(pos, eta + z, eta - z)
    return state.w


def inclusion_probability(b, pi, h):
    """P(delta = 1 | b, pi) under the two-normal mixture."""
    b = np.asarray(b, dtype=np.float64)
    lp1 = np.log(pi) - 0.5 * np.log(2 * np.pi * h.sigma2) - b * b / (2 * h.sigma2)
    lp0 = np.log1p(-pi) - 0.5 * np.log(2 * np.pi * h.eps) - b * b / (2 * h.eps)
    return expit(lp1 - lp0)


def update_delta(state, h, k, rng):
    p = inclusion_probability(state.b[k], state.pi, h)
    state.delta[k] = int(rng.random() < p)
    return state.delta[k]


def b_conditional(state, h, resid, G, k, gg=None):
    """Mean and variance of b_k given everything else.

    ``resid`` is the full residual w - Z gamma - G b.
    """
    g = G[:, k]
    gg_k = float(g @ g) if gg is None else gg[k]
    wt = resid + g * state.b[k]
    s = h.sigma2 if state.delta[k] else h.eps
    var = 1.0 / (gg_k + 1.0 / s)
    return var * float(g @ wt), var


def update_b(state, h, resid, G, k, rng, gg=None):
    """Draw b_k and keep ``resid`` in sync."""
    mean, var = b_conditional(state, h, resid, G, k, gg)
    new = mean + np.sqrt(var) * rng.standard_normal()
    resid -= G[:, k] * (new - state.b[k])
    state.b[k] = new
    return new


def update_pi(state, h, rng):
    n1 = int(np.sum(state.delta))
    state.pi = float(rng.beta(h.alpha0 + n1, h.alpha1 + state.delta.size - n1))
    return state.pi


def gamma_conditional(state, h, w, Z, G):
    """Mean and precision matrix of gamma."""
    q = Z.shape[1]
    wstar = w - G @ state.b
    prec = state.upsilon * np.eye(q) + Z.T @ Z
    rhs = state.upsilon * h.prior_mean_gamma(q) + Z.T @ wstar
    return cho_solve(cho_factor(prec, lower=True), rhs), prec


def update_gamma(state, h, w, Z, G, rng):
    q = Z.shape[1]
    if q == 0:
        return state.gamma
    mean, prec = gamma_conditional(state, h, w, Z, G)
    C = np.linalg.cholesky(prec)
    state.gamma = mean + solve_triangular(C.T, rng.standard_normal(q), lower=False)
    return state.gamma


def update_upsilon(state, h, rng):
    q = state.gamma.size
    dev = state.gamma - h.prior_mean_gamma(q)
    state.upsilon = float(rng.gamma(h.nu0 + q / 2.0, 1.0 / (h.nu1 + dev @ dev / 2.0)))
    return state.upsilon


def init_regression(y, Z, G, h, rng):
    """All features start in the slab with b drawn from its slab conditional."""
    N, K = G.shape
    Z = _design(Z, N)
    q = Z.shape[1]
    state = RegressionState(
        w=np.zeros(N), b=np.zeros(K), delta=np.ones(K, dtype=np.int64), pi=0.5,
        gamma=h.prior_mean_gamma(q), upsilon=h.nu0 / h.nu1,
    )
    update_w(state, y, Z, G, rng)
    resid = state.w - Z @ state.gamma
    gg = np.einsum("ik,ik->k", G, G)
    for k in range(K):
        update_b(state, h, resid, G, k, rng, gg)
    return state


def probit_sweep(state, y, Z, G, h, rng, gg=None):
    """One pass: w, every delta_k, every b_k, pi, gamma, upsilon."""
    update_w(state, y, Z, G, rng)
    return select_sweep(state, Z, G, h, rng, gg)


def select_sweep(state, Z, G, h, rng, gg=None):
    """The coefficient block of a pass (everything except w)."""
    if gg is None:
        gg = np.einsum("ik,ik->k", G, G)
    for k in range(state.b.size):
        update_delta(state, h, k, rng)
    resid = state.w - linear_predictor(state, Z, G)
    for k in range(state.b.size):
        update_b(state, h, resid, G, k, rng, gg)
    update_pi(state, h, rng)
    update_gamma(state, h, state.w, Z, G, rng)
    update_upsilon(state, h, rng)
    return state


def check_response(y, N=None):
    y = np.asarray(y)
    if y.ndim != 1:
        raise ShapeError("response must be a vector")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("response must be binary (0/1)")
    if N is not None and y.size != N:
        raise ShapeError(f"response has {y.size} entries, expected {N}")
    return y.astype(np.int64)


def run_probit(G, y, Z=None, h=None, iters=2000, burn_in=1000, thin=1, rng=None):
    """Stand-alone sampler on a fixed feature matrix; returns stacked draws."""
    if rng is None:
        rng = np.random.default_rng()
    h = h or SelectHyper()
    G = np.asarray(G, dtype=np.float64)
    N = G.shape[0]
    y = check_response(y, N)
    Z = _design(Z, N)
    if not 0 <= burn_in < iters or thin < 1:
        raise ValueError("need 0 <= burn_in < iters and thin >= 1")
    state = init_regression(y, Z, G, h, rng)
    gg = np.einsum("ik,ik->k", G, G)
    keep = {"b": [], "delta": [], "pi": [], "gamma": [], "upsilon": []}
    for it in range(iters):
        probit_sweep(state, y, Z, G, h, rng, gg)
        if it >= burn_in and (it - burn_in) % thin == 0:
            for name in keep:
                keep[name].append(np.copy(getattr(state, name)))
    return {name: np.array(v) for name, v in keep.items()}


def predict(b_draws, G, gamma_draws=None, Z=None):
    """Posterior predictive P(y = 1): average of Phi(z'gamma + g'b) over draws.

    ``G`` is either one N x K matrix or a stack with one matrix per draw.
    """
    b_draws = np.atleast_2d(b_draws)
    T = b_draws.shape[0]
    G = np.asarray(G, dtype=np.float64)
    if G.ndim == 2:
        eta = b_draws @ G.T
    else:
        if G.shape[0] != T:
            raise ShapeError("need one feature matrix per draw")
        eta = np.einsum("tik,tk->ti", G, b_draws)
    if gamma_draws is not None and Z is not None:
        Z = np.asarray(Z, dtype=np.float64)
        if Z.size:
            eta = eta + np.atleast_2d(gamma_draws) @ _design(Z, eta.shape[1]).T
    return ndtr(eta).mean(axis=0)


def accuracy(y, p_hat):
    """Fraction of subjects whose 0.5-thresholded prediction matches y."""
    y = np.asarray(y)
    p_hat = np.asarray(p_hat)
    if y.shape != p_hat.shape:
        raise ShapeError("y and p_hat differ in length")
    return float(np.mean(y == (p_hat > 0.5)))


def credible_interval(draws, level=0.95, axis=0):
    """Equal-tailed interval of the draws along ``axis``."""
    tail = 100 * (1 - level) / 2
    lo, hi = np.percentile(draws, [tail, 100 - tail], axis=axis)
    return lo, hi


def selected(draws, level=0.95):
    """Features whose equal-tailed interval excludes zero."""
    lo, hi = credible_interval(draws, level)
    return (lo > 0) | (hi < 0)
