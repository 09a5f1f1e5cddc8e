"""Latent factor compression L = G D + Psi of the extracted CP features.

Priors: columns g_k ~ N(0, I/N), entries d_kj ~ N(0, 1) (the precision the
conditional update implies), psi_ij ~ N(0, 1/tau_psi), tau_psi ~ Gamma.
Orthogonality of G or D is not imposed.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError


@dataclass
class FactorHyper:
    beta0: float = 1e-6
    beta1: float = 1e-6

    def __post_init__(self):
        if self.beta0 <= 0 or self.beta1 <= 0:
            raise ValueError("factor hyperparameters must be positive")


@dataclass
class FactorState:
    G: np.ndarray  # N x K latent scores
    D: np.ndarray  # K x P_L basis
    tau_psi: float

    def __post_init__(self):
        if self.G.shape[1] != self.D.shape[0]:
            raise ShapeError(f"G {self.G.shape} and D {self.D.shape} disagree on K")
        if not self.tau_psi > 0:
            raise ValueError("tau_psi must be positive")

    @property
    def K(self):
        return self.G.shape[1]

    def copy(self):
        return FactorState(self.G.copy(), self.D.copy(), float(self.tau_psi))


def assemble_L(states):
    """Concatenate the subject matrices of the CP states in partition order."""
    if not states:
        raise ValueError("no partitions to assemble")
    mats = [st.subject for st in states]
    if len({m.shape[0] for m in mats}) != 1:
        raise ShapeError("partitions disagree on the number of subjects")
    return np.hstack(mats)


def standardize(L):
    """Column-standardize features; constant columns keep unit scale."""
    mean = L.mean(axis=0)
    sd = L.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (L - mean) / sd, mean, sd


def default_k(P_L, N):
    return max(1, min(P_L, N) // 2)


def init_factor(L, K):
    """Start from the rank-K truncated SVD: G = U_K, D = S_K V_K^T.

    Unit-norm score columns sit on the prior scale of g (variance 1/N).
    """
    N, P = L.shape
    if not 1 <= K <= min(N, P):
        raise ValueError(f"K={K} must lie in [1, min(N, P_L)={min(N, P)}]")
    U, s, Vt = np.linalg.svd(L, full_matrices=False)
    G = U[:, :K].copy()
    D = s[:K, None] * Vt[:K]
    resid = L - G @ D
    tau = L.size / max(float(np.sum(resid * resid)), 1e-12 * L.size)
    return FactorState(G, D, float(tau))


def _check(state, L):
    if L.shape != (state.G.shape[0], state.D.shape[1]):
        raise ShapeError(f"L of shape {L.shape} does not match G {state.G.shape}, D {state.D.shape}")


def g_conditional(state, L, k, resid=None):
    """Mean vector and precision of column g_k.

    ``resid`` is L - G D for the current state; it is computed when omitted.
    """
    _check(state, L)
    if resid is None:
        resid = L - state.G @ state.D
    N = L.shape[0]
    dk = state.D[k]
    lstar = resid + np.outer(state.G[:, k], dk)
    prec = N + state.tau_psi * float(dk @ dk)
    mean = state.tau_psi * (lstar @ dk) / prec
    return mean, prec


def update_g(state, L, k, rng, resid=None):
    """Draw g_k.  When ``resid`` is given it is kept equal to L - G D."""
    own = resid is None
    if own:
        resid = L - state.G @ state.D
    mean, prec = g_conditional(state, L, k, resid)
    new = mean + rng.standard_normal(mean.size) / np.sqrt(prec)
    if not own:
        resid -= np.outer(new - state.G[:, k], state.D[k])
    state.G[:, k] = new
    return new


def d_conditional(state, L, k, resid=None):
    _check(state, L)
    if resid is None:
        resid = L - state.G @ state.D
    gk = state.G[:, k]
    lstar = resid + np.outer(gk, state.D[k])
    prec = 1.0 + state.tau_psi * float(gk @ gk)
    mean = state.tau_psi * (gk @ lstar) / prec
    return mean, prec


def update_d(state, L, k, rng, resid=None):
    """Draw row k of D (every d_kj is conditionally independent)."""
    own = resid is None
    if own:
        resid = L - state.G @ state.D
    mean, prec = d_conditional(state, L, k, resid)
    new = mean + rng.standard_normal(mean.size) / np.sqrt(prec)
    if not own:
        resid -= np.outer(state.G[:, k], new - state.D[k])
    state.D[k] = new
    return new


def tau_psi_conditional(state, L, hyper, resid=None):
    _check(state, L)
    if resid is None:
        resid = L - state.G @ state.D
    ss = float(np.sum(resid * resid))
    if not np.isfinite(ss):
        raise NumericError("non-finite factor residual")
    return hyper.beta0 + L.size / 2.0, hyper.beta1 + ss / 2.0


def update_tau_psi(state, L, hyper, rng, resid=None):
    shape, rate = tau_psi_conditional(state, L, hyper, resid)
    state.tau_psi = float(rng.gamma(shape, 1.0 / rate))
    return state.tau_psi


def factor_sweep(state, L, hyper, rng):
    """One pass: every g_k, then every row of D, then tau_psi."""
    _check(state, L)
    resid = L - state.G @ state.D
    for k in range(state.K):
        update_g(state, L, k, rng, resid)
    for k in range(state.K):
        update_d(state, L, k, rng, resid)
    update_tau_psi(state, L, hyper, rng, resid)
    return state


def sample_prior(N, P, K, hyper, rng):
    """Draw (state, L) from the factor-model prior."""
    G = rng.normal(0.0, 1.0 / np.sqrt(N), size=(N, K))
    D = rng.standard_normal((K, P))
    tau = rng.gamma(hyper.beta0, 1.0 / hyper.beta1)
    state = FactorState(G, D, float(tau))
    return state, sample_L(state, rng)


def sample_L(state, rng):
    mean = state.G @ state.D
    return mean + rng.standard_normal(mean.shape) / np.sqrt(state.tau_psi)


def score_new(state, L_new, N_train):
    """Posterior mean of latent scores for new rows of L given D and tau_psi."""
    K = state.K
    A = state.tau_psi * state.D @ state.D.T + N_train * np.eye(K)
    return np.linalg.solve(A, state.tau_psi * state.D @ np.atleast_2d(L_new).T).T
