"""Bayesian and least-squares CP decomposition of one block.

A block is an array of shape (p_1, ..., p_D, N): D spatial modes followed
by the subject mode.  The Bayesian model is

    X = sum_r lambda_r a_r(1) o ... o a_r(D) o l_r + E,   E ~ N(0, 1/tau)

with priors a_r(d) ~ N(0, I/p_d), lambda_r ~ N(0, 1/kappa) and
tau ~ Gamma(nu0, nu1) (shape, rate).  The subject-mode conditional uses
prior precision N, so the subject prior is l_r ~ N(0, I/N).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError
from .tensor import CPFactors, as_array, khatri_rao, reconstruct_array


@dataclass
class CPHyper:
    rank: int
    nu0: float = 1.0
    nu1: float = 1e-4
    kappa: float = 1e-4

    def __post_init__(self):
        if int(self.rank) != self.rank or self.rank < 1:
            raise ValueError(f"rank must be a positive integer, got {self.rank}")
        self.rank = int(self.rank)
        if min(self.nu0, self.nu1, self.kappa) <= 0:
            raise ValueError("CP hyperparameters must be positive")


@dataclass
class CPState:
    factors: CPFactors
    tau: float
    sid: int = 0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.factors.subject is None:
            raise ShapeError("CPState needs a subject-mode matrix")

    @property
    def weights(self):
        return self.factors.weights

    @property
    def spatial(self):
        return self.factors.factors

    @property
    def subject(self):
        return self.factors.subject

    def mats(self):
        return self.factors.all_factors()

    def copy(self):
        return CPState(self.factors.copy(), float(self.tau), self.sid)

    def check_block(self, shape):
        if self.factors.dims != tuple(shape):
            raise ShapeError(f"state dims {self.factors.dims} do not match block {tuple(shape)}")


def init_state(shape, hyper, rng, sid=0):
    """Prior-scaled start: entries N(0, 1/J_d), unit weights, tau at its prior mean."""
    R = hyper.rank
    mats = [rng.normal(0.0, 1.0 / np.sqrt(J), size=(J, R)) for J in shape]
    f = CPFactors(np.ones(R), mats[:-1], mats[-1])
    return CPState(f, hyper.nu0 / hyper.nu1, sid)


def sample_prior(shape, hyper, rng, sid=0):
    """Draw (state, block) from the joint prior of one block."""
    R = hyper.rank
    mats = [rng.normal(0.0, 1.0 / np.sqrt(J), size=(J, R)) for J in shape]
    lam = rng.normal(0.0, 1.0 / np.sqrt(hyper.kappa), size=R)
    tau = rng.gamma(hyper.nu0, 1.0 / hyper.nu1)
    state = CPState(CPFactors(lam, mats[:-1], mats[-1]), tau, sid)
    return state, sample_block(state, rng)


def sample_block(state, rng):
    mean = reconstruct_array(state.weights, state.mats())
    return mean + rng.standard_normal(mean.shape) / np.sqrt(state.tau)


def residual(state, block):
    x = as_array(block)
    state.check_block(x.shape)
    return x - reconstruct_array(state.weights, state.mats())


# Reference conditionals.  These rebuild the residual from scratch and are
# used for single-entry updates and as oracles for the block sampler.

def tau_conditional(state, block, hyper):
    """(shape, rate) of the Gamma full conditional of tau."""
    res = residual(state, block)
    ss = float(np.sum(res * res))
    if not np.isfinite(ss):
        raise NumericError("non-finite residual in tau update")
    return hyper.nu0 + res.size / 2.0, hyper.nu1 + ss / 2.0


def update_tau(state, block, hyper, rng):
    shape, rate = tau_conditional(state, block, hyper)
    state.tau = float(rng.gamma(shape, 1.0 / rate))
    return state.tau


def _deflated(state, block, r):
    """Residual with the rank-r component added back."""
    mats = state.mats()
    comp = reconstruct_array(state.weights[r : r + 1], [m[:, r : r + 1] for m in mats])
    return residual(state, block) + comp


def _design(state, mode, r, with_weight=True):
    mats = state.mats()
    vecs = [m[:, r] for k, m in enumerate(mats) if k != mode]
    out = vecs[0]
    for v in vecs[1:]:
        out = np.multiply.outer(out, v)
    if with_weight:
        out = out * state.weights[r]
    return out


def entry_conditional(state, block, mode, j, r):
    """Mean and precision for entry (j, r) of the factor matrix of ``mode``.

    ``mode`` runs over 0..D-1 for spatial modes and D for the subject mode.
    The prior precision is the length of that mode.
    """
    x = as_array(block)
    state.check_block(x.shape)
    D = x.ndim - 1
    if not 0 <= mode <= D:
        raise ValueError(f"mode {mode} out of range for a block of order {x.ndim}")
    xhat = np.take(_deflated(state, x, r), j, axis=mode)
    design = _design(state, mode, r)
    prec = state.tau * float(np.sum(design * design)) + x.shape[mode]
    mean = state.tau * float(np.sum(xhat * design)) / prec
    return mean, prec


def update_factor_entry(state, block, hyper, d, j, r, rng):
    """Draw entry (j, r) of spatial factor matrix d (0-based)."""
    D = len(state.spatial)
    if not 0 <= d < D:
        raise ValueError(f"spatial mode {d} out of range")
    mean, prec = entry_conditional(state, block, d, j, r)
    val = mean + rng.standard_normal() / np.sqrt(prec)
    state.spatial[d][j, r] = val
    return val


def update_subject_entry(state, block, hyper, i, r, rng):
    """Draw entry (i, r) of the subject-mode matrix."""
    mean, prec = entry_conditional(state, block, len(state.spatial), i, r)
    val = mean + rng.standard_normal() / np.sqrt(prec)
    state.subject[i, r] = val
    return val


def lambda_conditional(state, block, hyper, r):
    x = as_array(block)
    xhat = _deflated(state, x, r)
    design = _design(state, -1, r, with_weight=False)
    prec = state.tau * float(np.sum(design * design)) + hyper.kappa
    mean = state.tau * float(np.sum(xhat * design)) / prec
    return mean, prec


def update_lambda(state, block, hyper, r, rng):
    mean, prec = lambda_conditional(state, block, hyper, r)
    val = mean + rng.standard_normal() / np.sqrt(prec)
    state.weights[r] = val
    return val


# Fast path.

_LETTERS = "abcdefghijklmnopq"


def contract_except(t, mats, mode):
    """Contract t (J_1..J_M, R) with mats[k][:, r] over every mode but ``mode``."""
    M = t.ndim - 1
    if M == 1:
        return t
    idx = _LETTERS[:M]
    ops = [idx + "z"] + [idx[k] + "z" for k in range(M) if k != mode]
    spec = ",".join(ops) + "->" + idx[mode] + "z"
    return np.einsum(spec, t, *[mats[k] for k in range(M) if k != mode])


def mttkrp(x, mats, mode):
    """Mode-``mode`` unfolding of x times the Khatri-Rao product of the other factors."""
    R = mats[0].shape[1]
    last = x.ndim - 1
    xm = x.reshape(-1, x.shape[-1])
    if mode == last:
        return xm.T @ khatri_rao(mats[:-1])
    t = (xm @ mats[-1]).reshape(x.shape[:-1] + (R,))
    return contract_except(t, mats[:-1], mode)


def _hadamard(grams, skip=None):
    out = None
    for k, g in enumerate(grams):
        if k == skip:
            continue
        out = g.copy() if out is None else out * g
    return out


class BlockSampler:
    """Gibbs sampler for one block.

    One call to :meth:`sweep` updates tau, then every spatial factor matrix
    (modes ascending, columns ascending), then the subject matrix, then the
    weights.  Inner products with the residual are formed from MTTKRPs and
    Gram matrices so the residual tensor is never materialised.
    """

    def __init__(self, block, hyper, state=None, rng=None, sid=0):
        x = np.ascontiguousarray(as_array(block), dtype=np.float64)
        if x.ndim < 2:
            raise ShapeError("a block needs at least one spatial mode and a subject mode")
        if not np.all(np.isfinite(x)):
            raise NumericError("block has non-finite entries")
        self.x = x
        self.hyper = hyper
        self.xmat = x.reshape(-1, x.shape[-1])
        self.xnorm2 = float(np.sum(x * x))
        if state is None:
            if rng is None:
                raise ValueError("need an rng to initialise the state")
            state = init_state(x.shape, hyper, rng, sid)
        state.check_block(x.shape)
        if state.weights.size != hyper.rank:
            raise ShapeError("state rank differs from hyper.rank")
        self.state = state
        self._xl = None

    def _cross(self):
        """<X, a_r(1) o ... o l_r> for each r, plus the spatial Khatri-Rao matrix."""
        kr = khatri_rao(self.state.spatial)
        ml = self.xmat.T @ kr
        return (ml * self.state.subject).sum(axis=0), kr

    def sse(self, grams=None):
        st = self.state
        if grams is None:
            grams = [m.T @ m for m in st.mats()]
        kr = None
        if self._xl is None:
            self._xl, kr = self._cross()
        lam = st.weights
        ss = self.xnorm2 - 2.0 * lam @ self._xl + lam @ _hadamard(grams) @ lam
        if not np.isfinite(ss):
            raise NumericError("non-finite residual sum of squares")
        if ss < 1e-6 * self.xnorm2:
            # cancellation: fall back to the explicit residual
            if kr is None:
                kr = khatri_rao(st.spatial)
            res = self.xmat - (kr * lam) @ st.subject.T
            ss = float(np.sum(res * res))
        return ss

    def sweep(self, rng):
        st = self.state
        h = self.hyper
        R = h.rank
        A = st.spatial
        L = st.subject
        lam = st.weights
        D = len(A)
        grams = [m.T @ m for m in st.mats()]

        # tau
        ss = self.sse(grams)
        st.tau = float(rng.gamma(h.nu0 + self.x.size / 2.0, 1.0 / (h.nu1 + ss / 2.0)))
        tau = st.tau

        # spatial factor matrices
        t = (self.xmat @ L).reshape(self.x.shape[:-1] + (R,))
        for d in range(D):
            M = contract_except(t, A, d)
            H = _hadamard(grams, skip=d)
            self._update_columns(A[d], M, H, lam, tau, A[d].shape[0], rng)
            grams[d] = A[d].T @ A[d]

        # subject matrix
        kr = khatri_rao(A)
        ml = self.xmat.T @ kr
        H = _hadamard(grams, skip=D)
        self._update_columns(L, ml, H, lam, tau, L.shape[0], rng)
        grams[D] = L.T @ L

        # weights
        xl = (ml * L).sum(axis=0)
        Hall = H * grams[D]
        for r in range(R):
            num = xl[r] - lam @ Hall[:, r] + lam[r] * Hall[r, r]
            prec = tau * Hall[r, r] + h.kappa
            lam[r] = tau * num / prec + rng.standard_normal() / np.sqrt(prec)
        self._xl = xl
        return st

    @staticmethod
    def _update_columns(F, M, H, lam, tau, prior_prec, rng):
        n = F.shape[0]
        for r in range(F.shape[1]):
            cross = M[:, r] - F @ (lam * H[:, r]) + F[:, r] * (lam[r] * H[r, r])
            prec = tau * lam[r] ** 2 * H[r, r] + prior_prec
            F[:, r] = tau * lam[r] * cross / prec + rng.standard_normal(n) / np.sqrt(prec)


def gibbs_cp(block, hyper, iters, rng, init=None, sid=0):
    """Run ``iters`` full sweeps and return the list of visited states."""
    if iters < 1:
        raise ValueError("iters must be at least 1")
    sampler = BlockSampler(block, hyper, state=init, rng=rng, sid=sid)
    chain = []
    for _ in range(iters):
        sampler.sweep(rng)
        chain.append(sampler.state.copy())
    return chain


def posterior_mean_reconstruction(states):
    """Average of the CP reconstructions (tau excluded) over a list of states."""
    if not states:
        raise ValueError("no states to average")
    acc = None
    for st in states:
        rec = reconstruct_array(st.weights, st.mats())
        acc = rec if acc is None else acc + rec
    return acc / len(states)


def cp_als(block, rank, max_iters=500, tol=1e-10, rng=None, init=None):
    """Alternating least squares CP fit of an arbitrary-order tensor.

    Each factor matrix is solved in turn through the pseudoinverse of the
    Hadamard product of the other Gram matrices (so rank-deficient systems
    return the minimum-norm solution), then its columns are scaled to unit
    norm with the norms moved into the weights.  Stops when the change of
    fit = 1 - ||X - Xhat|| / ||X|| drops below ``tol``.

    Returns a CPFactors whose ``factors`` hold every mode; ``subject`` is None.
    """
    x = np.ascontiguousarray(as_array(block), dtype=np.float64)
    if int(rank) != rank or rank < 1:
        raise ValueError(f"rank must be a positive integer, got {rank}")
    if rank >= x.size:
        raise ValueError(f"rank {rank} is not below the number of entries {x.size}")
    if x.ndim < 2:
        raise ShapeError("CP-ALS needs a tensor of order >= 2")
    rank = int(rank)
    if init is not None:
        mats = [np.array(m, dtype=np.float64) for m in init]
    else:
        if rng is None:
            rng = np.random.default_rng(0)
        mats = [rng.normal(0.0, 1.0 / np.sqrt(J), size=(J, rank)) for J in x.shape]
    lam = np.ones(rank)
    xnorm = np.sqrt(np.sum(x * x))
    if xnorm == 0:
        return CPFactors(np.zeros(rank), [np.zeros_like(m) for m in mats])
    grams = [m.T @ m for m in mats]
    fit_old = 0.0
    for _ in range(max_iters):
        for d in range(x.ndim):
            M = mttkrp(x, mats, d)
            V = _hadamard(grams, skip=d)
            A = M @ np.linalg.pinv(V)
            norms = np.linalg.norm(A, axis=0)
            safe = np.where(norms > 0, norms, 1.0)
            mats[d] = A / safe
            lam = norms
            grams[d] = mats[d].T @ mats[d]
        inner = np.sum(lam * np.sum(M * mats[-1], axis=0))
        model2 = lam @ _hadamard(grams) @ lam
        res = np.sqrt(max(xnorm**2 - 2 * inner + model2, 0.0))
        fit = 1.0 - res / xnorm
        if abs(fit - fit_old) < tol:
            break
        fit_old = fit
    return CPFactors(lam, mats)


def rmse(x, xhat):
    """Frobenius norm of the difference over sqrt of the element count."""
    x, xhat = as_array(x), as_array(xhat)
    if x.shape != xhat.shape:
        raise ShapeError(f"dims differ: {x.shape} vs {xhat.shape}")
    return float(np.linalg.norm((x - xhat).ravel()) / np.sqrt(x.size))


def split_subject(f):
    """Turn an all-modes CPFactors (from cp_als) into spatial + subject form."""
    return CPFactors(f.weights.copy(), [m.copy() for m in f.factors[:-1]], f.factors[-1].copy())

