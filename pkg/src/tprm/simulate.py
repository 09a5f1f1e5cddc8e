"""Synthetic data generators, comparison baselines and experiment drivers.

Image stacks are arrays with the subject mode last, e.g. (32, 32, n).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import pipeline as pl
from . import probit as pb
from .cp import CPHyper, cp_als, gibbs_cp, posterior_mean_reconstruction, rmse
from .tensor import (
    CPFactors, DenseTensor, PartitionGrid, as_array, partition_array, reconstruct_array, unpartition_array,
)

accuracy = pb.accuracy

PHANTOM_SHAPE = (32, 32)
SIM3D_SHAPE = (64, 64, 50)
SINE_OFFSETS = (10, 22, 34, 46)
SINE_LENGTH = 13


@dataclass
class SimData:
    y: np.ndarray
    X: np.ndarray  # spatial dims + (n,)
    mask: np.ndarray  # True where the groups differ
    effect: np.ndarray  # noiseless group difference X0(1) - X0(0)

    def images(self):
        return [DenseTensor(self.X[..., i]) for i in range(self.X.shape[-1])]


def _labels(n, rng):
    y = rng.integers(0, 2, size=n)
    if n >= 2 and (y.min() == y.max()):
        y[rng.integers(n)] ^= 1
    return y


def phantom_base(shape=PHANTOM_SHAPE):
    """Smooth background shared by both groups."""
    i, j = np.meshgrid(*(np.linspace(-1, 1, s) for s in shape), indexing="ij")
    return 10.0 * np.exp(-(i**2 + j**2) / 0.5)


def phantom_effect(shape=PHANTOM_SHAPE, center=(20, 20), width=6, amplitude=5.0):
    eff = np.zeros(shape)
    lo = [c - width // 2 for c in center]
    eff[lo[0]:lo[0] + width, lo[1]:lo[1] + width] = amplitude
    return eff


def gen_phantom_2d(n=200, noise_sd=5.0, seed=0):
    """Two-group 32 x 32 phantom: X_i = X0(y_i) + noise.

    X0(1) - X0(0) is a 6 x 6 square of height 5 whose centre is at (20, 20).
    """
    if n < 1 or noise_sd < 0:
        raise ValueError("need n >= 1 and noise_sd >= 0")
    rng = np.random.default_rng(seed)
    y = _labels(n, rng)
    base, eff = phantom_base(), phantom_effect()
    X = base[..., None] + eff[..., None] * y
    X = X + noise_sd * rng.standard_normal(X.shape)
    return SimData(y, X, eff != 0, eff)


def sine_factor(J, offset, length=SINE_LENGTH):
    """Column with sin(j pi / 14) at position offset + j, j = 1..length (cut at J)."""
    col = np.zeros(J)
    j = np.arange(1, length + 1)
    pos = offset + j - 1
    keep = pos < J
    col[pos[keep]] = np.sin(j[keep] * np.pi / (length + 1))
    return col


def sim3d_signal(shape=SIM3D_SHAPE, offsets=SINE_OFFSETS):
    """Rank-len(offsets) CP tensor with unit weights and sine-bump factors."""
    out = np.zeros(shape)
    for c in offsets:
        vecs = [sine_factor(J, c) for J in shape]
        out += np.einsum("i,j,k->ijk", *vecs) if len(shape) == 3 else _outer(vecs)
    return out


def _outer(vecs):
    out = vecs[0]
    for v in vecs[1:]:
        out = np.multiply.outer(out, v)
    return out


def brain_template(shape=SIM3D_SHAPE, seed=12345):
    """Fixed smooth template: three Gaussian bumps rescaled to [0, 250]."""
    rng = np.random.default_rng(seed)
    grids = np.meshgrid(*(np.arange(s, dtype=float) for s in shape), indexing="ij")
    t = np.zeros(shape)
    for _ in range(3):
        centre = [rng.uniform(0.25, 0.75) * s for s in shape]
        width = [rng.uniform(0.15, 0.3) * s for s in shape]
        t += np.exp(-sum((g - c) ** 2 / (2 * w * w) for g, c, w in zip(grids, centre, width)))
    t -= t.min()
    return 250.0 * t / t.max()


def gen_sim_3d(n=200, c0=65.0, seed=0, shape=SIM3D_SHAPE, noise_sd=70.0, offsets=SINE_OFFSETS):
    """X_i = G0 + c0 y_i X0 + noise with a rank-4 sine-bump X0."""
    rng = np.random.default_rng(seed)
    y = _labels(n, rng)
    x0 = sim3d_signal(shape, offsets)
    g0 = brain_template(shape)
    X = np.empty(tuple(shape) + (n,))
    for i in range(n):
        X[..., i] = g0 + (c0 * y[i]) * x0 + noise_sd * rng.standard_normal(shape)
    eff = c0 * x0
    return SimData(y, X, x0 > 0, eff)


def _vectorize(X):
    x = as_array(X) if not isinstance(X, list) else np.stack([as_array(t) for t in X], axis=-1)
    return x.reshape(-1, x.shape[-1]).T


def pca_fit(X, R):
    """Top-R principal components of the vectorised images.

    Returns (scores N x R, loadings P x R, mean P).  Computed from the N x N
    Gram matrix, which is cheap when voxels outnumber subjects.
    """
    if int(R) != R or R < 1:
        raise ValueError("R must be a positive integer")
    V = _vectorize(X)
    N = V.shape[0]
    if R > N - 1:
        raise ValueError(f"R={R} exceeds N-1={N - 1}")
    mean = V.mean(axis=0)
    Vc = V - mean
    evals, evecs = np.linalg.eigh(Vc @ Vc.T)
    order = np.argsort(evals)[::-1][:R]
    s = np.sqrt(np.maximum(evals[order], 0.0))
    U = evecs[:, order]
    scores = U * s
    loadings = Vc.T @ U / np.where(s > 0, s, 1.0)
    return scores, loadings, mean


def baseline_pca_features(X, R):
    """N x R principal-component scores of the vectorised images."""
    return pca_fit(X, R)[0]


def baseline_tals_features(X, R, max_iters=100, tol=1e-6, seed=0):
    """Subject-mode factor (times weights) of one CP-ALS fit of the whole stack."""
    x = as_array(X) if not isinstance(X, list) else np.stack([as_array(t) for t in X], axis=-1)
    x = x - x.mean(axis=-1, keepdims=True)
    f = cp_als(x, R, max_iters=max_iters, tol=tol, rng=np.random.default_rng(seed))
    return f.factors[-1] * f.weights


def _standardize(F):
    sd = F.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (F - F.mean(axis=0)) / sd, sd


def probit_model_accuracy(F, y, iters=2000, burn_in=1000, seed=0, hyper=None):
    """In-sample posterior predictive accuracy of the probit model on features F."""
    Fs, _ = _standardize(F)
    draws = pb.run_probit(Fs, y, None, hyper, iters, burn_in, rng=np.random.default_rng(seed))
    return accuracy(y, pb.predict(draws["b"], Fs)), draws


# ---------------------------------------------------------------- experiments


def multiscale_tensor(shape=(32, 32, 32), noise_sd=0.05, seed=0):
    """Sum of localized smooth bumps at several widths plus Gaussian noise."""
    rng = np.random.default_rng(seed)
    grids = [np.arange(s, dtype=float) for s in shape]
    x = np.zeros(shape)
    for width, amp, count in ((8.0, 4.0, 2), (4.0, 2.0, 4), (2.0, 1.0, 8), (1.0, 0.5, 16)):
        for _ in range(count):
            vecs = [np.exp(-((g - rng.uniform(0, len(g))) ** 2) / (2 * width**2)) for g in grids]
            x += amp * _outer(vecs)
    return x + noise_sd * rng.standard_normal(shape)


def decompose_blocks(x, rank, block_dims=None, method="gibbs", iters=600, burn_in=300,
                     hyper=None, seed=0, return_factors=False):
    """Blockwise CP fit; returns the reassembled reconstruction.

    Gibbs fits report the posterior-mean reconstruction over the retained sweeps
    (and the final sweep's factors when ``return_factors`` is set).  The last
    mode of every block plays the subject role.
    """
    x = np.asarray(as_array(x), dtype=np.float64)
    block_dims = tuple(block_dims or x.shape)
    grid = PartitionGrid.create(x.shape, block_dims)
    rng = np.random.default_rng(seed)
    blocks = partition_array(x, grid)
    out = np.empty_like(blocks)
    hyper = hyper or CPHyper(rank)
    if method not in ("als", "gibbs"):
        raise ValueError(f"unknown method {method!r}")
    if method == "gibbs" and not 0 <= burn_in < iters:
        raise ValueError("need 0 <= burn_in < iters")
    factors = []
    for s, blk in enumerate(blocks):
        if method == "als":
            f = cp_als(blk, rank, rng=rng)
            out[s] = reconstruct_array(f.weights, f.factors)
        else:
            chain = gibbs_cp(blk, hyper, iters, rng, sid=s)
            out[s] = posterior_mean_reconstruction(chain[burn_in:])
            f = chain[-1].factors
            f = CPFactors(f.weights, f.all_factors())
        factors.append(f)
    xhat = unpartition_array(out, grid)
    return (xhat, factors) if return_factors else xhat


def run_decomp(ranks=(2, 4, 8), partitions=((32, 32, 32), (16, 16, 16)), seed=0, iters=600,
               burn_in=300, x=None):
    """RMSE table rows (method, blocks, S, R, rmse) on the multiscale tensor."""
    if x is None:
        x = multiscale_tensor(seed=seed)
    rows = []
    for blocks in partitions:
        S = PartitionGrid.create(x.shape, blocks).block_count
        for R in ranks:
            for method in ("gibbs", "als"):
                xhat = decompose_blocks(x, R, blocks, method, iters, burn_in, seed=seed)
                rows.append({"method": method, "blocks": tuple(blocks), "S": S, "R": R,
                             "rmse": rmse(x, xhat)})
    return rows


def significance_scores(sig, truth):
    """(precision, recall) of a significance mask against the truth mask."""
    sig = np.asarray(sig, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    hits = np.sum(sig & truth)
    precision = hits / sig.sum() if sig.any() else 0.0
    recall = hits / truth.sum() if truth.any() else 0.0
    return float(precision), float(recall)


def pca_projection(X, y, R, iters=5000, burn_in=3000, seed=0, level=0.95):
    """Image-space projection of the PCA-feature probit coefficients."""
    scores, loadings, _ = pca_fit(X, R)
    Fs, sd = _standardize(scores)
    draws = pb.run_probit(Fs, y, None, None, iters, burn_in, rng=np.random.default_rng(seed))
    maps = (draws["b"] / sd) @ loadings.T
    lo, hi = pb.credible_interval(maps, level)
    shape = as_array(X).shape[:-1]
    return pl.Projection(maps.mean(axis=0).reshape(shape), lo.reshape(shape), hi.reshape(shape))


def phantom_config(block_dims, R=8, iters=5000, burn_in=3000, seed=0):
    return pl.PipelineConfig(block_dims=block_dims, rank=R, iters=iters, burn_in=burn_in,
                             seed=seed, factor_model=False)


def run_phantom2d(n=200, noise_sd=5.0, seed=0, R=8, iters=5000, burn_in=3000, data=None):
    """Fit fpca, S=1 and S=16 models; returns {name: (Projection, precision, recall)}."""
    data = data or gen_phantom_2d(n, noise_sd, seed)
    out = {}
    proj = pca_projection(data.X, data.y, R, iters, burn_in, seed)
    out["fpca"] = (proj,) + significance_scores(proj.significant, data.mask)
    for name, blocks in (("S1", (32, 32)), ("S16", (8, 8))):
        store = pl.fit(data.X, data.y, None, phantom_config(blocks, R, iters, burn_in, seed))
        proj = pl.projection(store)
        out[name] = (proj,) + significance_scores(proj.significant, data.mask)
    return out


@dataclass
class Sim3DSettings:
    c0: float = 65.0
    n: int = 200
    block_dims: tuple = (16, 16, 25)
    pmtd_rank: int = 2
    pmtd_iters: int = 150
    pmtd_burn_in: int = 75
    baseline_rank: int = 8
    probit_iters: int = 2000
    probit_burn_in: int = 1000


def run_sim3d_replication(seed, settings=None):
    """Model accuracy of fpca, tals and pmtd on one simulated data set."""
    st = settings or Sim3DSettings()
    data = gen_sim_3d(st.n, st.c0, seed)
    acc = {}
    F = baseline_pca_features(data.X, st.baseline_rank)
    acc["fpca"] = probit_model_accuracy(F, data.y, st.probit_iters, st.probit_burn_in, seed)[0]
    F = baseline_tals_features(data.X, st.baseline_rank, seed=seed)
    acc["tals"] = probit_model_accuracy(F, data.y, st.probit_iters, st.probit_burn_in, seed)[0]
    cfg = pl.PipelineConfig(block_dims=st.block_dims, rank=st.pmtd_rank, iters=st.pmtd_iters,
                            burn_in=st.pmtd_burn_in, seed=seed, store_latent=True)
    store = pl.fit(data.X, data.y, None, cfg)
    acc["pmtd"] = accuracy(data.y, pl.fitted_probabilities(store))
    return acc


def run_sim3d(replications=20, seed=0, settings=None):
    """Rows (run, method, c0, accuracy) over independent replications."""
    st = settings or Sim3DSettings()
    seeds = np.random.SeedSequence(seed).generate_state(replications)
    rows = []
    for run, s in enumerate(seeds):
        acc = run_sim3d_replication(int(s), st)
        rows += [{"run": run, "method": m, "c0": st.c0, "accuracy": a} for m, a in acc.items()]
    return rows


def settings_with(**kw):
    return dataclasses.replace(Sim3DSettings(), **kw)
