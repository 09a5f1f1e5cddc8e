"""End-to-end tensor partition regression: fit, screening, projection, CV."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from . import factor as fm
from . import probit as pb
from .cp import BlockSampler, CPHyper, CPState, cp_als, split_subject
from .errors import ShapeError
from .tensor import (
    CPFactors, PartitionGrid, as_array, khatri_rao, partition_array, reconstruct_array,
    unpartition_array,
)


@dataclass
class PipelineConfig:
    """Model and sampler settings.

    ``block_dims`` covers the spatial modes only; the subject mode is never
    split.  ``n_factors=None`` picks min(P_L, N) // 2 latent factors.
    """

    block_dims: tuple
    rank: int = 2
    n_factors: int | None = None
    iters: int = 5000
    burn_in: int = 3000
    thinning: int = 1
    seed: int = 0
    cp: CPHyper | None = None
    factor: fm.FactorHyper = field(default_factory=fm.FactorHyper)
    select: pb.SelectHyper = field(default_factory=pb.SelectHyper)
    factor_model: bool = True
    screening: bool = False
    screen_tol: float = 1e-8
    center: bool = True
    standardize: bool = True
    pad: bool = False
    store_latent: bool = True
    warmup: int | None = None

    def __post_init__(self):
        self.block_dims = tuple(int(p) for p in self.block_dims)
        if self.cp is None:
            self.cp = CPHyper(self.rank)
        elif self.cp.rank != self.rank:
            self.cp = dataclasses.replace(self.cp, rank=self.rank)
        if not 0 <= self.burn_in < self.iters:
            raise ValueError("need 0 <= burn_in < iters")
        if self.thinning < 1:
            raise ValueError("thinning must be >= 1")
        if self.n_factors is not None and self.n_factors < 1:
            raise ValueError("n_factors must be positive")
        if self.warmup is not None and not 0 <= self.warmup <= self.burn_in:
            raise ValueError("need 0 <= warmup <= burn_in")

    @property
    def warmup_iters(self):
        """Sweeps of the CP and factor blocks before the regression block starts."""
        return self.burn_in // 2 if self.warmup is None else self.warmup

    @property
    def n_kept(self):
        return len(range(self.burn_in, self.iters, self.thinning))

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["block_dims"] = list(self.block_dims)
        gs = d["select"]["gamma_star"]
        d["select"]["gamma_star"] = np.asarray(gs).tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["cp"] = CPHyper(**d["cp"]) if d.get("cp") else None
        if "factor" in d:
            d["factor"] = fm.FactorHyper(**d["factor"])
        if "select" in d:
            d["select"] = pb.SelectHyper(**d["select"])
        return cls(**d)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


class ChainStore:
    """Retained draws (after burn-in and thinning) plus fixed arrays and metadata.

    On disk a store is a directory holding one little-endian float64 stream
    per parameter (``<name>.f64``) and ``manifest.json`` with shapes and meta.
    """

    MANIFEST = "manifest.json"

    def __init__(self, meta=None):
        self.meta = dict(meta or {})
        self.fixed = {}
        self._draws = {}

    def append(self, name, value):
        seq = self._draws.setdefault(name, [])
        if not isinstance(seq, list):
            seq = self._draws[name] = list(seq)
        seq.append(np.array(value, dtype=np.float64))

    def __getitem__(self, name):
        v = self._draws[name]
        if isinstance(v, list):
            v = self._draws[name] = np.stack(v)
        return v

    def __contains__(self, name):
        return name in self._draws

    @property
    def names(self):
        return sorted(self._draws)

    @property
    def n_draws(self):
        lens = {len(self._draws[n]) for n in self._draws}
        if len(lens) > 1:
            raise ValueError(f"parameter streams have unequal lengths {lens}")
        return lens.pop() if lens else 0

    def save(self, path):
        os.makedirs(path, exist_ok=True)
        entries = {}
        for name in self.names:
            arr = np.ascontiguousarray(self[name], dtype="<f8")
            with open(os.path.join(path, f"{name}.f64"), "wb") as fh:
                fh.write(arr.tobytes())
            entries[name] = list(arr.shape)
        fixed = {}
        for name in sorted(self.fixed):
            arr = np.ascontiguousarray(self.fixed[name], dtype="<f8")
            with open(os.path.join(path, f"fixed.{name}.f64"), "wb") as fh:
                fh.write(arr.tobytes())
            fixed[name] = list(arr.shape)
        manifest = {"meta": self.meta, "draws": entries, "fixed": fixed}
        tmp = os.path.join(path, self.MANIFEST + ".tmp")
        with open(tmp, "w") as fh:
            json.dump(manifest, fh, sort_keys=True, indent=2)
        os.replace(tmp, os.path.join(path, self.MANIFEST))

    @classmethod
    def load(cls, path):
        with open(os.path.join(path, cls.MANIFEST)) as fh:
            manifest = json.load(fh)
        store = cls(manifest["meta"])
        for name, shape in manifest["draws"].items():
            data = np.fromfile(os.path.join(path, f"{name}.f64"), dtype="<f8")
            store._draws[name] = data.reshape(shape)
        for name, shape in manifest["fixed"].items():
            data = np.fromfile(os.path.join(path, f"fixed.{name}.f64"), dtype="<f8")
            store.fixed[name] = data.reshape(shape)
        return store

    @property
    def config(self):
        return PipelineConfig.from_dict(self.meta["config"])


def screen(states, tol=1e-8):
    """Ids of partitions whose subject-mode features are not all below ``tol``."""
    return [st.sid for st in states if np.max(np.abs(st.subject)) >= tol]


def _pilot_states(blocks, cfg, rng):
    """ALS point fits used for screening, with weights folded into the features."""
    states = []
    for s, blk in enumerate(blocks):
        f = split_subject(cp_als(blk, cfg.rank, max_iters=50, tol=1e-6, rng=rng))
        f = CPFactors(np.ones(cfg.rank), f.factors, f.subject * f.weights)
        states.append(CPState(f, 1.0, s))
    return states


def _preprocess(x, cfg):
    spatial = x.shape[:-1]
    center = x.mean(axis=-1) if cfg.center else np.zeros(spatial)
    xc = x - center[..., None]
    scale = float(xc.std()) if cfg.standardize else 1.0
    if scale == 0:
        scale = 1.0
    if scale != 1.0:
        xc /= scale
    return xc, center, scale


def _grid(spatial, block_dims, N, pad):
    if len(block_dims) != len(spatial):
        raise ShapeError(f"block dims {block_dims} do not match image dims {spatial}")
    return PartitionGrid.create(tuple(spatial) + (N,), tuple(block_dims) + (N,), pad=pad)


def spatial_grid(store):
    m = store.meta
    return PartitionGrid.create(m["spatial_dims"], m["config"]["block_dims"], pad=m["config"]["pad"])


def fit(X, y, Z=None, cfg=None):
    """Run the joint sampler and return the retained draws.

    ``X`` has the subject mode last.  Each iteration draws the latent
    utilities, sweeps every surviving partition's CP block, then the factor
    block (when enabled), then the selection block.
    """
    if cfg is None:
        raise ValueError("a PipelineConfig is required")
    x = np.array(as_array(X), dtype=np.float64)
    if x.ndim < 2:
        raise ShapeError("X needs at least one image mode and the subject mode")
    N = x.shape[-1]
    y = pb.check_response(y, N)
    Zd = pb._design(Z, N)
    if not np.all(np.isfinite(x)) or not np.all(np.isfinite(Zd)):
        raise ValueError("training data contain non-finite values")
    spatial = x.shape[:-1]
    grid = _grid(spatial, cfg.block_dims, N, cfg.pad)
    rng = np.random.default_rng(cfg.seed)

    x, center, scale = _preprocess(x, cfg)
    blocks = partition_array(x, grid)
    del x

    if cfg.screening:
        survivors = screen(_pilot_states(blocks, cfg, rng), cfg.screen_tol)
        if not survivors:
            raise ValueError("screening removed every partition")
    else:
        survivors = list(range(grid.block_count))
    samplers = [BlockSampler(blocks[s], cfg.cp, rng=rng, sid=s) for s in survivors]

    P_L = len(survivors) * cfg.rank
    K = cfg.n_factors or fm.default_k(P_L, N)
    if cfg.factor_model and K > min(P_L, N):
        raise ValueError(f"n_factors={K} exceeds min(P_L, N)={min(P_L, N)}")

    store = ChainStore({
        "config": cfg.to_dict(),
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "iters": cfg.iters,
        "burn_in": cfg.burn_in,
        "thinning": cfg.thinning,
        "n_subjects": N,
        "n_covariates": Zd.shape[1],
        "spatial_dims": list(spatial),
        "n_factors": K if cfg.factor_model else 0,
    })
    store.fixed["center"] = center
    store.fixed["scale"] = np.array([scale])
    store.fixed["survivors"] = np.array(survivors, dtype=np.float64)

    fac = reg = feats = None
    for it in range(cfg.iters):
        if reg is not None:
            pb.update_w(reg, y, Zd, feats, rng)
        for smp in samplers:
            smp.sweep(rng)
        L = fm.assemble_L([smp.state for smp in samplers])
        Ls, fmean, fsd = fm.standardize(L)
        if cfg.factor_model:
            if fac is None:
                fac = fm.init_factor(Ls, K)
            fm.factor_sweep(fac, Ls, cfg.factor, rng)
            feats = fac.G
        else:
            feats = Ls
        if it < cfg.warmup_iters:
            # the CP and factor blocks do not depend on the regression block,
            # so holding it back only moves its starting point
            continue
        gg = np.einsum("ik,ik->k", feats, feats)
        if reg is None:
            reg = pb.init_regression(y, Zd, feats, cfg.select, rng)
        pb.select_sweep(reg, Zd, feats, cfg.select, rng, gg)

        if it >= cfg.burn_in and (it - cfg.burn_in) % cfg.thinning == 0:
            _record(store, cfg, samplers, fmean, fsd, fac, reg)
    return store


def _record(store, cfg, samplers, fmean, fsd, fac, reg):
    states = [smp.state for smp in samplers]
    store.append("tau", [st.tau for st in states])
    store.append("lambda", np.stack([st.weights for st in states]))
    for d in range(len(states[0].spatial)):
        store.append(f"A{d}", np.stack([st.spatial[d] for st in states]))
    if cfg.store_latent:
        store.append("L", np.stack([st.subject for st in states]))
    store.append("feat_mean", fmean)
    store.append("feat_sd", fsd)
    if fac is not None:
        if cfg.store_latent:
            store.append("G", fac.G)
        store.append("D", fac.D)
        store.append("tau_psi", [fac.tau_psi])
    store.append("b", reg.b)
    store.append("delta", reg.delta)
    store.append("pi", [reg.pi])
    store.append("gamma", reg.gamma)
    store.append("upsilon", [reg.upsilon])


def _raw_coefficients(store, t):
    """Per-feature coefficient on the unstandardized subject loadings for draw t."""
    b = store["b"][t]
    if "D" in store:
        b = store["D"][t].T @ b
    return b / store["feat_sd"][t]


@dataclass
class Projection:
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    @property
    def significant(self):
        return (self.lower > 0) | (self.upper < 0)


def projection_draws(store, grid=None):
    """Image-space map of the coefficients for every retained draw.

    Each surviving partition contributes sum_r lambda_r c_r a_r(1) o ... o a_r(D),
    where c is the coefficient vector mapped back to the raw subject loadings
    (through D' when the factor model is on).  Output is in image units.
    """
    grid = grid or spatial_grid(store)
    survivors = store.fixed["survivors"].astype(int)
    scale = float(store.fixed["scale"][0])
    R = store["lambda"].shape[-1]
    n_dims = len(grid.block_dims)
    T = store.n_draws
    out = np.empty((T,) + grid.parent_dims)
    blocks = np.zeros((grid.block_count,) + grid.block_dims)
    for t in range(T):
        coef = _raw_coefficients(store, t).reshape(len(survivors), R)
        lam = store["lambda"][t]
        for i, s in enumerate(survivors):
            mats = [store[f"A{d}"][t, i] for d in range(n_dims)]
            blocks[s] = reconstruct_array(lam[i] * coef[i], mats) if n_dims > 1 else mats[0] @ (lam[i] * coef[i])
        out[t] = unpartition_array(blocks, grid) * scale
    return out


def projection(store, grid=None, level=0.95):
    """Posterior mean and equal-tailed credible band of the projection map."""
    draws = projection_draws(store, grid)
    lo, hi = pb.credible_interval(draws, level)
    return Projection(draws.mean(axis=0), lo, hi)


def fitted_features(store, t):
    """Regression features of the training subjects at draw t."""
    if "G" in store:
        return store["G"][t]
    if "D" in store or "L" not in store:
        raise ValueError("store lacks the latent draws needed for in-sample features")
    L = np.concatenate(list(store["L"][t]), axis=1)
    return (L - store["feat_mean"][t]) / store["feat_sd"][t]


def fitted_probabilities(store, Z=None):
    N = store.meta["n_subjects"]
    Zd = pb._design(Z, N)
    T = store.n_draws
    eta = np.stack([fitted_features(store, t) @ store["b"][t] for t in range(T)])
    if Zd.shape[1]:
        eta += store["gamma"] @ Zd.T
    return ndtr(eta).mean(axis=0)


def _new_loadings(store, blocks, t):
    """Conditional posterior mean of new subject loadings given the draw-t factors."""
    survivors = store.fixed["survivors"].astype(int)
    n_dims = blocks.ndim - 2
    lam = store["lambda"][t]
    tau = store["tau"][t]
    N = store.meta["n_subjects"]
    cols = []
    for i, s in enumerate(survivors):
        design = khatri_rao([store[f"A{d}"][t, i] for d in range(n_dims)]) * lam[i]
        xb = blocks[s].reshape(-1, blocks.shape[-1])
        prec = tau[i] * design.T @ design + N * np.eye(design.shape[1])
        cols.append(np.linalg.solve(prec, tau[i] * design.T @ xb).T)
    return np.hstack(cols)


def predict_new(store, X_new, Z_new=None):
    """Posterior predictive P(y = 1) for subjects not used in fitting."""
    x = np.array(as_array(X_new), dtype=np.float64)
    spatial = tuple(store.meta["spatial_dims"])
    if x.shape[:-1] != spatial:
        raise ShapeError(f"new images have dims {x.shape[:-1]}, model expects {spatial}")
    n = x.shape[-1]
    Zd = pb._design(Z_new, n)
    if Zd.shape[1] != store.meta["n_covariates"]:
        raise ShapeError("covariate count differs from the fitted model")
    cfg = store.meta["config"]
    x = (x - store.fixed["center"][..., None]) / float(store.fixed["scale"][0])
    grid = _grid(spatial, cfg["block_dims"], n, cfg["pad"])
    blocks = partition_array(x, grid)
    N_train = store.meta["n_subjects"]
    probs = np.zeros(n)
    T = store.n_draws
    for t in range(T):
        L = _new_loadings(store, blocks, t)
        Ls = (L - store["feat_mean"][t]) / store["feat_sd"][t]
        if "D" in store:
            st = fm.FactorState(np.zeros((n, store["D"].shape[1])), store["D"][t], float(store["tau_psi"][t, 0]))
            feats = fm.score_new(st, Ls, N_train)
        else:
            feats = Ls
        eta = feats @ store["b"][t]
        if Zd.shape[1]:
            eta = eta + Zd @ store["gamma"][t]
        probs += ndtr(eta)
    return probs / T


def coefficient_summary(store, level=0.95):
    """Rows of (index, posterior mean, lower, upper, inclusion probability)."""
    b = store["b"]
    lo, hi = pb.credible_interval(b, level)
    incl = store["delta"].mean(axis=0)
    return [
        {"index": k, "mean": float(b[:, k].mean()), "lower": float(lo[k]),
         "upper": float(hi[k]), "inclusion": float(incl[k])}
        for k in range(b.shape[1])
    ]


def stratified_folds(y, folds, rng):
    """Test-index arrays with each class spread evenly over the folds."""
    y = np.asarray(y)
    if folds < 2:
        raise ValueError("need at least two folds")
    if y.size // folds < 2:
        raise ValueError(f"{y.size} subjects cannot fill {folds} folds of size >= 2")
    assign = np.empty(y.size, dtype=int)
    start = 0
    for cls in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == cls))
        assign[idx] = (start + np.arange(idx.size)) % folds
        start += idx.size
    return [np.flatnonzero(assign == f) for f in range(folds)]


def _subjects(x, idx):
    return np.take(x, idx, axis=-1)


def fit_predict_fold(X, y, Z, train, test, cfg):
    """Fit on ``train`` subjects only and predict the ``test`` subjects."""
    x = as_array(X)
    y = np.asarray(y)
    Zd = None if Z is None else pb._design(Z, y.size)
    store = fit(_subjects(x, train), y[train], None if Zd is None else Zd[train], cfg)
    probs = predict_new(store, _subjects(x, test), None if Zd is None else Zd[test])
    return store, probs


def cross_validate(X, y, Z=None, cfg=None, folds=10, seed=0, return_folds=False):
    """Mean held-out accuracy over stratified folds."""
    y = pb.check_response(y)
    rng = np.random.default_rng(seed)
    scores = []
    for test in stratified_folds(y, folds, rng):
        train = np.setdiff1d(np.arange(y.size), test)
        _, probs = fit_predict_fold(X, y, Z, train, test, cfg)
        scores.append(pb.accuracy(y[test], probs))
    mean = float(np.mean(scores))
    return (mean, scores) if return_folds else mean


def grid_search(X, y, Z, cfg, block_options, ranks, folds=10, seed=0):
    """CV accuracy for every (block dims, rank) pair; rows sorted as given."""
    rows = []
    for blocks in block_options:
        for R in ranks:
            c = dataclasses.replace(cfg, block_dims=tuple(blocks), rank=R, cp=None)
            acc = cross_validate(X, y, Z, c, folds, seed)
            rows.append({"block_dims": tuple(blocks), "rank": R, "accuracy": acc})
    return rows
