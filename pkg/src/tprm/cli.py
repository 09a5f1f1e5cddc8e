"""Command-line entry points: decompose, fit, predict and simulate.

Exit codes: 0 success, 1 numeric failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import datetime
import hashlib
import json
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import pipeline as pl
from . import probit as pb
from . import simulate as sm
from .cp import CPHyper, rmse
from .errors import NumericError
from .factor import FactorHyper
from .tensor import read_tensor, write_tensor

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ------------------------------------------------------------------ helpers


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_text(path, text):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_csv(path, header, rows):
    """RFC 4180 CSV (CRLF line ends, minimal quoting) with a header row."""
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    with os.fdopen(fd, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    os.replace(tmp, path)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (tuple, list)):
        return "x".join(str(x) for x in v)
    return v


def read_csv_matrix(path):
    """Numeric CSV with a header row; returns (header, array of rows)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty CSV file")
    header, body = rows[0], [r for r in rows[1:] if r]
    try:
        data = np.array([[float(v) for v in r] for r in body], dtype=np.float64)
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric entry ({exc})") from None
    if body and (data.ndim != 2 or data.shape[1] != len(header)):
        raise ValueError(f"{path}: rows do not match the {len(header)}-column header")
    return header, data.reshape(len(body), len(header))


def read_response(path):
    header, data = read_csv_matrix(path)
    if "y" in header:
        col = header.index("y")
    elif len(header) == 1:
        col = 0
    else:
        raise ValueError(f"{path}: expected a single column or a column named 'y'")
    return pb.check_response(data[:, col])


def _ints(text):
    try:
        vals = tuple(int(v) for v in str(text).replace("x", ",").split(",") if v.strip())
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise UsageError(f"expected positive integers, got {text!r}")
    return vals


def _threads():
    raw = os.environ.get("TPRM_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"TPRM_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"TPRM_THREADS must be a positive integer, got {raw!r}")
    return n


def _outdir(path):
    os.makedirs(path, exist_ok=True)
    return path


# ------------------------------------------------------------------ config

# section -> key -> (PipelineConfig path, parser)
CONFIG_SCHEMA = {
    "model": {
        "block_dims": ("block_dims", _ints),
        "rank": ("rank", int),
        "n_factors": ("n_factors", int),
        "factor_model": ("factor_model", "bool"),
        "screening": ("screening", "bool"),
        "screen_tol": ("screen_tol", float),
        "center": ("center", "bool"),
        "standardize": ("standardize", "bool"),
        "pad": ("pad", "bool"),
    },
    "sampler": {
        "iters": ("iters", int),
        "burn_in": ("burn_in", int),
        "thinning": ("thinning", int),
        "seed": ("seed", int),
        "store_latent": ("store_latent", "bool"),
        "warmup": ("warmup", int),
    },
    "cp": {"nu0": ("cp.nu0", float), "nu1": ("cp.nu1", float), "kappa": ("cp.kappa", float)},
    "factor": {"beta0": ("factor.beta0", float), "beta1": ("factor.beta1", float)},
    "select": {
        k: (f"select.{k}", float)
        for k in ("sigma2", "eps", "alpha0", "alpha1", "gamma_star", "nu0", "nu1")
    },
}


def load_config(path, seed=None):
    """Read an INI config (sections as in CONFIG_SCHEMA) into a PipelineConfig."""
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise ValueError(f"{path}: {exc}") from None
    flat, nested = {}, {"cp": {}, "factor": {}, "select": {}}
    for section in cp.sections():
        if section not in CONFIG_SCHEMA:
            raise ValueError(f"{path}: unknown section [{section}]")
        for key, raw in cp[section].items():
            if key not in CONFIG_SCHEMA[section]:
                raise ValueError(f"{path}: unknown key {key!r} in [{section}]")
            target, conv = CONFIG_SCHEMA[section][key]
            try:
                val = cp[section].getboolean(key) if conv == "bool" else conv(raw)
            except (ValueError, UsageError) as exc:
                raise ValueError(f"{path}: bad value for {section}.{key}: {exc}") from None
            if "." in target:
                grp, name = target.split(".")
                nested[grp][name] = val
            else:
                flat[target] = val
    if "block_dims" not in flat:
        raise ValueError(f"{path}: [model] block_dims is required")
    if seed is not None:
        flat["seed"] = seed
    rank = flat.get("rank", 2)
    return pl.PipelineConfig(
        **flat,
        cp=CPHyper(rank, **nested["cp"]),
        factor=FactorHyper(**nested["factor"]),
        select=pb.SelectHyper(**nested["select"]),
    )


class RunManifest:
    """Provenance record of one command run; written atomically at the end."""

    def __init__(self, command, config=None, seed=None):
        self.data = {
            "command": command,
            "config": config,
            "seed": seed,
            "started": _now(),
            "finished": None,
            "inputs": {},
            "outputs": {},
        }

    def add_input(self, role, path):
        self.data["inputs"][role] = {"path": os.path.abspath(path), "sha256": sha256_file(path)}

    def add_output(self, role, path):
        self.data["outputs"][role] = os.path.abspath(path)

    def write(self, path):
        self.data["finished"] = _now()
        atomic_write_text(path, json.dumps(self.data, indent=2, sort_keys=True) + "\n")

    @staticmethod
    def load(path):
        with open(path) as fh:
            return json.load(fh)


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


# ------------------------------------------------------------------ commands


def cmd_decompose(args):
    x = read_tensor(args.input).array
    blocks = _ints(args.blocks) if args.blocks else x.shape
    out = _outdir(args.out)
    xhat, factors = sm.decompose_blocks(
        x, args.rank, blocks, args.method, args.iters, args.burn_in, seed=args.seed,
        return_factors=True,
    )
    write_tensor(os.path.join(out, "reconstruction.tprm"), xhat)
    for s, f in enumerate(factors):
        write_tensor(os.path.join(out, f"block{s}_weights.tprm"), f.weights)
        for d, m in enumerate(f.factors):
            write_tensor(os.path.join(out, f"block{s}_mode{d}.tprm"), m)
    err = rmse(x, xhat)
    data_rms = float(np.sqrt(np.mean(x * x)))
    write_csv(
        os.path.join(out, "rmse.csv"),
        ["method", "blocks", "S", "rank", "rmse", "data_rms"],
        [[args.method, tuple(blocks), len(factors), args.rank, err, data_rms]],
    )
    print(f"{args.method} R={args.rank} S={len(factors)} rmse={err:.6g}")
    return EXIT_OK


def _fit_inputs(args):
    """Resolve fit inputs from flags or from a previous run manifest."""
    if args.manifest:
        m = RunManifest.load(args.manifest)
        if m.get("command") != "fit":
            raise ValueError(f"{args.manifest}: not a fit manifest")
        for role, rec in m["inputs"].items():
            if sha256_file(rec["path"]) != rec["sha256"]:
                raise ValueError(f"input {rec['path']} changed since the recorded run")
        cfg = pl.PipelineConfig.from_dict(m["config"])
        paths = {k: v["path"] for k, v in m["inputs"].items()}
        return paths.get("tensor"), paths.get("response"), paths.get("covariates"), cfg, paths.get("config")
    if not (args.tensor and args.response and args.config):
        raise UsageError("fit needs --tensor, --response and --config (or --manifest)")
    cfg = load_config(args.config, args.seed)
    return args.tensor, args.response, args.covariates, cfg, args.config


def cmd_fit(args):
    tensor, response, covariates, cfg, config_path = _fit_inputs(args)
    out = _outdir(args.out)
    man = RunManifest("fit", cfg.to_dict(), cfg.seed)
    man.add_input("tensor", tensor)
    man.add_input("response", response)
    if config_path:
        man.add_input("config", config_path)
    if covariates:
        man.add_input("covariates", covariates)

    x = read_tensor(tensor).array
    y = read_response(response)
    Z = read_csv_matrix(covariates)[1] if covariates else None
    if x.ndim < 2 or x.shape[-1] != y.size:
        raise ValueError(
            f"dimension mismatch: response has {y.size} subjects, tensor subject mode has "
            f"{x.shape[-1] if x.ndim else 0}"
        )
    store = pl.fit(x, y, Z, cfg)

    paths = {
        "chain": os.path.join(out, "chain"),
        "summary": os.path.join(out, "summary.csv"),
        "projection": os.path.join(out, "projection.tprm"),
        "lower": os.path.join(out, "projection_lower.tprm"),
        "upper": os.path.join(out, "projection_upper.tprm"),
        "significance": os.path.join(out, "significance.tprm"),
        "fitted": os.path.join(out, "fitted.csv"),
    }
    store.save(paths["chain"])
    rows = pl.coefficient_summary(store)
    write_csv(paths["summary"], ["index", "mean", "lower", "upper", "inclusion"],
              [[r["index"], r["mean"], r["lower"], r["upper"], r["inclusion"]] for r in rows])
    proj = pl.projection(store)
    write_tensor(paths["projection"], proj.mean)
    write_tensor(paths["lower"], proj.lower)
    write_tensor(paths["upper"], proj.upper)
    write_tensor(paths["significance"], proj.significant.astype(np.float64))
    if cfg.store_latent:
        p = pl.fitted_probabilities(store, Z)
        write_csv(paths["fitted"], ["subject", "y", "probability", "label"],
                  [[i, int(y[i]), float(p[i]), int(p[i] > 0.5)] for i in range(y.size)])
        print(f"in-sample accuracy {pb.accuracy(y, p):.4f}")
    else:
        del paths["fitted"]
    for role, path in paths.items():
        man.add_output(role, path)
    man.write(os.path.join(out, "manifest.json"))
    print(f"kept {store.n_draws} draws; outputs in {out}")
    return EXIT_OK


def cmd_predict(args):
    store = pl.ChainStore.load(os.path.join(args.model, "chain") if os.path.isdir(
        os.path.join(args.model, "chain")) else args.model)
    x = read_tensor(args.tensor).array
    Z = read_csv_matrix(args.covariates)[1] if args.covariates else None
    p = pl.predict_new(store, x, Z)
    write_csv(args.out, ["subject", "probability", "label"],
              [[i, float(v), int(v > 0.5)] for i, v in enumerate(p)])
    return EXIT_OK


def _sim3d_job(job):
    seed, settings = job
    return sm.run_sim3d_replication(seed, settings)


def cmd_simulate(args):
    out = _outdir(args.out)
    man = RunManifest("simulate", {k: v for k, v in vars(args).items() if k != "func"}, args.seed)
    if args.experiment == "decomp":
        x = sm.multiscale_tensor(seed=args.seed)
        if args.emit_data:
            write_tensor(os.path.join(out, "tensor.tprm"), x)
        rows = sm.run_decomp(seed=args.seed, iters=args.iters or 600,
                             burn_in=args.burn_in or 300, x=x)
        write_csv(os.path.join(out, "metrics.csv"), ["method", "blocks", "S", "R", "rmse"],
                  [[r["method"], r["blocks"], r["S"], r["R"], r["rmse"]] for r in rows])
        man.add_output("metrics", os.path.join(out, "metrics.csv"))
    elif args.experiment == "phantom2d":
        metric_rows = []
        for rep in range(args.replications):
            data = sm.gen_phantom_2d(args.n or 200, args.noise_sd, args.seed + rep)
            if args.emit_data and rep == 0:
                _emit(out, data)
            res = sm.run_phantom2d(seed=args.seed + rep, R=args.rank or 8,
                                   iters=args.iters or 5000, burn_in=args.burn_in or 3000,
                                   data=data)
            for name, (proj, prec, rec) in res.items():
                metric_rows.append([rep, name, prec, rec, int(proj.significant.sum())])
                if rep == 0:
                    write_tensor(os.path.join(out, f"projection_{name}.tprm"), proj.mean)
                    write_tensor(os.path.join(out, f"significance_{name}.tprm"),
                                 proj.significant.astype(np.float64))
        write_csv(os.path.join(out, "metrics.csv"),
                  ["run", "method", "precision", "recall", "n_significant"], metric_rows)
        man.add_output("metrics", os.path.join(out, "metrics.csv"))
    else:
        kw = {"c0": args.c0}
        if args.n:
            kw["n"] = args.n
        if args.iters:
            kw["pmtd_iters"] = args.iters
            kw["pmtd_burn_in"] = args.burn_in if args.burn_in is not None else args.iters // 2
        if args.rank:
            kw["pmtd_rank"] = args.rank
        settings = sm.settings_with(**kw)
        seeds = [int(s) for s in np.random.SeedSequence(args.seed).generate_state(args.replications)]
        if args.emit_data:
            _emit(out, sm.gen_sim_3d(settings.n, settings.c0, seeds[0]))
        jobs = [(s, settings) for s in seeds]
        workers = min(_threads(), len(jobs))
        if workers > 1:
            with ProcessPoolExecutor(workers) as ex:
                results = list(ex.map(_sim3d_job, jobs))
        else:
            results = [_sim3d_job(j) for j in jobs]
        rows = [[run, m, settings.c0, a] for run, acc in enumerate(results) for m, a in acc.items()]
        write_csv(os.path.join(out, "metrics.csv"), ["run", "method", "c0", "accuracy"], rows)
        table = []
        for m in ("fpca", "tals", "pmtd"):
            a = np.array([acc[m] for acc in results])
            wins = "" if m == "pmtd" else float(np.mean([acc["pmtd"] > acc[m] for acc in results]))
            table.append([m, float(a.mean()), float(a.std()), wins])
        write_csv(os.path.join(out, "comparison.csv"),
                  ["method", "mean_accuracy", "sd_accuracy", "pmtd_win_rate"], table)
        man.add_output("metrics", os.path.join(out, "metrics.csv"))
        man.add_output("comparison", os.path.join(out, "comparison.csv"))
    man.write(os.path.join(out, "manifest.json"))
    return EXIT_OK


def _emit(out, data):
    write_tensor(os.path.join(out, "X.tprm"), data.X)
    write_tensor(os.path.join(out, "mask.tprm"), data.mask.astype(np.float64))
    write_csv(os.path.join(out, "y.csv"), ["y"], [[int(v)] for v in data.y])


# ------------------------------------------------------------------ parser


def build_parser():
    p = _Parser(prog="tprm", description="Tensor partition regression models")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    d = sub.add_parser("decompose", help="blockwise CP decomposition of one tensor")
    d.add_argument("--input", required=True)
    d.add_argument("--rank", type=int, required=True)
    d.add_argument("--blocks", help="block dims, e.g. 4,4,4 (default: whole tensor)")
    d.add_argument("--method", choices=("gibbs", "als"), default="gibbs")
    d.add_argument("--iters", type=int, default=1000)
    d.add_argument("--burn-in", type=int, default=500)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_decompose)

    f = sub.add_parser("fit", help="run the full sampler")
    f.add_argument("--tensor")
    f.add_argument("--response")
    f.add_argument("--covariates")
    f.add_argument("--config")
    f.add_argument("--manifest", help="rerun with the inputs and config of a previous fit")
    f.add_argument("--seed", type=int)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    r = sub.add_parser("predict", help="posterior predictive probabilities for new subjects")
    r.add_argument("--model", required=True)
    r.add_argument("--tensor", required=True)
    r.add_argument("--covariates")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_predict)

    s = sub.add_parser("simulate", help="run a synthetic experiment")
    s.add_argument("--experiment", choices=("decomp", "phantom2d", "sim3d"), required=True)
    s.add_argument("--replications", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--c0", type=float, default=65.0)
    s.add_argument("--n", type=int)
    s.add_argument("--noise-sd", type=float, default=5.0)
    s.add_argument("--rank", type=int)
    s.add_argument("--iters", type=int)
    s.add_argument("--burn-in", type=int)
    s.add_argument("--emit-data", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "replications", 1) < 1:
            raise UsageError("--replications must be at least 1")
        _threads()
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
