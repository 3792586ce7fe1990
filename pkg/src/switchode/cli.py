"""Command-line front end: simulate, denoise, features, fit, select, eval.

Every stochastic command requires ``--seed``. Exit codes: 0 success,
2 usage error, 3 data error, 4 numerical failure.
"""
import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import denoise as dn
from . import io
from . import simulate as sim
from .emfit.fit import FitConfig, default_lambda_grid, fit, fit_grouped, lambda_path_fit
from .emfit.params import ModelParams
from .errors import DataError, NumericalError, SwitchODEError
from .evaluation import match_states, param_distance, roc_auc
from .select import SelectionGrid, bic, grid_search

log = logging.getLogger("switchode")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
THREADS_ENV = "SWITCHODE_THREADS"


class UsageError(Exception):
    pass


def _int_list(text):
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def parse_lambda_grid(text, seed=0):
    """``default``, ``default:SIZE`` or comma-separated values; returned descending."""
    if text.startswith("default"):
        size = int(text.split(":", 1)[1]) if ":" in text else 100
        return default_lambda_grid(size=size, seed=seed)
    try:
        vals = np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise UsageError(f"bad --lambda-grid {text!r}")
    if np.any(vals <= 0):
        raise UsageError("--lambda-grid values must be positive")
    return np.sort(vals)[::-1]


def thread_count(flag):
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}")
    return max(1, flag or 1)


def _need_seed(args):
    if args.seed is None:
        raise UsageError(f"{args.command} is stochastic and needs --seed")


def _load_dgp(name):
    if name in sim.DGPS:
        return sim.DGPS[name]()
    path = Path(name)
    if path.suffix != ".json" or not path.exists():
        raise UsageError(f"--dgp must be one of {sorted(sim.DGPS)} or a model JSON file, got {name!r}")
    rec = io.read_json(path)
    try:
        theta = io.array_from_record(rec["theta"])
        q = io.array_from_record(rec["q"])
        x0 = np.asarray(rec["x0"], dtype=float)
    except KeyError as exc:
        raise DataError(f"model file {path} lacks {exc}") from exc
    return sim.AdditiveODEModel(theta, sim.BasisFamily(theta.shape[3])), q, x0


def cmd_simulate(args):
    _need_seed(args)
    model, q, x0 = _load_dgp(args.dgp)
    seq = np.random.SeedSequence(args.seed)
    path_seed, noise_seed = seq.spawn(2)
    traj = sim.integrate(model, q, x0, args.t, seed=path_seed)
    obs = sim.observe(traj, args.n, args.sigma, seed=noise_seed)
    out = Path(args.out_dir)
    clean = sim.sample_trajectory(traj, obs.times)
    names = [f"x{j}" for j in range(model.p)]
    io.write_series(out / "observations.csv", obs.times, obs.y, names)
    io.write_series(out / "trajectory.csv", obs.times, clean, names)
    # noiseless runs keep a valid (positive) variance; the exact level is in "sigma"
    truth = ModelParams(q, model.theta, max(args.sigma**2, np.finfo(float).tiny))
    io.write_params(out / "truth.json", truth,
                    {"x0": x0.tolist(), "dgp": args.dgp, "T": args.t, "sigma": args.sigma})
    io.write_path(out / "latent_path.json", traj.z_path)
    return EXIT_OK


def _sigma_mode(args):
    if args.sigma is None or args.sigma == "estimate":
        return "estimate"
    try:
        val = float(args.sigma)
    except ValueError:
        raise UsageError(f"--sigma must be a number or 'estimate', got {args.sigma!r}")
    if val < 0:
        raise UsageError("--sigma must be non-negative")
    return val


def cmd_denoise(args):
    times, y, names, _ = io.read_series(args.obs)
    cfg = dn.DenoiseConfig(delta=args.delta, sigma=_sigma_mode(args),
                           highdim_p=y.shape[1] if args.highdim else None)
    xhat, sigmas = dn.denoise_observations(y, cfg)
    out = Path(args.out_dir)
    io.write_series(out / "denoised.csv", times, xhat, names)
    io.write_table(out / "noise_sigma.csv", ["node", "sigma"], zip(names, sigmas.tolist()))
    return EXIT_OK


def cmd_features(args):
    if args.m is None:
        raise UsageError("features needs --m")
    times, xhat, _, _ = io.read_series(args.xhat)
    h = io.sampling_period(times)
    feats = dn.compute_psi_features(xhat, sim.BasisFamily(args.m), h)
    io.write_features(Path(args.out_dir) / "features.json", feats.psi, h)
    return EXIT_OK


def _fit_config(args, lam):
    return FitConfig(lam=lam, trunc_r=args.trunc_r)


def _load_member(obs_path, feat_path, grouped):
    times, y, _, extras = io.read_series(obs_path, extra=("group",) if grouped else ())
    psi, h = io.read_features(feat_path)
    if psi.shape[0] != y.shape[0] - 1 or psi.shape[1] != y.shape[1]:
        raise DataError(f"{feat_path} shape {psi.shape} does not match {obs_path} ({y.shape[0]} rows, {y.shape[1]} nodes)")
    label = None
    if grouped:
        if "group" not in extras:
            raise DataError(f"{obs_path} needs a 'group' column for --grouped")
        labels = set(extras["group"])
        if len(labels) != 1:
            raise DataError(f"{obs_path} mixes groups {sorted(labels)}; use one file per recording")
        label = labels.pop()
    return times, y, psi, h, label


def _write_fit(out, res, times, prefix=""):
    io.write_params(out / f"{prefix}params.json", res.params,
                    {"lambda": res.lam, "converged": res.converged, "iterations": res.iterations,
                     "bic": bic(res)})
    io.write_table(out / f"{prefix}trace.csv", ["iteration", "objective"], enumerate(res.loglik_trace))
    w = res.posterior.w
    io.write_series(out / f"{prefix}posterior.csv", times[1:], w, [f"state{l}" for l in range(w.shape[1])])


def cmd_fit(args):
    _need_seed(args)
    if args.k is None:
        raise UsageError("fit needs --k")
    if (args.lambda_ is None) == (args.lambda_grid is None):
        raise UsageError("give exactly one of --lambda and --lambda-grid")
    k = args.k[0] if len(args.k) == 1 else None
    if k is None:
        raise UsageError("fit takes a single --k")
    m = args.m[0] if args.m else None
    out = Path(args.out_dir)
    if args.grouped:
        if args.lambda_ is None:
            raise UsageError("--grouped supports a single --lambda")
        if len(args.obs) != len(args.features):
            raise UsageError("--obs and --features need the same number of files")
        loaded = [_load_member(o, f, True) for o, f in zip(args.obs, args.features)]
        members = [(y, dn.PsiFeatures(psi, h), label) for _, y, psi, h, label in loaded]
        res = fit_grouped(members, k=k, m=m, lam=args.lambda_, config=_fit_config(args, args.lambda_),
                          seed=args.seed)
        rec = {
            "theta": io.array_record(res.theta), "sigma2": res.sigma2, "lambda": res.lam,
            "groups": {str(g): io.array_record(res.q[g]) for g in res.groups},
            "converged": res.converged, "iterations": res.iterations, "bic": bic(res),
        }
        io.write_json(out / "params.json", rec)
        io.write_table(out / "trace.csv", ["iteration", "objective"], enumerate(res.loglik_trace))
        rows = []
        for (times, _, _, _, label), post in zip(loaded, res.posteriors):
            rows.extend([t, label, *wn] for t, wn in zip(times[1:], post.w))
        io.write_table(out / "posterior.csv", ["time", "group", *(f"state{l}" for l in range(k))], rows)
        return EXIT_OK
    if len(args.obs) != 1 or len(args.features) != 1:
        raise UsageError("pass one --obs and one --features file (or use --grouped)")
    times, y, psi, h, _ = _load_member(args.obs[0], args.features[0], False)
    feats = dn.PsiFeatures(psi, h)
    if args.lambda_ is not None:
        res = fit(y, feats, k=k, m=m, lam=args.lambda_, config=_fit_config(args, args.lambda_), seed=args.seed)
        _write_fit(out, res, times)
        return EXIT_OK
    grid = parse_lambda_grid(args.lambda_grid, seed=args.seed)
    path = lambda_path_fit(y, feats, k, m or psi.shape[2], grid, config=_fit_config(args, float(grid[0])),
                           seed=args.seed)
    io.write_json(out / "path_params.json", {"fits": [
        {**r.params.to_dict(), "lambda": r.lam, "converged": r.converged, "bic": bic(r)} for r in path
    ]})
    io.write_table(out / "path_summary.csv", ["lambda", "objective", "bic", "converged", "iterations"],
                   ([r.lam, r.objective, bic(r), r.converged, r.iterations] for r in path))
    return EXIT_OK


def cmd_select(args):
    _need_seed(args)
    if len(args.obs) != 1:
        raise UsageError("select takes one --obs file")
    if args.xhat is None:
        raise UsageError("select needs --xhat (denoised trajectory) to build features for each m")
    times, y, _, _ = io.read_series(args.obs[0])
    xtimes, xhat, _, _ = io.read_series(args.xhat)
    if xhat.shape != y.shape:
        raise DataError("denoised trajectory and observations differ in shape")
    h = io.sampling_period(times)
    grid = SelectionGrid(
        k_candidates=args.k or SelectionGrid.k_candidates,
        m_candidates=args.m or SelectionGrid.m_candidates,
        lambda_grid=parse_lambda_grid(args.lambda_grid or "default", seed=args.seed),
    )

    def factory(m):
        return dn.compute_psi_features(xhat, sim.BasisFamily(m), h)

    cfg = FitConfig(lam=float(grid.lambda_grid[0]), trunc_r=args.trunc_r)
    report = grid_search(y, factory, grid, cfg, seed=args.seed, h=h, workers=thread_count(args.threads))
    out = Path(args.out_dir)
    io.write_table(out / "selection.csv", ["k", "m", "lambda", "bic", "converged", "iterations", "error"],
                   ([c.k, c.m, c.lam, c.bic, c.converged, c.iterations, c.error] for c in report.cells))
    k, m, lam = report.chosen
    io.write_json(out / "selection.json", {
        "chosen": {"k": k, "m": m, "lambda": lam}, "bic": bic(report.fit),
        "stage1": {str(kk): v for kk, v in report.stage1.items()}, "cells": len(report.cells),
    })
    _write_fit(out, report.fit, times)
    return EXIT_OK


def _load_fits(path):
    rec = io.read_json(path)
    entries = rec["fits"] if "fits" in rec else [rec]
    fits = []
    for e in entries:
        params = ModelParams.from_dict(e)
        fits.append((params, float(e.get("lambda", np.nan))))
    return fits


class _Entry:
    def __init__(self, params, lam):
        self.params, self.lam = params, lam


def cmd_eval(args):
    if args.fit is None or args.truth is None:
        raise UsageError("eval needs --fit and --truth")
    truth = io.read_params(args.truth)
    fits = _load_fits(args.fit)
    out = Path(args.out_dir)
    rows = []
    for params, lam in fits:
        match = match_states(params, truth)
        d = param_distance(params, truth, match.xi1)
        rows.append([lam, match.consistent, *d])
    io.write_table(out / "distances.csv", ["lambda", "consistent", "d_theta", "d_q", "d_sigma", "total"], rows)
    roc = roc_auc([_Entry(p, lam) for p, lam in fits], truth, epsilon_t=args.epsilon_t)
    if roc.dropped:
        log.warning("dropped %d inconsistent entries from the ROC", roc.dropped)
    k = truth.k
    io.write_table(out / "roc.csv", ["lambda", *(f"tpr{l}" for l in range(k)), *(f"fpr{l}" for l in range(k))],
                   ([pt.lam, *pt.tpr.tolist(), *pt.fpr.tolist()] for pt in roc.points))
    io.write_table(out / "auc.csv", ["run", *(f"state{l}" for l in range(k)), "dropped"],
                   [[Path(args.fit).stem, *roc.auc.tolist(), roc.dropped]])
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate, "denoise": cmd_denoise, "features": cmd_features,
    "fit": cmd_fit, "select": cmd_select, "eval": cmd_eval,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="switchode", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--dgp", default="dgp1", help="dgp1, dgp2 or a model JSON file")
    parser.add_argument("--n", type=int, default=200, help="number of sampling intervals N")
    parser.add_argument("--t", type=float, default=sim.DGP_T, help="time horizon T")
    parser.add_argument("--sigma", default=None,
                        help="simulate: noise level (default 0.01); denoise: known level or 'estimate'")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--delta", type=float, default=0.1, help="wavelet threshold tail probability")
    parser.add_argument("--highdim", action="store_true",
                        help="denoise: add 3 log p to the threshold's tail term")
    parser.add_argument("--k", type=_int_list, default=None, help="states (comma list for select)")
    parser.add_argument("--m", type=_int_list, default=None, help="basis size (comma list for select)")
    parser.add_argument("--lambda", dest="lambda_", type=float, default=None)
    parser.add_argument("--lambda-grid", default=None, help="'default', 'default:SIZE' or comma list")
    parser.add_argument("--trunc-r", type=int, default=None, help="truncated smoothing window r")
    parser.add_argument("--epsilon-t", type=float, default=1e-6, help="edge threshold on block norms")
    parser.add_argument("--grouped", action="store_true", help="shared drift, one generator per group")
    parser.add_argument("--out-dir", default=".")
    parser.add_argument("--threads", type=int, default=1, help=f"worker processes (overridden by {THREADS_ENV})")
    parser.add_argument("--obs", nargs="+", default=None, help="observations CSV file(s)")
    parser.add_argument("--features", nargs="+", default=None, help="features JSON file(s)")
    parser.add_argument("--xhat", default=None, help="denoised trajectory CSV")
    parser.add_argument("--fit", default=None, help="params.json or path_params.json")
    parser.add_argument("--truth", default=None, help="truth.json")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _check_inputs(args):
    need = {"denoise": ["obs"], "fit": ["obs", "features"], "select": ["obs"]}.get(args.command, [])
    for name in need:
        if getattr(args, name) is None:
            raise UsageError(f"{args.command} needs --{name}")
    if args.command == "denoise":
        args.obs = args.obs[0]
    if args.command == "simulate":
        try:
            args.sigma = sim.DGP_SIGMA if args.sigma is None else float(args.sigma)
        except ValueError:
            raise UsageError("--sigma must be a number for simulate")
        if args.sigma < 0 or args.n < 2 or args.t <= 0:
            raise UsageError("need --sigma >= 0, --n >= 2 and --t > 0")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _check_inputs(args)
        if args.command == "features":
            args.m = args.m[0] if args.m else None
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"switchode: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"switchode: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, SwitchODEError, ValueError, OSError) as exc:
        print(f"switchode: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
