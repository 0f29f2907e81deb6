"""Command-line front end: ``sparsevi <command> ...``.

Exit codes: 0 success (a non-converged solve is still a success and is
flagged in the manifest), 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__, ias, oracle, problems, uq, vias
from . import select as selection
from .model import GammaHyperprior, StopRule, problem_from_dict
from .outputs import read_json, write_csv, write_json

EXPERIMENTS = ("hierarchical", "fixed-sparse", "deconvolution", "lorenz63")
GENERATOR_PARAMS = {
    "hierarchical": {"d", "n", "alpha", "beta", "noise_frac"},
    "fixed-sparse": {"d", "n", "support", "noise_frac"},
    "deconvolution": {"d", "n", "kappa", "noise_frac", "signal"},
    "lorenz63": {"noise_var", "x0", "dt", "steps", "max_degree"},
}


class ConfigError(Exception):
    pass


def _load_config(path, required=(), allowed=None):
    if path is None:
        doc = {}
    else:
        try:
            doc = read_json(path)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except ValueError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}")
        if not isinstance(doc, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
    for key in required:
        if key not in doc:
            raise ConfigError(f"missing config key: {key!r}")
    if allowed is not None:
        extra = sorted(set(doc) - set(allowed))
        if extra:
            raise ConfigError(f"unknown config key: {extra[0]!r}")
    return doc


def _load_problem(path):
    try:
        doc = read_json(path)
    except FileNotFoundError:
        raise ConfigError(f"problem file not found: {path}")
    except ValueError as exc:
        raise ConfigError(f"problem file {path} is not valid JSON: {exc}")
    try:
        problem, _ = problem_from_dict(doc)
    except KeyError as exc:
        raise ConfigError(f"missing problem key: {exc.args[0]!r}")
    except ValueError as exc:
        raise ConfigError(f"invalid problem file {path}: {exc}")
    truth = doc.get("truth_u")
    return problem, (None if truth is None else np.asarray(truth, dtype=float)), doc


def _seed(args, cfg, default=0):
    if args.seed is not None:
        return int(args.seed)
    return int(cfg.get("seed", default))


def _stop_from(cfg, default: StopRule) -> StopRule:
    doc = default.to_dict()
    doc.update({k: cfg[k] for k in ("max_iter", "param_rtol", "objective_rtol", "patience") if k in cfg})
    return StopRule(**doc)


def _versions():
    return {"sparsevi": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


# -- commands ---------------------------------------------------------------

def cmd_generate(args, out: Path):
    cfg = _load_config(args.config, allowed=GENERATOR_PARAMS[args.experiment] | {"seed"})
    seed = _seed(args, cfg)
    params = {k: v for k, v in cfg.items() if k != "seed"}
    if args.experiment == "hierarchical":
        bundles = {"bundle": problems.gen_hierarchical(seed, **params)}
    elif args.experiment == "fixed-sparse":
        bundles = {"bundle": problems.gen_fixed_sparse(seed, **params)}
    elif args.experiment == "deconvolution":
        if "signal" in params:
            sig = params.pop("signal")
            for key in ("breakpoints", "levels"):
                if key not in sig:
                    raise ConfigError(f"missing config key: 'signal.{key}'")
            params["signal"] = problems.PiecewiseSignal(tuple(sig["breakpoints"]), tuple(sig["levels"]))
        bundles = {"bundle": problems.gen_deconvolution(seed=seed, **params)}
    else:
        if "x0" in params:
            params["x0"] = tuple(params["x0"])
        trio = problems.gen_lorenz_problems(seed, **params)
        bundles = {f"bundle_{c}": b for c, b in zip("xyz", trio)}
    outputs = []
    for name, bundle in bundles.items():
        outputs.append(write_json(out / f"{name}.json", bundle.to_dict()))
        truth_name = "truth.csv" if name == "bundle" else f"truth_{name[-1]}.csv"
        theta = bundle.truth_theta
        rows = [(i, bundle.truth_u[i], None if theta is None else theta[i]) for i in range(bundle.problem.d)]
        outputs.append(write_csv(out / truth_name, ["index", "truth_u", "truth_theta"], rows))
    first = next(iter(bundles.values()))
    return {"config": {"experiment": args.experiment, "params": cfg, "seed": seed}, "seed": seed,
            "outputs": outputs, "summary": {"n": first.problem.n, "d": first.problem.d}}


def _hyper(cfg, method):
    if "alpha" not in cfg:
        raise ConfigError("missing config key: 'alpha'")
    if "beta" not in cfg and "beta_tilde" not in cfg:
        raise ConfigError("missing config key: 'beta'")
    try:
        if "beta_tilde" in cfg:
            return GammaHyperprior.from_beta_tilde(cfg["alpha"], cfg["beta_tilde"])
        return GammaHyperprior(cfg["alpha"], cfg["beta"])
    except ValueError as exc:
        raise ConfigError(f"invalid hyperparameters: {exc}")


def _write_solution(out, problem, truth, method, res, prior, level=0.95):
    """Result JSON, reconstruction CSV and trace CSV of a finished solve."""
    outputs = [write_json(out / "result.json", res.to_dict())]
    note = None
    if method == "vias":
        est = res.state.m
        iv = uq.vias_intervals(res, level)
        std = np.sqrt(np.diagonal(res.state.C))
        trace = [(k, v) for k, v in res.elbo_trace]
        trace_header = ["iteration", "elbo"]
    else:
        est = res.point.u
        try:
            iv = uq.laplace_intervals(problem, prior, res.point, level)
            std = np.sqrt(np.diagonal(ias.laplace(problem, prior, res.point).u_cov))
        except np.linalg.LinAlgError as exc:
            iv, std, note = None, None, f"no Laplace intervals: {exc}"
        trace = [(k, total) for k, total, _, _ in res.energy_trace]
        trace_header = ["iteration", "energy"]
    rows = []
    for i in range(problem.d):
        rows.append((i, None if truth is None else truth[i], est[i],
                     None if std is None else std[i],
                     None if iv is None else iv.lo[i], None if iv is None else iv.hi[i]))
    outputs.append(write_csv(out / "reconstruction.csv", ["index", "truth", "estimate", "std", "lo95", "hi95"], rows))
    outputs.append(write_csv(out / "trace.csv", trace_header, trace))
    return outputs, note


def cmd_solve(args, out: Path):
    problem, truth, _ = _load_problem(args.problem)
    cfg = _load_config(args.hyper, allowed={"alpha", "beta", "beta_tilde", "max_iter", "param_rtol",
                                            "objective_rtol", "patience", "C0", "level"})
    prior = _hyper(cfg, args.method)
    level = float(cfg.get("level", 0.95))
    if args.method == "vias":
        stop = _stop_from(cfg, vias.DEFAULT_STOP)
        res = vias.solve(problem, prior, C0=cfg.get("C0"), stop=stop)
    else:
        stop = _stop_from(cfg, ias.DEFAULT_STOP)
        res = ias.solve(problem, prior, stop=stop)
    outputs, note = _write_solution(out, problem, truth, args.method, res, prior, level)
    summary = {"method": args.method, "iterations": res.iterations, "converged": res.converged,
               "reason": res.reason}
    if note:
        summary["note"] = note
    return {"config": {"method": args.method, "hyper": cfg}, "seed": None, "outputs": outputs,
            "summary": summary}


def cmd_select(args, out: Path):
    problem, truth, _ = _load_problem(args.problem)
    if args.grid is None:
        grid = selection.SelectionGrid()
        cfg = grid.to_dict()
    else:
        cfg = _load_config(args.grid, required=("alpha_values", "beta_values"),
                           allowed={"alpha_values", "beta_values", "iters_per_cell", "C0"})
        try:
            grid = selection.SelectionGrid.from_dict(cfg)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid grid: {exc}")
    C0 = cfg.get("C0")
    result = selection.grid_search(problem, grid, C0=C0, threads=args.threads)
    outputs = [write_csv(out / "grid.csv", ["alpha", "beta", "elbo", "converged"],
                         [(r["alpha"], r["beta"], r["elbo"], r["converged"]) for r in result.table]),
               write_json(out / "best.json", result.to_dict())]
    summary = {"best": {"alpha": result.best[0], "beta": result.best[1], "elbo": result.best[2]},
               "failed_cells": sum(r["error"] is not None for r in result.table)}
    if args.refit:
        prior = GammaHyperprior(result.best[0], result.best[1])
        res = vias.solve(problem, prior, C0=C0)
        refit_out, _ = _write_solution(out / "refit", problem, truth, "vias", res, prior)
        outputs += refit_out
        summary["refit"] = {"iterations": res.iterations, "converged": res.converged, "reason": res.reason}
    return {"config": {"grid": grid.to_dict(), "C0": C0, "refit": args.refit}, "seed": None,
            "outputs": outputs, "summary": summary}


def cmd_coverage(args, out: Path):
    cfg = _load_config(args.config, required=("experiment", "solver", "reps"),
                       allowed={"experiment", "solver", "reps", "level", "params", "alpha", "beta",
                                "beta_tilde", "seed", "max_iter"})
    if cfg["experiment"] not in ("hierarchical", "fixed-sparse"):
        raise ConfigError(f"coverage supports hierarchical and fixed-sparse, got {cfg['experiment']!r}")
    if cfg["solver"] not in ("vias", "ias_laplace"):
        raise ConfigError(f"unknown solver {cfg['solver']!r}")
    seed = _seed(args, cfg)
    params = cfg.get("params", {})
    gen = problems.gen_hierarchical if cfg["experiment"] == "hierarchical" else problems.gen_fixed_sparse
    try:
        bundle = gen(seed, **params)
    except TypeError as exc:
        raise ConfigError(f"invalid generator params: {exc}")
    prior = _hyper(cfg, cfg["solver"]) if "alpha" in cfg else None
    stop = None
    if "max_iter" in cfg:
        stop = StopRule(max_iter=int(cfg["max_iter"]), param_rtol=1e-8)
    report = uq.coverage_study(bundle, cfg["solver"], int(cfg["reps"]), float(cfg.get("level", 0.95)), seed,
                               prior, stop, threads=args.threads)
    outputs = [write_json(out / "coverage.json", report.to_dict()), report.write_csv(out / "per_rep.csv")]
    return {"config": dict(cfg, seed=seed), "seed": seed, "outputs": outputs, "summary": report.to_dict()}


def cmd_pca(args, out: Path):
    doc = _load_config(args.result, required=("C",))
    C = np.asarray(doc["C"], dtype=float)
    if args.k < 1 or args.k > C.shape[0]:
        raise ConfigError(f"k must lie in [1, {C.shape[0]}]")
    report = uq.covariance_pca(C, args.k)
    outputs = [report.write_csv(out / "pca.csv")]
    summary = {"fractions": report.fractions[: args.k].tolist()}
    return {"config": {"k": args.k}, "seed": None, "outputs": outputs, "summary": summary}


def cmd_landscape(args, out: Path):
    cfg = _load_config(args.config, allowed={"ata", "ya", "s", "b", "mesh", "interval"})
    params = {"ata": 1.0, "ya": 3.0, "s": -0.49, "b": 1.0, "mesh": 1e-7 if args.fine else 1e-5,
              "interval": [0.0, 1.0]}
    params.update(cfg)
    for key in ("ata", "ya", "s", "b", "mesh"):
        flag = getattr(args, key)
        if flag is not None:
            params[key] = flag
    report = oracle.landscape_scan(params["ata"], params["ya"], params["s"], params["b"],
                                   tuple(params["interval"]), params["mesh"])
    outputs = [write_csv(out / "landscape.csv", ["c", "value"], zip(report.grid, report.values)),
               write_json(out / "maxima.json", report.to_dict())]
    return {"config": params, "seed": None, "outputs": outputs,
            "summary": {"maxima": len(report.maxima), "global_max": list(report.global_max)}}


def cmd_lorenz(args, out: Path):
    cfg = _load_config(args.config, allowed={"noise_var", "x0", "alpha", "beta", "sweeps", "level", "seed",
                                             "threshold", "steps"})
    seed = _seed(args, cfg)
    params = {"noise_var": 0.3, "x0": list(problems.LORENZ_X0), "alpha": 0.005, "beta": 0.05,
              "sweeps": 5, "level": 0.95, "threshold": 0.1, "steps": 2000}
    params.update({k: v for k, v in cfg.items() if k != "seed"})
    if args.sweeps is not None:
        params["sweeps"] = args.sweeps
    bundles = problems.gen_lorenz_problems(seed, params["noise_var"], tuple(params["x0"]), steps=params["steps"])
    prior = GammaHyperprior(params["alpha"], params["beta"])
    labels = bundles[0].meta["labels"]
    ivs, rows, summary = [], [], {}
    for comp, bundle in zip("xyz", bundles):
        res = vias.solve(bundle.problem, prior, stop=StopRule(int(params["sweeps"]), 0.0))
        iv = uq.vias_intervals(res, params["level"])
        ivs.append(iv)
        m = res.state.m
        for j, lab in enumerate(labels):
            rows.append((comp, lab, bundle.truth_u[j], m[j], iv.lo[j], iv.hi[j]))
        err = np.linalg.norm(m - bundle.truth_u) / np.linalg.norm(bundle.truth_u)
        summary[comp] = {"relative_error": float(err), "iterations": res.iterations}
    band = uq.trajectory_band(ivs, tuple(params["x0"]), steps=params["steps"], threshold=params["threshold"])
    truth, _ = problems.lorenz63_trajectory(x0=tuple(params["x0"]), steps=params["steps"])
    outputs = [write_csv(out / "coefficients.csv", ["component", "term", "truth", "estimate", "lo", "hi"], rows),
               band.write_csv(out / "band.csv"),
               write_csv(out / "trajectory.csv", ["t", "x", "y", "z"],
                         [(band.times[j], *truth[j]) for j in range(len(band.times))])]
    summary["band_complete"] = band.complete
    summary["band_convention"] = band.convention
    return {"config": dict(params, seed=seed), "seed": seed, "outputs": outputs, "summary": summary}


COMMANDS = {"generate": cmd_generate, "solve": cmd_solve, "select": cmd_select, "coverage": cmd_coverage,
            "pca": cmd_pca, "landscape": cmd_landscape, "lorenz": cmd_lorenz}


def build_parser():
    p = argparse.ArgumentParser(prog="sparsevi", description="Sparse Bayesian inversion experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--threads", type=int, default=1)
        return sp

    g = common(sub.add_parser("generate", help="generate a benchmark problem"))
    g.add_argument("experiment", choices=EXPERIMENTS)
    g.add_argument("--config")

    s = common(sub.add_parser("solve", help="run IAS or VIAS on a problem file"))
    s.add_argument("method", choices=("ias", "vias"))
    s.add_argument("problem")
    s.add_argument("--hyper", required=True, help="JSON with alpha and beta (or beta_tilde)")

    se = common(sub.add_parser("select", help="ELBO grid search over (alpha, beta)"))
    se.add_argument("problem")
    se.add_argument("--grid")
    se.add_argument("--refit", action="store_true")

    c = common(sub.add_parser("coverage", help="credible-interval coverage study"))
    c.add_argument("--config", required=True)

    pc = common(sub.add_parser("pca", help="principal components of a VIAS covariance"))
    pc.add_argument("result")
    pc.add_argument("--k", type=int, default=5)

    la = common(sub.add_parser("landscape", help="scan the 1-D ELBO for local maxima"))
    la.add_argument("--config")
    la.add_argument("--ata", type=float)
    la.add_argument("--ya", type=float)
    la.add_argument("--s", type=float)
    la.add_argument("--b", type=float)
    la.add_argument("--mesh", type=float)
    la.add_argument("--fine", action="store_true", help="use mesh 1e-7")

    lo = common(sub.add_parser("lorenz", help="Lorenz-63 dictionary regression with trajectory band"))
    lo.add_argument("--config")
    lo.add_argument("--sweeps", type=int)

    r = sub.add_parser("rerun", help="re-run a command from its manifest")
    r.add_argument("manifest")
    r.add_argument("--out", help="replacement output directory")
    return p


def _normalize_out(argv):
    argv = list(argv)
    for i, a in enumerate(argv):
        if a.startswith("--out="):
            argv[i:i + 1] = ["--out", a.split("=", 1)[1]]
            break
    return argv


def _rerun(args):
    try:
        man = read_json(args.manifest)
        argv, cwd = list(man["argv"]), man["cwd"]
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"sparsevi: error: unreadable manifest: {exc}", file=sys.stderr)
        return 2
    if args.out is not None:
        argv[argv.index("--out") + 1] = os.path.abspath(args.out)
    prev = os.getcwd()
    os.chdir(cwd)
    try:
        return main(argv)
    finally:
        os.chdir(prev)


def main(argv=None) -> int:
    argv = _normalize_out(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "rerun":
        return _rerun(args)
    if args.threads < 1:
        print("sparsevi: error: --threads must be at least 1", file=sys.stderr)
        return 2
    out = Path(args.out)
    start = time.perf_counter()
    try:
        record = COMMANDS[args.command](args, out)
    except ConfigError as exc:
        print(f"sparsevi: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, ArithmeticError, np.linalg.LinAlgError, RuntimeError, OSError) as exc:
        print(f"sparsevi: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    manifest = {
        "command": args.command,
        "argv": argv,
        "cwd": os.getcwd(),
        "config": record["config"],
        "seed": record["seed"],
        "threads": args.threads,
        "versions": _versions(),
        "timings": {"wall_seconds": time.perf_counter() - start},
        "summary": record["summary"],
        "outputs": [str(p) for p in record["outputs"]],
    }
    write_json(out / "manifest.json", manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
