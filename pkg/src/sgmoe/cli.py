"""Command-line front end: ``sgmoe <subcommand> ...``.

Every run writes ``run.json`` (the resolved configuration and the files it
produced) into ``--out-dir``.  Exit codes: 0 success, 2 usage, 3 I/O, 4 schema
or validation.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .diagnostics import component_errors, voronoi_assign
from .experiments import RateConfig, SelectionConfig, run_rate_experiment, run_selection_experiment
from .init import init_from_clustering, init_perturbed_truth
from .io import (
    SchemaError,
    load_dataset,
    load_theta,
    read_json,
    save_dataset,
    save_theta,
    theta_from_dict,
    theta_to_dict,
    write_csv_rows,
    write_json,
)
from .mixing import MergeChain, MixingMeasure, build_chain, from_theta, pairwise_dissimilarities
from .mm import FitOptions, fit_gradient_baseline, fit_mm
from .model import InvalidInputError, Theta, reference_truth, sample_dataset
from .selection import CRITERIA, criterion_scores, dsc_scores, sweep_fit

log = logging.getLogger("sgmoe")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_SCHEMA = 0, 2, 3, 4


class UsageError(Exception):
    pass


class Run:
    """Output directory plus the manifest that describes it."""

    def __init__(self, args: argparse.Namespace, argv: Optional[List[str]] = None):
        self.out_dir = Path(args.out_dir)
        self.manifest = {
            "command": args.command,
            "version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "argv": list(sys.argv[1:] if argv is None else argv),
            "config": {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k != "func"},
            "outputs": [],
        }

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def wrote(self, path: Path) -> None:
        self.manifest["outputs"].append(str(path))

    def json(self, name: str, obj) -> Path:
        p = self.path(name)
        write_json(p, obj)
        self.wrote(p)
        return p

    def csv(self, name: str, rows, fieldnames=None) -> Path:
        p = self.path(name)
        write_csv_rows(p, rows, fieldnames)
        self.wrote(p)
        return p

    def finish(self, **extra) -> None:
        self.manifest.setdefault("status", "ok")
        self.manifest.update(extra)
        write_json(self.path("run.json"), self.manifest)


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


# -- shared loaders ----------------------------------------------------------


def _load_truth(path: Optional[str]) -> Theta:
    return reference_truth() if path is None else load_theta(path)


def _load_measure(path: str) -> MixingMeasure:
    """Accepts either a mixing-measure JSON or a Theta JSON."""
    d = read_json(path)
    try:
        if "atoms" in d:
            return MixingMeasure.from_dict(d)
        return from_theta(theta_from_dict(d))
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: not a mixing-measure or model JSON ({exc})") from exc


def _fit_options(args) -> FitOptions:
    return FitOptions(tol=args.tol, max_iters=args.max_iters, ridge=args.ridge,
                      record_thetas=getattr(args, "record_thetas", False))


def _data(args, M: Optional[int] = None):
    data, mapping = load_dataset(args.data, M=M, standardize=getattr(args, "standardize", False))
    return data, mapping


# -- subcommands -------------------------------------------------------------


def cmd_simulate(args, run: Run) -> None:
    if args.N < 0:
        raise UsageError("-N must be nonnegative")
    truth = _load_truth(args.truth)
    data = sample_dataset(truth, args.N, seed=args.seed)
    out = Path(args.out) if args.out else run.path("data.csv")
    save_dataset(out, data)
    run.wrote(out)
    run.finish(spec=truth.spec.to_dict(), rows=data.N)


def cmd_fit(args, run: Run) -> None:
    if args.K is None and args.init != "file":
        raise UsageError(f"--init {args.init} needs --K")
    data, mapping = _data(args, args.M)
    M = args.M or (len(mapping) if mapping else int(data.y.max()))
    if args.init == "file":
        if not args.init_file:
            raise UsageError("--init file needs --init-file")
        theta0 = load_theta(args.init_file)
    elif args.init == "perturbed-truth":
        truth = _load_truth(args.truth)
        if args.K < truth.spec.K:
            raise UsageError("--K must be at least the truth's expert count")
        theta0 = init_perturbed_truth(truth, noise=args.noise, extra_experts=args.K - truth.spec.K, seed=args.seed)
    else:
        theta0 = init_from_clustering(data, args.K, seed=args.seed, M=M, D=args.D)
    if args.K is not None and theta0.spec.K != args.K:
        raise SchemaError(f"initial model has K={theta0.spec.K}, expected {args.K}")
    if theta0.spec.M != M:
        raise SchemaError(f"initial model has M={theta0.spec.M} but the data imply M={M}")
    data.check(theta0.spec)
    theta, trace = fit_mm(theta0, data, _fit_options(args))
    save = run.path("model.json")
    save_theta(save, theta)
    run.wrote(save)
    run.json("trace.json", trace.to_dict())
    run.json("measure.json", from_theta(theta).to_dict())
    if trace.theta_path is not None:
        run.json("theta_path.json", [theta_to_dict(t) for t in trace.theta_path])
    run.finish(label_mapping=mapping, spec=theta.spec.to_dict(), converged=trace.converged, iters=trace.iters,
               loglik=trace.loglik[-1])


def _dendrogram_rows(chain: MergeChain) -> List[dict]:
    rows = []
    for kappa, level, h, k in zip(chain.kappas, chain.levels, chain.heights, range(len(chain.levels))):
        if k < len(chain.merged_pairs):
            i, j = chain.merged_pairs[k]
        else:
            flat = int(np.argmin(pairwise_dissimilarities(level)))
            i, j = divmod(flat, len(level))
        rows.append({"level": kappa, "merged_i": i + 1, "merged_j": j + 1, "height": h})
    return rows


def cmd_dendrogram(args, run: Run) -> None:
    G = _load_measure(args.model)
    if len(G) < 2:
        raise InvalidInputError("a dendrogram needs a model with at least two experts")
    data = None
    if args.data:
        data, _ = _data(args, G.M)
    chain = build_chain(G, data)
    run.json("chain.json", chain.to_dict())
    run.csv("dendrogram.csv", _dendrogram_rows(chain), ["level", "merged_i", "merged_j", "height"])
    run.finish(kappas=chain.kappas)


def _load_sweep(sweep_dir: Path) -> List[Theta]:
    thetas = []
    for p in sorted(sweep_dir.glob("*.json")):
        d = read_json(p)
        if isinstance(d, dict) and "gate" in d and "experts" in d:
            thetas.append(theta_from_dict(d))
    if not thetas:
        raise SchemaError(f"{sweep_dir}: no model JSON files found")
    return thetas


def cmd_select(args, run: Run) -> None:
    mode = args.mode.upper()
    if args.replicate:
        return _select_replicate(args, run)
    if mode == "DSC":
        if not (args.model and args.data):
            raise UsageError("dsc mode needs --model and --data")
        G = _load_measure(args.model)
        data, _ = _data(args, G.M)
        chain = build_chain(G, data)
        report = dsc_scores(chain, data.N, args.omega)
        run.json("chain.json", chain.to_dict())
    else:
        if not args.data:
            raise UsageError(f"{args.mode} mode needs --data and --sweep-dir or --k-max")
        if args.sweep_dir:
            thetas = _load_sweep(Path(args.sweep_dir))
            data, _ = _data(args, thetas[0].spec.M)
            fits = [(t, None, data) for t in thetas]
        elif args.k_max:
            data, mapping = _data(args, args.M)
            M = args.M or (len(mapping) if mapping else int(data.y.max()))
            sweep = sweep_fit(data, args.k_max, _fit_options(args), seed=args.seed, M=M, D=args.D)
            for theta, _ in sweep:
                p = run.path(f"sweep/model_k{theta.spec.K}.json")
                save_theta(p, theta)
                run.wrote(p)
            fits = [(t, tr, data) for t, tr in sweep]
        else:
            raise UsageError(f"{args.mode} mode needs --sweep-dir or --k-max")
        report = criterion_scores(fits, mode)
    run.json("selection.json", report.to_dict())
    run.csv("selection.csv", report.csv_rows(), ["kappa", "height", "loglik", "score"])
    run.finish(chosen_k=report.chosen_k)


def _select_replicate(args, run: Run) -> None:
    criteria = tuple(c for c in CRITERIA) if args.mode.upper() != "DSC" or args.with_criteria else ()
    config = SelectionConfig(
        truth=_load_truth(args.truth),
        K=args.K or 4,
        N=args.N,
        seeds=[args.seed + s for s in range(args.replicate)],
        noise=args.noise,
        criteria=criteria,
        tol=args.tol,
        max_iters=args.max_iters,
        ridge=args.ridge,
        omega=args.omega,
        workers=args.threads,
    )
    rows = run_selection_experiment(config)
    names = ["DSC", *criteria]
    flat = [{"seed": r["seed"], "N": r["N"], "criterion": c, "chosen_k": r[c]} for c in names for r in rows]
    run.csv("replicates.csv", flat, ["seed", "N", "criterion", "chosen_k"])
    K0 = config.truth.spec.K
    summary = {c: sum(r[c] == K0 for r in rows) for c in names}
    run.json("replicates_summary.json", {"true_k": K0, "runs": len(rows), "correct": summary})
    run.finish(correct=summary)


def cmd_rates(args, run: Run) -> None:
    overrides = read_json(args.config) if args.config else {}
    truth = theta_from_dict(overrides.pop("truth")) if "truth" in overrides else _load_truth(args.truth)
    n_grid = overrides.pop("n_grid", None) or args.n_grid or [1000, 3162, 10000, 31623]
    seeds = overrides.pop("seeds", None)
    if seeds is None:
        seeds = [args.seed + s for s in range(args.n_seeds)]
    known = {"K", "init", "noise", "tol", "max_iters", "ridge"}
    unknown = set(overrides) - known - {"output_dir"}
    if unknown:
        raise SchemaError(f"unknown experiment config keys: {sorted(unknown)}")
    params = dict(K=args.K or 2, init=args.init, noise=args.noise, tol=args.tol, max_iters=args.max_iters,
                  ridge=args.ridge)
    params.update({k: v for k, v in overrides.items() if k in known})
    config = RateConfig(truth=truth, n_grid=[int(n) for n in n_grid], seeds=[int(s) for s in seeds],
                        workers=args.threads, **params)
    result = run_rate_experiment(config)
    run.csv("rates.csv", result.rows)
    run.json("slopes.json", result.slopes_dict())
    run.finish(d_v_slope=result.d_v.slope)


def cmd_benchmark(args, run: Run) -> None:
    truth = None
    if args.data:
        data, mapping = _data(args, args.M)
        M = args.M or (len(mapping) if mapping else int(data.y.max()))
        if args.truth:
            truth = load_theta(args.truth)
    else:
        truth = _load_truth(args.truth)
        data = sample_dataset(truth, args.N, seed=args.seed)
        M = truth.spec.M
    K = args.K or (truth.spec.K if truth is not None else 2)
    if truth is not None and truth.spec.K == K:
        theta0 = init_perturbed_truth(truth, noise=args.noise, seed=args.seed)
    else:
        theta0 = init_from_clustering(data, K, seed=args.seed, M=M, D=args.D)
    G0 = from_theta(truth) if truth is not None and truth.spec.K == K else None

    def param_error(theta: Theta):
        if G0 is None:
            return None
        G = from_theta(theta)
        return float(sum(component_errors(G, G0, voronoi_assign(G, G0))))

    rows = []
    optimizers = [o.strip() for o in args.optimizers.split(",") if o.strip()]
    for name in optimizers:
        if name == "mm":
            _, trace = fit_mm(theta0, data, FitOptions(tol=1e-300, max_iters=args.budget, ridge=args.ridge,
                                                       record_thetas=True))
        elif name == "grad":
            _, trace = fit_gradient_baseline(theta0, data, step=args.step, iters=args.budget)
            trace.theta_path = None
        else:
            raise UsageError(f"unknown optimizer {name!r}; expected mm or grad")
        path = trace.theta_path
        for it, ll in enumerate(trace.loglik[1:], start=1):
            err = param_error(path[it]) if path is not None else None
            rows.append({"optimizer": name, "iteration": it, "loglik": ll, "param_error": err})
    run.csv("benchmark.csv", rows, ["optimizer", "iteration", "loglik", "param_error"])
    run.finish(rows=len(rows))


# -- parser ------------------------------------------------------------------


def _global_flags(defaults: bool) -> argparse.ArgumentParser:
    """Global flags, accepted before or after the subcommand."""
    p = argparse.ArgumentParser(add_help=False)
    d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
    p.add_argument("--seed", type=int, default=d(0), help="random seed (default 0)")
    p.add_argument("--out-dir", default=d("."), help="directory for outputs and run.json")
    p.add_argument("--threads", type=int, default=d(1), help="worker processes for replicate loops")
    p.add_argument("--quiet", action="store_true", default=d(False), help="only report errors")
    return p


def _fit_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tol", type=float, default=None, help="log-likelihood increment stop (default 1e-8*N)")
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--ridge", type=float, default=1e-8, help="relative ridge on curvature solves")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgmoe", parents=[_global_flags(True)],
                                     description="Softmax-gated multinomial-logistic mixtures of experts.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    g = _global_flags(False)

    p = sub.add_parser("simulate", parents=[g], help="sample a dataset from a model")
    p.add_argument("--truth", help="model JSON (default: the built-in two-expert reference)")
    p.add_argument("-N", type=int, required=True)
    p.add_argument("--out", help="CSV path (default OUT_DIR/data.csv)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", parents=[g], help="fit a model with the MM algorithm")
    p.add_argument("--data", required=True)
    p.add_argument("--K", type=int, default=None)
    p.add_argument("--M", type=int, default=None)
    p.add_argument("--D", type=int, default=1)
    p.add_argument("--init", choices=["cluster", "file", "perturbed-truth"], default="cluster")
    p.add_argument("--init-file")
    p.add_argument("--truth", help="model JSON for --init perturbed-truth")
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--standardize", action="store_true")
    p.add_argument("--record-thetas", action="store_true")
    _fit_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("dendrogram", parents=[g], help="merge chain of a fitted model")
    p.add_argument("--model", required=True, help="measure.json or model.json")
    p.add_argument("--data", help="CSV; adds per-level mean log-likelihoods")
    p.add_argument("--standardize", action="store_true")
    p.set_defaults(func=cmd_dendrogram)

    p = sub.add_parser("select", parents=[g], help="choose the number of experts")
    p.add_argument("--mode", choices=["dsc", "aic", "bic", "icl"], required=True)
    p.add_argument("--model", help="dsc: fitted measure.json or model.json")
    p.add_argument("--data", help="CSV dataset")
    p.add_argument("--sweep-dir", help="aic/bic/icl: directory of model JSON files, one per K")
    p.add_argument("--k-max", type=int, help="aic/bic/icl: run the sweep here instead")
    p.add_argument("--M", type=int, default=None)
    p.add_argument("--D", type=int, default=1)
    p.add_argument("--omega", type=float, default=None, help="DSC weight (default log N)")
    p.add_argument("--standardize", action="store_true")
    p.add_argument("--replicate", type=int, default=0, metavar="S",
                   help="simulate S datasets from --truth and record every selection")
    p.add_argument("--with-criteria", action="store_true", help="replicate mode with --mode dsc: also run sweeps")
    p.add_argument("--truth")
    p.add_argument("--K", type=int, default=None, help="replicate mode: fitted expert count (default 4)")
    p.add_argument("-N", type=int, default=10_000, help="replicate mode: sample size")
    p.add_argument("--noise", type=float, default=1.0)
    _fit_flags(p)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("rates", parents=[g], help="Voronoi-loss convergence experiment")
    p.add_argument("--config", help="JSON experiment config; keys override flags")
    p.add_argument("--truth")
    p.add_argument("--K", type=int, default=None)
    p.add_argument("--n-grid", type=int, nargs="+")
    p.add_argument("--n-seeds", type=int, default=10)
    p.add_argument("--init", choices=["perturbed", "cluster"], default="perturbed")
    p.add_argument("--noise", type=float, default=1.0)
    _fit_flags(p)
    p.set_defaults(func=cmd_rates, max_iters=5000)

    p = sub.add_parser("benchmark", parents=[g], help="MM versus gradient ascent trajectories")
    p.add_argument("--data")
    p.add_argument("--truth")
    p.add_argument("-N", type=int, default=1000)
    p.add_argument("--K", type=int, default=None)
    p.add_argument("--M", type=int, default=None)
    p.add_argument("--D", type=int, default=1)
    p.add_argument("--optimizers", default="mm,grad")
    p.add_argument("--budget", type=int, default=100)
    p.add_argument("--step", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--ridge", type=float, default=1e-8)
    p.add_argument("--standardize", action="store_true")
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO, format="%(levelname)s: %(message)s")
    if args.threads < 1:
        print("sgmoe: error: --threads must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    run = Run(args, argv)
    code, kind = EXIT_OK, None
    try:
        args.func(args, run)
    except UsageError as exc:
        code, kind = EXIT_USAGE, f"usage error: {exc}"
    except (SchemaError, InvalidInputError, json.JSONDecodeError, np.linalg.LinAlgError) as exc:
        code, kind = EXIT_SCHEMA, f"invalid input: {exc}"
    except OSError as exc:
        code, kind = EXIT_IO, f"I/O error: {exc}"
    if code != EXIT_OK:
        print(f"sgmoe {args.command}: {kind}", file=sys.stderr)
        try:
            run.finish(status="error", error=kind, exit_code=code)
        except OSError:
            pass
        return code
    if not args.quiet:
        log.info("wrote %s", ", ".join(run.manifest["outputs"]) or "run.json")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
