"""Command-line surface.

Subcommands: simulate | fit | fit-path | predict | evaluate | bench.
Every command is deterministic given its flags and seed, writes
machine-readable output with an embedded config echo, and follows the
exit-code contract: 0 ok, 1 I/O failure, 2 usage error, 3 infeasible
request, 4 non-convergence.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import bench as benchmod
from . import io as gpio
from ._backend import backend_name
from .em import (EMConfig, FeasibilityError, FitResult, fit_ml, fit_penalized,
                 fit_penalized_single, fit_probit, marginal_probability)
from .louis import observed_information, standard_errors, precision_param_pairs
from .mcem import GibbsConfig, mcem_fit
from .model import DataError, Dataset
from .mstep import CollinearityError, PrecisionUpdateError

EXIT_OK = 0
EXIT_IO = 1
EXIT_USAGE = 2
EXIT_INFEASIBLE = 3
EXIT_NONCONVERGED = 4


class UsageError(ValueError):
    pass


def _threads_default() -> int:
    env = os.environ.get("GPROBIT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"GPROBIT_THREADS={env!r} is not an integer") from None
    return os.cpu_count() or 1


def _add_em_flags(p):
    p.add_argument("--max-outer", type=int, default=500)
    p.add_argument("--outer-tol", type=float, default=1e-5)
    p.add_argument("--inner-sweeps", type=int, default=1)
    p.add_argument("--inner-tol", type=float, default=1e-6)
    p.add_argument("--moment-map", choices=["auto", "exact", "group-average"],
                   default="auto")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--backend", choices=["auto", "compiled", "python"],
                   default=None)


def _em_config(args) -> EMConfig:
    return EMConfig(
        max_outer=args.max_outer,
        outer_tol=args.outer_tol,
        inner_sweeps=args.inner_sweeps,
        inner_tol=args.inner_tol,
        moment_map=args.moment_map.replace("-", "_"),
        seed=args.seed,
        threads=args.threads if args.threads is not None else _threads_default(),
        backend=args.backend,
    )


def _config_echo(args, extra=None):
    echo = {k: v for k, v in sorted(vars(args).items()) if k != "func" and v is not None}
    echo["backend_resolved"] = backend_name(getattr(args, "backend", None))
    if extra:
        echo.update(extra)
    return echo


def _fit_payload(res: FitResult, config_echo: dict) -> dict:
    G = res.params.n_groups
    payload = {
        "estimator": res.estimator,
        "beta": res.params.beta,
        "phi": None if res.estimator == "probit" else res.params.phi_G,
        "sigma": None if res.estimator == "probit" else res.params.sigma_G,
        "phi_ordering": "row-major dense G x G",
        "n_groups": G,
        "q_trajectory": res.q_trajectory,
        "iterations": res.outer_iters,
        "converged": bool(res.converged),
        "q_decreases": res.q_decreases,
        "wall_time": res.wall_time,
        "moment_map": res.moment_map_used,
        "config": config_echo,
    }
    if res.penalty_rho is not None:
        payload["rho"] = res.penalty_rho
        payload["rho_effective"] = 2.0 * res.penalty_rho / config_echo.get("n_regions", 1)
    if res.se is not None:
        payload["se"] = res.se
    return payload


def _load_dataset(path) -> Dataset:
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such file: {path}")
    return gpio.read_dataset_csv(path)


def cmd_simulate(args) -> int:
    design = benchmod.SimDesign(N=args.n, G=args.g, R=args.r, beta=args.beta,
                                edge_prob_scale=args.edge_scale, seed=args.seed)
    dataset, truth = benchmod.gen_dataset(design)
    os.makedirs(args.out_dir, exist_ok=True)
    gpio.write_dataset_csv(os.path.join(args.out_dir, "data.csv"), dataset)
    gpio.write_json(os.path.join(args.out_dir, "truth.json"), {
        "beta": [truth["beta"]],
        "sigma_G": truth["sigma_G"],
        "support": truth["support"].astype(int),
        "config": _config_echo(args),
    })
    return EXIT_OK


def _run_fit(args, dataset) -> FitResult:
    cfg = _em_config(args)
    if args.estimator == "mcem":
        gcfg = GibbsConfig(n_samples=args.gibbs_samples, burn_in=args.burn_in,
                           thin=args.thin, seed=args.seed)
        return mcem_fit(dataset, cfg, gcfg)
    if args.estimator == "probit":
        return fit_probit(dataset, cfg)
    if args.rho is not None:
        return fit_penalized_single(dataset, args.rho, cfg)
    if args.estimator == "diagonal":
        return fit_ml(dataset, cfg, precision="diagonal")
    return fit_ml(dataset, cfg)


def cmd_fit(args) -> int:
    dataset = _load_dataset(args.data)
    res = _run_fit(args, dataset)
    echo = _config_echo(args, {"n_regions": dataset.n_regions})
    payload = _fit_payload(res, echo)
    if args.se:
        if res.estimator in ("probit", "mcem"):
            raise UsageError(
                "Louis standard errors are only defined for the mean-field "
                "estimators (graphical, diagonal, penalized)"
            )
        info = observed_information(dataset, res.params, res.states)
        se = standard_errors(info)
        names = info.param_names
        est = list(res.params.beta) + [
            res.params.phi_G[g, h] for g, h in precision_param_pairs(dataset.n_groups)
        ]
        payload["se"] = [
            {"param": nm, "estimate": float(e), "se": float(s)}
            for nm, e, s in zip(names, est, se)
        ]
    gpio.write_json(args.out, payload)
    if not res.converged and res.estimator != "probit":
        sys.stderr.write(
            f"did not converge in {res.outer_iters} iterations "
            f"(last parameter change {res.last_delta:.3e}); Q trajectory:\n"
        )
        sys.stderr.write(" ".join(gpio.fmt(q) for q in res.q_trajectory) + "\n")
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_fit_path(args) -> int:
    dataset = _load_dataset(args.data)
    cfg = _em_config(args)
    grid = None
    if args.rho_grid:
        grid = np.array([float(v) for v in args.rho_grid.split(",")])
    path = fit_penalized(dataset, cfg, rho_grid=grid, n_points=args.n_rho)
    R = dataset.n_regions
    entries = []
    for rho, fit, bic in zip(path.rho_grid, path.fits, path.bic):
        phi = fit.params.phi_G
        edges = [
            [int(g), int(h), float(phi[g, h])]
            for g in range(phi.shape[0]) for h in range(g + 1, phi.shape[0])
            if abs(phi[g, h]) > 1e-8
        ]
        entries.append({
            "rho": float(rho),
            "rho_effective": 2.0 * float(rho) / R,
            "beta": fit.params.beta,
            "phi_diag": np.diag(phi),
            "edges": edges,
            "n_edges": len(edges),
            "bic": float(bic),
            "iterations": fit.outer_iters,
            "converged": bool(fit.converged),
        })
    gpio.write_json(args.out, {
        "path": entries,
        "selected_index": path.selected_index,
        "selected_rho": float(path.rho_grid[path.selected_index]),
        "config": _config_echo(args, {"n_regions": R}),
    })
    if args.truth:
        truth = gpio.read_json(args.truth)
        support = np.array(truth["support"])
        pts = benchmod.network_roc([f.params.phi_G for f in path.fits], support)
        rows = [(float(r), fpr, tpr) for r, (fpr, tpr) in zip(path.rho_grid, pts)]
        gpio.write_table_csv(args.netroc, ["rho", "fpr", "tpr"], rows,
                             meta=f"seed={args.seed}")
    if not all(f.converged for f in path.fits):
        sys.stderr.write("one or more path points did not converge\n")
        return EXIT_NONCONVERGED
    return EXIT_OK


def _scores_for(fit_json, dataset):
    beta = np.array(fit_json["beta"], dtype=float)
    sigma = fit_json.get("sigma")
    sigma = None if sigma is None else np.array(sigma, dtype=float)
    if dataset.n_covariates != beta.shape[0]:
        raise DataError(
            f"fit has {beta.shape[0]} coefficients, data has "
            f"{dataset.n_covariates} covariates"
        )
    if sigma is not None and sigma.shape[0] != dataset.n_groups:
        raise DataError(
            f"fit has {sigma.shape[0]} groups, data has {dataset.n_groups}"
        )
    scores, labels, regions = [], [], []
    for block in dataset.regions:
        p = marginal_probability(beta, sigma, block)
        scores.append(p)
        labels.append(block.y)
        regions.extend([block.region_id] * block.n_obs)
    return np.concatenate(scores), np.concatenate(labels), regions


def cmd_predict(args) -> int:
    dataset = _load_dataset(args.data)
    fit_json = gpio.read_json(args.fit)
    scores, labels, regions = _scores_for(fit_json, dataset)
    rows = [(str(r), int(y), float(s)) for r, y, s in zip(regions, labels, scores)]
    gpio.write_table_csv(args.out, ["region", "y", "score"], rows,
                         meta=f"fit={os.path.basename(args.fit)}")
    return EXIT_OK


def _split_dataset(dataset, fraction, seed):
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 77))))
    train_blocks, test_blocks = [], []
    from .model import RegionBlock

    for block in dataset.regions:
        n = block.n_obs
        idx = rng.permutation(n)
        cut = int(round(fraction * n))
        tr, te = np.sort(idx[:cut]), np.sort(idx[cut:])
        for sel, dest in ((tr, train_blocks), (te, test_blocks)):
            if sel.size == 0:
                continue
            dest.append(RegionBlock(
                block.region_id, block.y[sel], block.X[sel], block.n_groups,
                group_index=None if block.group_index is None else block.group_index[sel],
                loadings=None if block.loadings is None else block.loadings[sel],
            ))
    return (Dataset(tuple(train_blocks), dataset.n_covariates, dataset.n_groups),
            Dataset(tuple(test_blocks), dataset.n_covariates, dataset.n_groups))


def cmd_evaluate(args) -> int:
    dataset = _load_dataset(args.data)
    if args.fit:
        fit_json = gpio.read_json(args.fit)
        test = dataset
    else:
        if args.split is None:
            raise UsageError("evaluate needs either --fit or --split")
        train, test = _split_dataset(dataset, args.split, args.seed)
        res = _run_fit(args, train)
        echo = _config_echo(args, {"n_regions": train.n_regions})
        fit_json = _fit_payload(res, echo)
    scores, labels, regions = _scores_for(fit_json, test)
    thresholds, points, auc = benchmod.roc_curve(scores, labels)
    pct_nf, pct_f = benchmod.classification_table(scores, labels, args.threshold)
    if args.scores:
        rows = [(str(r), int(y), float(s)) for r, y, s in zip(regions, labels, scores)]
        gpio.write_table_csv(args.scores, ["region", "y", "score"], rows)
    gpio.write_json(args.out, {
        "estimator": fit_json.get("estimator", "unknown"),
        "auc": auc,
        "threshold": args.threshold,
        "pct_correct_nonfailed": pct_nf,
        "pct_correct_failed": pct_f,
        "roc": [[float(t), p[0], p[1]] for t, p in zip(thresholds, points[1:])],
        "n_test": int(len(labels)),
        "config": _config_echo(args),
    })
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench_harness import run_bench

    os.makedirs(args.out_dir, exist_ok=True)
    run_bench(args)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="gprobit",
        description="correlated mixed probit: simulation, fitting, evaluation",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a synthetic dataset and its truth")
    p.add_argument("--n", type=int, required=True, help="observations per region")
    p.add_argument("--g", type=int, required=True, help="number of groups")
    p.add_argument("--r", type=int, required=True, help="number of regions")
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--edge-scale", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit one estimator to a dataset CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="fit.json")
    p.add_argument("--estimator",
                   choices=["graphical", "diagonal", "probit", "mcem"],
                   default="graphical")
    p.add_argument("--rho", type=float, default=None,
                   help="fixed penalty: penalised fit at this rho")
    p.add_argument("--se", action="store_true", help="add Louis standard errors")
    p.add_argument("--gibbs-samples", type=int, default=500)
    p.add_argument("--burn-in", type=int, default=100)
    p.add_argument("--thin", type=int, default=1)
    _add_em_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("fit-path", help="penalised path with BIC selection")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="path.json")
    p.add_argument("--n-rho", type=int, default=20)
    p.add_argument("--rho-grid", default=None,
                   help="comma-separated decreasing grid (overrides --n-rho)")
    p.add_argument("--truth", default=None, help="truth.json for network ROC")
    p.add_argument("--netroc", default="netroc.csv")
    _add_em_flags(p)
    p.set_defaults(func=cmd_fit_path)

    p = sub.add_parser("predict", help="per-row default probabilities")
    p.add_argument("--fit", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="scores.csv")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="ROC/AUC and classification table")
    p.add_argument("--data", required=True)
    p.add_argument("--fit", default=None)
    p.add_argument("--split", type=float, default=None,
                   help="train fraction; fits on the train part, scores the rest")
    p.add_argument("--estimator",
                   choices=["graphical", "diagonal", "probit", "mcem"],
                   default="graphical")
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", default="report.json")
    p.add_argument("--scores", default=None)
    p.add_argument("--gibbs-samples", type=int, default=500)
    p.add_argument("--burn-in", type=int, default=100)
    p.add_argument("--thin", type=int, default=1)
    _add_em_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="replication benchmark; writes table2/roc/netroc CSVs")
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--g", type=int, default=10)
    p.add_argument("--r", type=int, default=200)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--edge-scale", type=float, default=3.0)
    p.add_argument("--replications", type=int, default=10)
    p.add_argument("--estimators", default="group-average,exact,mcem",
                   help="comma list from group-average,exact,mcem")
    p.add_argument("--gibbs-samples", type=int, default=300)
    p.add_argument("--burn-in", type=int, default=100)
    p.add_argument("--thin", type=int, default=1)
    p.add_argument("--out-dir", default=".")
    _add_em_flags(p)
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (UsageError, DataError, ValueError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE
    except FeasibilityError as exc:
        sys.stderr.write(
            f"infeasible: {exc}\n"
            "hint: penalised estimation covers G >= R; use fit --rho or fit-path\n"
        )
        return EXIT_INFEASIBLE
    except (CollinearityError, PrecisionUpdateError, np.linalg.LinAlgError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE
    except OSError as exc:
        sys.stderr.write(f"io error: {exc}\n")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
