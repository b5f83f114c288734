"""Confounder-adjusted empirical-Bayes shrinkage for gene expression studies.

    python main.py fit       --y Y.csv --x X.csv --interest 2 --q 3 --out results/
    python main.py backwash  --y Y.csv --x X.csv --interest 2 --q 3 --out results/
    python main.py simulate  --n 40 --p 1000 --pi0 0.9 --uv-rank 2 --out study/
    python main.py evaluate  --studies study/ --out eval/

Exit codes: 0 success, 1 input error, 2 a fit did not converge (outputs
are still written).
"""

import argparse
import asyncio
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NONCONVERGED = 2


class CliInputError(ValueError):
    """Raised for unusable command-line arguments."""


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting, so main() owns exit codes."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliInputError(message)


# --- Parser ---

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="output directory (default: $UNWASH_OUTPUT_DIR)")
    p.add_argument("--threads", type=int, default=None, help="worker count (default: $UNWASH_THREADS or all cores)")
    p.add_argument("--log-level", default=None, help="logging level (default: $UNWASH_LOG_LEVEL or WARNING)")


def _add_inputs(p: argparse.ArgumentParser) -> None:
    p.add_argument("--y", required=True, help="n × p expression CSV, header = gene IDs")
    p.add_argument("--x", required=True, help="n × k design CSV with header")
    target = p.add_mutually_exclusive_group(required=True)
    target.add_argument("--interest", type=int, help="1-based column of X holding the covariate of interest")
    target.add_argument("--contrast", help='contrast over the columns of X, e.g. "0,1,-1"')
    p.add_argument("--q", type=int, required=True, help="number of hidden factors")
    p.add_argument("--lambda0", type=float, default=10.0)
    p.add_argument("--fix-xi", type=float, default=None, help="hold the variance inflation at this value")
    p.add_argument("--moderate-variances", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="main.py", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    fit = sub.add_parser("fit", help="MOUTHWASH fit")
    _add_inputs(fit)
    fit.add_argument("--mixture", choices=["normal", "uniform", "halfuniform"], default="normal")
    fit.add_argument("--likelihood", choices=["normal", "t"], default="normal")
    fit.add_argument("--nu", type=float, default=None, help="t degrees of freedom (default n − k − q)")
    fit.add_argument("--gamma", type=int, choices=[0, 1], default=0)
    fit.add_argument("--lambda-xi", type=float, default=0.0)
    fit.add_argument("--subsample", type=int, default=None)
    fit.add_argument("--n-starts", type=int, default=1)
    _add_common(fit)

    back = sub.add_parser("backwash", help="BACKWASH fit (normal mixture)")
    _add_inputs(back)
    back.add_argument("--fix-phi", type=float, default=None)
    _add_common(back)

    sim = sub.add_parser("simulate", help="spike signal into null counts by binomial thinning")
    sim.add_argument("--n", type=int, default=40)
    sim.add_argument("--p", type=int, default=1000)
    sim.add_argument("--pi0", type=float, default=0.9)
    sim.add_argument("--effect-sd", type=float, default=0.8)
    sim.add_argument("--m-controls", type=int, default=0)
    sim.add_argument("--uv-rank", type=int, default=0)
    sim.add_argument("--uv-strength", type=float, default=0.5)
    sim.add_argument("--base-counts", default=None, help="samples × genes count CSV to thin")
    sim.add_argument("--replicates", type=int, default=1)
    _add_common(sim)

    ev = sub.add_parser("evaluate", help="score methods on simulated studies")
    ev.add_argument("--studies", nargs="+", required=True, help="study directories (or parents of them)")
    ev.add_argument("--scores", nargs="*", default=[], help="external scores CSVs")
    ev.add_argument("--methods", default="mouthwash,ols", help="built-in runners, comma separated")
    ev.add_argument("--q", type=int, default=2)
    _add_common(ev)
    return parser


# --- Shared ---

def _configure_logging(level: str | None) -> None:
    name = (level or os.environ.get("UNWASH_LOG_LEVEL") or "WARNING").upper()
    if not isinstance(logging.getLevelName(name), int):
        raise CliInputError(f"Unknown log level {name!r}")
    logging.basicConfig(level=name, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def _prepare(args):
    """Read inputs, rotate, and run factor analysis."""
    from data_model import validate_dataset
    from factor_analysis import moderate_variances, truncated_pca
    from rotation import rotate
    from utils import parse_float_list, read_matrix_csv

    genes, Y = read_matrix_csv(args.y)
    _, X = read_matrix_csv(args.x)
    interest = parse_float_list(args.contrast) if args.contrast is not None else args.interest
    ds = validate_dataset(Y, X, interest, gene_names=genes)
    rm = rotate(ds)
    fa = truncated_pca(rm.Y3, args.q)
    if args.moderate_variances:
        fa = replace(fa, sigma2=moderate_variances(fa.sigma2, fa.df))
    print(f"Loaded n={ds.n} samples, p={ds.p} genes, k={ds.k} covariates; q={fa.q} factors")
    return ds, rm, fa


def _manifest(args, outputs, converged, started, out_dir) -> None:
    from utils import RunManifest, package_versions, resolve_threads, write_manifest

    config = {k: v for k, v in vars(args).items() if k not in ("command",)}
    config["threads"] = resolve_threads(args.threads)
    manifest = RunManifest(
        command=args.command, config=config, seed=args.seed, versions=package_versions(),
        wall_time_s=round(time.perf_counter() - started, 3), converged=converged,
        outputs=[str(p) for p in outputs],
    )
    write_manifest(manifest, out_dir)


def _write_fit(method: str, summaries, model: dict, out_dir: Path) -> list[Path]:
    from utils import write_frame_csv, write_json

    return [
        write_frame_csv(summaries.to_frame(), out_dir / "genes.csv"),
        write_json({"method": method, **model}, out_dir / "model.json"),
    ]


# --- Commands ---

def cmd_fit(args) -> int:
    from mixture_prior import PenaltySpec
    from mouthwash import MouthwashConfig, fit_mouthwash
    from posterior import pi0, posterior_summaries
    from utils import output_dir

    started = time.perf_counter()
    _, rm, fa = _prepare(args)
    cfg = MouthwashConfig(
        mixture=args.mixture,
        likelihood=args.likelihood,
        nu=(args.nu if args.nu is not None else float(fa.df)) if args.likelihood == "t" else None,
        gamma=args.gamma,
        penalty=PenaltySpec(lambda0=args.lambda0, lambda_xi=args.lambda_xi),
        estimate_xi=args.fix_xi is None,
        fixed_xi=args.fix_xi if args.fix_xi is not None else 1.0,
        subsample=args.subsample,
        n_starts=args.n_starts,
        seed=args.seed,
    )
    print(f"Fitting MOUTHWASH ({cfg.mixture} mixture, {cfg.likelihood} likelihood)...")
    fit = fit_mouthwash(rm, fa, cfg)
    summaries = posterior_summaries(rm, fa, fit)
    print(f"  pi0 = {pi0(fit):.4f}, xi = {fit.xi_hat:.4g}, {fit.n_iters} sweeps")

    out = output_dir(args.out)
    model = {
        "q": fa.q,
        "gamma": cfg.gamma,
        "likelihood": {"name": cfg.likelihood, "nu": cfg.nu},
        "mixture": fit.g_hat.to_dict(),
        "pi0": pi0(fit),
        "z": fit.z_hat.tolist(),
        "xi": fit.xi_hat,
        "loglik": fit.loglik,
        "objective_trace": fit.objective_trace.tolist(),
        "n_iters": fit.n_iters,
        "line_search_failed": fit.line_search_failed,
        "converged": fit.converged,
    }
    outputs = _write_fit("mouthwash", summaries, model, out)
    _manifest(args, outputs, {"mouthwash": fit.converged}, started, out)
    print(f"Wrote {out / 'genes.csv'}")
    if not fit.converged:
        print("Warning: MOUTHWASH did not converge; results are the best iterate", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_backwash(args) -> int:
    from backwash import BackwashConfig, fit_backwash
    from mixture_prior import PenaltySpec
    from posterior import pi0, posterior_summaries
    from utils import output_dir

    started = time.perf_counter()
    _, rm, fa = _prepare(args)
    cfg = BackwashConfig(penalty=PenaltySpec(lambda0=args.lambda0), fixed_phi=args.fix_phi,
                         fixed_xi=args.fix_xi)
    print("Fitting BACKWASH...")
    fit = fit_backwash(rm, fa, cfg=cfg)
    summaries = posterior_summaries(rm, fa, fit)
    print(f"  pi0 = {pi0(fit):.4f}, phi = {fit.phi:.4g}, xi = {fit.xi_hat:.4g}, {fit.n_iters} sweeps")

    out = output_dir(args.out)
    model = {
        "q": fa.q,
        "mixture": fit.g_hat.to_dict(),
        "pi0": pi0(fit),
        "phi": fit.phi,
        "xi": fit.xi_hat,
        "mu_v": fit.state.mu_v.tolist(),
        "Sigma_v": fit.state.Sigma_v.tolist(),
        "elbo_trace": fit.elbo_trace.tolist(),
        "n_iters": fit.n_iters,
        "jitter_added": fit.jitter_added,
        "converged": fit.converged,
    }
    outputs = _write_fit("backwash", summaries, model, out)
    _manifest(args, outputs, {"backwash": fit.converged}, started, out)
    print(f"Wrote {out / 'genes.csv'}")
    if not fit.converged:
        print("Warning: BACKWASH did not converge; results are the best iterate", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_simulate(args) -> int:
    from simulation import SimulationConfig, filter_low_expression, replicate_configs, save_study, simulate
    from utils import output_dir, read_matrix_csv

    started = time.perf_counter()
    if args.replicates < 1:
        raise CliInputError(f"--replicates must be positive, got {args.replicates}")
    base, base_genes = None, None
    if args.base_counts:
        base_genes, base = read_matrix_csv(args.base_counts)
        base, keep = filter_low_expression(base)
        base_genes = [base_genes[j] for j in keep]
    cfg = SimulationConfig(
        n=args.n, p=args.p, pi0=args.pi0, effect_sd=args.effect_sd, m_controls=args.m_controls,
        seed=args.seed, uv_rank=args.uv_rank, uv_strength=args.uv_strength,
        base_counts=base, base_gene_names=base_genes,
    )
    out = output_dir(args.out)
    configs = [cfg] if args.replicates == 1 else replicate_configs(cfg, args.replicates)
    outputs = []
    for r, rep_cfg in enumerate(configs, start=1):
        name = out.name if args.replicates == 1 else f"rep{r:03d}"
        target = out if args.replicates == 1 else out / name
        study = simulate(rep_cfg, name=name)
        outputs += save_study(study, target)
        print(f"Simulated {name}: {int((~study.is_null).sum())} non-null of {study.p} genes -> {target}")
    _manifest(args, outputs, {}, started, out)
    return EXIT_OK


def _find_studies(paths: list[str]) -> list[Path]:
    found = []
    for raw in paths:
        path = Path(raw)
        if (path / "study.json").is_file():
            found.append(path)
        else:
            found += sorted(p.parent for p in path.glob("*/study.json"))
    if not found:
        raise CliInputError(f"No study directories (with study.json) under {paths}")
    return found


def cmd_evaluate(args) -> int:
    from evaluation import load_scores_csv, score_cells_async, summarize
    from simulation import load_study
    from utils import output_dir, write_frame_csv

    started = time.perf_counter()
    studies = [load_study(p) for p in _find_studies(args.studies)]
    names = [s.name for s in studies]
    if len(set(names)) != len(names):
        studies = [replace(s, name=f"{s.name}-{i + 1}") for i, s in enumerate(studies)]
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]

    imported = {}
    for path in args.scores:
        for name, scores in load_scores_csv(path, studies).items():
            imported.setdefault(name, []).extend(scores)

    print(f"Evaluating {len(methods)} method(s) on {len(studies)} study(ies)...")
    cells = asyncio.run(score_cells_async(studies, methods, args.q, imported, args.threads, args.seed))
    summary = summarize(cells)

    out = output_dir(args.out)
    outputs = [write_frame_csv(summary, out / "summary.csv"), write_frame_csv(cells, out / "cells.csv")]
    _manifest(args, outputs, {}, started, out)
    print(f"Wrote {out / 'summary.csv'} ({len(summary)} rows)")
    return EXIT_OK


HANDLERS = {
    "fit": cmd_fit,
    "backwash": cmd_backwash,
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _configure_logging(args.log_level)
        return HANDLERS[args.command](args)
    except (ValueError, OSError, np.linalg.LinAlgError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
