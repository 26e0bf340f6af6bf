"""Command-line interface.

Test commands print a JSON report and exit with 0 (H0 not rejected) or 1
(H0 rejected); every command exits with 2 on an error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from relsn import __version__
from relsn.changepoint import binary_segmentation, estimate_single
from relsn.errors import RelsnError
from relsn.io import read_baseline, read_curves, read_sample, reshape_wide
from relsn.pivotal import (
    DEFAULT_PATHS,
    DEFAULT_SEED,
    DEFAULT_STEPS,
    NormalizerKind,
    PivotalConfig,
    TableCache,
    get_table,
    save_table,
    simulate_ratio_samples,
)
from relsn.procedures import (
    TestSpec,
    changepoint_statistic,
    make_report,
    multi_changepoint_statistic,
    one_sample_statistic,
    two_sample_statistic,
)
from relsn.simulate import rejection_study, study_from_dict
from relsn.spline_core import SplineSpec, select_knots_bic

EXIT_ACCEPT, EXIT_REJECT, EXIT_ERROR = 0, 1, 2
DEFAULT_LEVELS = "0.90,0.95,0.99"


class CliError(RelsnError):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _add_table_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("pivotal table")
    g.add_argument("--table-cache", metavar="DIR",
                   help="table cache directory (default: $RELSN_CACHE_DIR or ~/.cache/relsn)")
    g.add_argument("--no-cache", action="store_true", help="simulate the table without using the cache")
    g.add_argument("--seed", type=int, default=DEFAULT_SEED, help="simulation seed (default %(default)s)")
    g.add_argument("--paths", type=int, default=DEFAULT_PATHS, help="Brownian paths (default %(default)s)")
    g.add_argument("--steps", type=int, default=DEFAULT_STEPS, help="grid steps per path (default %(default)s)")
    g.add_argument("--workers", type=int, default=1, help="worker processes for simulations")


def _add_test_flags(p: argparse.ArgumentParser, delta_required: bool = True) -> None:
    p.add_argument("--input", required=True, help="long-format CSV (curve_id,x,y[,sample_id][,time])")
    if delta_required:
        p.add_argument("--delta", type=float, required=True, help="relevance threshold")
        p.add_argument("--alpha", type=float, default=0.05, help="significance level (default %(default)s)")
    p.add_argument("--epsilon", type=float, default=0.1, help="trimming fraction (default %(default)s)")
    p.add_argument("--normalizer", default="integral", choices=[k.value for k in NormalizerKind])
    p.add_argument("--knots", default="auto", help="interior knots: auto (BIC) or an integer")
    p.add_argument("--order", type=int, default=4, help="spline order (default %(default)s, cubic)")
    p.add_argument("--rescale", action="store_true", help="min-max rescale x to [0, 1]")
    p.add_argument("--output", help="write the report here instead of stdout")
    _add_table_flags(p)


def _add_family_flags(p: argparse.ArgumentParser, family: str) -> None:
    if family == "two-sample":
        p.add_argument("--input2", help="second sample (else --input must hold two sample_id values)")
    elif family == "changepoint":
        p.add_argument("--khat", default="auto", help="change after this curve, or auto (CUSUM)")
        p.add_argument("--profile", metavar="OUT.csv", help="write the CUSUM profile")
    elif family == "multi-changepoint":
        g = p.add_mutually_exclusive_group(required=True)
        g.add_argument("--thetas", help="comma-separated change fractions in (0, 1)")
        g.add_argument("--segments", type=int, metavar="K", help="locate K changes by binary segmentation")
        p.add_argument("--min-segment", type=int, help="shortest segment for binary segmentation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="relsn",
        description="Self-normalized tests of relevant hypotheses for functional time series.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    for family, help_text in [
        ("one-sample", "test ||m - m0||^2 <= delta"),
        ("two-sample", "test ||m1 - m2||^2 <= delta"),
        ("changepoint", "test the squared norm of a single jump"),
        ("multi-changepoint", "test the summed squared norms of several jumps"),
    ]:
        p = sub.add_parser(f"test-{family}", help=help_text)
        _add_test_flags(p)
        _add_family_flags(p, family)
        if family == "one-sample":
            p.add_argument("--m0", default="zero", help="hypothesized mean: zero or a CSV with x,y")
        p.set_defaults(family=family)

    p = sub.add_parser("delta-sweep", help="decisions over a grid of thresholds and quantile levels")
    p.add_argument("--test", dest="family", default="one-sample",
                   choices=["one-sample", "two-sample", "changepoint", "multi-changepoint"])
    _add_test_flags(p, delta_required=False)
    p.add_argument("--deltas", required=True, help="comma-separated thresholds")
    p.add_argument("--levels", "--alphas", dest="levels", default=DEFAULT_LEVELS,
                   help="comma-separated quantile levels 1 - alpha (default %(default)s)")
    p.add_argument("--input2")
    p.add_argument("--khat", default="auto")
    p.add_argument("--thetas")
    p.add_argument("--segments", type=int)
    p.add_argument("--min-segment", type=int)
    p.add_argument("--m0", default="zero")
    p.set_defaults(profile=None)

    p = sub.add_parser("quantiles", help="simulate (or load) a pivotal table and print its quantiles")
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--kind", default="integral", choices=[k.value for k in NormalizerKind])
    p.add_argument("--levels", default="0.5,0.90,0.95,0.99", help="quantile levels to print")
    p.add_argument("--out", help="also write the table file here")
    _add_table_flags(p)

    p = sub.add_parser("simulate", help="run a rejection-probability study")
    p.add_argument("--study-config", required=True, help="JSON study description")
    p.add_argument("--output", help="CSV output (default stdout)")
    _add_table_flags(p)

    p = sub.add_parser("reshape", help="convert a wide curve table to long format")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--id-column")
    return parser


def _table(args, kind, epsilon):
    return get_table(epsilon, kind, args.paths, args.steps, args.seed,
                     cache_dir=args.table_cache, use_cache=not args.no_cache, workers=args.workers)


def _spline(args, sample=None):
    if args.knots == "auto":
        if sample is None:
            return None
        return SplineSpec(args.order, select_knots_bic(sample, args.order))
    try:
        J = int(args.knots)
    except ValueError:
        raise CliError(f"--knots must be 'auto' or an integer, got {args.knots!r}") from None
    return SplineSpec(args.order, J)


def _two_samples(args):
    if args.input2:
        return read_sample(args.input, args.rescale), read_sample(args.input2, args.rescale)
    samples = read_curves(args.input, args.rescale)
    if len(samples) != 2:
        raise CliError(f"{args.input}: two-sample tests need two sample_id values, found {len(samples)}")
    return tuple(samples.values())


def _statistic(args):
    """The statistic of the chosen family, with all normalizers."""
    family, eps = args.family, args.epsilon
    if family == "one-sample":
        sample = read_sample(args.input, args.rescale)
        m0 = None if args.m0 == "zero" else read_baseline(args.m0)
        return one_sample_statistic(sample, eps, _spline(args), args.order, m0)
    if family == "two-sample":
        s1, s2 = _two_samples(args)
        spline = _spline(args)
        return two_sample_statistic(s1, s2, eps, (spline, spline), args.order)
    sample = read_sample(args.input, args.rescale)
    spline = _spline(args, sample)
    if family == "changepoint":
        if args.khat == "auto":
            est = estimate_single(sample, spline, eps)
            k_hat = est.k_hat
            if args.profile:
                with open(args.profile, "w", newline="") as fh:
                    w = csv.writer(fh, lineterminator="\n")
                    w.writerow(["k", "objective"])
                    for k, v in zip(est.ks.tolist(), est.profile.tolist()):
                        w.writerow([k, repr(v)])
        else:
            try:
                k_hat = int(args.khat)
            except ValueError:
                raise CliError(f"--khat must be 'auto' or an integer, got {args.khat!r}") from None
            if args.profile:
                raise CliError("--profile needs --khat auto")
        stat = changepoint_statistic(sample, eps, spline, args.order, k_hat)
        if args.khat == "auto":
            stat.metadata["cusum_objective"] = est.objective
        return stat
    if args.thetas is not None:
        thetas = _floats(args.thetas)
    elif args.segments is not None:
        seg = binary_segmentation(sample, spline, eps, args.segments, args.min_segment)
        if not seg.locations:
            raise CliError(
                "binary segmentation found no change point; a smaller --min-segment may help"
            )
        thetas = [k / sample.n for k in seg.locations]
        stat = multi_changepoint_statistic(sample, thetas, eps, spline, args.order)
        stat.metadata["segmentation"] = {"objectives": list(seg.objectives), "shortfall": seg.shortfall}
        return stat
    else:
        raise CliError("give --thetas or --segments")
    return multi_changepoint_statistic(sample, thetas, eps, spline, args.order)


def _emit(text: str, output) -> None:
    if output:
        Path(output).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_test(args) -> int:
    spec = TestSpec(args.delta, args.alpha, args.epsilon, args.normalizer, order=args.order)
    stat = _statistic(args)
    report = make_report(args.family, stat, spec, _table(args, spec.kind, spec.epsilon))
    for key in ("segmentation",):
        if key in stat.metadata:
            report.diagnostics[key] = stat.metadata[key]
    _emit(report.to_json(indent=2) + "\n", args.output)
    return EXIT_REJECT if report.reject else EXIT_ACCEPT


def cmd_delta_sweep(args) -> int:
    deltas = _floats(args.deltas)
    levels = _floats(args.levels)
    if not deltas or any(d <= 0 for d in deltas):
        raise CliError("--deltas must be positive")
    if not levels or any(not 0 < q < 1 for q in levels):
        raise CliError("--levels must lie in (0, 1)")
    kind = NormalizerKind.parse(args.normalizer)
    table = _table(args, kind, args.epsilon)
    stat = _statistic(args)
    qs = [table.quantile(q) for q in levels]
    lines = [["delta", *[f"{q:g}" for q in levels]]]
    for d in deltas:
        lines.append([f"{d:g}", *[str(stat.decide(d, kind, q)[1]) for q in qs]])
    _emit("".join(",".join(r) + "\n" for r in lines), args.output)
    return EXIT_ACCEPT


def cmd_quantiles(args) -> int:
    config = PivotalConfig(args.epsilon, args.kind, args.paths, args.steps, args.seed)
    if args.no_cache:
        table = simulate_ratio_samples(config, args.workers)
    else:
        table = TableCache(args.table_cache, args.workers).get(config)
    if args.out:
        save_table(table, args.out)
    doc = {
        "kind": config.kind.value,
        "epsilon": config.epsilon,
        "n_paths": config.n_paths,
        "n_steps": config.n_steps,
        "seed": config.seed,
        "quantiles": {f"{q:g}": table.quantile(q) for q in _floats(args.levels)},
    }
    sys.stdout.write(json.dumps(doc, indent=2) + "\n")
    return EXIT_ACCEPT


def cmd_simulate(args) -> int:
    try:
        spec = json.loads(Path(args.study_config).read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"{args.study_config}: invalid JSON: {exc}") from None
    kwargs = study_from_dict(spec)
    kwargs.setdefault("workers", args.workers)
    epsilons = np.atleast_1d(kwargs.get("epsilon", 0.1))
    kinds = kwargs.get("kinds", ["integral"])
    kwargs["tables"] = {
        (NormalizerKind.parse(k), float(e)): _table(args, k, float(e)) for k in kinds for e in epsilons
    }
    result = rejection_study(**kwargs)
    _emit(result.to_csv(), args.output)
    return EXIT_ACCEPT


def cmd_reshape(args) -> int:
    n = reshape_wide(args.input, args.output, args.id_column)
    sys.stderr.write(f"wrote {n} curves to {args.output}\n")
    return EXIT_ACCEPT


COMMANDS = {
    "delta-sweep": cmd_delta_sweep,
    "quantiles": cmd_quantiles,
    "simulate": cmd_simulate,
    "reshape": cmd_reshape,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = cmd_test if args.command.startswith("test-") else COMMANDS[args.command]
    try:
        return handler(args)
    except (RelsnError, ValueError, OSError) as exc:
        sys.stderr.write(f"relsn: error: {exc}\n")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
