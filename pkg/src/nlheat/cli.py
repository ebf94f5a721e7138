"""Command-line surface: kernel, series, check, simulate, compare.

Exit codes: 0 success, 2 usage error, 3 numerical divergence, 4 check
failure.  Heavy numeric imports happen inside commands so --threads can cap
the BLAS pools before numpy loads.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_CHECK_FAILED = 0, 2, 3, 4


def _load_config(path):
    """Flat key=value file with section prefixes (model., grid., sim., ...)."""
    cfg = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"bad config line: {line!r}")
            key, _, val = line.partition("=")
            cfg[key.strip()] = val.strip()
    return cfg


def _resolved(args, keys, cfg):
    """File values fill in unset flags; flags win; echo the final mapping."""
    out = {}
    for flag, section_key, cast in keys:
        val = getattr(args, flag, None)
        if val is None and section_key in cfg:
            val = cast(cfg[section_key])
            setattr(args, flag, val)
        out[section_key] = getattr(args, flag, None)
    return out


def _out_dir(args):
    d = Path(args.out or ".")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _parse_floats(text):
    return tuple(float(v) for v in str(text).split(","))


def build_parser():
    p = argparse.ArgumentParser(prog="nlheat",
                                description="heat kernels of perturbed "
                                            "fractional Laplacians")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None,
                   help="cap BLAS/FFT threads (0 = auto)")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--tol", type=float, default=None)
    sub = p.add_subparsers(dest="command", required=True)

    k = sub.add_parser("kernel", help="evaluate densities and envelopes")
    k.add_argument("--alpha", type=float, required=True)
    k.add_argument("--beta", type=float, default=None)
    k.add_argument("--d", type=int, default=1)
    k.add_argument("--a", type=float, default=0.0, help="beta-component weight")
    k.add_argument("--t", default="1.0", help="comma-separated times")
    k.add_argument("--r", default="0.0", help="comma-separated radii")
    k.add_argument("--what", default="pa",
                   choices=["p0", "pa", "grad", "hess", "h", "g", "f0", "f",
                            "envelope"])
    k.add_argument("--lam", type=float, default=None,
                   help="truncation radius for the f envelope")

    s = sub.add_parser("series", help="build the kernel series")
    s.add_argument("--b", required=True, help="coefficient preset")
    s.add_argument("--alpha", type=float, default=1.2)
    s.add_argument("--beta", type=float, default=0.6)
    s.add_argument("--times", default=None, help="comma-separated output times")
    s.add_argument("--t-max", type=float, default=0.25)
    s.add_argument("--n-max", type=int, default=12)

    c = sub.add_parser("check", help="run the verification suite")
    c.add_argument("--suite", default="default", help="'default' or a JSON path")

    m = sub.add_parser("simulate", help="simulate jump-SDE paths")
    m.add_argument("--c", default=None, help="coefficient c(x): expression or "
                                             "'const:VALUE'; omit for c == 0")
    m.add_argument("--alpha", type=float, default=1.2)
    m.add_argument("--beta", type=float, default=0.6)
    m.add_argument("--n", type=int, default=None)
    m.add_argument("--dt", type=float, default=None)
    m.add_argument("--horizon", type=float, default=None)
    m.add_argument("--save", default=None, help="comma-separated save times")
    m.add_argument("--raw-paths", action="store_true",
                   help="also export saved positions as CSV (large)")

    q = sub.add_parser("compare", help="Monte Carlo vs series kernel")
    q.add_argument("--b", default="sde", help="preset kind (sde uses --c)")
    q.add_argument("--c", default=None, help="c(x) expression for the sde preset")
    q.add_argument("--alpha", type=float, default=1.2)
    q.add_argument("--beta", type=float, default=0.6)
    q.add_argument("--t", type=float, default=0.25)
    q.add_argument("--n", type=int, default=None)
    q.add_argument("--dt", type=float, default=None)
    return p


def cmd_kernel(args, cfg):
    import numpy as np

    from .meta import json_header, write_json
    from .params import ComparisonWeight, ModelParams
    from .stable import (comparison_f, comparison_f0, comparison_g, comparison_h,
                         eval_pa, grad_p0, hess_p0, truncated_envelope)

    beta = args.beta if args.beta is not None else max(args.alpha / 2.0, 0.05)
    params = ModelParams(args.d, args.alpha, beta)
    times = _parse_floats(args.t)
    radii = np.asarray(_parse_floats(args.r))
    rows = []
    for t in times:
        if args.what in ("p0", "pa"):
            a = 0.0 if args.what == "p0" else args.a
            vals = eval_pa(params, a, t, radii)
        elif args.what == "grad":
            vals = [grad_p0(params, t, [r])[0] for r in radii]
        elif args.what == "hess":
            vals = [hess_p0(params, t, [r])[0, 0] for r in radii]
        elif args.what == "h":
            vals = comparison_h(params, ComparisonWeight(args.a), t, radii)
        elif args.what == "g":
            vals = comparison_g(params, args.a, t, radii)
        elif args.what == "f0":
            vals = comparison_f0(params, t, radii)
        elif args.what == "f":
            import math
            lam = args.lam if args.lam is not None else math.inf
            vals = comparison_f(params, ComparisonWeight(args.a, lam), t, radii)
        else:
            lo, hi = truncated_envelope(params, t, radii)
            vals = hi
        rows.extend((t, r, float(v)) for r, v in zip(radii, np.atleast_1d(vals)))
    out = _out_dir(args) / f"kernel_{args.what}.csv"
    with open(out, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "r", "value"])
        wr.writerows(rows)
    write_json(str(out) + ".json", json_header(
        kind="kernel_values", what=args.what,
        params={"d": args.d, "alpha": args.alpha, "beta": beta, "a": args.a},
        config_echo=cfg, times=list(times),
    ))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_series(args, cfg):
    from .operator import preset
    from .params import ModelParams
    from .series import SeriesDivergence, default_grid, sum_series

    params = ModelParams(1, args.alpha, args.beta)
    b = preset(args.b, params)
    times = _parse_floats(args.times) if args.times else (
        args.t_max / 2.0, args.t_max)
    grid = default_grid(times, b)
    try:
        fld, rep = sum_series(b, params, grid, n_max=args.n_max,
                              tol=args.tol or 1e-3)
    except SeriesDivergence as exc:
        print(f"series diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    out = _out_dir(args)
    field_path = out / "series_field.csv"
    fld.write_csv(field_path, extra_header={"config_echo": cfg})
    rep.write_json(out / "series_report.json")
    print(f"wrote {field_path} and series_report.json; "
          f"{rep.n_terms} terms, ratio {rep.ratio:.3f}, "
          f"horizon estimate {rep.horizon_estimate:.3g}")
    return EXIT_OK


def cmd_check(args, cfg):
    from .meta import write_json
    from .verify import default_suite, load_suite, run_suite, verdicts_to_json

    if args.suite == "default":
        specs = default_suite()
    else:
        specs = load_suite(args.suite)
    verdicts = run_suite(specs, emit=print)
    out = _out_dir(args) / "verdicts.json"
    write_json(out, verdicts_to_json(verdicts))
    n_fail = sum(1 for v in verdicts if v.status == "fail")
    print(f"{len(verdicts) - n_fail}/{len(verdicts)} checks passed; wrote {out}")
    return EXIT_OK if n_fail == 0 else EXIT_CHECK_FAILED


def _coefficient(args):
    if args.c is None:
        return None, "c0"
    if args.c.startswith("const:"):
        val = float(args.c.partition(":")[2])
        return (lambda x, v=val: v * __import__("numpy").ones_like(x)), args.c
    from .exprs import compile_expression

    fn = compile_expression(args.c)
    return fn, f"expr:{args.c}"


def cmd_simulate(args, cfg):
    import numpy as np

    from .mc import SimConfig, simulate_sde
    from .meta import json_header, write_json
    from .params import ModelParams

    params = ModelParams(1, args.alpha, args.beta)
    c_fn, c_id = _coefficient(args)
    save = _parse_floats(args.save) if args.save else (args.horizon or 1.0,)
    config = SimConfig(
        n_paths=args.n or 100_000, dt=args.dt or 1e-3,
        horizon=args.horizon or max(save), seed=args.seed or 0,
        save_times=save,
    )
    ens = simulate_sde(c_fn, params, config)
    out = _out_dir(args)
    summary = ens.summary()
    summary["c"] = c_id
    write_json(out / "ensemble_summary.json",
               json_header(kind="ensemble_summary", config_echo=cfg, **summary))
    if args.raw_paths:
        with open(out / "paths.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["path_id", "t", "x"])
            for t in ens.times:
                for i, x in enumerate(ens.at(t)):
                    wr.writerow([i, f"{t:g}", f"{x:.9e}"])
    print(f"wrote {out / 'ensemble_summary.json'}")
    return EXIT_OK


def cmd_compare(args, cfg):
    import numpy as np

    from .mc import SimConfig, compare_density, empirical_density, simulate_sde
    from .meta import json_header, write_json
    from .operator import preset
    from .params import ModelParams
    from .series import SeriesDivergence, default_grid, sum_series

    params = ModelParams(1, args.alpha, args.beta)
    expr = args.c or "1"
    b = preset(f"sde:{expr}" if args.b == "sde" else args.b, params)
    grid = default_grid((args.t / 2.0, args.t), b)
    try:
        fld, rep = sum_series(b, params, grid, tol=args.tol or 1e-3)
    except SeriesDivergence as exc:
        print(f"series diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    c_fn, c_id = _coefficient(args) if args.b == "sde" else (None, "c0")
    config = SimConfig(n_paths=args.n or 100_000, dt=args.dt or 1e-3,
                       horizon=args.t, seed=args.seed or 0,
                       save_times=(args.t,), log_jumps=False)
    ens = simulate_sde(c_fn, params, config)
    bins = np.linspace(-8.0, 8.0, 81)
    hist = empirical_density(ens, args.t, bins)
    row = fld.row(args.t, 0.0)
    xs = fld.grid.x_nodes
    comp = compare_density(hist, lambda y: np.interp(y, xs, row, left=0.0,
                                                    right=0.0))
    out = _out_dir(args) / "compare.json"
    write_json(out, json_header(
        kind="mc_vs_series", b_id=b.b_id, t=args.t, config_echo=cfg,
        tv_distance=comp.tv_distance, max_z=comp.max_z,
        overflow=[comp.overflow_empirical, comp.overflow_predicted],
        seed=config.seed, n_paths=config.n_paths,
    ))
    print(f"TV distance {comp.tv_distance:.4f} (max |z| {comp.max_z:.2f}); "
          f"wrote {out}")
    return EXIT_OK


COMMANDS = {
    "kernel": cmd_kernel,
    "series": cmd_series,
    "check": cmd_check,
    "simulate": cmd_simulate,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None and args.threads > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    cfg = _load_config(args.config) if args.config else {}
    for key in ("seed", "tol", "out"):
        if getattr(args, key, None) is None and key in cfg:
            cast = int if key == "seed" else (float if key == "tol" else str)
            setattr(args, key, cast(cfg[key]))
    return COMMANDS[args.command](args, cfg)


if __name__ == "__main__":
    sys.exit(main())
