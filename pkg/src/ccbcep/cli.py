"""Command-line front end.

    ccbcep solve --instance hearn --method pdc --tau 2 --eta 1
    ccbcep compare --instance hearn --methods m1,m2,pdc,oracle --tau 2 --eta 1
    ccbcep verify-trace result.json
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, baselines, costs
from .network import BUILTINS, builtin_instance, load_instance, scale_offbenchmark
from .pdc import BETA_RULES, PdcConfig, TraceRow, final_gap, pdc_solve, recompute_e3

log = logging.getLogger("ccbcep")

SCHEMA = 1
METHODS = ("pdc", "m1", "m2", "oracle", "refs", "so")


class CliError(Exception):
    pass


# ------------------------------------------------------------------ inputs

def load_from_args(args):
    """(net, demand, instance description) from the parsed arguments."""
    if args.instance and args.net:
        raise CliError("give either --instance or --net/--trips, not both")
    if args.instance:
        net, dem = builtin_instance(args.instance)
        desc = {"builtin": args.instance}
    elif args.net and args.trips:
        exp = Path(args.expansion).read_text() if args.expansion else None
        net, dem = load_instance(Path(args.net).read_text(), Path(args.trips).read_text(), exp,
                                 default_bcoef=args.default_bcoef)
        desc = {"net": str(args.net), "trips": str(args.trips),
                "expansion": str(args.expansion) if args.expansion else None,
                "default_bcoef": args.default_bcoef}
    else:
        raise CliError("an instance is required: --instance NAME or --net FILE --trips FILE")
    if args.scale_b_offbenchmark is not None:
        net = scale_offbenchmark(net, args.scale_b_offbenchmark)
        desc["scale_b_offbenchmark"] = args.scale_b_offbenchmark
    return net, dem, desc


def instance_from_desc(desc):
    if "builtin" in desc:
        net, dem = builtin_instance(desc["builtin"])
    else:
        exp = Path(desc["expansion"]).read_text() if desc.get("expansion") else None
        net, dem = load_instance(Path(desc["net"]).read_text(), Path(desc["trips"]).read_text(), exp,
                                 default_bcoef=desc.get("default_bcoef", 1.0))
    if desc.get("scale_b_offbenchmark") is not None:
        net = scale_offbenchmark(net, desc["scale_b_offbenchmark"])
    return net, dem


def pdc_config(args):
    eps1 = args.eps1 if args.eps1 is not None else args.eps
    eps2 = args.eps2 if args.eps2 is not None else args.eps
    eps3 = args.eps3 if args.eps3 is not None else args.eps
    return PdcConfig(tau=args.tau, eta=args.eta, eps1=eps1, eps2=eps2, eps3=eps3, rho0=args.rho0,
                     sigma=args.sigma, theta_l=args.theta_l, theta_u=args.theta_u,
                     beta_rule=args.beta_rule, inner_tol=args.inner_tol, assign_tol=args.assign_tol,
                     max_outer=args.max_outer, max_inner=args.max_inner)


# ----------------------------------------------------------------- running

def _links(net, y, zero_tol):
    return [int(a) + 1 for a in np.flatnonzero(np.asarray(y) > zero_tol)]


def _json_float(x):
    x = float(x)
    return x if math.isfinite(x) else None


def run_method(method, net, dem, args, refs=None):
    """Run one method; returns (result dict, trace rows or None)."""
    zero_tol = baselines.default_zero_tol(net)
    t0 = time.perf_counter()
    trace = None
    extra = {}
    if method == "refs":
        refs = baselines.compute_references(net, dem, args.eta, tol=args.ref_tol)
        out = {"f0": refs.f0, "fso": refs.fso, "wall_time_s": time.perf_counter() - t0}
        return out, None
    if method == "so":
        so = baselines.solve_so(net, dem, args.eta, tol=args.ref_tol)
        y, v, F = so.y, so.v, so.objective
        extra = {"so_converged": so.converged}
    elif method == "pdc":
        cfg = pdc_config(args)
        y, flow, cert, tr = pdc_solve(net, dem, cfg)
        v = flow.v
        trace = tr.rows
        phi, g, rg = final_gap(net, dem, y, v)
        extra = {"certificate": {"eps_feasibility": cert.eps_feasibility, "eps1": cert.eps1,
                                 "eps2": cert.eps2, "mu": cert.mu, "converged": cert.converged,
                                 "iterations": cert.iterations, "phi_final": phi,
                                 "phi_ue_rel_gap": rg},
                 "F_iterate": costs.designer_objective(net, y, v, args.eta)}
    elif method == "m1":
        r = baselines.run_m1(net, dem, args.eta, args.tau, grad=args.grad)
        y = r.y
        extra = {"scores": [_json_float(s) for s in r.scores]}
    elif method == "m2":
        r = baselines.run_m2(net, dem, args.eta, args.tau, alpha0=args.alpha0, gamma_c=args.gamma_c,
                             gamma_r=args.gamma_r, grad=args.grad)
        y = r.y
        extra = {"alpha": r.alpha, "alpha_log": [list(e) for e in r.log.entries], "ok": r.ok}
    elif method == "oracle":
        r = baselines.brute_force_ccbcep(net, dem, args.eta, args.tau, grid=args.grid)
        y = r.y
        extra = {"n_evals": r.n_evals}
    else:
        raise CliError(f"unknown method {method!r}")
    if method != "so":
        F, res = baselines.equilibrium_objective(net, dem, args.eta, y)
        v = res.v if method != "pdc" else v
    wall = time.perf_counter() - t0
    out = {"y": {str(a + 1): float(y[a]) for a in range(net.n_links)},
           "v": [float(x) for x in v], "F": F, "support": _links(net, y, zero_tol),
           "wall_time_s": wall}
    if refs is not None:
        out["relative"] = baselines.relative_scale(F, refs)
    out.update(extra)
    return out, trace


def write_trace_csv(path, rows, omit_timing=False):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TraceRow.CSV_FIELDS)
        for r in rows:
            vals = r.csv_row()
            if omit_timing:
                vals[TraceRow.CSV_FIELDS.index("elapsed_s")] = ""
            w.writerow([repr(float(x)) if isinstance(x, float) else x for x in vals])


def _trace_dicts(rows, omit_timing):
    out = []
    for r in rows:
        d = r.to_dict()
        if omit_timing:
            d["elapsed_s"] = None
        out.append(d)
    return out


def _strip_timing(obj):
    if isinstance(obj, dict):
        return {k: (None if k in ("wall_time_s", "elapsed_s") else _strip_timing(v)) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_strip_timing(x) for x in obj]
    return obj


def _print_summary(method, res, stream=None):
    stream = sys.stdout if stream is None else stream
    rows = [("method", method)]
    for key in ("f0", "fso", "F", "relative", "support", "alpha", "wall_time_s"):
        if key in res and res[key] is not None:
            val = res[key]
            rows.append((key, f"{val:.6g}" if isinstance(val, float) else str(val)))
    if "certificate" in res:
        c = res["certificate"]
        rows.append(("converged", str(c["converged"])))
        rows.append(("iterations", str(c["iterations"])))
        rows.append(("phi_final", f"{c['phi_final']:.3e}"))
    width = max(len(k) for k, _ in rows)
    for k, v in rows:
        print(f"{k:<{width}}  {v}", file=stream)


def cmd_solve(args):
    net, dem, desc = load_from_args(args)
    refs = None
    if args.method not in ("refs",) and not args.no_refs:
        refs = baselines.compute_references(net, dem, args.eta, tol=args.ref_tol)
    res, trace = run_method(args.method, net, dem, args, refs)
    doc = {"schema": SCHEMA, "version": __version__, "command": "solve", "method": args.method,
           "instance": desc, "config": _config_dict(args),
           "refs": {"f0": refs.f0, "fso": refs.fso} if refs is not None else None,
           "result": res}
    if trace is not None:
        doc["trace"] = _trace_dicts(trace, args.omit_timing)
        if args.out_trace:
            write_trace_csv(args.out_trace, trace, args.omit_timing)
    if args.omit_timing:
        doc = _strip_timing(doc)
    if args.out_json:
        Path(args.out_json).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    _print_summary(args.method, res)
    return 0


def cmd_compare(args):
    net, dem, desc = load_from_args(args)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in ("pdc", "m1", "m2", "oracle"):
            raise CliError(f"compare supports pdc, m1, m2, oracle; got {m!r}")
    refs = baselines.compute_references(net, dem, args.eta, tol=args.ref_tol)
    table = []
    traj = []
    results = {}
    for m in methods:
        res, trace = run_method(m, net, dem, args, refs)
        results[m] = res
        table.append((m, res["relative"], res["F"], res["wall_time_s"]))
        if trace:
            best = math.inf
            for r in trace:
                best = min(best, baselines.relative_scale(r.F, refs))
                traj.append((m, r.elapsed_s, best))
        traj.append((m, res["wall_time_s"], res["relative"]))
    if args.out_csv:
        with open(args.out_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("method", "relative", "F", "time_s"))
            for row in table:
                w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])
    if args.out_trajectory:
        with open(args.out_trajectory, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("method", "time_s", "best_relative"))
            for row in traj:
                w.writerow([row[0], repr(float(row[1])), repr(float(row[2]))])
    if args.out_json:
        doc = {"schema": SCHEMA, "version": __version__, "command": "compare", "instance": desc,
               "config": _config_dict(args), "refs": {"f0": refs.f0, "fso": refs.fso},
               "results": results}
        if args.omit_timing:
            doc = _strip_timing(doc)
        Path(args.out_json).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    print(f"f0 = {refs.f0:.6g}   fso = {refs.fso:.6g}")
    print(f"{'method':<8}{'relative':>12}{'F':>14}{'time_s':>10}")
    for m, rel, F, t in table:
        print(f"{m:<8}{rel:>12.4f}{F:>14.6g}{t:>10.2f}")
    return 0


def cmd_verify_trace(args):
    doc = json.loads(Path(args.result).read_text())
    if doc.get("schema") != SCHEMA:
        raise CliError(f"unsupported schema {doc.get('schema')!r}")
    rows = doc.get("trace")
    if not rows:
        raise CliError("result file holds no trace")
    net, _ = instance_from_desc(doc["instance"])
    worst = 0.0
    bad = []
    for d in rows:
        row = TraceRow(**{k: (np.asarray(v) if isinstance(v, list) and k != "psi" else v)
                          for k, v in d.items()})
        e3 = recompute_e3(row, net)
        err = abs(e3 - row.e3) / max(abs(row.e3), 1e-300)
        worst = max(worst, err)
        if err > args.rtol:
            bad.append((row.k, row.e3, e3))
    print(f"rows: {len(rows)}  worst relative e3 mismatch: {worst:.3e}")
    for k, logged, again in bad:
        print(f"  k={k}: logged {logged!r}, recomputed {again!r}")
    return 1 if bad else 0


def _config_dict(args):
    skip = {"func", "command"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


# ------------------------------------------------------------------ parser

def _add_instance(p):
    g = p.add_argument_group("instance")
    g.add_argument("--instance", choices=BUILTINS)
    g.add_argument("--net", help="TNTP _net.tntp file")
    g.add_argument("--trips", help="TNTP _trips.tntp file")
    g.add_argument("--expansion", help="sidecar rows: link_id umax bcoef")
    g.add_argument("--default-bcoef", type=float, default=1.0)
    g.add_argument("--scale-b-offbenchmark", type=float, default=None, metavar="XI",
                   help="multiply b_a by XI outside the Sioux-Falls benchmark links")


def _add_solver(p):
    g = p.add_argument_group("model and solver")
    g.add_argument("--tau", type=int, default=2)
    g.add_argument("--eta", type=float, default=1.0)
    g.add_argument("--rho0", type=float, default=1.0)
    g.add_argument("--sigma", type=float, default=1.25)
    g.add_argument("--theta-l", type=float, default=10.0)
    g.add_argument("--theta-u", type=float, default=20.0)
    g.add_argument("--beta-rule", choices=BETA_RULES, default="midpoint")
    g.add_argument("--eps", type=float, default=1e-3, help="sets eps1, eps2 and eps3")
    g.add_argument("--eps1", type=float)
    g.add_argument("--eps2", type=float)
    g.add_argument("--eps3", type=float)
    g.add_argument("--assign-tol", type=float, default=1e-10)
    g.add_argument("--inner-tol", type=float, default=1e-8)
    g.add_argument("--max-outer", type=int, default=1000)
    g.add_argument("--max-inner", type=int, default=500)
    g.add_argument("--ref-tol", type=float, default=1e-8)
    g.add_argument("--grad", choices=baselines.GRAD_METHODS, default="fd",
                   help="F* gradient for m1/m2 descent")
    g.add_argument("--alpha0", type=float, default=0.1)
    g.add_argument("--gamma-c", type=float, default=2.0)
    g.add_argument("--gamma-r", type=float, default=0.95)
    g.add_argument("--grid", type=int, default=25, help="oracle grid points per axis")
    g.add_argument("--threads", type=int, default=1,
                   help="accepted for interface compatibility; runs single-threaded")


def _add_output(p):
    g = p.add_argument_group("output")
    g.add_argument("--out-json")
    g.add_argument("--omit-timing", action="store_true",
                   help="write timing fields as null so repeated runs are byte-identical")


def build_parser():
    parser = argparse.ArgumentParser(prog="ccbcep", description=__doc__.splitlines()[0] if __doc__ else None)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="run one method on one instance")
    _add_instance(p)
    p.add_argument("--method", choices=METHODS, default="pdc")
    _add_solver(p)
    _add_output(p)
    p.add_argument("--out-trace", help="per-iteration CSV (pdc only)")
    p.add_argument("--no-refs", action="store_true", help="skip f0/fso and the relative score")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("compare", help="run several methods on one instance")
    _add_instance(p)
    p.add_argument("--methods", default="m1,m2,pdc")
    _add_solver(p)
    _add_output(p)
    p.add_argument("--out-csv")
    p.add_argument("--out-trajectory")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("verify-trace", help="recompute e3 from a result JSON")
    p.add_argument("result")
    p.add_argument("--rtol", type=float, default=1e-9)
    p.set_defaults(func=cmd_verify_trace)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CliError, ValueError, RuntimeError, OSError) as exc:
        print(f"ccbcep: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
