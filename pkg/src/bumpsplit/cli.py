"""Command-line entry point.

    bumpsplit solve     --domain D.json --k 6 --h 0.02
    bumpsplit hadamard  --domain D.json --edge 0 --s0 0.5 --c 0.1 --index 1
    bumpsplit split     --domain D.json --x 0.5,0 --epsilon 0.12 --M 0.4
    bumpsplit simplify  --domain D.json --K 6 --epsilon 0.3 --x 0.5,0
    bumpsplit report    --out DIR

Exit codes: 0 success, 2 bad input, 3 numerical failure, 4 partial success.
Errors are reported as one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .eigen import calibrate_tau, detect_clusters, solve_lowest
from .errors import BumpsplitError, InvalidParameterError
from .fem import assemble, to_coo_text
from .geometry import BumpSpec, DeformationField, PolygonalDomain, lipschitz_constant, load_domain
from .mesh import mesh_to_text, triangulate
from .shape import boundary_trace, discriminant, fd_rates, hadamard_matrix, traces_to_csv
from .splitter import SplitBudget, SplitConfig, jsonable, simplify_spectrum, split_once
from .svg import domain_svg, field_svg, line_plot_svg, mesh_svg

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_PARTIAL = 0, 2, 3, 4


def write_atomic(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _point(text):
    try:
        x, y = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected X,Y, got {text!r}") from None
    return (x, y)


def _positive(kind):
    def parse(text):
        v = kind(text)
        if not v > 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v

    return parse


def build_parser():
    p = argparse.ArgumentParser(prog="bumpsplit", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--domain", help="domain description (JSON)")
    common.add_argument("--h", type=_positive(float), default=0.02, help="mesh size (default 0.02)")
    common.add_argument("--tol", type=_positive(float), default=1e-8, help="eigen residual tolerance")
    common.add_argument("--tau", type=float, default=None, help="cluster tolerance (default: calibrated at h)")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--svg", action="store_true", help="write SVG figures")
    common.add_argument("--csv", action="store_true", help="also write boundary trace tables (solve)")
    common.add_argument("--mesh-export", action="store_true", help="write mesh and matrices as text")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", parents=[common], help="lowest eigenpairs and clusters")
    s.add_argument("--k", type=_positive(int), default=6)

    s = sub.add_parser("hadamard", parents=[common], help="shape derivative vs finite differences")
    s.add_argument("--k", type=_positive(int), default=None, help="eigenpairs to solve")
    s.add_argument("--index", type=_positive(int), default=1, help="eigenvalue index; its whole cluster is used")
    s.add_argument("--edge", type=int, required=True)
    s.add_argument("--s0", type=float, required=True)
    s.add_argument("--c", type=_positive(float), default=0.1)
    s.add_argument("--t0", type=float, default=1e-3)

    s = sub.add_parser("split", parents=[common], help="one split of the first degenerate cluster")
    s.add_argument("--k", type=_positive(int), default=None)
    s.add_argument("--x", type=_point, required=True, help="ball centre X,Y")
    s.add_argument("--epsilon", type=_positive(float), required=True, help="ball radius")
    s.add_argument("--M", type=float, default=0.4)

    s = sub.add_parser("simplify", parents=[common], help="split every degenerate eigenvalue among the first K")
    s.add_argument("--K", type=_positive(int), default=6)
    s.add_argument("--epsilon", type=float, required=True)
    s.add_argument("--x", type=_point, required=True)
    s.add_argument("--M", type=float, default=0.4)

    s = sub.add_parser("report", parents=[common], help="summarize a simplify output directory")
    return p


def _need_domain(args):
    if not args.domain:
        raise InvalidParameterError("--domain is required")
    try:
        return load_domain(args.domain)
    except FileNotFoundError:
        raise InvalidParameterError(f"domain file not found: {args.domain}") from None


def _tau(args):
    return calibrate_tau(args.h) if args.tau is None else args.tau


def _solve(domain, args, k):
    mesh = triangulate(domain, args.h)
    system = assemble(mesh, domain.bc, domain.sigma)
    if k > system.n_dofs:
        raise InvalidParameterError(f"k = {k} exceeds the {system.n_dofs} degrees of freedom")
    spec = detect_clusters(solve_lowest(system, k, args.tol), _tau(args))
    return mesh, system, spec


def _export_mesh(out, mesh, system):
    write_atomic(out / "mesh.txt", mesh_to_text(mesh))
    write_atomic(out / "K.coo", to_coo_text(system.A))
    write_atomic(out / "M.coo", to_coo_text(system.Mr))


def _cluster_report(spec):
    return {
        "tau": spec.tau,
        "lambdas": spec.lambdas.tolist(),
        "clusters": [
            {"r": c.r, "m": c.m, "width": c.width, "rel_gap_below": c.rel_gap_below, "rel_gap_above": c.rel_gap_above}
            for c in spec.clusters
        ],
    }


def _dump(obj):
    def fix(v):
        if isinstance(v, float) and not np.isfinite(v):
            return str(v)
        if isinstance(v, dict):
            return {k: fix(x) for k, x in v.items()}
        if isinstance(v, list):
            return [fix(x) for x in v]
        return v

    return json.dumps(fix(obj), indent=2) + "\n"


def cmd_solve(args):
    domain = _need_domain(args)
    out = Path(args.out)
    mesh, system, spec = _solve(domain, args, args.k)
    write_atomic(out / "spectrum.csv", spec.to_csv())
    write_atomic(out / "clusters.json", _dump(_cluster_report(spec)))
    if args.svg:
        for p in spec.pairs:
            write_atomic(out / f"mode_{p.index:02d}.svg", field_svg(mesh, system.expand(p.vector), f"lambda = {p.lam:.6g}"))
        write_atomic(out / "mesh.svg", mesh_svg(mesh))
    if args.csv:
        for edge in domain.edges:
            traces = [boundary_trace(mesh, system, p, edge.id) for p in spec.pairs]
            write_atomic(out / f"traces_edge{edge.id}.csv", traces_to_csv(traces, 0.0))
    if args.mesh_export:
        _export_mesh(out, mesh, system)
    print(spec.to_csv(), end="")
    return EXIT_OK


def cmd_hadamard(args):
    domain = _need_domain(args)
    out = Path(args.out)
    k = args.k or args.index + 4
    mesh, system, spec = _solve(domain, args, k)
    if args.index > spec.k:
        raise InvalidParameterError("--index exceeds --k")
    cl = spec.clusters[spec.cluster_of(args.index)]
    pairs = [spec.pair(i) for i in cl.indices]
    fld = DeformationField.from_domain(domain, BumpSpec(args.edge, args.s0, args.c))
    report = hadamard_matrix(mesh, system, pairs, fld)
    notice = None
    if args.t0 > 0:
        ts = [args.t0, args.t0 / 2, args.t0 / 4]
        report.fd_rates.update(fd_rates(mesh, system, cl.indices, fld, ts, k=k, tol=min(args.tol, 1e-10)))
    else:
        notice = "t0 <= 0: finite differences skipped"
        print(json.dumps({"notice": notice}), file=sys.stderr)
    body = report.to_dict()
    if notice:
        body["notice"] = notice
    write_atomic(out / "hadamard.json", _dump(body))
    traces = [boundary_trace(mesh, system, p, args.edge) for p in pairs]
    write_atomic(out / f"discriminant_edge{args.edge}.csv", traces_to_csv(traces, report.c_used))
    if args.svg:
        write_atomic(
            out / f"discriminant_edge{args.edge}.svg",
            line_plot_svg(traces[0].s, [discriminant(t, report.c_used) for t in traces], [f"g{i}" for i in cl.indices]),
        )
    lines = [f"predicted rates: {report.predicted_rates.tolist()}"]
    disc = report.discrete_errors()
    for t, fd, err in report.fd_table():
        lines.append(f"t={t:.3e}  fd={fd.tolist()}  rel_err={err:.3e}  rel_err_discrete={disc.get(t, float('nan')):.3e}")
    print("\n".join(lines))
    return EXIT_OK


def _config(args):
    return SplitConfig(h=args.h, tol=args.tol, tau=args.tau, M_cap=args.M)


def cmd_split(args):
    domain = _need_domain(args)
    out = Path(args.out)
    cfg = _config(args)
    k = args.k or 11
    mesh, system, spec = _solve(domain, args, k)
    degenerate = spec.degenerate()
    if not degenerate:
        write_atomic(out / "clusters.json", _dump(_cluster_report(spec)))
        print("spectrum already simple; nothing to split")
        return EXIT_OK
    cl = degenerate[0]
    budget = SplitBudget.for_cluster(spec, cl, args.M)
    new, rec = split_once(domain, spec, cl, (np.array(args.x), args.epsilon), budget, cfg)
    write_atomic(out / "split_domain.json", new.to_json() + "\n")
    write_atomic(out / "split_record.json", json.dumps(jsonable(rec.to_dict()), indent=2) + "\n")
    if args.svg:
        write_atomic(out / "split.svg", domain_svg([domain, new], marks=[(args.x, args.epsilon)]))
    print(f"split cluster r={cl.r} m={cl.m}: edge {rec.edge_id} s0={rec.s0:.6g} c={rec.c:.4g} t={rec.t:.4g}")
    return EXIT_OK


def cmd_simplify(args):
    domain = _need_domain(args)
    if not args.epsilon > 0:
        raise InvalidParameterError("--epsilon must be positive")
    out = Path(args.out)
    cfg = _config(args)
    final, trace = simplify_spectrum(domain, args.K, args.epsilon, args.x, cfg)
    write_atomic(out / "trace.csv", trace.to_csv())
    write_atomic(out / "trace.json", trace.to_json() + "\n")
    write_atomic(out / "final_domain.json", final.to_json() + "\n")
    write_atomic(out / "input_domain.json", domain.to_json() + "\n")
    write_atomic(
        out / "overlay.svg",
        domain_svg([domain, final], title="input (black) and final (red)", marks=[(args.x, args.epsilon)]),
    )
    if args.mesh_export:
        mesh = triangulate(final, args.h)
        _export_mesh(out, mesh, assemble(mesh, final.bc, final.sigma))
    print(f"{trace.status}: {trace.iterations} split(s); first {args.K} simple = {trace.final_simple}")
    if trace.reason:
        print(trace.reason)
    return EXIT_OK if trace.final_simple else EXIT_PARTIAL


def cmd_report(args):
    out = Path(args.out)
    src = out / "trace.json"
    if not src.exists():
        raise InvalidParameterError(f"no trace.json in {out}")
    trace = json.loads(src.read_text())
    lines = [
        f"status: {trace['status']}  {trace['reason']}".rstrip(),
        f"K = {trace['K_target']}, epsilon = {trace['epsilon']}, x = {tuple(trace['x'])}, tau = {trace['tau']:.3e}",
        f"splits: {len(trace['records'])}, r_n = {trace['r_sequence']}",
        f"Lipschitz: {trace['lipschitz_in']:.6g} -> {trace['lipschitz_out']:.6g} (budget {trace['lipschitz_budget']})",
        f"localized in B_eps(x): {trace['localized']}",
        "",
        "iteration  r  m  edge  s0  c  t  max|shift|  points",
    ]
    for rec in trace["records"]:
        shift = max(abs(s) for s in rec["shifts"])
        pts = "".join(k for k, v in sorted(rec["points"].items()) if v)
        lines.append(
            f"{rec['n']}  {rec['r']}  {rec['m']}  {rec['edge_id']}  {rec['s0']:.6g}  {rec['c']:.4g}  "
            f"{rec['t']:.4g}  {shift:.3e}  {pts}"
        )
    lines += ["", "first eigenvalues (initial -> final):"]
    for i, (a, b) in enumerate(zip(trace["initial"], trace["final"]), 1):
        lines.append(f"{i:3d}  {a:.10g}  {b:.10g}")
    text = "\n".join(lines) + "\n"
    write_atomic(out / "report.txt", text)
    if (out / "final_domain.json").exists() and (out / "input_domain.json").exists():
        a = PolygonalDomain.from_json((out / "input_domain.json").read_text())
        b = PolygonalDomain.from_json((out / "final_domain.json").read_text())
        write_atomic(out / "overlay.svg", domain_svg([a, b]))
        text += f"final Lipschitz constant recomputed: {lipschitz_constant(b):.6g}\n"
    print(text, end="")
    return EXIT_OK


COMMANDS = {
    "solve": cmd_solve,
    "hadamard": cmd_hadamard,
    "split": cmd_split,
    "simplify": cmd_simplify,
    "report": cmd_report,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except BumpsplitError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}), file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": EXIT_INPUT}), file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
