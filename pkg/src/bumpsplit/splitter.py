"""Bump placement that splits degenerate eigenvalues, one cluster at a time.

`split_once` takes the first degenerate cluster, picks a bump centre inside
a given ball where the cluster's boundary discriminants separate, and
searches for the largest bump amplitude that keeps every measured budget:

1. the boundary only changes inside the ball (by construction, checked);
2. eigenvalues up to index r+m+1 move by at most M * d_r;
3. the cluster's relative internal gap exceeds ``split_factor`` times its
   width before the bump, and the multiplicity drops under the clustering
   tolerance;
4. eigenvalues above the cluster stay above lambda_r.

Amplitudes are compared on one mesh: a zero-height bump is spliced into
the polygon, triangulated once, and the mesh is then moved by the
deformation field, so the measured shifts carry no remeshing noise. The
accepted bump is then applied to the polygon and the next iteration
remeshes.

`simplify_spectrum` drives the loop over disjoint, halving balls along a
flat piece of boundary until the first K eigenvalues are simple.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .eigen import LAMBDA_FLOOR, calibrate_tau, detect_clusters, gap_quantity, solve_lowest
from .errors import (
    AmplitudeTooLargeError,
    BudgetError,
    BumpPlacementError,
    DegenerateDiscriminantError,
    GeometryError,
    InvalidParameterError,
    InvariantError,
    SplitFailedError,
)
from .fem import assemble
from .geometry import (
    BC,
    BumpSpec,
    DeformationField,
    apply_bump,
    boundary_changes,
    deformation_c1_norm,
    flatten_patch,
    lipschitz_constant,
    splice_bump,
)
from .mesh import move_mesh, triangulate
from .shape import boundary_trace, c_constant, select_bump_center

log = logging.getLogger(__name__)

THREADS_ENV = "SPEC_SPLIT_THREADS"


def worker_count(default=4):
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise InvalidParameterError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
        return max(1, n)
    return max(1, min(default, os.cpu_count() or 1))


@dataclass(frozen=True)
class SplitBudget:
    M: float
    d_r: float
    r: int
    m: int
    tail_floor: float  # lambda_r

    def __post_init__(self):
        if not (0.0 < self.M < 0.5):
            raise BudgetError(f"budget constant M must lie in (0, 1/2), got {self.M!r}")
        if not self.d_r > 0:
            raise BudgetError("gap quantity d_r must be positive")

    @property
    def shift_cap(self):
        return self.M * self.d_r

    @classmethod
    def for_cluster(cls, spectrum, cluster, M):
        d = gap_quantity(spectrum, cluster.r, cluster.m)
        return cls(float(M), d, cluster.r, cluster.m, float(spectrum.lambdas[cluster.r - 1]))


@dataclass
class SplitConfig:
    h: float = 0.02
    tol: float = 1e-8
    tau: float | None = None  # None: calibrate on the unit square at h
    split_factor: float = 10.0
    delta: float = 0.1  # C^1 budget for each bump
    max_iter: int = 20
    extra_pairs: int = 5
    min_bump_radius: float | None = None  # None: h / 4
    ladder: int = 8
    bisect_steps: int = 6
    threads: int | None = None
    resolution: int = 64
    flatten_r: float | None = None  # None: epsilon / 4
    flatten_R: float | None = None  # None: 3 epsilon / 4
    t_max: float | None = None
    M_cap: float = 0.4  # M_n = min(M_cap, 2^-(n+1))

    def resolved_tau(self):
        return calibrate_tau(self.h) if self.tau is None else float(self.tau)

    def bump_floor(self):
        return self.h / 4 if self.min_bump_radius is None else float(self.min_bump_radius)


@dataclass
class Evaluation:
    t: float
    mesh_ok: bool
    c1_norm: float
    lambdas: np.ndarray | None = None
    shift_max: float = math.nan
    point2: bool = False
    point4: bool = False
    rel_gap: float = 0.0
    point3: bool = False
    note: str = ""

    @property
    def feasible(self):
        return self.mesh_ok and self.point2 and self.point4

    @property
    def success(self):
        return self.feasible and self.point3


@dataclass
class IterationRecord:
    n: int
    ball_center: tuple
    ball_radius: float
    M: float
    r: int
    m: int
    d_r: float
    shift_cap: float
    edge_id: int
    s0: float
    c: float
    t: float
    c1_norm: float
    separation: float
    pre: list
    post: list
    shifts: list
    pre_width: float
    post_gap: float
    stability: list
    points: dict
    monotone: bool | None
    evaluations: list = field(default_factory=list)

    def to_dict(self):
        d = asdict(self)
        d["evaluations"] = [
            {k: v for k, v in asdict(e).items() if k != "lambdas"} if isinstance(e, Evaluation) else e
            for e in self.evaluations
        ]
        return d


@dataclass
class SplitTrace:
    K_target: int
    epsilon: float
    x: tuple
    tau: float
    status: str = "success"
    reason: str = ""
    flattened: bool = False
    records: list = field(default_factory=list)
    r_sequence: list = field(default_factory=list)
    initial: list = field(default_factory=list)
    final: list = field(default_factory=list)
    final_simple: bool = False
    lipschitz_in: float = math.nan
    lipschitz_out: float = math.nan
    lipschitz_budget: float = math.nan
    localized: bool = True
    simplicity_preserved: bool = True

    @property
    def iterations(self):
        return len(self.records)

    def to_dict(self):
        d = asdict(self)
        d["records"] = [r.to_dict() for r in self.records]
        return d

    def to_json(self):
        return json.dumps(jsonable(self.to_dict()), indent=2)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "r_n", "m", "t", "s0", "shift_max", "ratio_max"])
        for rec in self.records:
            ratio = max(rec.stability) if rec.stability else math.nan
            shift = max(abs(s) for s in rec.shifts) if rec.shifts else math.nan
            w.writerow([rec.n, rec.r, rec.m, repr(rec.t), repr(rec.s0), repr(shift), repr(ratio)])
        return buf.getvalue()


def jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


# ---------------------------------------------------------------------------
# single split


def _chord(edge, center, radius):
    """Arclength interval of ``edge`` inside the disk, or None."""
    f = edge.start - center
    b = f @ edge.tangent
    cc = f @ f - radius * radius
    disc = b * b - cc
    if disc <= 0:
        return None
    sq = math.sqrt(disc)
    lo, hi = max(0.0, -b - sq), min(edge.length, -b + sq)
    return (lo, hi) if hi > lo else None


def _candidate_edges(domain, center, radius, a):
    out = []
    for e in domain.edges:
        ch = _chord(e, center, radius)
        if ch is None:
            continue
        lo = max(ch[0] + a, a * (1 + 1e-9))
        hi = min(ch[1] - a, e.length - a * (1 + 1e-9))
        if hi > lo:
            out.append((e, (lo, hi)))
    return out


def _block_gap(lam, r, m):
    block = lam[r - 1 : r + m - 1]
    return float(np.max(np.diff(block) / np.maximum(np.abs(block[:-1]), LAMBDA_FLOOR)))


def _block_width(lam, r, m):
    block = lam[r - 1 : r + m - 1]
    return float((block[-1] - block[0]) / max(abs(block[0]), LAMBDA_FLOOR))


def _evaluate(ctx, t):
    c1 = deformation_c1_norm(ctx["field"], t)
    ev = Evaluation(float(t), True, c1)
    if c1 > ctx["delta"] * (1 + 1e-12):
        ev.mesh_ok = False
        ev.note = "C1 budget exceeded"
        return ev
    try:
        moved = move_mesh(ctx["mesh"], ctx["field"], t)
    except AmplitudeTooLargeError as exc:
        ev.mesh_ok = False
        ev.note = str(exc)
        return ev
    sysm = assemble(moved, ctx["bc"], ctx["sigma"])
    lam = solve_lowest(sysm, ctx["k"], ctx["tol"]).lambdas
    pre = ctx["pre"]
    b = ctx["budget"]
    r, m = b.r, b.m
    upto = min(r + m + 1, len(lam))
    shifts = lam - pre
    ev.lambdas = lam
    ev.shift_max = float(np.max(np.abs(shifts[:upto])))
    ev.point2 = bool(ev.shift_max <= b.shift_cap)
    ev.point4 = bool(np.all(lam[r + m - 1 :] > pre[r - 1]))
    ev.rel_gap = _block_gap(lam, r, m)
    ev.point3 = bool(ev.rel_gap >= ctx["split_factor"] * ctx["pre_width"] and ev.rel_gap >= ctx["tau"])
    return ev


def _search_amplitude(ctx, t_cap, ladder, bisect_steps, threads):
    ts = [t_cap * 2.0**-j for j in range(ladder)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        evals = list(pool.map(lambda t: _evaluate(ctx, t), ts))
    history = list(evals)
    ok = [e for e in evals if e.success]
    if not ok:
        return None, history
    best = max(ok, key=lambda e: e.t)
    j = ts.index(best.t)
    if j == 0:
        return best, history
    lo, hi = best.t, ts[j - 1]
    for _ in range(bisect_steps):
        mid = 0.5 * (lo + hi)
        ev = _evaluate(ctx, mid)
        history.append(ev)
        if ev.success:
            lo, best = mid, ev
        else:
            hi = mid
    return best, history


def stability_ratio(pre, post, c1_norm, n_max, noise=None):
    """``|shift_n| / (max(post_n, pre_n, 1) * c1_norm)`` for n = 1..n_max.

    With ``noise`` (absolute per-index discretization error, scalar or
    array) a second list flags ratios whose shift is below ten times it.
    """
    pre = np.asarray(getattr(pre, "lambdas", pre), dtype=float)
    post = np.asarray(getattr(post, "lambdas", post), dtype=float)
    if not c1_norm > 0:
        raise InvalidParameterError("c1_norm must be positive")
    if len(pre) < n_max or len(post) < n_max:
        raise InvalidParameterError(f"need {n_max} eigenvalues in both spectra")
    a, b = pre[:n_max], post[:n_max]
    shift = np.abs(b - a)
    ratio = shift / (np.maximum(np.maximum(a, b), LAMBDA_FLOOR) * c1_norm)
    if noise is None:
        return ratio.tolist()
    flags = (shift < 10.0 * np.broadcast_to(np.asarray(noise, dtype=float), shift.shape)).tolist()
    return ratio.tolist(), flags


def split_once(domain, spectrum, cluster, ball, budget, config=None, n=0):
    """Split ``cluster`` with one bump inside ``ball = (center, radius)``.

    Returns ``(new_domain, record)``.
    """
    cfg = config or SplitConfig()
    center = np.asarray(ball[0], dtype=float)
    radius = float(ball[1])
    a = radius / 2.0
    if cluster.m < 2:
        raise InvalidParameterError("cluster is already simple")
    if spectrum.k < cluster.r + cluster.m + 1:
        raise InvalidParameterError("spectrum too short for the split budgets")
    mesh = spectrum.system.mesh
    if mesh.domain is not domain:
        raise InvalidParameterError("spectrum was not solved on this domain")
    tau = spectrum.tau if spectrum.tau is not None else cfg.resolved_tau()
    threads = cfg.threads or worker_count()

    # bump centre: best separating position over the flat pieces inside the ball
    cands = _candidate_edges(domain, center, radius, a)
    if not cands:
        raise GeometryError(
            f"no straight boundary piece inside the ball at {tuple(center)} (radius {radius:g}) "
            f"holds a bump of radius {a:g}"
        )
    pairs = [spectrum.pair(i) for i in cluster.indices]
    lam_bar = float(np.mean([p.lam for p in pairs]))
    cc = c_constant(domain.bc, lam_bar, domain.sigma)
    best = None
    for edge, rng in cands:
        traces = [boundary_trace(mesh, spectrum.system, p, edge.id) for p in pairs]
        try:
            s0, score = select_bump_center(traces, cc, a, rng, domain.bc, domain.sigma)
        except (DegenerateDiscriminantError, BumpPlacementError) as exc:
            log.info("edge %s rejected: %s", edge.id, exc)
            continue
        if best is None or score > best[2] * (1 + 1e-12):
            best = (edge, s0, score)
    if best is None:
        raise GeometryError("cluster discriminants do not separate on any edge inside the ball")
    edge, s0, score = best
    bump = BumpSpec(edge.id, s0, a, 0.0, cfg.resolution)

    # one bump-ready mesh for every candidate amplitude
    ready = splice_bump(domain, bump, amplitude=0.0)
    mesh0 = triangulate(ready, cfg.h)
    k = spectrum.k
    pre_spec = solve_lowest(assemble(mesh0, domain.bc, domain.sigma), k, cfg.tol)
    pre = pre_spec.lambdas
    fld = DeformationField.from_domain(domain, bump)
    unit = deformation_c1_norm(fld, 1.0)
    t_cap = cfg.delta / unit
    if cfg.t_max is not None:
        t_cap = min(t_cap, float(cfg.t_max))
    ctx = {
        "field": fld,
        "mesh": mesh0,
        "bc": domain.bc,
        "sigma": domain.sigma,
        "k": k,
        "tol": cfg.tol,
        "pre": pre,
        "budget": budget,
        "pre_width": _block_width(pre, cluster.r, cluster.m),
        "tau": tau,
        "split_factor": cfg.split_factor,
        "delta": cfg.delta,
    }
    if not t_cap > 0:
        raise SplitFailedError(
            "amplitude range is empty (t = 0 leaves the domain unchanged)",
            {"edge": edge.id, "s0": s0, "t_cap": t_cap},
        )
    chosen, history = _search_amplitude(ctx, t_cap, cfg.ladder, cfg.bisect_steps, threads)
    if chosen is None:
        table = [(e.t, e.rel_gap, e.shift_max, e.mesh_ok, e.point2, e.point4, e.note) for e in history]
        raise SplitFailedError(
            f"no amplitude up to {t_cap:.4g} splits cluster r={cluster.r}, m={cluster.m} "
            f"by {cfg.split_factor:g}x its width {ctx['pre_width']:.3e}",
            {"edge": edge.id, "s0": s0, "c": a, "t_cap": t_cap, "evaluations": table},
        )

    new_domain = apply_bump(domain, BumpSpec(edge.id, s0, a, chosen.t, cfg.resolution))
    changed = boundary_changes(domain, new_domain)
    point1 = bool(len(changed) == 0 or np.all(np.linalg.norm(changed - center, axis=1) <= radius * (1 + 1e-12)))
    post = chosen.lambdas
    shifts = post - pre
    monotone = None
    if domain.bc is BC.DIRICHLET:
        monotone = bool(np.all(shifts <= cfg.tol * np.maximum(np.abs(pre), 1.0) * 10))
    points = {"1": point1, "2": chosen.point2, "3": chosen.point3, "4": chosen.point4}
    if not all(points.values()):
        raise InvariantError(f"accepted split violates split contract points {points}")
    n_stab = min(k, len(post))
    record = IterationRecord(
        n=n,
        ball_center=(float(center[0]), float(center[1])),
        ball_radius=radius,
        M=budget.M,
        r=cluster.r,
        m=cluster.m,
        d_r=budget.d_r,
        shift_cap=budget.shift_cap,
        edge_id=int(edge.id),
        s0=float(s0),
        c=a,
        t=float(chosen.t),
        c1_norm=float(chosen.c1_norm),
        separation=float(score),
        pre=pre.tolist(),
        post=post.tolist(),
        shifts=shifts.tolist(),
        pre_width=ctx["pre_width"],
        post_gap=chosen.rel_gap,
        stability=stability_ratio(pre, post, chosen.c1_norm, n_stab),
        points=points,
        monotone=monotone,
        evaluations=history,
    )
    return new_domain, record


# ---------------------------------------------------------------------------
# the loop


def check_r_sequence(rs):
    """r_n non-decreasing and never constant for more than r_n + 1 consecutive iterations."""
    for a, b in zip(rs, rs[1:]):
        if b < a:
            raise InvariantError(f"first non-simple index decreased: {rs}")
    run = 1
    for i in range(1, len(rs)):
        run = run + 1 if rs[i] == rs[i - 1] else 1
        if run > rs[i] + 1:
            raise InvariantError(f"r_n = {rs[i]} repeated {run} times: {rs}")


def ball_layout(center, tangent, half_length, count):
    """Disjoint balls along a flat segment: B_0 at ``center``, then halving radii alternately right and left."""
    c0 = 0.4 * half_length
    gap = 0.01 * c0
    balls = [(np.asarray(center, dtype=float), c0)]
    reach = {1: c0, -1: c0}
    for n in range(1, count):
        rad = c0 * 2.0**-n
        side = 1 if n % 2 else -1
        off = reach[side] + gap + rad
        reach[side] = off + rad
        balls.append((center + side * off * np.asarray(tangent), rad))
    return balls


def _first_degenerate(spec, K):
    for c in spec.clusters:
        if c.r > K:
            break
        if c.m >= 2:
            return c
    return None


def _solve(domain, cfg, k, tau):
    mesh = triangulate(domain, cfg.h)
    spec = solve_lowest(assemble(mesh, domain.bc, domain.sigma), k, cfg.tol)
    return detect_clusters(spec, tau)


def simplify_spectrum(domain, K_target, epsilon, x, config=None):
    """Split every degenerate eigenvalue among the first ``K_target``.

    Returns ``(final_domain, trace)``; ``trace.status`` is ``"success"`` or
    ``"partial"`` (iteration cap, bump radius floor, or no admissible
    placement).
    """
    cfg = config or SplitConfig()
    K = int(K_target)
    if K < 2:
        raise InvalidParameterError("K_target must be at least 2")
    if not epsilon > 0:
        raise InvalidParameterError("epsilon must be positive")
    if not 0 < cfg.M_cap < 0.5:
        raise BudgetError(f"budget constant M must lie in (0, 1/2), got {cfg.M_cap!r}")
    x = np.asarray(x, dtype=float)
    edge, s, dist = domain.locate(x)
    if dist > 1e-9 * max(1.0, domain.diameter):
        raise InvalidParameterError(f"x = {tuple(x)} is not on the boundary (distance {dist:.3g})")
    tau = cfg.resolved_tau()
    k = K + cfg.extra_pairs
    trace = SplitTrace(K, float(epsilon), (float(x[0]), float(x[1])), tau)
    trace.lipschitz_in = lipschitz_constant(domain)

    spec = _solve(domain, cfg, k, tau)
    trace.initial = spec.lambdas.tolist()
    cl = _first_degenerate(spec, K)
    if cl is None:
        trace.final = trace.initial
        trace.final_simple = True
        trace.lipschitz_out = trace.lipschitz_in
        trace.lipschitz_budget = 0.0
        return domain, trace

    # a straight piece around x
    work = domain
    half = min(epsilon, s, edge.length - s)
    tangent = edge.tangent
    if half <= 1e-9 * edge.length:
        r = cfg.flatten_r or epsilon / 4
        R = cfg.flatten_R or 0.75 * epsilon
        work = flatten_patch(domain, x, r, R, cfg.resolution)
        trace.flattened = work is not domain
        edge, s, _ = work.locate(x)
        half = min(r, s, edge.length - s)
        tangent = edge.tangent
        spec = _solve(work, cfg, k, tau)
        cl = _first_degenerate(spec, K)
    flat_delta = max(0.0, lipschitz_constant(work) - trace.lipschitz_in)
    balls = ball_layout(x, tangent, half, cfg.max_iter)

    slope_budget = 0.0
    n = 0
    while cl is not None:
        trace.r_sequence.append(cl.r)
        check_r_sequence(trace.r_sequence)
        if n >= cfg.max_iter:
            trace.status, trace.reason = "partial", f"iteration cap {cfg.max_iter} reached"
            break
        center, radius = balls[n]
        if radius / 2 < cfg.bump_floor():
            trace.status, trace.reason = "partial", f"bump radius {radius / 2:.3g} below the mesh floor"
            break
        M = min(cfg.M_cap, 2.0 ** -(n + 1))
        budget = SplitBudget.for_cluster(spec, cl, M)
        try:
            work, rec = split_once(work, spec, cl, (center, radius), budget, cfg, n)
        except (GeometryError, SplitFailedError, BumpPlacementError) as exc:
            trace.status, trace.reason = "partial", f"iteration {n}: {exc}"
            break
        trace.records.append(rec)
        slope_budget = max(slope_budget, rec.c1_norm)
        windows = _half_gap_windows(spec.lambdas)[: rec.r - 1]
        n += 1
        spec = _solve(work, cfg, k, tau)
        cl = _first_degenerate(spec, K)
        # eigenvalues below the split cluster stay in their half-gap neighbourhoods
        lam = spec.lambdas
        if not all(lo < lam[i] < hi for i, (lo, hi) in enumerate(windows)):
            trace.simplicity_preserved = False

    trace.final = spec.lambdas.tolist()
    trace.final_simple = _first_degenerate(spec, K) is None
    if trace.final_simple:
        trace.status, trace.reason = "success", ""
    elif trace.status == "success":
        trace.status = "partial"
    trace.lipschitz_out = lipschitz_constant(work)
    trace.lipschitz_budget = flat_delta + slope_budget
    changed = boundary_changes(domain, work)
    trace.localized = bool(
        len(changed) == 0 or np.all(np.linalg.norm(changed - x, axis=1) <= epsilon * (1 + 1e-12))
    )
    return work, trace


def _half_gap_windows(lam):
    out = []
    for i in range(len(lam)):
        below = lam[i] - lam[i - 1] if i > 0 else math.inf
        above = lam[i + 1] - lam[i] if i + 1 < len(lam) else math.inf
        out.append((lam[i] - below / 2, lam[i] + above / 2))
    return out


# ---------------------------------------------------------------------------
# diagnostics


@dataclass
class WeylFit:
    slope: float
    expected: float
    deviation: float
    n_used: int


def weyl_check(spectrum, area):
    """Least-squares slope of lambda_n against n over the upper half of the spectrum."""
    lam = np.asarray(getattr(spectrum, "lambdas", spectrum), dtype=float)
    if len(lam) < 10:
        raise InvalidParameterError("Weyl fit needs at least 10 eigenvalues")
    if not area > 0:
        raise InvalidParameterError("area must be positive")
    n = np.arange(1, len(lam) + 1)
    lo = len(lam) // 2
    slope = float(np.polyfit(n[lo:], lam[lo:], 1)[0])
    expected = 4.0 * math.pi / area
    return WeylFit(slope, expected, (slope - expected) / expected, len(lam) - lo)


@dataclass
class SweepPoint:
    t: float
    c1_norm: float
    shifts: np.ndarray
    ratios: np.ndarray

    @property
    def C_hat(self):
        return float(np.max(self.ratios))


def stability_sweep(domain, bump, ts, h=0.02, n_max=10, tol=1e-10, threads=None):
    """Shifts and stability ratios of the first ``n_max`` eigenvalues under mesh motion, per amplitude."""
    mesh = triangulate(domain, h)
    base = solve_lowest(assemble(mesh, domain.bc, domain.sigma), n_max, tol).lambdas
    fld = DeformationField.from_domain(domain, bump)

    def one(t):
        moved = move_mesh(mesh, fld, t)
        lam = solve_lowest(assemble(moved, domain.bc, domain.sigma), n_max, tol).lambdas
        c1 = deformation_c1_norm(fld, t)
        return SweepPoint(float(t), c1, lam - base, np.array(stability_ratio(base, lam, c1, n_max)))

    with ThreadPoolExecutor(max_workers=threads or worker_count()) as pool:
        return list(pool.map(one, ts))


__all__ = [
    "SplitBudget",
    "SplitConfig",
    "SplitTrace",
    "IterationRecord",
    "ball_layout",
    "check_r_sequence",
    "jsonable",
    "simplify_spectrum",
    "split_once",
    "stability_ratio",
    "stability_sweep",
    "weyl_check",
    "worker_count",
]
