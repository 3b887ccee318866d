"""Boundary traces, discriminants and first-order shape derivatives.

On a straight edge the first variation of an eigenvalue under a normal
velocity V is

    lambda' = int (|grad u|^2 - lambda u^2 - 2 (du/dnu)^2) V ds

(the mean-curvature term vanishes). Substituting the boundary condition
gives ``-int g V`` for Dirichlet and ``+int g V`` for Neumann and Robin,
where ``g = |grad u|^2 - c u^2`` is the discriminant and ``c`` is 0,
lambda or lambda + 2 sigma^2.

For a cluster the polarized matrix ``A_ij`` (built from the same integrand
with u_i, u_j and the cluster's mean eigenvalue) is used; its eigenvalues
are the branch derivatives and do not depend on the basis the solver
happened to return.
"""

from __future__ import annotations

import io
import json
import weakref
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .eigen import solve_lowest
from .errors import BumpPlacementError, DegenerateDiscriminantError, InvalidParameterError
from .fem import as_bc, assemble, boundary_trace_indices, form_derivatives, p1_gradients
from .geometry import BC, bump_profile
from .mesh import move_mesh

QUAD_SAMPLES = 65

_recovery_cache = weakref.WeakKeyDictionary()


def c_constant(bc, lam, sigma=0.0):
    bc = as_bc(bc)
    if bc is BC.DIRICHLET:
        return 0.0
    if bc is BC.NEUMANN:
        return float(lam)
    if sigma == 0:
        raise InvalidParameterError("Robin conditions need a non-zero sigma")
    return float(lam) + 2.0 * float(sigma) ** 2


def _averaging_operator(mesh):
    """Sparse maps nodal u -> nodal d/dx, d/dy by area-weighted averaging."""
    ops = _recovery_cache.get(mesh)
    if ops is not None:
        return ops
    grads, area = p1_gradients(mesh.nodes, mesh.triangles)
    n = mesh.n_nodes
    tri = mesh.triangles
    weight = np.zeros(n)
    np.add.at(weight, tri.ravel(), np.repeat(area, 3))
    rows = np.repeat(tri, 3, axis=1).ravel()  # receiving node
    cols = np.tile(tri, (1, 3)).ravel()  # contributing node
    ops = []
    for d in range(2):
        vals = (area[:, None, None] * np.broadcast_to(grads[:, None, :, d], (len(tri), 3, 3))).ravel()
        op = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
        ops.append(sp.diags(1.0 / weight) @ op)
    _recovery_cache[mesh] = ops
    return ops


def recover_gradient(mesh, nodal):
    """Nodal gradients of a P1 function, shape (n, 2), by area-weighted averaging."""
    gx, gy = _averaging_operator(mesh)
    return np.column_stack([gx @ nodal, gy @ nodal])


def _flux(system, nodal, lam):
    """Consistent boundary flux du/dnu at boundary nodes from the discrete residual."""
    mesh = system.mesh
    bnd = mesh.boundary_nodes()
    res = (system.K @ nodal - lam * (system.M @ nodal))[bnd]
    Bbb = system.B[bnd][:, bnd].tocsc()
    q = np.zeros(mesh.n_nodes)
    q[bnd] = spla.spsolve(Bbb, res)
    return q


@dataclass(frozen=True, eq=False)
class BoundaryTrace:
    edge_id: int
    s: np.ndarray
    u: np.ndarray
    du_ds: np.ndarray
    du_dnu: np.ndarray
    grad_sq: np.ndarray
    lam: float = 0.0
    nodes: np.ndarray = field(default=None, repr=False)

    def __len__(self):
        return len(self.s)


def boundary_trace(mesh, system, pair, edge_id, recovery="average"):
    """Samples of u, du/ds, du/dnu and |grad u|^2 at the mesh nodes of an edge.

    ``recovery`` selects how du/dnu is obtained: ``"average"`` projects the
    area-weighted nodal gradient, ``"flux"`` solves for the consistent
    boundary flux. The tangential derivative is taken from the P1 trace
    itself (nodal values along the edge), which is exact for the discrete
    function and identically zero on Dirichlet edges.
    """
    if system.mesh is not mesh:
        raise InvalidParameterError("system was not assembled on this mesh")
    ed = boundary_trace_indices(system, edge_id)
    nodal = system.expand(pair.vector)
    u = nodal[ed.nodes]
    if mesh.domain is not None:
        edge = mesh.domain.edge(edge_id)
        normal = edge.normal
    else:
        d = mesh.nodes[ed.nodes[-1]] - mesh.nodes[ed.nodes[0]]
        normal = np.array([d[1], -d[0]]) / np.hypot(*d)
    if recovery == "average":
        dn = recover_gradient(mesh, nodal)[ed.nodes] @ normal
    elif recovery == "flux":
        dn = _flux(system, nodal, pair.lam)[ed.nodes]
    else:
        raise InvalidParameterError(f"unknown gradient recovery {recovery!r}")
    if system.bc is BC.DIRICHLET:
        u = np.zeros_like(u)
        ds = np.zeros_like(u)
    else:
        ds = np.gradient(u, ed.s) if len(u) > 1 else np.zeros_like(u)
    return BoundaryTrace(int(edge_id), ed.s.copy(), u, ds, dn, ds**2 + dn**2, float(pair.lam), ed.nodes)


def discriminant(trace, c):
    return trace.grad_sq - c * trace.u**2


def _bc_normal(trace, bc, sigma):
    """du/dnu with the boundary condition substituted where it is known."""
    if bc is BC.NEUMANN:
        return np.zeros_like(trace.u)
    if bc is BC.ROBIN:
        return sigma * trace.u
    return trace.du_dnu


def discriminant_matrix(traces, c, bc=BC.DIRICHLET, sigma=0.0):
    """Polarized discriminant G_ij(s) = grad u_i . grad u_j - c u_i u_j, shape (len(s), m, m)."""
    _check_aligned(traces)
    U = np.stack([t.u for t in traces], axis=1)
    S = np.stack([t.du_ds for t in traces], axis=1)
    N = np.stack([t.du_dnu for t in traces], axis=1)
    return _outer(S, S) + _outer(N, N) - c * _outer(U, U)


def _outer(X, Y):
    return X[:, :, None] * Y[:, None, :]


def _check_aligned(traces):
    if not traces:
        raise InvalidParameterError("need at least one trace")
    s = traces[0].s
    for t in traces[1:]:
        if t.edge_id != traces[0].edge_id or len(t.s) != len(s) or not np.allclose(t.s, s, rtol=0, atol=1e-12):
            raise InvalidParameterError("traces must be sampled on the same edge nodes")


def hadamard_integrand(traces, lam_bar, bc, sigma=0.0):
    """Polarized first-variation density, shape (len(s), m, m), flat edge (H = 0)."""
    _check_aligned(traces)
    bc = as_bc(bc)
    U = np.stack([t.u for t in traces], axis=1)
    S = np.stack([t.du_ds for t in traces], axis=1)
    N = np.stack([_bc_normal(t, bc, sigma) for t in traces], axis=1)
    return _outer(S, S) + _outer(N, N) - lam_bar * _outer(U, U) - 2.0 * _outer(N, N)


def _support_quadrature(s, values, s0, c, n=QUAD_SAMPLES):
    """int values(s) rho_c(s - s0) ds by trapezoid on the nodes plus a uniform resampling of the support."""
    grid = np.linspace(s0 - c, s0 + c, n)
    inside = s[(s > s0 - c) & (s < s0 + c)]
    q = np.union1d(grid, inside)
    flat = values.reshape(len(s), -1)
    interp = np.column_stack([np.interp(q, s, flat[:, j]) for j in range(flat.shape[1])])
    w = bump_profile(q - s0, c)
    out = np.trapezoid(interp * w[:, None], q, axis=0)
    return out.reshape(values.shape[1:])


@dataclass(frozen=True, eq=False)
class HadamardReport:
    indices: list
    derivative_matrix: np.ndarray
    predicted_rates: np.ndarray
    c_used: float
    lam_bar: float
    discrete_matrix: np.ndarray | None = None
    discrete_rates: np.ndarray | None = None
    fd_rates: dict = field(default_factory=dict)
    curvature_term_included: bool = False

    def fd_table(self):
        """Rows (t, fd rates, relative error against the predicted rates)."""
        rows = []
        scale = max(np.max(np.abs(self.predicted_rates)), 1e-300)
        for t in sorted(self.fd_rates):
            fd = np.asarray(self.fd_rates[t])
            rows.append((t, fd, float(np.max(np.abs(fd - self.predicted_rates)) / scale)))
        return rows

    def discrete_errors(self):
        """Per-t relative error of the FD slopes against the exact discrete derivative.

        This isolates the O(t) part; the gap to ``predicted_rates`` also holds
        the O(h) gradient-recovery error, which does not shrink with t.
        """
        if self.discrete_rates is None:
            return {}
        scale = max(np.max(np.abs(self.discrete_rates)), 1e-300)
        return {
            t: float(np.max(np.abs(np.asarray(fd) - self.discrete_rates)) / scale)
            for t, fd in sorted(self.fd_rates.items())
        }

    def to_dict(self):
        out = {
            "indices": [int(i) for i in self.indices],
            "lambda_bar": self.lam_bar,
            "c_constant": self.c_used,
            "curvature_term_included": self.curvature_term_included,
            "derivative_matrix": self.derivative_matrix.tolist(),
            "predicted_rates": self.predicted_rates.tolist(),
        }
        if self.discrete_matrix is not None:
            out["discrete_matrix"] = self.discrete_matrix.tolist()
            out["discrete_rates"] = self.discrete_rates.tolist()
        disc = self.discrete_errors()
        out["finite_differences"] = [
            {"t": t, "fd_rates": fd.tolist(), "rel_error": err, "rel_error_discrete": disc.get(t)}
            for t, fd, err in self.fd_table()
        ]
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


def _check_field_edge(mesh, field_):
    dom = mesh.domain
    if dom is None:
        return
    edge = dom.edge(field_.bump.edge_id)
    b = field_.bump
    if b.s0 - b.c <= 0 or b.s0 + b.c >= edge.length:
        raise BumpPlacementError("bump support reaches a vertex of its edge")


def hadamard_matrix(mesh, system, pairs, field_, recovery="average", with_discrete=True):
    """First-order derivative matrix of a cluster under the deformation ``field_``."""
    pairs = list(pairs)
    if not pairs:
        raise InvalidParameterError("need at least one eigenpair")
    _check_field_edge(mesh, field_)
    b = field_.bump
    lam_bar = float(np.mean([p.lam for p in pairs]))
    traces = [boundary_trace(mesh, system, p, b.edge_id, recovery) for p in pairs]
    dens = hadamard_integrand(traces, lam_bar, system.bc, system.sigma)
    A = field_.gain * _support_quadrature(traces[0].s, dens, b.s0, b.c)
    A = 0.5 * (A + A.T)
    rates = np.sort(np.linalg.eigvalsh(A))
    D = Drates = None
    if with_discrete:
        D = discrete_derivative_matrix(system, pairs, field_, lam_bar)
        Drates = np.sort(np.linalg.eigvalsh(D))
    return HadamardReport(
        [p.index for p in pairs], A, rates, c_constant(system.bc, lam_bar, system.sigma), lam_bar, D, Drates
    )


def discrete_derivative_matrix(system, pairs, field_, lam_bar=None):
    """Exact t-derivative of the discrete cluster under mesh motion: U^T (A' - lam M') U."""
    if lam_bar is None:
        lam_bar = float(np.mean([p.lam for p in pairs]))
    Kd, Md, Bd = form_derivatives(system, field_.velocity(system.mesh.nodes))
    Ad = Kd - system.sigma * Bd if system.bc is BC.ROBIN else Kd
    U = np.column_stack([p.vector for p in pairs])
    D = U.T @ (Ad @ U) - lam_bar * (U.T @ (Md @ U))
    return 0.5 * (D + D.T)


def fd_rates(mesh, system, indices, field_, ts, k=None, tol=1e-10):
    """Finite-difference slopes (lambda_i(t) - lambda_i(0)) / t under mesh motion.

    ``indices`` are 1-based positions in the spectrum; returns {t: slopes}.
    """
    k = max(indices) + 1 if k is None else k
    base = solve_lowest(system, k, tol).lambdas
    out = {}
    for t in ts:
        if t <= 0:
            continue
        moved = move_mesh(mesh, field_, t)
        lam = solve_lowest(assemble(moved, system.bc, system.sigma), k, tol).lambdas
        out[float(t)] = np.sort(np.array([(lam[i - 1] - base[i - 1]) / t for i in indices]))
    return out


def separation_profile(traces, c, bc=BC.DIRICHLET, sigma=0.0):
    """Pointwise minimal eigen-gap of the polarized discriminant matrix along the edge."""
    G = discriminant_matrix(traces, c, bc, sigma)
    return _min_gap(np.linalg.eigvalsh(G))


def _min_gap(w):
    if w.shape[-1] < 2:
        return np.zeros(w.shape[:-1])
    return np.min(np.diff(w, axis=-1), axis=-1)


def cauchy_rank_ok(traces, rel=1e-12):
    """False when the traces' Cauchy data (u, du/ds, du/dnu) are linearly dependent."""
    X = np.stack([np.concatenate([t.u, t.du_ds, t.du_dnu]) for t in traces], axis=1)
    w = np.linalg.eigvalsh(X.T @ X)
    return bool(w[-1] > 0 and w[0] > rel * w[-1])


def select_bump_center(traces, c, bump_radius, s_range=None, bc=BC.DIRICHLET, sigma=0.0):
    """Bump centre maximizing the separation of the locally averaged discriminants.

    For each admissible centre s0 the polarized discriminant matrix is
    averaged against rho over the bump support; the score is the smallest
    gap between its eigenvalues. This equals the largest achievable
    ``min |g_i - g_j|`` over orthonormal bases of the cluster, so the choice
    does not depend on which basis the solver returned. Ties go to the
    smallest s0. Returns ``(s0, score)``.
    """
    if len(traces) < 2:
        raise InvalidParameterError("need at least two traces")
    _check_aligned(traces)
    if not cauchy_rank_ok(traces):
        raise DegenerateDiscriminantError("boundary traces are linearly dependent")
    s = traces[0].s
    a = float(bump_radius)
    lo, hi = (s[0], s[-1]) if s_range is None else s_range
    lo, hi = max(lo, s[0] + a), min(hi, s[-1] - a)
    cand = s[(s >= lo - 1e-12) & (s <= hi + 1e-12)]
    if len(s) == 1:
        cand = s.copy()
    if len(cand) == 0:
        raise BumpPlacementError("no admissible bump centre in the requested range")
    G = discriminant_matrix(traces, c, bc, sigma)
    scale = float(np.max(np.abs(np.linalg.eigvalsh(G)))) if len(s) else 0.0
    if len(s) == 1:
        scores = _min_gap(np.linalg.eigvalsh(G))
    else:
        norm = _rho_integral(a)
        scores = np.array([_min_gap(np.linalg.eigvalsh(_support_quadrature(s, G, s0, a) / norm)) for s0 in cand])
    best = float(np.max(scores))
    if not best > 1e-8 * scale or scale == 0.0:
        raise DegenerateDiscriminantError(
            f"discriminant separation {best:.3e} is below 1e-8 of its scale {scale:.3e}"
        )
    i = int(np.flatnonzero(scores >= best * (1 - 1e-12))[0])
    return float(cand[i]), float(scores[i])


def _rho_integral(c):
    q = np.linspace(-c, c, QUAD_SAMPLES)
    return float(np.trapezoid(bump_profile(q, c), q))


def traces_to_csv(traces, c):
    """Plot-ready columns s, then u, du_dnu, g for each trace."""
    buf = io.StringIO()
    head = ["s"]
    for i in range(len(traces)):
        head += [f"u{i}", f"du_dnu{i}", f"g{i}"]
    buf.write(",".join(head) + "\n")
    cols = [traces[0].s]
    for t in traces:
        cols += [t.u, t.du_dnu, discriminant(t, c)]
    for row in np.column_stack(cols):
        buf.write(",".join(repr(float(x)) for x in row) + "\n")
    return buf.getvalue()


__all__ = [
    "BoundaryTrace",
    "HadamardReport",
    "boundary_trace",
    "c_constant",
    "cauchy_rank_ok",
    "discrete_derivative_matrix",
    "discriminant",
    "discriminant_matrix",
    "fd_rates",
    "hadamard_matrix",
    "recover_gradient",
    "select_bump_center",
    "separation_profile",
    "traces_to_csv",
]
