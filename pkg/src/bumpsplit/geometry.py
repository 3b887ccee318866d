"""Polygonal domains, the bump profile and normal bump deformations.

A domain is a simple counter-clockwise polygon with a boundary condition.
Bumps are smooth outward graphs ``s -> t * rho_c(s - s0)`` spliced into a
straight edge as a sampled polyline; the applied bumps are kept in a ledger
so a domain file can store the base polygon plus its bump list.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property, lru_cache

import numpy as np
from scipy import integrate, optimize

from .errors import (
    BumpPlacementError,
    InvalidDomainError,
    InvalidParameterError,
    UnknownEdgeError,
)

DEFAULT_RESOLUTION = 64
_GEOM_TOL = 1e-12


class BC(str, Enum):
    DIRICHLET = "dirichlet"
    NEUMANN = "neumann"
    ROBIN = "robin"


# ---------------------------------------------------------------------------
# bump profile


def _unit_bump(x):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    inside = np.abs(x) < 1.0
    xi = x[inside]
    out[inside] = np.exp(1.0 / (xi * xi - 1.0))
    return out


def _unit_bump_deriv(x):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    inside = np.abs(x) < 1.0
    xi = x[inside]
    q = xi * xi - 1.0
    out[inside] = np.exp(1.0 / q) * (-2.0 * xi / (q * q))
    return out


def _max_unit_slope():
    res = optimize.minimize_scalar(
        lambda x: -abs(float(_unit_bump_deriv(x))),
        bounds=(0.0, 1.0),
        method="bounded",
        options={"xatol": 1e-13},
    )
    return -res.fun


#: sup |f'| for f(x) = exp(1/(x^2-1)), attained near x = 0.76
UNIT_BUMP_MAX_SLOPE = _max_unit_slope()
#: integral of f over (-1, 1)
UNIT_BUMP_INTEGRAL = integrate.quad(lambda x: float(_unit_bump(x)), -1.0, 1.0, epsabs=1e-15)[0]


def bump_profile(s, c):
    """Evaluate ``rho_c(s) = c^2 exp(1/((s/c)^2 - 1))`` for ``|s| < c``, zero elsewhere."""
    if not c > 0:
        raise InvalidParameterError(f"bump radius must be positive, got {c!r}")
    scalar = np.ndim(s) == 0
    out = c * c * _unit_bump(np.asarray(s, dtype=float) / c)
    return float(out) if scalar else out


def bump_profile_derivative(s, c):
    if not c > 0:
        raise InvalidParameterError(f"bump radius must be positive, got {c!r}")
    scalar = np.ndim(s) == 0
    out = c * _unit_bump_deriv(np.asarray(s, dtype=float) / c)
    return float(out) if scalar else out


def bump_integral(c):
    """Exact integral of ``rho_c`` over the real line."""
    return c**3 * UNIT_BUMP_INTEGRAL


def bump_max_slope(c, t=1.0):
    """sup |d/ds t*rho_c(s)|."""
    return t * c * UNIT_BUMP_MAX_SLOPE


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class BumpSpec:
    """An outward bump of radius ``c`` centred at arclength ``s0`` of an edge."""

    edge_id: int
    s0: float
    c: float
    t: float = 0.0
    resolution: int = DEFAULT_RESOLUTION
    center: tuple | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.c > 0:
            raise InvalidParameterError(f"bump radius c must be > 0, got {self.c!r}")
        if not self.t >= 0:
            raise InvalidParameterError("bumps are outward only: amplitude t must be >= 0")
        if int(self.resolution) < 3:
            raise InvalidParameterError("bump resolution must be at least 3 samples")

    def to_dict(self):
        return {
            "edge": int(self.edge_id),
            "s0": float(self.s0),
            "c": float(self.c),
            "t": float(self.t),
            "resolution": int(self.resolution),
        }

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(
                edge_id=int(d["edge"]),
                s0=float(d["s0"]),
                c=float(d["c"]),
                t=float(d.get("t", 0.0)),
                resolution=int(d.get("resolution", DEFAULT_RESOLUTION)),
            )
        except KeyError as exc:
            raise InvalidDomainError(f"bump record missing key {exc}") from None


@dataclass(frozen=True)
class Edge:
    id: int
    index: int
    start: np.ndarray
    end: np.ndarray
    length: float
    tangent: np.ndarray
    normal: np.ndarray

    def point_at(self, s):
        return self.start + np.multiply.outer(np.asarray(s, dtype=float), self.tangent)

    def local(self, points):
        """Arclength and signed outward offset of ``points`` relative to this edge."""
        d = np.asarray(points, dtype=float) - self.start
        return d @ self.tangent, d @ self.normal


def _signed_area(v):
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _segments_intersect(p, q, r, s, eps):
    """Vectorised closed-segment intersection test for segments pq and rs."""

    def orient(a, b, c):
        return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (
            c[..., 0] - a[..., 0]
        )

    o1, o2 = orient(p, q, r), orient(p, q, s)
    o3, o4 = orient(r, s, p), orient(r, s, q)
    proper = (o1 * o2 < -eps) & (o3 * o4 < -eps)

    def on_seg(a, b, c, o):
        return (
            (np.abs(o) <= eps)
            & (np.minimum(a[..., 0], b[..., 0]) - eps <= c[..., 0])
            & (c[..., 0] <= np.maximum(a[..., 0], b[..., 0]) + eps)
            & (np.minimum(a[..., 1], b[..., 1]) - eps <= c[..., 1])
            & (c[..., 1] <= np.maximum(a[..., 1], b[..., 1]) + eps)
        )

    touch = on_seg(p, q, r, o1) | on_seg(p, q, s, o2) | on_seg(r, s, p, o3) | on_seg(r, s, q, o4)
    return proper | touch


def _is_simple(v):
    n = len(v)
    if n < 3:
        return False
    p, q = v, np.roll(v, -1, axis=0)
    scale = float(np.ptp(v, axis=0).max()) or 1.0
    eps = 1e-14 * scale * scale
    i, j = np.triu_indices(n, k=2)
    keep = ~((i == 0) & (j == n - 1))
    i, j = i[keep], j[keep]
    hit = _segments_intersect(p[i], q[i], p[j], q[j], eps)
    return not bool(np.any(hit))


@dataclass(frozen=True, eq=False)
class PolygonalDomain:
    """Simple CCW polygon plus boundary condition and bump ledger.

    ``base_vertices`` is the polygon before any ledger bump was spliced in;
    it is what gets serialised, with the ledger re-applied on load.
    """

    vertices: np.ndarray
    bc: BC = BC.DIRICHLET
    sigma: float = 0.0
    edge_ids: tuple = None
    bumps: tuple = ()
    base_vertices: np.ndarray | None = None

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
            raise InvalidDomainError("vertices must be a list of at least three 2D points")
        if not np.all(np.isfinite(v)):
            raise InvalidDomainError("vertices must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        try:
            bc = BC(self.bc.lower() if isinstance(self.bc, str) else self.bc)
        except ValueError:
            raise InvalidDomainError(f"unknown boundary condition {self.bc!r}") from None
        object.__setattr__(self, "bc", bc)
        object.__setattr__(self, "sigma", float(self.sigma))
        if bc is BC.ROBIN and self.sigma == 0.0:
            raise InvalidParameterError("Robin coefficient sigma must be non-zero")
        ids = tuple(range(len(v))) if self.edge_ids is None else tuple(int(i) for i in self.edge_ids)
        if len(ids) != len(v) or len(set(ids)) != len(ids):
            raise InvalidDomainError("edge_ids must be unique, one per edge")
        object.__setattr__(self, "edge_ids", ids)
        object.__setattr__(self, "bumps", tuple(self.bumps))
        if self.base_vertices is not None:
            b = np.array(self.base_vertices, dtype=float)
            b.setflags(write=False)
            object.__setattr__(self, "base_vertices", b)

        lengths = np.linalg.norm(np.roll(v, -1, axis=0) - v, axis=1)
        if np.any(lengths <= _GEOM_TOL * max(1.0, float(np.ptp(v, axis=0).max()))):
            raise InvalidDomainError("polygon has a zero-length edge")
        if _signed_area(v) <= 0:
            raise InvalidDomainError("polygon must be counter-clockwise with positive area")
        if not _is_simple(v):
            raise InvalidDomainError("polygon is not simple (self-intersecting)")

    # -- constructors -----------------------------------------------------

    @classmethod
    def rectangle(cls, width=1.0, height=1.0, bc=BC.DIRICHLET, sigma=0.0, origin=(0.0, 0.0)):
        x0, y0 = origin
        v = [(x0, y0), (x0 + width, y0), (x0 + width, y0 + height), (x0, y0 + height)]
        return cls(np.array(v), bc=bc, sigma=sigma)

    @classmethod
    def unit_square(cls, bc=BC.DIRICHLET, sigma=0.0):
        return cls.rectangle(1.0, 1.0, bc=bc, sigma=sigma)

    # -- derived quantities -----------------------------------------------

    @cached_property
    def edges(self):
        v = self.vertices
        out = []
        for k, eid in enumerate(self.edge_ids):
            a, b = v[k], v[(k + 1) % len(v)]
            d = b - a
            length = float(np.hypot(*d))
            tau = d / length
            out.append(Edge(eid, k, a, b, length, tau, np.array([tau[1], -tau[0]])))
        return tuple(out)

    @cached_property
    def _edge_by_id(self):
        return {e.id: e for e in self.edges}

    def edge(self, edge_id):
        try:
            return self._edge_by_id[int(edge_id)]
        except (KeyError, TypeError, ValueError):
            raise UnknownEdgeError(f"no edge with id {edge_id!r}") from None

    @property
    def area(self):
        return _signed_area(self.vertices)

    @property
    def perimeter(self):
        return float(sum(e.length for e in self.edges))

    @property
    def diameter(self):
        return float(np.ptp(self.vertices, axis=0).max())

    def with_bc(self, bc, sigma=None):
        return replace(self, bc=bc, sigma=self.sigma if sigma is None else sigma)

    def scaled(self, factor):
        base = None if self.base_vertices is None else self.base_vertices * factor
        bumps = tuple(
            replace(b, s0=b.s0 * factor, c=b.c * factor, t=b.t / factor, center=None) for b in self.bumps
        )
        return replace(self, vertices=self.vertices * factor, base_vertices=base, bumps=bumps)

    def boundary_distance(self, points):
        """Distance from each point to the polygon boundary."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        a = self.vertices
        d = np.roll(a, -1, axis=0) - a
        w = pts[:, None, :] - a[None, :, :]
        tt = np.clip(np.einsum("pkd,kd->pk", w, d) / np.einsum("kd,kd->k", d, d), 0.0, 1.0)
        proj = a[None] + tt[..., None] * d[None]
        return np.linalg.norm(pts[:, None, :] - proj, axis=2).min(axis=1)

    def locate(self, point):
        """Nearest edge and arclength for a boundary point."""
        p = np.asarray(point, dtype=float)
        best = None
        for e in self.edges:
            s, _ = e.local(p)
            s = min(max(float(s), 0.0), e.length)
            dist = float(np.linalg.norm(e.point_at(s) - p))
            if best is None or dist < best[2] - 1e-15:
                best = (e, s, dist)
        return best

    # -- serialisation ----------------------------------------------------

    def to_dict(self):
        base = self.vertices if self.base_vertices is None else self.base_vertices
        return {
            "vertices": [[float(x), float(y)] for x, y in base],
            "bc": self.bc.value,
            "sigma": float(self.sigma),
            "bumps": [b.to_dict() for b in self.bumps],
        }

    @classmethod
    def from_dict(cls, d):
        try:
            verts = d["vertices"]
        except (KeyError, TypeError):
            raise InvalidDomainError("domain description needs a 'vertices' list") from None
        dom = cls(np.array(verts, dtype=float), bc=d.get("bc", "dirichlet"), sigma=d.get("sigma", 0.0))
        for raw in d.get("bumps", []):
            dom = apply_bump(dom, BumpSpec.from_dict(raw))
        return dom

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_json(cls, text):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidDomainError(f"domain description is not valid JSON: {exc}") from None
        return cls.from_dict(data)


def load_domain(path):
    with open(path) as fh:
        return PolygonalDomain.from_json(fh.read())


# ---------------------------------------------------------------------------
# bumps


def _bump_polyline(edge, bump, amplitude):
    res = int(bump.resolution)
    s = bump.s0 - bump.c + 2.0 * bump.c * np.arange(res) / (res - 1)
    h = amplitude * bump_profile(s - bump.s0, bump.c)
    h[0] = h[-1] = 0.0
    return edge.point_at(s) + h[:, None] * edge.normal


def _check_bump_fits(domain, bump):
    edge = domain.edge(bump.edge_id)
    margin = _GEOM_TOL * max(1.0, edge.length)
    if bump.s0 - bump.c <= margin or bump.s0 + bump.c >= edge.length - margin:
        raise BumpPlacementError(
            f"bump support [{bump.s0 - bump.c:g}, {bump.s0 + bump.c:g}] is not strictly inside "
            f"edge {bump.edge_id} of length {edge.length:g}"
        )
    center = edge.point_at(bump.s0)
    for prior in domain.bumps:
        if prior.center is None:
            continue
        if np.hypot(*(center - np.asarray(prior.center))) <= bump.c + prior.c:
            raise BumpPlacementError(
                f"bump at {tuple(center)} overlaps the support ball of an earlier bump"
            )
    return edge, center


def splice_bump(domain, bump, amplitude=None):
    """Replace the bump's edge span by the sampled bump polyline.

    Unlike :func:`apply_bump`, this always inserts the sample vertices, even
    for zero amplitude; meshes built on the zero-amplitude splice can be moved
    onto the bumped polygon node for node.
    """
    edge, center = _check_bump_fits(domain, bump)
    t = bump.t if amplitude is None else float(amplitude)
    pts = _bump_polyline(edge, bump, t)
    k = edge.index
    v = domain.vertices
    new_v = np.vstack([v[: k + 1], pts, v[k + 1 :]])
    next_id = max(domain.edge_ids) + 1
    n_new = len(pts)  # P->S0 keeps the old id, then n_new-1 bump segments, then S_last->Q
    new_ids = (
        domain.edge_ids[: k + 1]
        + tuple(range(next_id, next_id + n_new))
        + domain.edge_ids[k + 1 :]
    )
    recorded = replace(bump, t=t, center=(float(center[0]), float(center[1])))
    base = domain.vertices if domain.base_vertices is None else domain.base_vertices
    return PolygonalDomain(
        new_v,
        bc=domain.bc,
        sigma=domain.sigma,
        edge_ids=new_ids,
        bumps=domain.bumps + (recorded,),
        base_vertices=base,
    )


def apply_bump(domain, bump, resolution=None):
    """Splice an outward bump into a straight edge and append it to the ledger."""
    if resolution is not None:
        bump = replace(bump, resolution=int(resolution))
    if bump.t == 0.0:
        _, center = _check_bump_fits(domain, bump)
        recorded = replace(bump, center=(float(center[0]), float(center[1])))
        base = domain.vertices if domain.base_vertices is None else domain.base_vertices
        return replace(domain, bumps=domain.bumps + (recorded,), base_vertices=base)
    out = splice_bump(domain, bump)
    if out.area <= domain.area:
        raise BumpPlacementError("bump did not enlarge the domain")
    return out


# ---------------------------------------------------------------------------
# deformation fields


def _cutoff(n, w):
    """Normal cutoff eta with eta(0) = 1 and support |n| < w."""
    return math.e * _unit_bump(np.asarray(n, dtype=float) / w)


def _cutoff_deriv(n, w):
    return math.e * _unit_bump_deriv(np.asarray(n, dtype=float) / w) / w


@lru_cache(maxsize=64)
def _jacobian_sup(q):
    """sup over (x, y) of sqrt(f'(x)^2 f(y)^2 + q^2 f(x)^2 f'(y)^2)."""

    def neg(z):
        x, y = z
        a = float(_unit_bump_deriv(x) * _unit_bump(y))
        b = float(q * _unit_bump(x) * _unit_bump_deriv(y))
        return -math.hypot(a, b)

    g = np.linspace(0.0, 0.995, 200)
    X, Y = np.meshgrid(g, g, indexing="ij")
    vals = np.hypot(_unit_bump_deriv(X) * _unit_bump(Y), q * _unit_bump(X) * _unit_bump_deriv(Y))
    i, j = np.unravel_index(np.argmax(vals), vals.shape)
    res = optimize.minimize(
        neg, x0=[g[i], g[j]], bounds=[(0.0, 1.0 - 1e-9)] * 2, method="L-BFGS-B", options={"ftol": 1e-15, "gtol": 1e-12}
    )
    edge_vals = [UNIT_BUMP_MAX_SLOPE / math.e, q * UNIT_BUMP_MAX_SLOPE / math.e, -res.fun, float(vals.max())]
    return max(edge_vals)


@dataclass(frozen=True)
class DeformationField:
    """Normal bump displacement ``t * gain * rho_c(s - s0) * eta(n) * nu``.

    ``s`` runs along the bump edge and ``n`` is the signed outward offset
    from its line. On the edge (n = 0) the displacement is exactly the bump
    graph; it vanishes outside the rectangle ``|s - s0| < c, |n| < w``.
    """

    bump: BumpSpec
    origin: np.ndarray
    tangent: np.ndarray
    normal: np.ndarray
    cutoff_width: float
    gain: float = 1.0

    @classmethod
    def from_domain(cls, domain, bump, cutoff_width=None, gain=1.0):
        edge, center = _check_bump_fits(domain, bump)
        w = bump.c if cutoff_width is None else float(cutoff_width)
        if not w > 0:
            raise InvalidParameterError("cutoff_width must be positive")
        fld = cls(bump, center, edge.tangent.copy(), edge.normal.copy(), w, float(gain))
        fld._check_support_clear(domain, edge)
        return fld

    def _check_support_clear(self, domain, edge):
        c, w = self.bump.c, self.cutoff_width
        for e in domain.edges:
            s1, n1 = self.local(e.start)
            s2, n2 = self.local(e.end)
            if abs(n1) < _GEOM_TOL and abs(n2) < _GEOM_TOL:
                continue  # piece of the bump line itself
            if _segment_hits_box(s1, n1, s2, n2, c, w):
                raise BumpPlacementError(
                    f"deformation support around s0={self.bump.s0:g} on edge {edge.id} "
                    f"meets edge {e.id}; reduce c or cutoff_width"
                )

    @property
    def support_radius(self):
        return self.bump.c + self.cutoff_width

    def local(self, points):
        d = np.asarray(points, dtype=float) - self.origin
        return d @ self.tangent, d @ self.normal

    def displacement(self, points, t):
        s, n = self.local(points)
        mag = t * self.gain * self.bump.c**2 * _unit_bump(s / self.bump.c) * _cutoff(n, self.cutoff_width)
        return np.multiply.outer(mag, self.normal)

    def velocity(self, points):
        return self.displacement(points, 1.0)

    def velocity_jacobian(self, points):
        """d(velocity)/dx at ``points``, shape (..., 2, 2)."""
        s, n = self.local(points)
        c, w = self.bump.c, self.cutoff_width
        ds = self.gain * c * _unit_bump_deriv(s / c) * _cutoff(n, w)
        dn = self.gain * c * c * _unit_bump(s / c) * _cutoff_deriv(n, w)
        grad = np.multiply.outer(ds, self.tangent) + np.multiply.outer(dn, self.normal)
        return self.normal[:, None] * grad[..., None, :]

    def normal_velocity(self, s_edge):
        """nu . e_dot on the bump edge at edge arclength ``s_edge``."""
        return self.gain * bump_profile(np.asarray(s_edge, dtype=float) - self.bump.s0, self.bump.c)

    def c1_norm(self, t):
        return deformation_c1_norm(self, t)


def _segment_hits_box(s1, n1, s2, n2, c, w):
    """Liang-Barsky test of a segment against the open box |s| < c, |n| < w."""
    t0, t1 = 0.0, 1.0
    ds, dn = s2 - s1, n2 - n1
    for p, q in ((-ds, s1 + c), (ds, c - s1), (-dn, n1 + w), (dn, w - n1)):
        if abs(p) < 1e-300:
            if q <= 0:
                return False
            continue
        r = q / p
        if p < 0:
            t0 = max(t0, r)
        else:
            t1 = min(t1, r)
        if t0 >= t1:
            return False
    return True


def deformation_c1_norm(field, t):
    """``sup|phi_t - id| + sup|D(phi_t - id)|`` over the plane.

    Both suprema follow from the separable closed form; the only numerical
    step is a 2D maximisation of a fixed function of the ratio c / w.
    """
    if t < 0:
        raise InvalidParameterError("amplitude t must be >= 0")
    if t == 0:
        return 0.0
    c, w = field.bump.c, field.cutoff_width
    g = abs(field.gain)
    sup_disp = c * c / math.e
    sup_jac = math.e * c * _jacobian_sup(c / w)
    return float(t * g * (sup_disp + sup_jac))


# ---------------------------------------------------------------------------
# flattening and Lipschitz constants


def _smoothstep(u):
    u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
    a = np.where(u > 0, np.exp(-1.0 / np.where(u > 0, u, 1.0)), 0.0)
    b = np.where(u < 1, np.exp(-1.0 / np.where(u < 1, 1.0 - u, 1.0)), 0.0)
    return a / (a + b)


def _clip_to_disk(a, b, center, r):
    """Part of segment ab inside the closed disk, or None."""
    d = b - a
    f = a - center
    A = d @ d
    B = 2 * f @ d
    C = f @ f - r * r
    disc = B * B - 4 * A * C
    if disc < 0:
        return None
    sq = math.sqrt(disc)
    t0 = max(0.0, (-B - sq) / (2 * A))
    t1 = min(1.0, (-B + sq) / (2 * A))
    if t0 > t1:
        return None
    return a + t0 * d, a + t1 * d


def _frame_at(domain, center, tol):
    v = domain.vertices
    n = len(v)
    dv = np.linalg.norm(v - center, axis=1)
    iv = int(np.argmin(dv))
    if dv[iv] <= tol:
        d_in = v[iv] - v[iv - 1]
        d_out = v[(iv + 1) % n] - v[iv]
        tau = d_in / np.linalg.norm(d_in) + d_out / np.linalg.norm(d_out)
        if np.linalg.norm(tau) < 1e-9:
            raise InvalidDomainError("boundary folds back on itself at the patch centre")
        return tau / np.linalg.norm(tau), iv, None
    edge, _, dist = domain.locate(center)
    if dist > tol:
        raise InvalidParameterError("patch centre is not on the boundary")
    return edge.tangent, None, edge.index


def _flat_within(domain, center, tau, r, tol):
    nu = np.array([tau[1], -tau[0]])
    for e in domain.edges:
        clip = _clip_to_disk(e.start, e.end, center, r)
        if clip is None:
            continue
        if max(abs((clip[0] - center) @ nu), abs((clip[1] - center) @ nu)) > tol:
            return False
    return True


def flatten_patch(domain, center, r, R, resolution=DEFAULT_RESOLUTION):
    """Make the boundary straight within radius ``r`` of a boundary point.

    Near ``center`` the boundary is the graph ``y = phi(x)`` over the local
    tangent axis; it is replaced by ``phi * eta`` where ``eta`` vanishes for
    ``|x| <= r`` and equals one beyond ``R / sqrt(1 + L^2)`` (L the local
    slope), so boundary points farther than ``R`` are untouched. A boundary
    that is already straight within ``r`` is returned unchanged. The result
    is a fresh base polygon: the bump ledger is not carried over.
    """
    if not (0 < r < R):
        raise InvalidParameterError(f"need 0 < r < R, got r={r!r}, R={R!r}")
    center = np.asarray(center, dtype=float)
    tol = 1e-9 * max(1.0, domain.diameter)
    tau, iv, ie = _frame_at(domain, center, tol)
    if _flat_within(domain, center, tau, r, tol):
        return domain
    nu = np.array([tau[1], -tau[0]])

    v = domain.vertices
    if iv is None:
        w = np.vstack([v[: ie + 1], center, v[ie + 1 :]])
        ic = ie + 1
    else:
        w = v.copy()
        ic = iv
    n = len(w)
    xy = np.column_stack([(w - center) @ tau, (w - center) @ nu])
    dist = np.linalg.norm(w - center, axis=1)

    def walk(step):
        idx = [ic]
        j = ic
        while True:
            j = (j + step) % n
            if j == ic:
                raise InvalidParameterError("flattening radius R exceeds the polygon")
            idx.append(j)
            if dist[j] >= R:
                return idx

    fwd, bwd = walk(1), walk(-1)
    if set(fwd[1:]) & set(bwd[1:]):
        raise InvalidParameterError("flattening radius R exceeds the polygon")
    chain = bwd[::-1] + fwd[1:]
    xc, yc = xy[chain, 0], xy[chain, 1]
    if np.any(np.diff(xc) <= 0):
        raise InvalidParameterError("boundary is not a graph over the tangent axis within R")
    slope = float(np.max(np.abs(np.diff(yc) / np.diff(xc))))
    Rp = R / math.sqrt(1.0 + slope * slope)
    if Rp <= r:
        raise InvalidParameterError(f"r={r:g} too large for the local slope {slope:.3g} (need r < {Rp:.4g})")

    chain_edges = {(chain[i], chain[i + 1]) for i in range(len(chain) - 1)}
    for j in range(n):
        k = (j + 1) % n
        if (j, k) in chain_edges:
            continue
        if _clip_to_disk(w[j], w[k], center, R * (1 - 1e-9)) is not None:
            raise InvalidParameterError("ball of radius R meets boundary away from the patch")

    def graph(xs):
        return np.interp(xs, xc, yc)

    res = int(resolution)
    xl = np.linspace(-Rp, -r, res)
    xr = np.linspace(r, Rp, res)
    yl = graph(xl) * _smoothstep((np.abs(xl) - r) / (Rp - r))
    yr = graph(xr) * _smoothstep((np.abs(xr) - r) / (Rp - r))
    mid = np.vstack([np.column_stack([xl, yl]), np.column_stack([xr, yr])])
    left = [xy[j] for j in chain if xy[j, 0] < -Rp]
    right = [xy[j] for j in chain if xy[j, 0] > Rp]
    local = np.vstack(left + [mid] + right) if (left or right) else mid
    pts = center + local[:, :1] * tau + local[:, 1:] * nu
    # outside part, in polygon order after the forward exit
    tail = []
    j = fwd[-1]
    while True:
        j = (j + 1) % n
        if j == bwd[-1]:
            break
        tail.append(w[j])
    all_pts = np.vstack([pts] + ([np.array(tail)] if tail else []))
    keep = np.ones(len(all_pts), dtype=bool)
    gaps = np.linalg.norm(np.diff(all_pts, axis=0, append=all_pts[:1]), axis=1)
    keep[1:] = gaps[:-1] > tol * 1e-3
    if gaps[-1] <= tol * 1e-3:
        keep[-1] = False
    return PolygonalDomain(all_pts[keep], bc=domain.bc, sigma=domain.sigma)


def vertex_lipschitz(domain):
    """Per-vertex minimal graph slope ``tan(|pi - alpha| / 2)``."""
    v = domain.vertices
    d_out = np.roll(v, -1, axis=0) - v
    lengths = np.linalg.norm(d_out, axis=1)
    if np.any(lengths <= 0):
        raise InvalidDomainError("degenerate (zero-length) edge")
    d_out = d_out / lengths[:, None]
    d_in = np.roll(d_out, 1, axis=0)
    cross = d_in[:, 0] * d_out[:, 1] - d_in[:, 1] * d_out[:, 0]
    dot = np.einsum("ij,ij->i", d_in, d_out)
    turn = np.abs(np.arctan2(cross, dot))
    with np.errstate(over="ignore"):
        return np.where(turn >= math.pi - 1e-15, np.inf, np.tan(turn / 2.0))


def lipschitz_constant(domain):
    """Largest vertex-local graph slope over the polygon."""
    v = np.asarray(domain.vertices if isinstance(domain, PolygonalDomain) else domain, dtype=float)
    lengths = np.linalg.norm(np.roll(v, -1, axis=0) - v, axis=1)
    if np.any(lengths <= 0):
        raise InvalidDomainError("degenerate (zero-length) edge")
    if not isinstance(domain, PolygonalDomain):
        domain = PolygonalDomain(v)
    return float(vertex_lipschitz(domain).max())


def boundary_changes(a, b, tol=1e-10):
    """Vertices of either polygon that are not on the other's boundary."""
    pa = a.vertices[b.boundary_distance(a.vertices) > tol]
    pb = b.vertices[a.boundary_distance(b.vertices) > tol]
    return np.vstack([pa, pb]) if len(pa) + len(pb) else np.zeros((0, 2))
