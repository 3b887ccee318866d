"""Triangulations of polygonal domains.

Meshing is delegated to Shewchuk's Triangle (constrained Delaunay with
Ruppert refinement) through the ``triangle`` bindings. Boundary edges carry
the id of the polygon edge they lie on and their arclength interval, which
is what the boundary traces and the surface integrals downstream rely on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import triangle as tr

from .errors import AmplitudeTooLargeError, InvalidParameterError, MeshingError

MIN_ANGLE_DEG = 20.0
AREA_GUARD = 0.1


@dataclass(frozen=True, eq=False)
class TriMesh:
    nodes: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray  # (b, 2) node pairs, oriented along the polygon
    boundary_tags: np.ndarray  # (b,) parent polygon edge id
    boundary_s: np.ndarray  # (b, 2) arclength interval on the parent edge
    domain: object = field(default=None, repr=False)

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_triangles(self):
        return len(self.triangles)

    @property
    def h(self):
        return float(np.max(self.edge_lengths()))

    def edge_lengths(self):
        p = self.nodes[self.triangles]
        return np.linalg.norm(p - np.roll(p, -1, axis=1), axis=2)

    def areas(self):
        p = self.nodes[self.triangles]
        d1, d2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def angles(self):
        """Interior angles in degrees, shape (T, 3)."""
        p = self.nodes[self.triangles]
        out = np.empty((len(p), 3))
        for i in range(3):
            a = p[:, (i + 1) % 3] - p[:, i]
            b = p[:, (i + 2) % 3] - p[:, i]
            cosv = np.einsum("ij,ij->i", a, b) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
            out[:, i] = np.degrees(np.arccos(np.clip(cosv, -1.0, 1.0)))
        return out

    def boundary_nodes(self):
        return np.unique(self.boundary_edges)

    def edge_nodes(self, edge_id):
        """Nodes on polygon edge ``edge_id`` ordered by arclength, with their arclengths."""
        sel = self.boundary_tags == edge_id
        if not np.any(sel):
            return np.zeros(0, dtype=int), np.zeros(0)
        e = self.boundary_edges[sel]
        s = self.boundary_s[sel]
        nodes = np.concatenate([e[:, 0], e[:, 1]])
        ss = np.concatenate([s[:, 0], s[:, 1]])
        nodes, first = np.unique(nodes, return_index=True)
        ss = ss[first]
        order = np.argsort(ss, kind="stable")
        return nodes[order], ss[order]

    def check_conforming(self):
        """True when interior edges are shared by two triangles and the rest are exactly the boundary edges."""
        t = self.triangles
        e = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        if np.any(counts > 2):
            return False
        outer = uniq[counts == 1]
        bnd = np.unique(np.sort(self.boundary_edges, axis=1), axis=0)
        return outer.shape == bnd.shape and bool(np.all(outer == bnd))


def _boundary_input(domain, h):
    pts, segs, marks = [], [], []
    for k, e in enumerate(domain.edges):
        n = max(1, int(math.ceil(e.length / h - 1e-9)))
        for j in range(n):
            pts.append(e.start + e.tangent * (e.length * j / n))
    pts = np.array(pts)
    # segment markers: polygon edge index + 1 (Triangle reserves 0)
    counts = [max(1, int(math.ceil(e.length / h - 1e-9))) for e in domain.edges]
    idx = 0
    for k, n in enumerate(counts):
        for _ in range(n):
            segs.append((idx, (idx + 1) % len(pts)))
            marks.append(k + 1)
            idx += 1
    return pts, np.array(segs, dtype=np.int32), np.array(marks, dtype=np.int32)


def _tag_boundary(domain, nodes, segments, markers):
    edges = domain.edges
    out_e, tags, ss = [], [], []
    for (a, b), m in zip(segments, markers):
        e = edges[int(m) - 1]
        sa = float((nodes[a] - e.start) @ e.tangent)
        sb = float((nodes[b] - e.start) @ e.tangent)
        if sa > sb:
            a, b, sa, sb = b, a, sb, sa
        out_e.append((a, b))
        tags.append(e.id)
        ss.append((min(max(sa, 0.0), e.length), min(max(sb, 0.0), e.length)))
    order = np.lexsort((np.array(ss)[:, 0], np.array(tags)))
    return (
        np.array(out_e, dtype=np.int64)[order],
        np.array(tags, dtype=np.int64)[order],
        np.array(ss)[order],
    )


def triangulate(domain, h_target, min_angle=MIN_ANGLE_DEG, max_tries=12):
    """Quality triangulation with maximal edge length ``<= h_target``.

    Polygon edges are pre-split uniformly into pieces no longer than
    ``h_target``; Triangle may split them further. The area bound is
    tightened until the longest mesh edge satisfies the target.
    """
    if not h_target > 0:
        raise InvalidParameterError("h_target must be positive")
    pts, segs, marks = _boundary_input(domain, h_target)
    area = math.sqrt(3.0) / 4.0 * h_target**2
    for _ in range(max_tries):
        try:
            out = tr.triangulate(
                {"vertices": pts, "segments": segs, "segment_markers": marks[:, None]},
                f"pq{min_angle:.6f}a{area:.24f}Q",
            )
        except Exception as exc:  # Triangle raises bare RuntimeErrors
            raise MeshingError(f"Triangle failed: {exc}") from exc
        nodes = np.asarray(out["vertices"], dtype=float)
        tris = np.asarray(out["triangles"], dtype=np.int64)
        p = nodes[tris]
        hmax = float(np.linalg.norm(p - np.roll(p, -1, axis=1), axis=2).max())
        if hmax <= h_target * (1 + 1e-12):
            break
        area *= 0.8
    else:
        raise MeshingError(f"could not reach h <= {h_target:g} (best {hmax:g})")

    b_edges, b_tags, b_s = _tag_boundary(
        domain, nodes, np.asarray(out["segments"]), np.asarray(out["segment_markers"]).ravel()
    )
    mesh = TriMesh(nodes, tris, b_edges, b_tags, b_s, domain)
    if np.any(mesh.areas() <= 0):
        raise MeshingError("Triangle returned an inverted element")
    amin = float(mesh.angles().min())
    if amin < min_angle - 1e-6:
        t = int(np.argmin(mesh.angles().min(axis=1)))
        raise MeshingError(
            f"minimal angle {amin:.2f} deg < {min_angle} deg at triangle {t} "
            f"near {tuple(np.round(nodes[tris[t]].mean(axis=0), 6))}; "
            "an input corner is probably sharper than the bound"
        )
    return mesh


def refine(mesh):
    """Split every triangle into four through its edge midpoints."""
    t = mesh.triangles
    n = mesh.n_nodes
    e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    key = np.sort(e, axis=1)
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    inv = inv.ravel()
    mids = 0.5 * (mesh.nodes[uniq[:, 0]] + mesh.nodes[uniq[:, 1]])
    nodes = np.vstack([mesh.nodes, mids])
    nt = len(t)
    m01, m12, m20 = (n + inv[:nt], n + inv[nt : 2 * nt], n + inv[2 * nt :])
    a, b, c = t[:, 0], t[:, 1], t[:, 2]
    tris = np.concatenate(
        [
            np.column_stack([a, m01, m20]),
            np.column_stack([m01, b, m12]),
            np.column_stack([m20, m12, c]),
            np.column_stack([m01, m12, m20]),
        ]
    )
    lookup = {tuple(k): n + i for i, k in enumerate(uniq.tolist())}
    be, tags, ss = [], [], []
    for (p, q), tag, (s0, s1) in zip(mesh.boundary_edges.tolist(), mesh.boundary_tags, mesh.boundary_s):
        m = lookup[(min(p, q), max(p, q))]
        sm = 0.5 * (s0 + s1)
        be += [(p, m), (m, q)]
        tags += [tag, tag]
        ss += [(s0, sm), (sm, s1)]
    return TriMesh(nodes, tris, np.array(be), np.array(tags), np.array(ss), mesh.domain)


def move_mesh(mesh, field, t, area_guard=AREA_GUARD):
    """Displace every node by ``field`` at amplitude ``t`` (fixed connectivity)."""
    if t < 0:
        raise InvalidParameterError("amplitude t must be >= 0")
    if t == 0:
        return mesh
    disp = field.displacement(mesh.nodes, 1.0)
    a0 = mesh.areas()

    def ok(tt):
        moved = replace(mesh, nodes=mesh.nodes + tt * disp)
        return bool(np.all(moved.areas() >= area_guard * a0)), moved

    good, moved = ok(t)
    if good:
        return replace(moved, domain=None)
    lo, hi = 0.0, float(t)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if ok(mid)[0]:
            lo = mid
        else:
            hi = mid
    raise AmplitudeTooLargeError(
        f"amplitude {t:g} shrinks a triangle below {area_guard:.0%} of its area; "
        f"largest safe amplitude is {lo:.6g}",
        max_safe_t=lo,
    )


# ---------------------------------------------------------------------------
# export


def mesh_to_text(mesh):
    """Plain node/element listing: a count header, then nodes, triangles, boundary edges."""
    lines = [f"{mesh.n_nodes} {mesh.n_triangles} {len(mesh.boundary_edges)}"]
    lines += [f"{x:.17g} {y:.17g}" for x, y in mesh.nodes]
    lines += [f"{a} {b} {c}" for a, b, c in mesh.triangles]
    lines += [
        f"{a} {b} {int(tag)} {s0:.17g} {s1:.17g}"
        for (a, b), tag, (s0, s1) in zip(mesh.boundary_edges, mesh.boundary_tags, mesh.boundary_s)
    ]
    return "\n".join(lines) + "\n"


def mesh_from_text(text):
    it = iter(text.splitlines())
    n, nt, nb = (int(x) for x in next(it).split())
    nodes = np.array([[float(x) for x in next(it).split()] for _ in range(n)])
    tris = np.array([[int(x) for x in next(it).split()] for _ in range(nt)], dtype=np.int64)
    be, tags, ss = [], [], []
    for _ in range(nb):
        a, b, tag, s0, s1 = next(it).split()
        be.append((int(a), int(b)))
        tags.append(int(tag))
        ss.append((float(s0), float(s1)))
    return TriMesh(nodes, tris, np.array(be).reshape(-1, 2), np.array(tags), np.array(ss).reshape(-1, 2))
