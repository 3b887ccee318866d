"""P1 finite element forms for the Laplace eigenproblem.

K is the gradient form, M the mass form and B the boundary mass form. The
generalized problem solved downstream is ``A u = lambda M u`` with
``A = K`` (Dirichlet, Neumann) or ``A = K - sigma B`` (Robin, with the
condition written ``sigma u = du/dnu``). Dirichlet conditions are imposed by
dropping boundary rows and columns.

All element integrals are exact for P1, so there is no quadrature error.
Matrices are built with a single COO -> CSR conversion, which sums
duplicates in a fixed order; repeated assemblies are bitwise identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .errors import InvalidParameterError, UnknownEdgeError
from .geometry import BC

_MASS_REF = (np.ones((3, 3)) + np.eye(3)) / 12.0
_EDGE_MASS_REF = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0


def as_bc(bc):
    try:
        return BC(bc.lower() if isinstance(bc, str) else bc)
    except ValueError:
        raise InvalidParameterError(f"unknown boundary condition {bc!r}") from None


def p1_gradients(nodes, triangles):
    """Barycentric gradients per triangle, shape (T, 3, 2), and signed areas."""
    p = nodes[triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    area = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    # grad phi_i = J^{-T} grad_ref phi_i, written through the opposite edges
    e = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
    grads = np.stack([-e[..., 1], e[..., 0]], axis=-1) / (2.0 * area[:, None, None])
    return grads, area


def element_matrices(nodes, triangles):
    """Element stiffness and mass matrices, each of shape (T, 3, 3)."""
    grads, area = p1_gradients(nodes, triangles)
    ke = area[:, None, None] * np.einsum("tik,tjk->tij", grads, grads)
    me = area[:, None, None] * _MASS_REF
    return ke, me


def _scatter(index, blocks, n):
    rows = np.repeat(index, index.shape[1], axis=1).ravel()
    cols = np.tile(index, (1, index.shape[1])).ravel()
    mat = sp.coo_matrix((blocks.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    mat.sum_duplicates()
    mat.eliminate_zeros()
    mat.sort_indices()
    return mat


def _edge_mass(nodes, edges):
    length = np.linalg.norm(nodes[edges[:, 1]] - nodes[edges[:, 0]], axis=1)
    return length[:, None, None] * _EDGE_MASS_REF


class EdgeDofs(NamedTuple):
    nodes: np.ndarray  # mesh node indices ordered by arclength
    dofs: np.ndarray  # system indices, -1 where eliminated (Dirichlet)
    s: np.ndarray  # arclength on the parent polygon edge


@dataclass(frozen=True, eq=False)
class DiscreteSystem:
    mesh: object
    bc: BC
    sigma: float
    K: sp.csr_matrix  # full nodal matrices
    M: sp.csr_matrix
    B: sp.csr_matrix
    free: np.ndarray  # nodes that carry a dof, in dof order
    node_to_dof: np.ndarray  # -1 for eliminated nodes
    _reduced: dict = field(default_factory=dict, repr=False)

    @property
    def n_dofs(self):
        return len(self.free)

    def _restrict(self, name, mat):
        if name not in self._reduced:
            if self.bc is BC.DIRICHLET:
                mat = mat[self.free][:, self.free].tocsr()
            self._reduced[name] = mat
        return self._reduced[name]

    @property
    def Kr(self):
        return self._restrict("K", self.K)

    @property
    def Mr(self):
        return self._restrict("M", self.M)

    @property
    def Br(self):
        return self._restrict("B", self.B)

    @property
    def A(self):
        """The effective form: K, or K - sigma B for Robin."""
        if "A" not in self._reduced:
            a = self.Kr - self.sigma * self.Br if self.bc is BC.ROBIN else self.Kr
            self._reduced["A"] = a.tocsr()
        return self._reduced["A"]

    def expand(self, vectors):
        """Lift dof vectors (n_dofs,) or (n_dofs, k) to nodal values; eliminated nodes get 0."""
        v = np.asarray(vectors)
        out = np.zeros((self.mesh.n_nodes,) + v.shape[1:], dtype=v.dtype)
        out[self.free] = v
        return out

    def restrict(self, nodal):
        return np.asarray(nodal)[self.free]


def assemble(mesh, bc, sigma=0.0):
    bc = as_bc(bc)
    sigma = float(sigma)
    if bc is BC.ROBIN and sigma == 0.0:
        raise InvalidParameterError("Robin conditions need a non-zero sigma")
    n = mesh.n_nodes
    ke, me = element_matrices(mesh.nodes, mesh.triangles)
    K = _scatter(mesh.triangles, ke, n)
    M = _scatter(mesh.triangles, me, n)
    B = _scatter(mesh.boundary_edges, _edge_mass(mesh.nodes, mesh.boundary_edges), n)
    if bc is BC.DIRICHLET:
        keep = np.ones(n, dtype=bool)
        keep[mesh.boundary_nodes()] = False
        free = np.flatnonzero(keep)
    else:
        free = np.arange(n)
    node_to_dof = np.full(n, -1, dtype=np.int64)
    node_to_dof[free] = np.arange(len(free))
    return DiscreteSystem(mesh, bc, sigma if bc is BC.ROBIN else 0.0, K, M, B, free, node_to_dof)


def boundary_trace_indices(system, edge_id):
    mesh = system.mesh
    if mesh.domain is not None:
        mesh.domain.edge(edge_id)  # raises for unknown ids
    nodes, s = mesh.edge_nodes(edge_id)
    if len(nodes) == 0:
        raise UnknownEdgeError(f"no mesh boundary edges carry edge id {edge_id}")
    return EdgeDofs(nodes, system.node_to_dof[nodes], s)


def form_derivatives(system, velocity):
    """d/dt of (K, M, B) under node motion ``x + t * velocity``, reduced to dofs.

    ``velocity`` holds one 2-vector per mesh node. With P1 motion the
    derivative is exact: for the interpolated field V (constant gradient DV
    per triangle)

        K' = int div(V) grad phi_i . grad phi_j - grad phi_i . (DV + DV^T) grad phi_j
        M' = div(V) M_e,        B' = (dL/dt / L) B_e.
    """
    mesh = system.mesh
    V = np.asarray(velocity, dtype=float)
    grads, area = p1_gradients(mesh.nodes, mesh.triangles)
    DV = np.einsum("tia,tib->tab", V[mesh.triangles], grads)  # dV_a/dx_b
    div = DV[:, 0, 0] + DV[:, 1, 1]
    S = DV + np.swapaxes(DV, 1, 2)
    ke = area[:, None, None] * (
        div[:, None, None] * np.einsum("tik,tjk->tij", grads, grads)
        - np.einsum("tia,tab,tjb->tij", grads, S, grads)
    )
    me = (area * div)[:, None, None] * _MASS_REF
    e = mesh.boundary_edges
    d = mesh.nodes[e[:, 1]] - mesh.nodes[e[:, 0]]
    length = np.linalg.norm(d, axis=1)
    dlen = np.einsum("ij,ij->i", d, V[e[:, 1]] - V[e[:, 0]]) / length
    be = dlen[:, None, None] * _EDGE_MASS_REF
    n = mesh.n_nodes
    out = []
    for mat in (_scatter(mesh.triangles, ke, n), _scatter(mesh.triangles, me, n), _scatter(e, be, n)):
        if system.bc is BC.DIRICHLET:
            mat = mat[system.free][:, system.free].tocsr()
        out.append(mat)
    return tuple(out)


def to_coo_text(matrix):
    """Coordinate listing ``row col value`` (0-based), header ``n_rows n_cols nnz``."""
    m = sp.coo_matrix(matrix)
    order = np.lexsort((m.col, m.row))
    lines = [f"{m.shape[0]} {m.shape[1]} {m.nnz}"]
    lines += [f"{i} {j} {v:.17g}" for i, j, v in zip(m.row[order], m.col[order], m.data[order])]
    return "\n".join(lines) + "\n"
