"""Lowest eigenpairs of the discrete pencil and their cluster structure.

Large problems go through ARPACK in shift-invert mode (scipy's ``eigsh``
with a sparse LU of ``A - shift M``), small ones through dense LAPACK. The
returned vectors are always passed through a Rayleigh-Ritz step on the
computed subspace, which makes them M-orthonormal to roundoff and orders
them exactly; signs are fixed so that the largest-magnitude entry is
positive.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .errors import InvalidParameterError, SolverError
from .geometry import BC

DENSE_LIMIT = 400
LAMBDA_FLOOR = 1.0
DEFAULT_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class EigenPair:
    lam: float
    vector: np.ndarray  # dof vector, M-normalized
    residual: float
    index: int  # 1-based position in the spectrum


@dataclass(frozen=True)
class Cluster:
    r: int  # first index, 1-based
    m: int
    width: float
    rel_gap_below: float
    rel_gap_above: float

    @property
    def indices(self):
        return list(range(self.r, self.r + self.m))


@dataclass(frozen=True, eq=False)
class Spectrum:
    pairs: tuple
    system: object = field(default=None, repr=False)
    clusters: tuple = ()
    tau: float | None = None

    @property
    def k(self):
        return len(self.pairs)

    @property
    def lambdas(self):
        return np.array([p.lam for p in self.pairs])

    @property
    def vectors(self):
        return np.column_stack([p.vector for p in self.pairs])

    @property
    def residuals(self):
        return np.array([p.residual for p in self.pairs])

    def pair(self, index):
        return self.pairs[index - 1]

    def degenerate(self, limit=None):
        out = [c for c in self.clusters if c.m >= 2]
        if limit is not None:
            out = [c for c in out if c.r <= limit]
        return out

    def cluster_of(self, index):
        for cid, c in enumerate(self.clusters):
            if c.r <= index < c.r + c.m:
                return cid
        return -1

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "lambda", "residual", "cluster_id"])
        for p in self.pairs:
            w.writerow([p.index, repr(float(p.lam)), f"{p.residual:.3e}", self.cluster_of(p.index)])
        return buf.getvalue()


def _default_shift(system):
    mesh = system.mesh
    area = float(mesh.areas().sum())
    if system.bc is BC.NEUMANN:
        return -0.1 / area
    if system.bc is BC.ROBIN and system.sigma > 0:
        # Robin with sigma > 0 has negative eigenvalues; near a corner of
        # angle a they approach -sigma^2 / sin^2(a / 2)
        dom = mesh.domain
        amin = math.pi / 2
        if dom is not None:
            from .geometry import vertex_lipschitz

            slopes = vertex_lipschitz(dom)
            amin = min(amin, math.pi - 2 * math.atan(float(np.max(slopes))))
        return -2.0 * system.sigma**2 / math.sin(max(amin, 0.05) / 2) ** 2 - 1.0 / area
    return 0.0


def _det_start(n):
    return np.random.default_rng(20240611).standard_normal(n)


def _ritz(A, M, V):
    a = V.T @ (A @ V)
    b = V.T @ (M @ V)
    a = 0.5 * (a + a.T)
    b = 0.5 * (b + b.T)
    w, y = sla.eigh(a, b)
    return w, V @ y


def _fix_signs(V):
    idx = np.argmax(np.abs(V), axis=0)
    sign = np.sign(V[idx, np.arange(V.shape[1])])
    sign[sign == 0] = 1.0
    return V * sign


def _residuals(A, M, lam, V):
    MV = M @ V
    R = A @ V - MV * lam
    return np.linalg.norm(R, axis=0) / (np.maximum(np.abs(lam), LAMBDA_FLOOR) * np.linalg.norm(MV, axis=0))


def solve_lowest(system, k, tol=DEFAULT_TOL, shift=None):
    """The ``k`` lowest eigenpairs of ``A u = lambda M u``.

    The residual reported per pair is ``|A u - lambda M u| / (max(|lambda|, 1) |M u|)``.
    """
    k = int(k)
    n = system.n_dofs
    if k < 1:
        raise InvalidParameterError("k must be at least 1")
    if k > n:
        raise InvalidParameterError(f"k = {k} exceeds the number of degrees of freedom ({n})")
    if not tol > 0:
        raise InvalidParameterError("tol must be positive")
    A, M = system.A, system.Mr

    if n <= DENSE_LIMIT or k >= n - 1:
        w, V = sla.eigh(A.toarray(), M.toarray(), subset_by_index=[0, k - 1])
        w, V = _ritz(A, M, V)
    else:
        sigma0 = _default_shift(system) if shift is None else float(shift)
        scale = max(1.0, abs(sigma0))
        ncv = min(n - 1, max(2 * k + 1, k + 20))
        last = None
        for attempt in range(4):
            sig = sigma0 - attempt * 1e-3 * scale
            try:
                w, V = spla.eigsh(A, k=k, M=M, sigma=sig, which="LM", v0=_det_start(n), ncv=ncv, tol=tol * 1e-3)
            except (RuntimeError, spla.ArpackNoConvergence) as exc:
                last = exc
                ncv = min(n - 1, 2 * ncv)
                continue
            w, V = _ritz(A, M, V)
            if np.all(_residuals(A, M, w, V) <= tol):
                break
            last = SolverError("residuals above tolerance")
            ncv = min(n - 1, 2 * ncv)
        else:
            raise SolverError(f"eigensolver failed after shift retries: {last}")

    V = _fix_signs(V)
    res = _residuals(A, M, w, V)
    if np.any(res > tol):
        raise SolverError(f"residual {res.max():.2e} exceeds tol {tol:.1e}")
    pairs = tuple(EigenPair(float(w[i]), V[:, i].copy(), float(res[i]), i + 1) for i in range(k))
    return Spectrum(pairs, system)


def _rel(a, b):
    return (b - a) / max(abs(a), LAMBDA_FLOOR)


def detect_clusters(spectrum, tau_cluster):
    """Greedy left-to-right clustering by relative consecutive gap."""
    if not tau_cluster >= 0:
        raise InvalidParameterError("tau_cluster must be >= 0")
    lam = spectrum.lambdas
    groups = [[0]]
    for i in range(1, len(lam)):
        if _rel(lam[i - 1], lam[i]) < tau_cluster:
            groups[-1].append(i)
        else:
            groups.append([i])
    clusters = []
    for g in groups:
        lo, hi = g[0], g[-1]
        below = _rel(lam[lo - 1], lam[lo]) if lo > 0 else math.inf
        above = _rel(lam[hi], lam[hi + 1]) if hi + 1 < len(lam) else math.inf
        clusters.append(Cluster(lo + 1, len(g), float(lam[hi] - lam[lo]), below, above))
    return replace(spectrum, clusters=tuple(clusters), tau=float(tau_cluster))


def gap_quantity(spectrum, r, m, tau=None):
    """Smallest positive consecutive gap among lambda_1 .. lambda_{r+m}.

    Gaps whose relative size is below ``tau`` (default: the spectrum's
    clustering tolerance) count as zero.
    """
    if r < 1 or m < 1:
        raise InvalidParameterError("r and m must be positive")
    if spectrum.k < r + m + 1:
        raise InvalidParameterError(f"gap quantity needs {r + m + 1} eigenvalues, have {spectrum.k}")
    tau = (spectrum.tau or 0.0) if tau is None else tau
    lam = spectrum.lambdas[: r + m]
    gaps = [lam[j + 1] - lam[j] for j in range(len(lam) - 1) if _rel(lam[j], lam[j + 1]) > tau and lam[j + 1] > lam[j]]
    if not gaps:
        raise InvalidParameterError("no positive gap below the cluster")
    return float(min(gaps))


@lru_cache(maxsize=16)
def calibrate_tau(h, factor=10.0, floor=1e-9):
    """``factor`` times the relative discrete splitting of the unit square's 5 pi^2 pair at mesh size ``h``."""
    from .fem import assemble
    from .geometry import PolygonalDomain
    from .mesh import triangulate

    mesh = triangulate(PolygonalDomain.unit_square(), h)
    lam = solve_lowest(assemble(mesh, BC.DIRICHLET), 3).lambdas
    return max(factor * (lam[2] - lam[1]) / lam[1], floor)
