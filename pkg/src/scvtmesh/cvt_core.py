"""CVT energy, cell moments, gradient, and the preconditioner constructions.

The tessellation energy is sum_i int_{V_i} |y - z_i|^2 rho(y) dsigma with
chordal (Euclidean) distances; its gradient per generator is
2 m_i z_i - 2 c_i where m_i and c_i are the mass and first moment of the
cell. All cell integrals run over the flat sub-triangle decomposition
(see delaunay.build_voronoi_geometry) with quadrature nodes radially
projected to the sphere before evaluating the integrand, so with rho = 1
the total mass is exactly the inscribed polyhedron's surface area.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .delaunay import SphericalTriangulation, VoronoiFans, build_voronoi_geometry
from .density import DensityField, eval_density
from .errors import (
    CentroidAtOriginError,
    FactorizationError,
    IncompleteCellError,
    NonpositiveDiagonalError,
)
from .geometry import QuadratureRule, normalize, planar_circumcenter_3d

logger = logging.getLogger(__name__)

EPS_CENTROID = 1e-12


@dataclass
class CellMoments:
    """Per-generator mass and first moment, with a completeness flag."""

    mass: np.ndarray      # (K,) m_i = int rho
    first: np.ndarray     # (K, 3) c_i = int y rho
    complete: np.ndarray  # (K,) bool: fan fully accumulated


@dataclass
class EnergyReport:
    """Energy, tangential gradient, and the Lloyd preconditioner diagonal."""

    energy: float
    grad: np.ndarray        # (K, 3) tangential gradient blocks
    grad_norm: float
    lloyd_diag: np.ndarray  # (K,) entries 2 c_i . z_i


def cell_quadrature(points, fans: VoronoiFans, density: DensityField,
                    rule: QuadratureRule, k: int, with_pairs: bool = False,
                    measure: str = "flat"):
    """Accumulate mass, first moment, and energy over sub-triangles.

    Sub-triangles arrive in canonical (sorted-triangle) order and are
    accumulated in that order, which keeps the result bitwise reproducible
    regardless of how the caller scheduled the regions. Returns
    (mass (k,), first (k, 3), energy, directed_pairs, pair_masses); the
    pair outputs give int_{T_ij} rho per directed cell/edge pair and are
    only computed when ``with_pairs`` (graph Laplacian assembly).

    ``measure`` selects the integration measure: "flat" uses the flat
    sub-triangle area (total mass = inscribed polyhedron area, the
    classic SCVT convention), "sphere" weights nodes by the radial
    projection Jacobian d/|x|^3 so every cell integral becomes the exact
    spherical one up to quadrature error (the setting under which the
    gradient formula is the exact derivative of the energy).
    """
    pts = np.asarray(points, dtype=float)
    mass = np.zeros(k)
    first = np.zeros((k, 3))
    if len(fans.cells) == 0:
        return mass, first, 0.0, None, None

    nodes = np.einsum("qv,svj->sqj", rule.bary, fans.verts)
    radii = np.linalg.norm(nodes, axis=-1)
    nodes = nodes / radii[..., None]
    rho = eval_density(density, nodes)                       # (S, Q)
    if measure == "sphere":
        nvec = np.cross(fans.verts[:, 1] - fans.verts[:, 0],
                        fans.verts[:, 2] - fans.verts[:, 0])
        nn = np.linalg.norm(nvec, axis=1)
        nn[nn == 0.0] = 1.0
        plane_d = np.abs(np.einsum("sj,sj->s", nvec / nn[:, None], fans.verts[:, 0]))
        rho = rho * (plane_d[:, None] / radii**3)
    elif measure != "flat":
        raise ValueError(f"unknown integration measure {measure!r}")
    w = rule.weights
    sub_mass = (rho @ w) * fans.signed_area                  # (S,)
    sub_first = np.einsum("sq,q,sqj->sj", rho, w, nodes) * fans.signed_area[:, None]

    z_cell = pts[fans.cells]                                 # (S, 3)
    diff = nodes - z_cell[:, None, :]
    sq = np.einsum("sqj,sqj->sq", diff, diff)
    sub_energy = ((rho * sq) @ w) * fans.signed_area
    energy = float(np.sum(sub_energy))

    np.add.at(mass, fans.cells, sub_mass)
    np.add.at(first, fans.cells, sub_first)

    if not with_pairs:
        return mass, first, energy, None, None
    pairs = np.stack([fans.cells, fans.edge_other], axis=1)
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    pairs = pairs[order]
    pm = sub_mass[order]
    edge_id = pairs[:, 0].astype(np.int64) * k + pairs[:, 1]
    uniq, inverse = np.unique(edge_id, return_inverse=True)
    agg = np.zeros(len(uniq))
    np.add.at(agg, inverse, pm)
    directed = np.stack([uniq // k, uniq % k], axis=1)
    return mass, first, energy, directed, agg


def compute_moments(points, tri: SphericalTriangulation, density: DensityField,
                    rule: QuadratureRule, owned=None, measure: str = "flat") -> CellMoments:
    """Cell masses and first moments over a triangulation.

    ``owned`` marks the generators whose fans are complete in ``tri``;
    moments of the rest are left at zero and flagged incomplete.
    """
    pts = np.asarray(points, dtype=float)
    k = len(pts)
    fans = build_voronoi_geometry(pts, tri, owned=owned)
    mass, first, _, _, _ = cell_quadrature(pts, fans, density, rule, k, measure=measure)
    complete = np.ones(k, dtype=bool) if owned is None else np.asarray(owned).copy()
    return CellMoments(mass=mass, first=first, complete=complete)


def constrained_centroids(moments: CellMoments) -> np.ndarray:
    """Radial projection of every cell's first moment onto the sphere."""
    if not moments.complete.all():
        bad = np.flatnonzero(~moments.complete)
        raise IncompleteCellError(f"centroids requested for incomplete cells {bad[:8].tolist()}")
    norms = np.linalg.norm(moments.first, axis=1)
    if np.any(norms <= EPS_CENTROID):
        bad = np.flatnonzero(norms <= EPS_CENTROID)
        raise CentroidAtOriginError(f"first moment ~0 for cells {bad[:8].tolist()}")
    return moments.first / norms[:, None]


def constrained_centroid(moments: CellMoments, i: int) -> np.ndarray:
    """Constrained mass centroid of one cell (the projection c_i/|c_i|)."""
    if not moments.complete[i]:
        raise IncompleteCellError(f"cell {i} has a truncated fan")
    c = moments.first[i]
    n = np.linalg.norm(c)
    if n <= EPS_CENTROID:
        raise CentroidAtOriginError(f"first moment ~0 for cell {i}")
    return c / n


def energy_and_gradient(points, moments: CellMoments, energy: float) -> EnergyReport:
    """Assemble the report from accumulated moments and energy.

    Full gradient blocks are 2 m_i z_i - 2 c_i; the tangential part
    reduces to 2 (c_i . z_i) z_i - 2 c_i, which is also what the report
    carries. The Lloyd preconditioner diagonal is 2 c_i . z_i.
    """
    pts = np.asarray(points, dtype=float)
    cz = np.einsum("ij,ij->i", moments.first, pts)
    grad = 2.0 * cz[:, None] * pts - 2.0 * moments.first
    return EnergyReport(
        energy=energy,
        grad=grad,
        grad_norm=float(np.linalg.norm(grad)),
        lloyd_diag=2.0 * cz,
    )


def lloyd_preconditioner(report: EnergyReport) -> np.ndarray:
    """Inverse diagonal 1/(2 c_i . z_i); raises if any entry is nonpositive.

    Applying this to the tangential gradient and stepping by -1 lands each
    generator (after renormalization) on its constrained centroid, i.e.
    the zero-history preconditioned step is exactly a Lloyd step.
    """
    d = report.lloyd_diag
    if np.any(d <= 0.0):
        bad = np.flatnonzero(d <= 0.0)
        raise NonpositiveDiagonalError(
            f"nonpositive Lloyd diagonal at generators {bad[:8].tolist()}"
        )
    return 1.0 / d


class LaplacianPreconditioner:
    """Density-weighted graph Laplacian over the Delaunay adjacency.

    a_ij = -int_{T_ij u T_ji} rho for adjacent cells and row sums are zero
    by construction (closed surface, no boundary terms), so the matrix is
    singular; a diagonal perturbation makes it positive definite:
    ``a6`` adds 1e-6 I, ``m2`` scales the diagonal by 1.01.
    """

    def __init__(self, k: int, directed_pairs, pair_masses, perturbation: str = "m2"):
        i = directed_pairs[:, 0]
        j = directed_pairs[:, 1]
        w = sp.coo_matrix((pair_masses, (i, j)), shape=(k, k))
        w = (w + w.T).tocsr()          # T_ij + T_ji per undirected edge
        diag = np.asarray(w.sum(axis=1)).ravel()
        self.matrix = sp.diags(diag) - w
        if perturbation == "a6":
            perturbed = self.matrix + 1e-6 * sp.identity(k)
        elif perturbation == "m2":
            lap = self.matrix.tolil()
            lap.setdiag(self.matrix.diagonal() * (1.0 + 1e-2))
            perturbed = lap
        else:
            raise ValueError(f"unknown perturbation {perturbation!r}")
        self.perturbation = perturbation
        self.perturbed = sp.csc_matrix(perturbed)
        try:
            self._lu = spla.splu(self.perturbed)
        except RuntimeError as exc:
            raise FactorizationError(f"perturbed Laplacian not factorizable: {exc}") from exc
        if np.any(self._lu.U.diagonal() <= 0.0):
            raise FactorizationError("perturbed Laplacian is numerically indefinite")

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve A_pert x = rhs; rhs may be (K,) or (K, d)."""
        out = self._lu.solve(np.asarray(rhs, dtype=float))
        if not np.all(np.isfinite(out)):
            raise FactorizationError("Laplacian solve produced non-finite values")
        return out


def graph_laplacian(points, tri: SphericalTriangulation, density: DensityField,
                    rule: QuadratureRule, perturbation: str = "m2") -> LaplacianPreconditioner:
    """Assemble and factor the graph Laplacian for a full triangulation."""
    pts = np.asarray(points, dtype=float)
    k = len(pts)
    fans = build_voronoi_geometry(pts, tri)
    _, _, _, directed, masses = cell_quadrature(pts, fans, density, rule, k, with_pairs=True)
    return LaplacianPreconditioner(k, directed, masses, perturbation)


def hessian_entries(points, tri: SphericalTriangulation, density: DensityField,
                    rule: QuadratureRule) -> np.ndarray:
    """Dense (3K, 3K) CVT energy Hessian for diagnostics.

    Diagonal blocks are 2 m_i I minus face-integral corrections; adjacent
    blocks carry the positive face integral; all other blocks vanish. Face
    integrals run over the Voronoi edge between the adjacent cells' flat
    circumcenters with 2-point Gauss quadrature. Intended for small K.
    """
    pts = np.asarray(points, dtype=float)
    k = len(pts)
    if k > 500:
        raise ValueError("hessian_entries is a diagnostic; K > 500 not supported")
    fans = build_voronoi_geometry(pts, tri)
    mass, _, _, _, _ = cell_quadrature(pts, fans, density, rule, k)

    h = np.zeros((3 * k, 3 * k))
    for i in range(k):
        h[3 * i:3 * i + 3, 3 * i:3 * i + 3] = 2.0 * mass[i] * np.eye(3)

    # Map each undirected edge to its two adjacent triangles' circumcenters.
    t = tri.triangles
    va, vb, vc = pts[t[:, 0]], pts[t[:, 1]], pts[t[:, 2]]
    occ = planar_circumcenter_3d(va, vb, vc)
    edges = {}
    for tid in range(len(t)):
        for (a, b) in ((0, 1), (1, 2), (2, 0)):
            key = (min(t[tid, a], t[tid, b]), max(t[tid, a], t[tid, b]))
            edges.setdefault(key, []).append(tid)

    gauss = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
    for (i, j), tids in edges.items():
        if len(tids) != 2:
            raise IncompleteCellError(f"edge ({i},{j}) not shared by two triangles")
        p0, p1 = occ[tids[0]], occ[tids[1]]
        nodes = p0[None, :] + gauss[:, None] * (p1 - p0)[None, :]
        seg = np.linalg.norm(p1 - p0)
        rho = eval_density(density, normalize(nodes))
        zij = np.linalg.norm(pts[j] - pts[i])
        if zij == 0.0 or seg == 0.0:
            continue
        di = pts[i][None, :] - nodes                # (2, 3) z_i - y at nodes
        dj = pts[j][None, :] - nodes
        wline = 0.5 * seg * (2.0 / zij) * rho       # per-node line weight
        block_ij = np.einsum("q,qk,ql->kl", wline, di, dj)
        block_ii = np.einsum("q,qk,ql->kl", wline, di, di)
        block_jj = np.einsum("q,qk,ql->kl", wline, dj, dj)
        h[3 * i:3 * i + 3, 3 * j:3 * j + 3] += block_ij
        h[3 * j:3 * j + 3, 3 * i:3 * i + 3] += block_ij.T
        h[3 * i:3 * i + 3, 3 * i:3 * i + 3] -= block_ii
        h[3 * j:3 * j + 3, 3 * j:3 * j + 3] -= block_jj
    return h
