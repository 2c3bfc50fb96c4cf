"""Planar and spherical Delaunay triangulation.

The spherical construction is cap-local: project the points of one
subregion stereographically onto the tangent plane at the cap center,
triangulate in the plane, lift the triangles back, and keep only those
whose spherical circumcircle is provably inside the subregion. Kept
triangles are then exact pieces of the global spherical Delaunay
triangulation (conformality preserves circumcircles), so merging across
caps is deduplication, not stitching.

A whole-sphere triangulation is also available through the 3D convex
hull, which coincides with the spherical Delaunay triangulation for
points on the sphere; it serves as the serial baseline and bootstrap
path for coarse point sets.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, Delaunay as _SciPyDelaunay, QhullError

from .errors import (
    CollinearInputError,
    CoverageError,
    DegenerateTriangleError,
    InsufficientPointsError,
)
from .geometry import (
    EPS_PROJ,
    TangentFrame,
    flat_area,
    geodesic_distance,
    normalize,
    planar_circumcenter_3d,
    stereographic_project,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PlanarTriangulation:
    """Delaunay triangulation of 2D points carrying their original IDs."""

    points: np.ndarray     # (N, 2)
    ids: np.ndarray        # (N,) global point IDs
    triangles: np.ndarray  # (T, 3) local indices, counterclockwise
    neighbors: np.ndarray  # (T, 3) adjacent triangle index or -1


@dataclass(frozen=True)
class SphericalTriangulation:
    """Spherical Delaunay triangles with circumcircle data.

    ``triangles`` holds global generator IDs, counterclockwise seen from
    outside the sphere, rotated so the smallest ID leads and sorted
    lexicographically (the canonical order used for deduplication and
    for bitwise-reproducible accumulation).
    """

    triangles: np.ndarray      # (T, 3) int64
    circumcenters: np.ndarray  # (T, 3) unit vectors
    circumradii: np.ndarray    # (T,) geodesic radii

    @property
    def count(self) -> int:
        return len(self.triangles)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted ID pairs, lexicographic order."""
        e = np.concatenate(
            [self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]]
        )
        e.sort(axis=1)
        return np.unique(e, axis=0)


def _ccw_planar(points, triangles):
    """Force counterclockwise orientation in the plane."""
    p = points[triangles]
    det = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    flip = det < 0
    triangles = triangles.copy()
    triangles[flip] = triangles[flip][:, [0, 2, 1]]
    return triangles


def planar_delaunay(points, ids=None) -> PlanarTriangulation:
    """Delaunay triangulation of the convex hull of 2D points.

    Deterministic for a fixed input order; cocircular ties are broken by
    the kernel's joggle-free merged-facet handling, which is stable for
    identical input. Raises CollinearInputError for < 3 points or a
    degenerate (collinear) set.
    """
    points = np.asarray(points, dtype=float)
    if ids is None:
        ids = np.arange(len(points), dtype=np.int64)
    ids = np.asarray(ids, dtype=np.int64)
    if len(points) < 3:
        raise CollinearInputError(f"need >= 3 points, got {len(points)}")
    try:
        dt = _SciPyDelaunay(points)
    except QhullError as exc:
        raise CollinearInputError(f"degenerate planar input: {exc}") from exc
    if dt.simplices.size == 0:
        raise CollinearInputError("planar input is collinear")
    triangles = _ccw_planar(points, dt.simplices.astype(np.int64))
    return PlanarTriangulation(
        points=points, ids=ids, triangles=triangles, neighbors=dt.neighbors
    )


def in_circumcircle_violations(points2d, tri: PlanarTriangulation, margin=1e-12):
    """Brute-force count of points strictly inside planar circumcircles."""
    pts = np.asarray(points2d, dtype=float)
    a, b, c = (tri.points[tri.triangles[:, k]] for k in range(3))
    a3 = np.concatenate([a, np.zeros((len(a), 1))], axis=1)
    b3 = np.concatenate([b, np.zeros((len(b), 1))], axis=1)
    c3 = np.concatenate([c, np.zeros((len(c), 1))], axis=1)
    centers = planar_circumcenter_3d(a3, b3, c3)[:, :2]
    radii = np.linalg.norm(a - centers, axis=1)
    d = np.linalg.norm(pts[None, :, :] - centers[:, None, :], axis=2)
    inside = d < radii[:, None] - margin
    for k in range(3):
        inside[np.arange(len(centers)), tri.triangles[:, k]] = False
    return int(inside.sum())


def _canonical(triangles):
    """Rotate each ID triple so the smallest leads (orientation preserved)."""
    t = np.asarray(triangles, dtype=np.int64)
    lead = np.argmin(t, axis=1)
    out = np.empty_like(t)
    for r in range(3):
        rows = lead == r
        out[rows] = np.roll(t[rows], -r, axis=1)
    return out


def _canonical_sort(triangles, *companions):
    tris = _canonical(triangles)
    order = np.lexsort((tris[:, 2], tris[:, 1], tris[:, 0]))
    return (tris[order],) + tuple(c[order] for c in companions)


def _sphere_circumcircles(vertices, avoid=None):
    """Circumcenter/radius per triangle of on-sphere vertex triples.

    ``avoid`` selects the disk not containing that point (the projection
    antipode for cap-lifted triangles); by default the disk on the side
    of the triangle's orientation is taken.
    """
    a, b, c = vertices[:, 0], vertices[:, 1], vertices[:, 2]
    n = np.cross(b - a, c - a)
    nn = np.linalg.norm(n, axis=1)
    bad = nn <= 1e-300
    if np.any(bad):
        raise DegenerateTriangleError("degenerate triangle in spherical lift")
    centers = n / nn[:, None]
    radii = geodesic_distance(centers, a)
    if avoid is not None:
        wraps = geodesic_distance(centers, avoid) < radii
        centers[wraps] = -centers[wraps]
        radii[wraps] = np.pi - radii[wraps]
    return centers, radii


def _ccw_outward(triangles, pts):
    v = pts[triangles]
    det = np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2]))
    flip = det < 0
    triangles = triangles.copy()
    triangles[flip] = triangles[flip][:, [0, 2, 1]]
    return triangles


def convex_hull_delaunay(points) -> SphericalTriangulation:
    """Global spherical Delaunay triangulation via the 3D convex hull.

    For unit points the hull facets are exactly the Delaunay triangles.
    Raises InsufficientPointsError when a point ends up inside the hull
    (duplicates or off-sphere input).
    """
    pts = np.asarray(points, dtype=float)
    if len(pts) < 4:
        raise InsufficientPointsError(f"need >= 4 points on the sphere, got {len(pts)}")
    try:
        hull = ConvexHull(pts)
    except QhullError as exc:
        raise InsufficientPointsError(f"degenerate global point set: {exc}") from exc
    if len(hull.vertices) != len(pts):
        raise InsufficientPointsError(
            f"{len(pts) - len(hull.vertices)} points fell inside the convex hull"
        )
    triangles = _ccw_outward(hull.simplices.astype(np.int64), pts)
    (triangles,) = _canonical_sort(triangles)
    centers, radii = _sphere_circumcircles(pts[triangles])
    return SphericalTriangulation(triangles, centers, radii)


def cap_spherical_delaunay(points, ids, contact, eps_proj: float = EPS_PROJ) -> SphericalTriangulation:
    """Spherical Delaunay triangulation of one cap's point subset.

    Projects the subset stereographically onto the plane tangent at
    ``contact``, triangulates there, and lifts the triangles back with
    circumcircles recomputed on the sphere. Every returned triangle is
    Delaunay with respect to the subset; interior selection against the
    covering makes it Delaunay with respect to the full point set.
    """
    points = np.asarray(points, dtype=float)
    ids = np.asarray(ids, dtype=np.int64)
    if len(points) < 3:
        raise InsufficientPointsError(
            f"cap holds {len(points)} points; enlarge overlaps or lower the partition count"
        )
    frame = TangentFrame.at(contact)
    plane = stereographic_project(points, frame, eps=eps_proj)
    planar = planar_delaunay(plane, ids)
    local = _ccw_outward(planar.triangles, points)
    (triangles,) = _canonical_sort(ids[local])
    local = _local_index(ids, triangles)
    centers, radii = _sphere_circumcircles(points[local], avoid=-frame.contact)
    return SphericalTriangulation(triangles, centers, radii)


def _local_index(ids, triangles):
    """Map global IDs in ``triangles`` to row indices of ``ids`` (sorted or not)."""
    order = np.argsort(ids, kind="stable")
    pos = np.searchsorted(ids[order], triangles)
    return order[pos]


def select_interior_triangles(
    tri: SphericalTriangulation, cap_center, cap_radius: float
) -> SphericalTriangulation:
    """Keep triangles whose circumcircle lies inside a geodesic disk.

    Criterion: arc distance from the cap center to the circumcenter plus
    the circumradius must not exceed the cap radius.
    """
    d = geodesic_distance(tri.circumcenters, np.asarray(cap_center, dtype=float))
    keep = d + tri.circumradii <= cap_radius
    return SphericalTriangulation(
        tri.triangles[keep], tri.circumcenters[keep], tri.circumradii[keep]
    )


def select_region_triangles(
    tri: SphericalTriangulation, centers, region_cells
) -> SphericalTriangulation:
    """Containment test against a Voronoi-sort region (union of cells).

    Sufficient condition for the circumdisk to stay inside the union of
    the region's partition cells: every point of the disk is closer to
    some region center than to any outside center, guaranteed when
    min-outside-distance minus min-region-distance >= the disk diameter.
    """
    centers = np.asarray(centers, dtype=float)
    inside = np.zeros(len(centers), dtype=bool)
    inside[np.asarray(list(region_cells), dtype=int)] = True
    if inside.all():
        return tri
    d = np.arccos(np.clip(tri.circumcenters @ centers.T, -1.0, 1.0))
    d_in = d[:, inside].min(axis=1)
    d_out = d[:, ~inside].min(axis=1)
    keep = d_out - d_in >= 2.0 * tri.circumradii
    return SphericalTriangulation(
        tri.triangles[keep], tri.circumcenters[keep], tri.circumradii[keep]
    )


def merge_triangulations(parts) -> SphericalTriangulation:
    """Union of per-cap triangulations with canonical deduplication.

    Overlapping caps may keep the same (identical) triangle; duplicates
    are resolved by the canonical ID order, taking the copy from the
    earliest part so the result is independent of scheduling.
    """
    parts = [p for p in parts if p.count]
    if not parts:
        raise CoverageError("no triangles survived interior selection")
    triangles = np.concatenate([p.triangles for p in parts])
    centers = np.concatenate([p.circumcenters for p in parts])
    radii = np.concatenate([p.circumradii for p in parts])
    triangles, centers, radii = _canonical_sort(triangles, centers, radii)
    _, first = np.unique(triangles, axis=0, return_index=True)
    first.sort()
    return SphericalTriangulation(triangles[first], centers[first], radii[first])


def validate_closed(tri: SphericalTriangulation, k: int) -> None:
    """Euler counts of a closed full-sphere triangulation: T = 2K-4, E = 3K-6."""
    t = tri.count
    e = len(tri.edges())
    if t != 2 * k - 4 or e != 3 * k - 6:
        raise CoverageError(
            f"triangulation not closed: K={k}, T={t} (want {2 * k - 4}), E={e} (want {3 * k - 6})"
        )


def empty_circumcircle_violations(points, tri: SphericalTriangulation, margin: float = 1e-12) -> int:
    """Brute-force Delaunay oracle: generators strictly inside any circumcircle."""
    pts = np.asarray(points, dtype=float)
    cosd = np.clip(tri.circumcenters @ pts.T, -1.0, 1.0)
    d = np.arccos(cosd)
    inside = d < (tri.circumradii[:, None] - margin)
    for kk in range(3):
        inside[np.arange(tri.count), tri.triangles[:, kk]] = False
    return int(inside.sum())


@dataclass(frozen=True)
class VoronoiFans:
    """Flat sub-triangle decomposition of Voronoi cells over a triangulation.

    Each Delaunay triangle is split at its in-plane circumcenter and
    chordal edge midpoints into six coplanar sub-triangles, two per
    vertex; the split lines lie exactly on the perpendicular bisector
    planes, so the sub-triangles tile the flat triangle and partition the
    inscribed polyhedron into exact Voronoi pieces. Signed areas (against
    the outward triangle normal) make the tiling an identity even when a
    circumcenter falls outside its triangle; such triangles are counted
    in ``obtuse_count``.
    """

    verts: np.ndarray        # (S, 3, 3) sub-triangle vertex coordinates
    cells: np.ndarray        # (S,) owning generator ID
    edge_other: np.ndarray   # (S,) generator across the leaned-on edge
    signed_area: np.ndarray  # (S,)
    obtuse_count: int


def build_voronoi_geometry(points, tri: SphericalTriangulation, owned=None) -> VoronoiFans:
    """Sub-triangle fans of the Voronoi cells (optionally only owned cells).

    ``owned`` is a boolean mask over global IDs; sub-triangles belonging
    to unowned generators are dropped (their fans may be truncated by the
    region boundary, which is only legal in overlap layers).
    """
    pts = np.asarray(points, dtype=float)
    t = tri.triangles
    va, vb, vc = pts[t[:, 0]], pts[t[:, 1]], pts[t[:, 2]]
    oc = planar_circumcenter_3d(va, vb, vc)
    mab = 0.5 * (va + vb)
    mbc = 0.5 * (vb + vc)
    mca = 0.5 * (vc + va)

    n = np.cross(vb - va, vc - va)
    nn = np.linalg.norm(n, axis=1, keepdims=True)
    n = n / nn
    outward = np.einsum("ij,ij->i", n, va + vb + vc) < 0
    n[outward] = -n[outward]

    # (T, 6, 3, 3): vertex, edge midpoint, circumcenter per sub-triangle
    v0 = np.stack([va, mab, vb, mbc, vc, mca], axis=1)
    v1 = np.stack([mab, vb, mbc, vc, mca, va], axis=1)
    v2 = np.broadcast_to(oc[:, None, :], v0.shape)
    cells = np.stack([t[:, 0], t[:, 1], t[:, 1], t[:, 2], t[:, 2], t[:, 0]], axis=1)
    edge_other = np.stack([t[:, 1], t[:, 0], t[:, 2], t[:, 1], t[:, 0], t[:, 2]], axis=1)

    cross = np.cross(v1 - v0, v2 - v0)
    signed = 0.5 * np.einsum("tsj,tj->ts", cross, n)
    obtuse = int(np.any(signed < 0, axis=1).sum())
    if obtuse:
        logger.debug("circumcenter outside triangle for %d triangles", obtuse)

    verts = np.stack([v0, v1, v2], axis=2).reshape(-1, 3, 3)
    cells = cells.reshape(-1)
    edge_other = edge_other.reshape(-1)
    signed = signed.reshape(-1)
    if owned is not None:
        keep = np.asarray(owned)[cells]
        verts, cells, edge_other, signed = (
            verts[keep], cells[keep], edge_other[keep], signed[keep]
        )
    return VoronoiFans(verts, cells, edge_other, signed, obtuse)


def subdivide_fans(fans: VoronoiFans, depth: int) -> VoronoiFans:
    """Refine each sub-triangle into 4**depth congruent in-plane children.

    Children inherit the parent's cell/edge labels and a quarter of its
    signed area per level, so all tiling identities are preserved exactly.
    Used to push the quadrature toward the exact cell integrals (the
    finite-difference gradient oracle and convergence studies).
    """
    verts = fans.verts
    cells = fans.cells
    edge_other = fans.edge_other
    signed = fans.signed_area
    for _ in range(depth):
        v0, v1, v2 = verts[:, 0], verts[:, 1], verts[:, 2]
        m01, m12, m02 = 0.5 * (v0 + v1), 0.5 * (v1 + v2), 0.5 * (v0 + v2)
        verts = np.concatenate([
            np.stack([v0, m01, m02], axis=1),
            np.stack([m01, v1, m12], axis=1),
            np.stack([m02, m12, v2], axis=1),
            np.stack([m01, m12, m02], axis=1),
        ])
        cells = np.tile(cells, 4)
        edge_other = np.tile(edge_other, 4)
        signed = np.tile(signed / 4.0, 4)
    return VoronoiFans(verts, cells, edge_other, signed, fans.obtuse_count)


def validate_fans(fans: VoronoiFans, owned_ids) -> None:
    """Check that every owned generator's fan closes into a full umbrella.

    In a closed fan each neighbor edge is leaned on by exactly two
    sub-triangles. A broken umbrella means the local triangulation lost a
    globally-Delaunay triangle to interior selection, i.e. the covering's
    overlap is too thin for this point set.
    """
    pairs = np.stack([fans.cells, fans.edge_other], axis=1)
    uniq, counts = np.unique(pairs, axis=0, return_counts=True)
    bad = counts != 2
    if np.any(bad):
        gens = np.unique(uniq[bad][:, 0])
        raise CoverageError(
            f"truncated Voronoi fans at generators {gens[:8].tolist()}"
            f"{'...' if len(gens) > 8 else ''}; enlarge region overlaps"
        )
    have = np.unique(fans.cells)
    missing = np.setdiff1d(np.asarray(list(owned_ids)), have)
    if len(missing):
        raise CoverageError(f"no triangles at owned generators {missing[:8].tolist()}")
