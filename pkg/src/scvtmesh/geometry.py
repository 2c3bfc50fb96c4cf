"""Unit-sphere primitives: tangent frames, stereographic maps, distances,
circumcircles, and quadrature over flat triangles.

Points are numpy arrays of shape (3,) or (..., 3) in Cartesian coordinates.
All functions accept batched input and are pure; callers are expected to
renormalize after arithmetic updates (see :func:`normalize`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

from .errors import AntipodeError, DegenerateTriangleError

# Degeneracy thresholds; overridable through RunConfig epsilon overrides.
EPS_PROJ = 1e-9
EPS_AREA = 1e-14


def normalize(v):
    """Scale vectors in the last axis to unit length."""
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def geodesic_distance(a, b):
    """Great-circle distance in radians, stable near 0 and pi.

    Uses atan2(|a x b|, a.b) rather than arccos(a.b), which loses digits
    at both ends of [0, pi].
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    cross = np.cross(a, b)
    sin_d = np.linalg.norm(cross, axis=-1)
    cos_d = np.sum(a * b, axis=-1)
    return np.arctan2(sin_d, cos_d)


@dataclass(frozen=True)
class TangentFrame:
    """Orthonormal frame (e1, e2, contact) of the plane tangent at ``contact``.

    The triple is right-handed: e1 x e2 = contact, so counterclockwise in
    plane coordinates corresponds to counterclockwise seen from outside
    the sphere.
    """

    contact: np.ndarray
    e1: np.ndarray
    e2: np.ndarray

    @classmethod
    def at(cls, contact) -> "TangentFrame":
        t = normalize(np.asarray(contact, dtype=float))
        # Pick the coordinate axis least aligned with t to seed e1.
        seed = np.zeros(3)
        seed[np.argmin(np.abs(t))] = 1.0
        e1 = normalize(np.cross(t, seed))
        e2 = np.cross(t, e1)
        return cls(contact=t, e1=e1, e2=e2)


def stereographic_project(z, frame: TangentFrame, eps: float = EPS_PROJ):
    """Project sphere points onto the plane tangent at ``frame.contact``.

    The map x = s*z + (s-1)*t with s = 2 / (t.(z+t)) sends the contact
    point to the plane origin and is conformal, so circumcircles (and the
    Delaunay property) survive the trip. Raises AntipodeError when any
    point is within ``eps`` of the projection singularity at -t.
    """
    z = np.asarray(z, dtype=float)
    t = frame.contact
    denom = np.sum(t * (z + t), axis=-1)
    if np.any(denom <= eps):
        raise AntipodeError("point at or near the antipode of the projection contact")
    s = 2.0 / denom
    x = s[..., None] * z + (s - 1.0)[..., None] * t
    return np.stack([np.sum((x - t) * frame.e1, axis=-1),
                     np.sum((x - t) * frame.e2, axis=-1)], axis=-1)


def stereographic_unproject(p, frame: TangentFrame):
    """Inverse of :func:`stereographic_project` for any finite plane point."""
    p = np.asarray(p, dtype=float)
    u = p[..., 0]
    v = p[..., 1]
    r2 = u * u + v * v
    scale = 1.0 / (4.0 + r2)
    z = ((4.0 - r2) * scale)[..., None] * frame.contact \
        + (4.0 * scale * u)[..., None] * frame.e1 \
        + (4.0 * scale * v)[..., None] * frame.e2
    return z


def flat_area(a, b, c):
    """Area of the flat (chordal) triangle spanned by 3D points."""
    cross = np.cross(np.asarray(b) - a, np.asarray(c) - a)
    return 0.5 * np.linalg.norm(cross, axis=-1)


def planar_circumcenter_3d(a, b, c):
    """In-plane circumcenter of a 3D triangle (batched).

    Lies in the triangle's plane and is equidistant from the vertices;
    its radial projection is the spherical circumcenter when the vertices
    sit on the sphere.
    """
    a = np.asarray(a, dtype=float)
    ab = np.asarray(b, dtype=float) - a
    ac = np.asarray(c, dtype=float) - a
    n = np.cross(ab, ac)
    n2 = np.sum(n * n, axis=-1, keepdims=True)
    ab2 = np.sum(ab * ab, axis=-1, keepdims=True)
    ac2 = np.sum(ac * ac, axis=-1, keepdims=True)
    return a + (ac2 * np.cross(n, ab) + ab2 * np.cross(ac, n)) / (2.0 * n2)


def spherical_circumcircle(a, b, c, eps: float = EPS_AREA):
    """Circumcenter on the sphere and geodesic circumradius of a triangle.

    The center is the unit normal of the vertex plane, oriented to the
    same side as the triangle (counterclockwise vertices seen from the
    center's side). Raises DegenerateTriangleError when the vertices are
    too close to a common great circle.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)
    n = np.cross(b - a, c - a)
    nn = np.linalg.norm(n, axis=-1)
    if np.any(nn <= eps):
        raise DegenerateTriangleError("triangle vertices nearly on a great circle")
    center = n / nn[..., None]
    radius = geodesic_distance(center, a)
    return center, radius


def _conical_product_rule(n: int):
    """Duffy/conical-product rule on the reference triangle.

    Tensor of an n-point Gauss-Jacobi(1,0) rule in the collapsed direction
    with an n-point Gauss-Legendre rule: n^2 all-positive nodes, exact for
    total degree <= 2n-1. Returned weights sum to 1 (area-normalized).
    """
    xj, wj = roots_jacobi(n, 1.0, 0.0)
    xl, wl = roots_legendre(n)
    xi = 0.5 * (xj + 1.0)     # [0, 1], weight (1-xi)
    eta = 0.5 * (xl + 1.0)
    wxi = wj / 4.0
    weta = wl / 2.0
    lam1 = np.repeat(xi, n)
    lam2 = np.tile(eta, n) * (1.0 - lam1)
    lam0 = 1.0 - lam1 - lam2
    bary = np.stack([lam0, lam1, lam2], axis=-1)
    weights = np.repeat(wxi, n) * np.tile(weta, n)
    return bary, weights / weights.sum()


@dataclass(frozen=True)
class QuadratureRule:
    """Barycentric nodes and unit-sum weights for flat-triangle quadrature."""

    name: str
    bary: np.ndarray      # (n, 3) barycentric coordinates
    weights: np.ndarray   # (n,), sums to 1

    @classmethod
    def four_point(cls) -> "QuadratureRule":
        bary, w = _conical_product_rule(2)
        return cls("4pt", bary, w)

    @classmethod
    def nine_point(cls) -> "QuadratureRule":
        bary, w = _conical_product_rule(3)
        return cls("9pt", bary, w)


FOUR_POINT = QuadratureRule.four_point()
NINE_POINT = QuadratureRule.nine_point()

QUADRATURE_RULES = {"4pt": FOUR_POINT, "9pt": NINE_POINT}


def integrate_triangle(a, b, c, f, rule: QuadratureRule = FOUR_POINT):
    """Quadrature of ``f`` over one flat triangle with nodes lifted to the sphere.

    Nodes are placed barycentrically on the flat triangle, radially
    projected to the unit sphere, and ``f`` is evaluated there; the flat
    triangle area is the measure. A zero-area triangle integrates to 0.
    ``f`` maps an (n, 3) array of points to scalars or (n, d) vectors.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)
    area = flat_area(a, b, c)
    if area == 0.0:
        probe = np.atleast_1d(np.asarray(f(normalize(a)[None, :])))
        return np.zeros(probe.shape[1:]) if probe.ndim > 1 else 0.0
    nodes = rule.bary @ np.stack([a, b, c])
    nodes = normalize(nodes)
    vals = np.asarray(f(nodes))
    if vals.ndim == 1:
        return float(np.sum(rule.weights * vals) * area)
    return np.sum(rule.weights[:, None] * vals, axis=0) * area


def icosahedron_vertices() -> np.ndarray:
    """The 12 unit icosahedron vertices (seed for bisection ladders and tests)."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    raw = np.array(
        [
            [-1, 0, phi], [1, 0, phi], [-1, 0, -phi], [1, 0, -phi],
            [0, phi, 1], [0, phi, -1], [0, -phi, 1], [0, -phi, -1],
            [phi, 1, 0], [phi, -1, 0], [-phi, 1, 0], [-phi, -1, 0],
        ],
        dtype=float,
    )
    return normalize(raw)


def random_sphere_points(k: int, seed: int) -> np.ndarray:
    """K points drawn uniformly on the sphere from a seeded generator."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((k, 3))
    return normalize(v)
