"""Overlapping domain decomposition of the sphere from a coarse CVT.

The sphere is partitioned by the Voronoi cells of p precomputed CVT
centers. Each cell's region for parallel triangulation is the Voronoi
sort: the owned cell plus its immediately adjacent cells; two-level
neighbor lists cover the point exchanges needed to refresh overlap
layers. Points carry two positions: the arithmetic position (the owner
cell frozen at decomposition time, fixing the distributed vector layout)
and the geometric position (the current nearest center).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .density import DensityField, eval_density, sample_by_density
from .errors import UnderfilledPartitionWarning
from .geometry import geodesic_distance, normalize

logger = logging.getLogger(__name__)

MIN_POINTS_PER_CELL = 16


@dataclass(frozen=True)
class Covering:
    """Partition cell centers with one- and two-level neighbor lists."""

    centers: np.ndarray        # (p, 3)
    one_level: tuple           # p tuples of adjacent cell indices
    two_level: tuple           # p tuples incl. the cell itself and 2-hop neighbors

    @property
    def cell_count(self) -> int:
        return len(self.centers)

    def region_cells(self, l: int) -> np.ndarray:
        """Voronoi-sort region: the owned cell and its one-level neighbors."""
        return np.asarray((l,) + self.one_level[l], dtype=int)

    def disk_radius(self, l: int) -> float:
        """Geodesic-disk covering radius: max distance to adjacent centers."""
        return float(
            geodesic_distance(self.centers[l], self.centers[list(self.one_level[l])]).max()
        )


@dataclass(frozen=True)
class PointAssignment:
    """Arithmetic (frozen owner) and geometric (current nearest) positions."""

    arithmetic: np.ndarray  # (K,)
    geometric: np.ndarray   # (K,)


def nearest_cell(points, centers) -> np.ndarray:
    """Index of the Euclidean-nearest center per point; ties to the lowest index."""
    scores = np.asarray(points, dtype=float) @ np.asarray(centers, dtype=float).T
    return np.argmax(scores, axis=1)


def _neighbor_lists(triangles, p):
    adj = [set() for _ in range(p)]
    for a, b, c in np.asarray(triangles):
        adj[a].update((b, c))
        adj[b].update((a, c))
        adj[c].update((a, b))
    one = tuple(tuple(sorted(s)) for s in adj)
    two = []
    for l in range(p):
        reach = {l} | set(one[l])
        for m in one[l]:
            reach |= set(one[m])
        two.append(tuple(sorted(reach)))
    return one, tuple(two)


def bootstrap_partition_cvt(p: int, seed: int, density: DensityField | None = None,
                            movement_tol: float = 1e-3, max_iterations: int = 200) -> Covering:
    """Partition information from a coarse CVT of p cells.

    Monte Carlo initialization followed by Lloyd iterations to a loose
    movement tolerance; neighbor lists come from the coarse Delaunay
    adjacency. The density defaults to constant; pass the target mesh
    density to get a load-balanced (density-matched) decomposition.
    """
    # Local imports: cvt_core/delaunay sit above partition in the layering
    # only for this bootstrap conveniences.
    from .delaunay import build_voronoi_geometry, convex_hull_delaunay
    from .cvt_core import cell_quadrature
    from .geometry import FOUR_POINT

    if p < 2:
        raise ValueError("need at least 2 partition cells")
    if density is None:
        density = DensityField(variant="const")
    centers = sample_by_density(density, p, seed)
    if p < 4:
        # Too few cells for a triangulation; everyone neighbors everyone.
        allcells = tuple(range(p))
        one = tuple(tuple(m for m in allcells if m != l) for l in range(p))
        return Covering(centers=centers, one_level=one, two_level=(allcells,) * p)

    tri = convex_hull_delaunay(centers)
    for it in range(max_iterations):
        fans = build_voronoi_geometry(centers, tri)
        _, first, _, _, _ = cell_quadrature(centers, fans, density, FOUR_POINT, p)
        new = normalize(first)
        movement = np.abs(new - centers).max()
        centers = new
        tri = convex_hull_delaunay(centers)
        if movement <= movement_tol:
            logger.debug("partition CVT converged after %d Lloyd steps", it + 1)
            break
    one, two = _neighbor_lists(tri.triangles, p)
    return Covering(centers=centers, one_level=one, two_level=two)


def assign_points(points, cov: Covering, arithmetic=None) -> PointAssignment:
    """Distribute points into partition cells.

    The geometric position is the nearest-center cell; the arithmetic
    position is frozen from ``arithmetic`` when given (re-assignment
    during iteration) or initialized to the geometric one (fresh
    decomposition). Warns when the point set is thinner than 16 points
    per cell, below which overlap layers may not contain whole fans.
    """
    points = np.asarray(points, dtype=float)
    k = len(points)
    p = cov.cell_count
    if k < MIN_POINTS_PER_CELL * p:
        warnings.warn(
            f"{k} points over {p} partition cells is below the {MIN_POINTS_PER_CELL}x"
            " floor; triangulation coverage may fail",
            UnderfilledPartitionWarning,
            stacklevel=2,
        )
    geometric = nearest_cell(points, cov.centers)
    if arithmetic is None:
        arithmetic = geometric.copy()
    else:
        arithmetic = np.asarray(arithmetic).copy()
    return PointAssignment(arithmetic=arithmetic, geometric=geometric)


def detect_migration(assign: PointAssignment, cov: Covering) -> str:
    """Classify point movement since decomposition.

    ``in-place`` if nothing left its arithmetic cell, ``neighbor-move``
    when moves stayed within one-level neighbors, ``out-of-range`` when a
    point escaped its initial neighborhood (forces a decomposition reset
    and an LBFGS history clear).
    """
    moved = assign.geometric != assign.arithmetic
    if not np.any(moved):
        return "in-place"
    for i in np.flatnonzero(moved):
        if assign.geometric[i] not in cov.one_level[assign.arithmetic[i]]:
            return "out-of-range"
    return "neighbor-move"


def region_members(assign: PointAssignment, cov: Covering, l: int) -> np.ndarray:
    """Global IDs of the points inside cell l's Voronoi-sort region."""
    cells = cov.region_cells(l)
    mask = np.isin(assign.geometric, cells)
    return np.flatnonzero(mask)


def partition_summary(points, assign: PointAssignment, cov: Covering,
                      density: DensityField | None = None) -> dict:
    """Diagnostics: per-cell counts, neighbor lists, and density stats."""
    p = cov.cell_count
    counts = np.bincount(assign.geometric, minlength=p)
    info = {
        "cells": p,
        "points": int(len(assign.geometric)),
        "owned_counts": counts.tolist(),
        "max_owned": int(counts.max()),
        "mean_owned": float(counts.mean()),
        "centers": np.asarray(cov.centers).tolist(),
        "one_level": [list(n) for n in cov.one_level],
        "two_level": [list(n) for n in cov.two_level],
    }
    if density is not None:
        rho = eval_density(density, cov.centers)
        info["center_density"] = np.asarray(rho).tolist()
    return info
