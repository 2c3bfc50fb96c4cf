"""End-to-end drivers: the per-iteration parallel preprocess (assign ->
local triangulation -> owned-cell integration -> deterministic gather),
bisection refinement, and the optimize-bisect ladder.

Workers (threads or forked processes) each handle whole subregions; the
reduction runs in a fixed region order over disjoint owned-generator
index sets, so energies, gradients, and meshes are bitwise identical for
any worker count.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .cvt_core import LaplacianPreconditioner, cell_quadrature
from .delaunay import (
    SphericalTriangulation,
    _local_index,
    build_voronoi_geometry,
    cap_spherical_delaunay,
    convex_hull_delaunay,
    merge_triangulations,
    select_region_triangles,
    validate_closed,
    validate_fans,
)
from .density import DensityField, density_preset, sample_by_density
from .errors import (
    AntipodeError,
    CollinearInputError,
    ConfigError,
    CoverageError,
    InsufficientPointsError,
    ScvtError,
)
from .geometry import EPS_PROJ, QUADRATURE_RULES, QuadratureRule, normalize
from .optimizer import EvalResult, MinimizeResult, StoppingCriteria, minimize
from .partition import Covering, assign_points, bootstrap_partition_cvt, detect_migration

logger = logging.getLogger(__name__)

MAX_PARTITIONS = 64
POINTS_PER_PARTITION = 160  # partition sizing heuristic for default p


def default_partitions(k: int) -> int:
    return max(8, min(MAX_PARTITIONS, k // POINTS_PER_PARTITION))


def default_quadrature(density_name: str) -> str:
    # The widest-ratio preset has extremely coarse cells; give it the
    # higher-order rule.
    return "9pt" if density_name == "x64" else "4pt"


def _region_task(payload):
    """Triangulate one subregion and integrate its owned cells.

    Runs on a worker; pure function of the payload so results do not
    depend on scheduling. Returns owned moments, the region's energy
    share, and optionally Laplacian pair masses and kept triangles.
    """
    coords = payload["coords"]
    ids = payload["ids"]
    owned_mask = payload["owned"]
    n = len(ids)
    sub = cap_spherical_delaunay(coords, ids, payload["contact"], eps_proj=payload["eps_proj"])
    kept = select_region_triangles(sub, payload["centers"], payload["region_cells"])
    if kept.count == 0:
        raise CoverageError("interior selection kept no triangles")
    local = SphericalTriangulation(
        _local_index(ids, kept.triangles), kept.circumcenters, kept.circumradii
    )
    fans = build_voronoi_geometry(coords, local, owned=owned_mask)
    validate_fans(fans, np.flatnonzero(owned_mask))
    mass, first, energy, directed, pair_mass = cell_quadrature(
        coords, fans, payload["density"], payload["rule"], n,
        with_pairs=payload["need_pairs"], measure=payload["measure"],
    )
    out = {
        "ids": ids[owned_mask],
        "mass": mass[owned_mask],
        "first": first[owned_mask],
        "energy": energy,
        "obtuse": fans.obtuse_count,
    }
    if payload["need_pairs"]:
        out["pairs"] = ids[directed]
        out["pair_mass"] = pair_mass
    if payload["want_triangles"]:
        out["triangulation"] = kept
    return out


class MeshEvaluator:
    """Energy/gradient evaluator over a covering, with worker parallelism.

    With ``covering=None`` every evaluation takes the single-region
    global path (convex hull). Otherwise points are distributed into
    Voronoi-sort regions, each region is triangulated on a worker, and
    owned-cell results are gathered in region order. Any region-level
    failure (thin overlap, projection at an antipode) falls back to the
    global path for that evaluation; the decision depends only on the
    point set, never on scheduling.
    """

    def __init__(self, density: DensityField, rule: QuadratureRule,
                 covering: Covering | None = None, workers: int = 1,
                 backend: str = "process", laplacian: str | None = None,
                 measure: str = "flat", eps_proj: float = EPS_PROJ):
        self.density = density
        self.rule = rule
        self.covering = covering
        self.workers = max(1, workers)
        self.backend = backend
        self.laplacian = laplacian
        self.measure = measure
        self.eps_proj = eps_proj
        self._arithmetic = None
        self._pool = None
        self.fallbacks = 0
        self.evaluations = 0

    # -- worker pool ----------------------------------------------------
    def _get_pool(self):
        if self._pool is None:
            if self.backend == "thread":
                self._pool = ThreadPoolExecutor(max_workers=self.workers)
            elif self.backend == "process":
                import multiprocessing as mp

                self._pool = ProcessPoolExecutor(
                    max_workers=self.workers, mp_context=mp.get_context("fork")
                )
            else:
                raise ConfigError(f"unknown backend {self.backend!r}")
        return self._pool

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- decomposition ---------------------------------------------------
    def redecompose(self, points):
        """Refresh arithmetic positions from the current geometry."""
        if self.covering is None:
            return
        assign = assign_points(points, self.covering)
        self._arithmetic = assign.arithmetic

    def _assign(self, points):
        assign = assign_points(points, self.covering, arithmetic=self._arithmetic)
        if self._arithmetic is None:
            self._arithmetic = assign.arithmetic
        return assign

    # -- evaluation -------------------------------------------------------
    def _payloads(self, points, assign, want_triangles):
        cov = self.covering
        need_pairs = self.laplacian is not None
        for l in range(cov.cell_count):
            owned_ids = np.flatnonzero(assign.geometric == l)
            region = cov.region_cells(l)
            members = np.flatnonzero(np.isin(assign.geometric, region))
            if len(owned_ids) == 0 and not want_triangles:
                continue
            if len(members) < 3:
                raise InsufficientPointsError(
                    f"region {l} holds {len(members)} points; enlarge overlaps"
                )
            yield {
                "coords": points[members],
                "ids": members,
                "owned": np.isin(members, owned_ids, assume_unique=True),
                "contact": cov.centers[l],
                "centers": cov.centers,
                "region_cells": region,
                "density": self.density,
                "rule": self.rule,
                "need_pairs": need_pairs,
                "measure": self.measure,
                "eps_proj": self.eps_proj,
                "want_triangles": want_triangles,
            }

    def _run_tasks(self, payloads):
        payloads = list(payloads)
        if self.workers == 1 or len(payloads) <= 1:
            return [_region_task(p) for p in payloads]
        pool = self._get_pool()
        return list(pool.map(_region_task, payloads))

    def _global_result(self, points, want_triangles):
        k = len(points)
        tri = convex_hull_delaunay(points)
        fans = build_voronoi_geometry(points, tri)
        mass, first, energy, directed, pair_mass = cell_quadrature(
            points, fans, self.density, self.rule, k,
            with_pairs=self.laplacian is not None, measure=self.measure,
        )
        pairs = (directed, pair_mass) if self.laplacian is not None else None
        return mass, first, energy, pairs, tri if want_triangles else None

    def _region_result(self, points, assign, want_triangles):
        k = len(points)
        results = self._run_tasks(self._payloads(points, assign, want_triangles))
        mass = np.zeros(k)
        first = np.zeros((k, 3))
        energy = 0.0
        pair_list = []
        tris = []
        for r in results:
            mass[r["ids"]] = r["mass"]
            first[r["ids"]] = r["first"]
            energy += r["energy"]
            if self.laplacian is not None:
                pair_list.append((r["pairs"], r["pair_mass"]))
            if want_triangles:
                tris.append(r["triangulation"])
        pairs = None
        if self.laplacian is not None:
            directed = np.concatenate([p for p, _ in pair_list])
            masses = np.concatenate([m for _, m in pair_list])
            pairs = (directed, masses)
        tri = None
        if want_triangles:
            tri = merge_triangulations(tris)
            validate_closed(tri, k)
        return mass, first, energy, pairs, tri

    def _moments(self, points, want_triangles=False):
        points = np.asarray(points, dtype=float)
        migration = "in-place"
        if self.covering is None:
            out = self._global_result(points, want_triangles)
        else:
            assign = self._assign(points)
            migration = detect_migration(assign, self.covering)
            try:
                out = self._region_result(points, assign, want_triangles)
            except (CoverageError, AntipodeError, InsufficientPointsError,
                    CollinearInputError) as exc:
                self.fallbacks += 1
                logger.warning("region path failed (%s); global fallback", exc)
                out = self._global_result(points, want_triangles)
        return out, migration

    def evaluate(self, points) -> EvalResult:
        points = np.asarray(points, dtype=float)
        (mass, first, energy, pairs, _), migration = self._moments(points)
        self.evaluations += 1
        cz = np.einsum("ij,ij->i", first, points)
        grad = 2.0 * cz[:, None] * points - 2.0 * first
        lap = None
        if self.laplacian is not None:
            directed, masses = pairs
            lap = LaplacianPreconditioner(len(points), directed, masses, self.laplacian)
        return EvalResult(
            energy=energy,
            grad=grad,
            grad_norm=float(np.linalg.norm(grad)),
            lloyd_diag=2.0 * cz,
            first=first,
            migration=migration,
            laplacian=lap,
        )

    def triangulation(self, points) -> SphericalTriangulation:
        """Assembled global Delaunay triangulation at the given points."""
        (_, _, _, _, tri), _ = self._moments(points, want_triangles=True)
        if tri is None:  # covering path skipped triangles; not reachable
            tri = convex_hull_delaunay(points)
        return tri


def parallel_iteration(points, covering, density, rule, workers=1, backend="thread",
                       measure="flat"):
    """One preprocess pass: (F, grad, Lloyd diagonal, migration status)."""
    with MeshEvaluator(density, rule, covering, workers=workers, backend=backend,
                       measure=measure) as ev:
        res = ev.evaluate(points)
    return res.energy, res.grad, res.lloyd_diag, res.migration


def bisect(points, tri: SphericalTriangulation) -> np.ndarray:
    """Refine by sphere-projected Delaunay edge midpoints: K -> 4K - 6."""
    points = np.asarray(points, dtype=float)
    edges = tri.edges()
    mids = normalize(points[edges[:, 0]] + points[edges[:, 1]])
    return np.vstack([points, mids])


def bisection_ladder(target: int, floor: int = 200) -> list[int]:
    """Ladder of K values ending at ``target`` with K -> 4K - 6 steps.

    Walks down while the arithmetic stays consistent and the level stays
    above ``floor``; a target not on any ladder gets a single level.
    """
    ladder = [target]
    while ladder[0] > floor and (ladder[0] + 6) % 4 == 0:
        ladder.insert(0, (ladder[0] + 6) // 4)
    return ladder


@dataclass
class RunPlan:
    """Everything one generation run needs."""

    points: int
    density_name: str = "const"
    method: str = "lloyd-plbfgs"
    seed: int = 1
    workers: int = 1
    backend: str = "process"
    partitions: int | None = None
    quadrature: str | None = None            # default depends on the density
    ladder: list[int] | None = None          # default: single level
    criteria: StoppingCriteria = field(default_factory=StoppingCriteria)
    intermediate_movement_tol: float = 1e-3  # looser tolerance on ladder levels
    measure: str = "flat"
    density_overrides: dict = field(default_factory=dict)
    eps_proj: float = EPS_PROJ

    def __post_init__(self):
        if self.points < 4:
            raise ConfigError("need at least 4 generators")
        if self.ladder is None:
            self.ladder = [self.points]
        if self.ladder[-1] != self.points:
            raise ConfigError(
                f"ladder must end at the target point count {self.points}, got {self.ladder}"
            )
        for a, b in zip(self.ladder, self.ladder[1:]):
            if b != 4 * a - 6:
                raise ConfigError(
                    f"ladder step {a} -> {b} violates the bisection arithmetic (expect {4 * a - 6})"
                )
        if self.quadrature is None:
            self.quadrature = default_quadrature(self.density_name)
        if self.quadrature not in QUADRATURE_RULES:
            raise ConfigError(f"unknown quadrature {self.quadrature!r}")

    def density(self) -> DensityField:
        d = density_preset(self.density_name)
        if self.density_overrides:
            d = d.with_overrides(**self.density_overrides)
        return d

    def rule(self) -> QuadratureRule:
        return QUADRATURE_RULES[self.quadrature]


@dataclass
class LevelResult:
    k: int
    result: MinimizeResult
    wall_time: float


@dataclass
class RunResult:
    plan: RunPlan
    points: np.ndarray
    triangulation: SphericalTriangulation
    levels: list
    covering: Covering | None
    wall_time: float

    @property
    def final(self) -> EvalResult:
        return self.levels[-1].result.final


def _covering_for(plan: RunPlan, k: int, density: DensityField) -> Covering | None:
    """Build the covering when the level is thick enough to decompose."""
    p = plan.partitions if plan.partitions is not None else default_partitions(k)
    if k < 16 * p:
        logger.info("level K=%d below 16 x %d partitions; using the global path", k, p)
        return None
    return bootstrap_partition_cvt(p, seed=plan.seed, density=density)


def run(plan: RunPlan, initial_points=None, progress=None) -> RunResult:
    """Execute the optimize-bisect ladder of a run plan.

    Starts from Monte Carlo sampling (or ``initial_points``), minimizes
    each ladder level, bisects to seed the next, and returns the final
    mesh with per-level iteration records.
    """
    t0 = time.perf_counter()
    density = plan.density()
    rule = plan.rule()
    if initial_points is not None:
        z = normalize(np.asarray(initial_points, dtype=float))
        if len(z) != plan.ladder[0]:
            raise ConfigError(
                f"initial points ({len(z)}) do not match the first ladder level ({plan.ladder[0]})"
            )
    else:
        z = sample_by_density(density, plan.ladder[0], plan.seed)

    laplacian = None
    if plan.method == "laplacian-a6":
        laplacian = "a6"
    elif plan.method == "laplacian-m2":
        laplacian = "m2"

    levels = []
    covering = None
    tri = None
    for li, k in enumerate(plan.ladder):
        last = li == len(plan.ladder) - 1
        criteria = plan.criteria if last else replace(
            plan.criteria, movement_tol=plan.intermediate_movement_tol
        )
        covering = _covering_for(plan, k, density)
        t_level = time.perf_counter()
        with MeshEvaluator(density, rule, covering, workers=plan.workers,
                           backend=plan.backend, laplacian=laplacian,
                           measure=plan.measure, eps_proj=plan.eps_proj) as ev:
            result = minimize(z, plan.method, ev, criteria, callback=progress)
            z = result.points
            tri = ev.triangulation(z)
        levels.append(LevelResult(k=k, result=result, wall_time=time.perf_counter() - t_level))
        logger.info(
            "level K=%d: %d iterations, F=%.6e, |grad|=%.3e (%s)",
            k, len(result.records), result.final.energy, result.final.grad_norm, result.reason,
        )
        if not last:
            z = bisect(z, tri)
            if len(z) != plan.ladder[li + 1]:
                raise ScvtError(
                    f"bisection produced {len(z)} points; ladder expected {plan.ladder[li + 1]}"
                )
    return RunResult(
        plan=plan,
        points=z,
        triangulation=tri,
        levels=levels,
        covering=covering,
        wall_time=time.perf_counter() - t0,
    )


def default_worker_count() -> int:
    """Worker count from SCVTMESH_WORKERS, falling back to one."""
    env = os.environ.get("SCVTMESH_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"SCVTMESH_WORKERS must be an integer, got {env!r}")
    return 1
