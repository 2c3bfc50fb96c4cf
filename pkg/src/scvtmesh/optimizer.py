"""Iteration engines: Lloyd fixed-point driver and LBFGS with pluggable
initial inverse Hessians (gamma-scaled identity, Lloyd diagonal, graph
Laplacian solve), strong-Wolfe line search, and stopping criteria.

With the Lloyd diagonal as the initial inverse and an empty correction
history, the first quasi-Newton trial step is exactly one Lloyd update,
which is what makes the preconditioned method degrade gracefully: far
from a minimizer it behaves like Lloyd's globally-convergent iteration,
near one it enjoys the quasi-Newton rate.
"""

from __future__ import annotations

import logging
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .cvt_core import LaplacianPreconditioner, lloyd_preconditioner
from .errors import (
    CentroidAtOriginError,
    LineSearchFailure,
    NonDescentError,
    NonpositiveDiagonalError,
)
from .geometry import normalize

logger = logging.getLogger(__name__)

EPS_CURVATURE = 1e-14
WOLFE_C1 = 1e-4
WOLFE_C2 = 0.9
MAX_LINE_SEARCH_EVALS = 10

METHODS = ("lloyd", "lbfgs", "lloyd-plbfgs", "laplacian-a6", "laplacian-m2")


@dataclass
class StoppingCriteria:
    """Termination thresholds; any satisfied criterion stops the run."""

    max_iterations: int = 2000
    movement_tol: float = 5e-4   # max-norm of the point displacement
    grad_tol: float = 5e-4       # on |grad F| / F
    stall_tol: float = 1e-7      # on |F_n - F_{n-1}| / F_{n-1}

    def __post_init__(self):
        if min(self.movement_tol, self.grad_tol, self.stall_tol) <= 0:
            raise ValueError("stopping tolerances must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass
class IterationRecord:
    n: int
    energy: float
    grad_norm: float
    step: float
    fevals: int | None        # None for Lloyd (no line search)
    time_ms: float


@dataclass
class EvalResult:
    """Everything one energy evaluation yields (see pipeline evaluators)."""

    energy: float
    grad: np.ndarray              # (K, 3) tangential gradient
    grad_norm: float
    lloyd_diag: np.ndarray        # (K,) entries 2 c_i . z_i
    first: np.ndarray             # (K, 3) first moments (Lloyd updates)
    migration: str = "in-place"
    laplacian: LaplacianPreconditioner | None = None


class CorrectionHistory:
    """Ring buffer of at most M displacement/gradient-difference pairs.

    Pairs failing the curvature condition y.s > eps |s||y| are dropped
    (counted in ``skipped``) to keep the implied inverse positive
    definite.
    """

    def __init__(self, m: int = 7):
        self.m = m
        self._pairs = deque(maxlen=m)
        self.skipped = 0

    def __len__(self):
        return len(self._pairs)

    def __iter__(self):
        return iter(self._pairs)

    def push(self, s: np.ndarray, y: np.ndarray) -> bool:
        ys = float(y @ s)
        if ys <= EPS_CURVATURE * np.linalg.norm(s) * np.linalg.norm(y):
            self.skipped += 1
            return False
        self._pairs.append((s, y, 1.0 / ys))
        return True

    def clear(self):
        self._pairs.clear()

    def gamma(self) -> float:
        """Spectral scaling y.s / y.y of the most recent pair (1 when empty)."""
        if not self._pairs:
            return 1.0
        s, y, _ = self._pairs[-1]
        return float((y @ s) / (y @ y))


class GammaIdentity:
    """Initial inverse gamma * I."""

    def __init__(self, gamma: float):
        self.gamma = gamma

    def apply(self, q: np.ndarray) -> np.ndarray:
        return self.gamma * q


class LloydDiagonal:
    """Initial inverse diag(2 c_i . z_i)^-1 acting blockwise on (K, 3) layouts."""

    def __init__(self, inverse_diag: np.ndarray):
        self.inverse_diag = inverse_diag

    def apply(self, q: np.ndarray) -> np.ndarray:
        return (q.reshape(-1, 3) * self.inverse_diag[:, None]).ravel()


class LaplacianInverse:
    """Initial inverse via a factored perturbed graph Laplacian, per coordinate."""

    def __init__(self, lap: LaplacianPreconditioner):
        self.lap = lap

    def apply(self, q: np.ndarray) -> np.ndarray:
        return self.lap.solve(q.reshape(-1, 3)).ravel()


def two_loop_direction(g: np.ndarray, hist: CorrectionHistory, h0) -> np.ndarray:
    """Search direction -H~ g through the two-loop recursion.

    Backward loop over stored pairs newest-first, initial inverse applied
    in the middle, forward loop oldest-first. Raises NonDescentError when
    the result is not a descent direction for g.
    """
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(list(hist)):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    q = h0.apply(q)
    for (s, y, rho), a in zip(hist, reversed(alphas)):
        b = rho * (y @ q)
        q += s * (a - b)
    q = -q
    if q @ g >= 0.0:
        raise NonDescentError(f"direction has q.g = {q @ g:.3e} >= 0")
    return q


def wolfe_line_search(phi, f0: float, dphi0: float, c1: float = WOLFE_C1,
                      c2: float = WOLFE_C2, max_evals: int = MAX_LINE_SEARCH_EVALS,
                      initial_step: float = 1.0):
    """Strong-Wolfe bracketing and zoom (sufficient decrease + curvature).

    ``phi(alpha)`` returns (value, derivative, payload). Returns
    (alpha, value, payload, evals, exhausted): ``exhausted`` marks the
    budget running out, in which case the best decreasing trial is
    returned. Raises LineSearchFailure when no trial decreased f0.
    """
    if dphi0 >= 0.0:
        raise NonDescentError(f"line search needs a descent direction, dphi0={dphi0:.3e}")
    evals = 0
    best = None  # (f, alpha, payload)

    def record(alpha, f, payload):
        nonlocal best
        if f < f0 and (best is None or f < best[0]):
            best = (f, alpha, payload)

    def exhausted_result():
        if best is None:
            raise LineSearchFailure(f"no decrease within {max_evals} evaluations")
        f, alpha, payload = best
        return alpha, f, payload, evals, True

    def zoom(lo, f_lo, d_lo, hi, f_hi):
        nonlocal evals
        while evals < max_evals:
            span = hi - lo
            # Quadratic model from (f_lo, d_lo, f_hi); bisect when it
            # degenerates or lands too close to the bracket ends.
            denom = 2.0 * (f_hi - f_lo - d_lo * span)
            alpha = lo - d_lo * span * span / denom if denom != 0.0 else lo + 0.5 * span
            low, high = (lo, hi) if lo < hi else (hi, lo)
            margin = 0.1 * abs(span)
            if not (low + margin <= alpha <= high - margin):
                alpha = lo + 0.5 * span
            f, d, payload = phi(alpha)
            evals += 1
            record(alpha, f, payload)
            if f > f0 + c1 * alpha * dphi0 or f >= f_lo:
                hi, f_hi = alpha, f
            else:
                if abs(d) <= -c2 * dphi0:
                    return alpha, f, payload, evals, False
                if d * span >= 0.0:
                    hi, f_hi = lo, f_lo
                lo, f_lo, d_lo = alpha, f, d
        return exhausted_result()

    alpha_prev, f_prev, d_prev = 0.0, f0, dphi0
    alpha = initial_step
    first = True
    while evals < max_evals:
        f, d, payload = phi(alpha)
        evals += 1
        record(alpha, f, payload)
        if f > f0 + c1 * alpha * dphi0 or (not first and f >= f_prev):
            return zoom(alpha_prev, f_prev, d_prev, alpha, f)
        if abs(d) <= -c2 * dphi0:
            return alpha, f, payload, evals, False
        if d >= 0.0:
            return zoom(alpha, f, d, alpha_prev, f_prev)
        alpha_prev, f_prev, d_prev = alpha, f, d
        alpha *= 2.0
        first = False
    return exhausted_result()


def lloyd_step(points, first_moments) -> np.ndarray:
    """One Lloyd update: every generator moves to its constrained centroid."""
    norms = np.linalg.norm(first_moments, axis=1)
    if np.any(norms <= 1e-12):
        bad = np.flatnonzero(norms <= 1e-12)
        raise CentroidAtOriginError(f"first moment ~0 for cells {bad[:8].tolist()}")
    return first_moments / norms[:, None]


@dataclass
class MinimizeResult:
    points: np.ndarray
    records: list
    reason: str
    fevals: int
    resets: int
    wall_time: float
    final: EvalResult = field(repr=False, default=None)


def _initial_inverse(method: str, hist: CorrectionHistory, res: EvalResult):
    if method == "lbfgs":
        return GammaIdentity(hist.gamma())
    if method == "lloyd-plbfgs":
        try:
            from .cvt_core import EnergyReport
            report = EnergyReport(res.energy, res.grad, res.grad_norm, res.lloyd_diag)
            return LloydDiagonal(lloyd_preconditioner(report))
        except NonpositiveDiagonalError:
            logger.warning("nonpositive Lloyd diagonal; falling back to gamma identity")
            return GammaIdentity(hist.gamma())
    if method in ("laplacian-a6", "laplacian-m2"):
        if res.laplacian is None:
            raise ValueError("evaluator did not supply a Laplacian factorization")
        return LaplacianInverse(res.laplacian)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def minimize(points, method: str, evaluator, criteria: StoppingCriteria | None = None,
             corrections: int = 7, callback=None) -> MinimizeResult:
    """Drive one of the iteration methods to a stopping criterion.

    ``evaluator.evaluate(Z)`` supplies EvalResult (re-triangulating at
    every call, including line-search trials); ``evaluator.redecompose(Z)``
    refreshes arithmetic positions after an out-of-range migration, which
    also clears the correction history per the reset rule.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    criteria = criteria or StoppingCriteria()
    z = normalize(np.array(points, dtype=float))
    k = len(z)
    t0 = time.perf_counter()
    res = evaluator.evaluate(z)
    fevals_total = 1
    hist = CorrectionHistory(corrections)
    records: list[IterationRecord] = []
    resets = 0
    reason = "max-iterations"

    for n in range(1, criteria.max_iterations + 1):
        t_iter = time.perf_counter()
        f_prev = res.energy
        if method == "lloyd":
            z_new = lloyd_step(z, res.first)
            res_new = evaluator.evaluate(z_new)
            fevals_total += 1
            fevals_iter = None
            alpha = 1.0
        else:
            h0 = _initial_inverse(method, hist, res)
            g = res.grad.ravel()
            try:
                q = two_loop_direction(g, hist, h0)
            except NonDescentError:
                logger.warning("non-descent direction at iteration %d; history reset", n)
                hist.clear()
                resets += 1
                try:
                    q = two_loop_direction(g, hist, h0)
                except NonDescentError:
                    q = -hist.gamma() * g
            q3 = q.reshape(k, 3)
            q3 = q3 - np.einsum("ij,ij->i", q3, z)[:, None] * z

            def phi(alpha, z=z, q3=q3):
                v = z + alpha * q3
                norms = np.linalg.norm(v, axis=1)
                zt = v / norms[:, None]
                r = evaluator.evaluate(zt)
                d = float(np.einsum("ij,ij->i", r.grad, q3 / norms[:, None]).sum())
                return r.energy, d, (zt, r)

            dphi0 = float(np.einsum("ij,ij->", res.grad, q3))
            try:
                alpha, _, payload, evals, exhausted = wolfe_line_search(
                    phi, res.energy, dphi0
                )
                z_new, res_new = payload
                fevals_iter = evals
                if exhausted:
                    logger.debug("line search exhausted at iteration %d", n)
            except (NonDescentError, LineSearchFailure) as exc:
                logger.warning("line search failed at iteration %d (%s); Lloyd fallback", n, exc)
                hist.clear()
                resets += 1
                z_new = lloyd_step(z, res.first)
                res_new = evaluator.evaluate(z_new)
                fevals_iter = 1
                alpha = 0.0
            fevals_total += fevals_iter
            s = (z_new - z).ravel()
            y = (res_new.grad - res.grad).ravel()
            hist.push(s, y)

        movement = float(np.abs(z_new - z).max())
        records.append(IterationRecord(
            n=n,
            energy=res_new.energy,
            grad_norm=res_new.grad_norm,
            step=alpha,
            fevals=fevals_iter,
            time_ms=(time.perf_counter() - t_iter) * 1e3,
        ))
        if callback is not None:
            callback(n, z_new, res_new)
        z, res = z_new, res_new

        if movement <= criteria.movement_tol:
            reason = "movement"
            break
        if abs(res.energy - f_prev) / abs(f_prev) < criteria.stall_tol:
            reason = "energy-stall"
            break
        if res.grad_norm / res.energy <= criteria.grad_tol:
            reason = "gradient"
            break
        if res.migration == "out-of-range":
            logger.info("point migrated out of range at iteration %d; decomposition reset", n)
            evaluator.redecompose(z)
            hist.clear()
            resets += 1

    return MinimizeResult(
        points=z,
        records=records,
        reason=reason,
        fevals=fevals_total,
        resets=resets,
        wall_time=time.perf_counter() - t0,
        final=res,
    )
