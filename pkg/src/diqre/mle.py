"""Counts to frequencies, and maximum-likelihood projection onto the
non-signaling set with a fixed input marginal.

The projection maximizes sum_abxy p(ab|xy) * log nu(abxy) over joint
distributions nu with nu(xy) = mu(xy) and non-signaling conditionals.  Since
nu = mu * P and mu is fixed, this is equivalent to maximizing
sum p(ab|xy) log P(ab|xy) over non-signaling behaviors P.

Non-signaling behaviors of the 2x2x2x2 scenario form an 8-dimensional affine
chart: Alice marginals a_x = P(a=1|x), Bob marginals b_y = P(b=1|y) and the
four joints j_xy = P(11|xy), with

    P(11|xy) = j_xy
    P(10|xy) = a_x - j_xy
    P(01|xy) = b_y - j_xy
    P(00|xy) = 1 - a_x - b_y + j_xy

all cells required nonnegative.  The solver alternates exact 1-D maximization
over each j_xy (safeguarded root finding on the strictly decreasing derivative)
with Newton steps on the four marginals, using the Schur complement of the
joint block of the Hessian.  Optimality is certified by a conditional-gradient
gap over the 24 extreme points of the non-signaling polytope: for concave f,
f* <= f(P) + max_V <grad f, V - P>.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .chsh import (
    ConditionalBehavior,
    InputDistribution,
    JointDistribution,
    DET_RESPONSES,
    FACET_SIGNS,
    _det_table,
    _pr_table,
)
from .errors import InsufficientDataError, OptimizationError, ParameterError

#: Output cells are floored at this value so downstream logarithms are defined.
CELL_FLOOR = 1e-300


@dataclass(frozen=True)
class CountTable:
    """Nonnegative trial counts n(abxy), shape (2, 2, 2, 2) indexed [a, b, x, y]."""

    counts: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.counts)
        if arr.shape != (2, 2, 2, 2):
            arr = arr.reshape(2, 2, 2, 2)
        if np.any(arr < 0):
            raise ParameterError("CountTable: negative count")
        arr = arr.astype(np.int64)
        object.__setattr__(self, "counts", arr)
        if self.total <= 0:
            raise ParameterError("CountTable: total count must be positive")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self) -> str:
        """CSV with header a,b,x,y,count in flat-index order."""
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["a", "b", "x", "y", "count"])
        for a in (0, 1):
            for b in (0, 1):
                for x in (0, 1):
                    for y in (0, 1):
                        w.writerow([a, b, x, y, int(self.counts[a, b, x, y])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "CountTable":
        arr = np.zeros((2, 2, 2, 2), dtype=np.int64)
        seen = 0
        for row in csv.DictReader(io.StringIO(text)):
            a, b, x, y = (int(row[k]) for k in ("a", "b", "x", "y"))
            arr[a, b, x, y] = int(row["count"])
            seen += 1
        if seen != 16:
            raise ParameterError(f"CountTable CSV: expected 16 rows, got {seen}")
        return cls(arr)


def counts_to_conditional(c: CountTable) -> ConditionalBehavior:
    """Row-normalize counts into P(ab|xy) = n(abxy) / n(xy)."""
    totals = c.counts.sum(axis=(0, 1))
    for x in (0, 1):
        for y in (0, 1):
            if totals[x, y] == 0:
                raise InsufficientDataError(f"no counts for input class (x={x}, y={y})")
    return ConditionalBehavior(c.counts / totals[None, None, :, :])


def _ns_vertices() -> np.ndarray:
    """The 24 extreme points of the plain non-signaling polytope, (24, 16) flat."""
    rows = [np.array(_det_table(r), dtype=float) for r in DET_RESPONSES]
    rows += [np.array(_pr_table(s, 1.0)) for s in FACET_SIGNS]
    return np.stack(rows)


_NS_VERTS = _ns_vertices()


def _chart_to_cells(theta: np.ndarray) -> np.ndarray:
    """Map chart parameters (a0, a1, b0, b1, j00, j01, j10, j11) to a flat
    16-cell behavior array."""
    a = theta[0:2]
    b = theta[2:4]
    j = theta[4:8].reshape(2, 2)
    p = np.empty((2, 2, 2, 2))
    p[1, 1] = j
    p[1, 0] = a[:, None] - j
    p[0, 1] = b[None, :] - j
    p[0, 0] = 1.0 - a[:, None] - b[None, :] + j
    return p.reshape(16)


# Constant Jacobian d(cells)/d(theta), shape (16, 8): cells are affine in theta.
def _chart_jacobian() -> np.ndarray:
    J = np.zeros((16, 8))
    eye = np.eye(8)
    base = _chart_to_cells(np.zeros(8))
    for k in range(8):
        J[:, k] = _chart_to_cells(eye[k]) - base
    return J


_JAC = _chart_jacobian()


def _objective_grad(theta, w):
    """Objective sum w log P and its chart gradient; w and cells flat (16,)."""
    cells = _chart_to_cells(theta)
    safe = np.maximum(cells, CELL_FLOOR)
    mask = w > 0
    f = float(np.sum(w[mask] * np.log(safe[mask])))
    g_cell = np.where(mask, w / safe, 0.0)
    return f, g_cell, _JAC.T @ g_cell, cells


def _fw_gap(g_cell, cells) -> float:
    """Conditional-gradient gap of the concave objective over the NS polytope."""
    best = float(np.max(_NS_VERTS @ g_cell))
    return best - float(np.dot(g_cell, cells))


def _phi(j, wab, a, b):
    """Derivative of the per-setting likelihood with respect to j = P(11|xy).

    ``wab`` is the 2x2 weight block indexed [a, b].  Zero-weight terms are
    dropped so boundary cells do not produce 0/0.
    """
    out = 0.0
    if wab[1, 1] > 0:
        out += wab[1, 1] / j
    if wab[1, 0] > 0:
        out -= wab[1, 0] / (a - j)
    if wab[0, 1] > 0:
        out -= wab[0, 1] / (b - j)
    if wab[0, 0] > 0:
        out += wab[0, 0] / (1.0 - a - b + j)
    return out


def _solve_j(wab, a, b) -> float:
    """Exact inner maximization over j = P(11|xy) at fixed marginals.

    The derivative is strictly decreasing on the feasible interval, so the
    maximizer is its unique root (or the nearer interval end when the
    derivative does not change sign).
    """
    lo = max(0.0, a + b - 1.0)
    hi = min(a, b)
    span = hi - lo
    eps = 1e-16 * max(span, 1e-300)
    # Step strictly inside so no cell denominator is exactly zero even when
    # eps underflows relative to the endpoints.
    jl = max(lo + eps, np.nextafter(lo, hi))
    jh = min(hi - eps, np.nextafter(hi, lo))
    if jh <= jl:
        return 0.5 * (lo + hi)
    pl, ph = _phi(jl, wab, a, b), _phi(jh, wab, a, b)
    if pl <= 0.0:
        return jl
    if ph >= 0.0:
        return jh
    return brentq(_phi, jl, jh, args=(wab, a, b), xtol=1e-300, rtol=1e-15)


def mle_project(
    p: ConditionalBehavior,
    mu: InputDistribution,
    tol: float = 1e-11,
    max_iters: int = 300,
    trace: list | None = None,
) -> JointDistribution:
    """Project raw conditionals onto non-signaling with the given input marginal.

    Returns the joint distribution nu = mu * P_opt.  Optimality is certified by
    the conditional-gradient gap: on return, gap <= tol (in log-likelihood
    units), so the objective is within tol of the dual upper bound f + gap.

    ``trace``, if given, collects the objective value per Newton iteration
    (non-decreasing by construction of the line search).

    Raises :class:`OptimizationError` with the best iterate attached when the
    gap does not reach tol within ``max_iters``.
    """
    if tol <= 0:
        raise ParameterError("mle_project: tol must be positive")
    w = p.flat16.copy()

    # Start at the chart extraction of p itself: exact when p is already
    # non-signaling (idempotence), a sensible seed otherwise.
    pa = p.p.sum(axis=1)  # [a, x, y]
    pb = p.p.sum(axis=0)  # [b, x, y]
    a0 = pa[1].mean(axis=1)  # average the (possibly signaling) y-dependence
    b0 = pb[1].mean(axis=0)
    j0 = p.p[1, 1].reshape(4)
    theta = np.concatenate([a0, b0, j0])

    f, g_cell, g, cells = _objective_grad(theta, w)
    gap = _fw_gap(g_cell, cells)
    if trace is not None:
        trace.append(f)

    # If the start is not already optimal, pull it strictly inside the cell
    # box by blending with the chart center (all cells 0.25; the chart is
    # affine, so cells blend linearly).
    if gap > tol and np.min(cells) < 1e-8:
        c_min = float(np.min(cells))
        lam = (1e-8 - c_min) / (0.25 - c_min)
        center = np.array([0.5, 0.5, 0.5, 0.5, 0.25, 0.25, 0.25, 0.25])
        theta = (1 - lam) * theta + lam * center
        f, g_cell, g, cells = _objective_grad(theta, w)
        gap = _fw_gap(g_cell, cells)

    wr = w.reshape(2, 2, 2, 2)

    def resolve_j(th):
        # Exact inner maximization over the four joint parameters.  This is
        # what keeps the solver well conditioned: cells driven toward zero by
        # near-zero weights are handled by 1-D root finding, not by Newton
        # steps whose Hessian scales like 1/cell^2.
        out = th.copy()
        for x in (0, 1):
            for y in (0, 1):
                out[4 + 2 * x + y] = _solve_j(wr[:, :, x, y], out[x], out[2 + y])
        return out

    f_track = f
    it = 0
    while gap > tol and it < max_iters:
        it += 1
        theta = resolve_j(theta)
        f, g_cell, g, cells = _objective_grad(theta, w)
        gap = _fw_gap(g_cell, cells)
        f_track = max(f_track, f)
        if trace is not None:
            trace.append(f_track)
        if gap <= tol:
            break

        # Newton on the four marginals with the joints eliminated (Schur
        # complement of the joint block, which is diagonal since each joint
        # parameter touches only its own setting's cells).
        d2 = np.zeros(16)
        m = w > 0
        d2[m] = w[m] / np.maximum(cells[m], 1e-150) ** 2
        H = _JAC.T @ (d2[:, None] * _JAC)
        H += 1e-12 * np.trace(H) / 8.0 * np.eye(8)
        HF = H[:4, :4] - (H[:4, 4:] / np.diag(H[4:, 4:])[None, :]) @ H[:4, 4:].T
        step_m = np.linalg.solve(HF, g[:4])
        pred = float(np.dot(g[:4], step_m))

        # Keep marginals strictly inside (0, 1).
        t = 1.0
        for k in range(4):
            if step_m[k] > 0:
                t = min(t, (1.0 - 1e-12 - theta[k]) / step_m[k])
            elif step_m[k] < 0:
                t = min(t, (theta[k] - 1e-12) / -step_m[k])
        t = max(t, 0.0)

        if pred <= 1e-12 * (1.0 + abs(f)):
            # The predicted gain is below the resolution of the objective, so
            # backtracking on f would compare rounding noise.  HF is positive
            # definite, so the capped Newton step ascends: take it directly.
            trial = theta.copy()
            trial[:4] += t * step_m
            trial = resolve_j(trial)
            f_new, g_cell, g, cells = _objective_grad(trial, w)
        else:
            # Backtrack on the envelope objective (joints re-solved exactly
            # at every trial point).
            accepted = False
            for _ in range(60):
                trial = theta.copy()
                trial[:4] += t * step_m
                trial = resolve_j(trial)
                f_new, g_cell_new, g_new, cells_new = _objective_grad(trial, w)
                if f_new >= f:
                    accepted = True
                    break
                t *= 0.5
            if not accepted:
                break  # no improving step length; report best found
            g_cell, g, cells = g_cell_new, g_new, cells_new
        theta = trial
        f = f_new
        gap = _fw_gap(g_cell, cells)
        f_track = max(f_track, f)
        if trace is not None:
            trace.append(f_track)

    P = np.maximum(_chart_to_cells(theta), CELL_FLOOR).reshape(2, 2, 2, 2)
    nu = P * mu.mu.reshape(2, 2)[None, None, :, :]
    if gap > tol:
        raise OptimizationError(
            f"mle_project: gap {gap:.3e} > tol {tol:.3e} after {it} iterations",
            best=nu,
            residuals={"gap": gap, "iterations": it},
        )
    return JointDistribution(nu, mu)
