"""Per-trial probability estimation factors: feasibility checking at high
precision and rate optimization over the spot-checking polytope.

A factor F assigns a nonnegative value to every outcome-setting pair (c, z)
with c = (a, b), z = (x, y).  F is feasible for power alpha when

    sum_cz F(cz) * tau(c|z)^(alpha-1) * mu(z) * tau(c|z)  <=  1

holds at every extreme point tau of the constraint polytope, for every
admissible input distribution mu.  The certified randomness rate of feasible F
against statistics nu is sum_cz nu(cz) log2 F(cz) / (alpha - 1).

Feasibility is linear in F, so the rate optimization is a concave maximization
over a polyhedron.  The solver follows the central path of the log-barrier
formulation: a double-precision Newton phase warm-starts a high-precision
continuation, and the barrier multipliers at the final path point give a dual
certificate (the duality gap at barrier parameter t is exactly m/t for m
constraints).  Every iterate is strictly feasible, so the returned factor
needs no repair; :func:`feasibility_shrink` exists for factors produced by
other means.

All feasibility verdicts and reported rates are recomputed with ``mpmath``
at no less than 30 significant digits; double precision appears only inside
the warm start.
"""

from __future__ import annotations

from dataclasses import dataclass

import mpmath as mp
import numpy as np
from mpmath import mpf

from .chsh import (
    ConditionalBehavior,
    InputDistribution,
    JointDistribution,
    PolytopeModel,
    input_entropy_rate,
)
from .errors import OptimizationError, ParameterError

#: Minimum working precision (significant digits) for feasibility arithmetic.
VERIFY_DPS = 50

#: Barrier parameter reached by the high-precision continuation; the duality
#: gap of the barrier iterate is (number of constraints) / BARRIER_T_FINAL.
BARRIER_T_FINAL = mpf(10) ** 22


def _to_mpf(v) -> mpf:
    # Convert at verification precision: an mpf keeps the mantissa it was
    # created with, so string inputs must not be rounded to the ambient
    # working precision here.
    with mp.workdps(max(VERIFY_DPS, mp.mp.dps)):
        out = mpf(v.strip()) if isinstance(v, str) else mpf(v)
    if not mp.isfinite(out):
        raise ParameterError("EstimationFactor: values must be finite")
    return out


@dataclass(frozen=True)
class EstimationFactor:
    """A per-trial estimation factor.

    ``values`` are the 16 factor entries in flat [a, b, x, y] order, held as
    ``mpmath.mpf`` (constructible from decimal strings to preserve digits).
    ``rescale_bound`` is present exactly for kind ``"QEF"``: the certified
    upper bound on the overall rescaling factor, itself at least 1.
    """

    values: tuple
    alpha: mpf
    kind: str = "PEF"
    rescale_bound: mpf | None = None

    def __post_init__(self):
        vals = tuple(_to_mpf(v) for v in self.values)
        if len(vals) != 16:
            raise ParameterError(f"EstimationFactor: expected 16 values, got {len(vals)}")
        if any(v < 0 for v in vals):
            raise ParameterError("EstimationFactor: values must be nonnegative")
        alpha = _to_mpf(self.alpha)
        if not alpha > 1:
            raise ParameterError("EstimationFactor: alpha must exceed 1")
        if self.kind not in ("PEF", "QEF"):
            raise ParameterError(f"EstimationFactor: unknown kind {self.kind!r}")
        rb = self.rescale_bound
        if self.kind == "QEF":
            if rb is None:
                raise ParameterError("EstimationFactor: QEF requires rescale_bound")
            rb = _to_mpf(rb)
            if rb < 1:
                raise ParameterError("EstimationFactor: rescale_bound must be >= 1")
        elif rb is not None:
            raise ParameterError("EstimationFactor: rescale_bound is QEF-only")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "rescale_bound", rb)

    def log2_values(self) -> np.ndarray:
        """log2 of each entry as float64, for transcript accumulation."""
        return np.array([float(mp.log(v, 2)) if v > 0 else -np.inf for v in self.values])

    def rate(self, nu: JointDistribution) -> float:
        """Certified bits per trial against the statistics nu."""
        with mp.workdps(VERIFY_DPS):
            acc = mpf(0)
            flat = nu.nu.reshape(16)
            for i, v in enumerate(self.values):
                if flat[i] > 0:
                    acc += mpf(float(flat[i])) * mp.log(v, 2)
            return float(acc / (self.alpha - 1))

    def to_jsonable(self, provenance: dict | None = None) -> dict:
        d = {
            "values": [mp.nstr(v, 40) for v in self.values],
            "alpha": mp.nstr(self.alpha, 40),
            "kind": self.kind,
        }
        if self.rescale_bound is not None:
            d["rescale_bound"] = mp.nstr(self.rescale_bound, 40)
        if provenance:
            d["provenance"] = provenance
        return d

    @classmethod
    def from_jsonable(cls, d: dict) -> "EstimationFactor":
        return cls(
            values=tuple(d["values"]),
            alpha=d["alpha"],
            kind=d["kind"],
            rescale_bound=d.get("rescale_bound"),
        )


@dataclass(frozen=True)
class FeasibilityReport:
    """Constraint values of a factor over the full vertex-by-input set."""

    worst_constraint: mpf
    margin: mpf
    per_vertex: tuple

    def __post_init__(self):
        if len(self.per_vertex) % 80 != 0:
            raise ParameterError(
                f"FeasibilityReport: {len(self.per_vertex)} values is not a whole"
                " number of 80-vertex blocks"
            )

    @property
    def feasible(self) -> bool:
        return self.margin >= 0


def pef_constraint_value(
    F: EstimationFactor, vertex: ConditionalBehavior, mu: InputDistribution
) -> mpf:
    """sum_cz F(cz) tau(c|z)^(alpha-1) mu(z) tau(c|z) in high precision.

    Cells with tau(c|z) = 0 contribute 0 regardless of the exponent.
    """
    with mp.workdps(max(VERIFY_DPS, mp.mp.dps)):
        am1 = F.alpha - 1
        acc = mpf(0)
        p = vertex.p
        mu_flat = mu.mu
        i = 0
        for a in (0, 1):
            for b in (0, 1):
                for x in (0, 1):
                    for y in (0, 1):
                        tau = p[a, b, x, y]
                        if tau > 0:
                            tmp = mpf(float(tau))
                            acc += F.values[i] * mpf(float(mu_flat[2 * x + y])) * tmp ** (am1 + 1)
                        i += 1
        return acc


def _constraint_rows_float(polytope: PolytopeModel, alpha: float, mus) -> np.ndarray:
    """Float64 constraint matrix A with A[j] . F <= 1, rows = inputs x vertices."""
    verts = polytope.vertex_array()  # (80, 16) flat [a, b, x, y]
    rows = []
    for mu in mus:
        # mu(z) per flat cell: flat index a*8 + b*4 + x*2 + y -> z = x*2 + y
        mu_per_cell = np.tile(mu.mu, 4)
        with np.errstate(divide="ignore"):
            A = np.where(verts > 0, mu_per_cell[None, :] * verts**alpha, 0.0)
        rows.append(A)
    return np.concatenate(rows, axis=0)


def _constraint_rows_mp(polytope: PolytopeModel, alpha: mpf, mus) -> list:
    """High-precision constraint rows; entries mu(z) * tau^alpha."""
    rows = []
    for mu in mus:
        mu_mp = [mpf(float(v)) for v in mu.mu]
        for vert in polytope.vertices:
            p = vert.p
            row = [mpf(0)] * 16
            i = 0
            for a in (0, 1):
                for b in (0, 1):
                    for x in (0, 1):
                        for y in (0, 1):
                            tau = p[a, b, x, y]
                            if tau > 0:
                                row[i] = mu_mp[2 * x + y] * mpf(float(tau)) ** alpha
                            i += 1
            rows.append(row)
    return rows


def feasibility_report(
    F: EstimationFactor, polytope: PolytopeModel, mus
) -> FeasibilityReport:
    """Evaluate every vertex-input constraint of F at high precision."""
    with mp.workdps(max(VERIFY_DPS, mp.mp.dps)):
        vals = []
        for mu in mus:
            for vert in polytope.vertices:
                vals.append(pef_constraint_value(F, vert, mu))
        worst = max(vals)
        return FeasibilityReport(
            worst_constraint=worst, margin=1 - worst, per_vertex=tuple(vals)
        )


def feasibility_shrink(F: EstimationFactor, report: FeasibilityReport) -> EstimationFactor:
    """Scale F down by its worst constraint value when that value exceeds 1.

    Scaling is never upward; a feasible factor is returned unchanged.
    """
    if report.worst_constraint <= 1:
        return F
    with mp.workdps(max(VERIFY_DPS, mp.mp.dps)):
        s = report.worst_constraint
        return EstimationFactor(
            values=tuple(v / s for v in F.values),
            alpha=F.alpha,
            kind=F.kind,
            rescale_bound=F.rescale_bound,
        )


def _barrier_warm_start(A: np.ndarray, w: np.ndarray, t_final: float = 1e6) -> np.ndarray:
    """Double-precision log-barrier Newton: max sum w log F - (1/t) sum log slack.

    Cells with zero weight get a positivity barrier of their own, otherwise
    the Hessian loses rank as those entries head for 0.
    """
    n = A.shape[1]
    zero = w <= 0
    F = np.full(n, 0.5)
    while (A @ F).max() >= 1.0:
        F *= 0.5
    t = 1e2

    def obj(Fv, sl):
        return (
            np.sum(w[~zero] * np.log(Fv[~zero]))
            + (np.sum(np.log(sl)) + np.sum(np.log(Fv[zero]))) / t
        )

    while True:
        for _ in range(200):
            slack = 1.0 - A @ F
            grad = np.where(zero, (1.0 / t) / F, w / np.where(zero, 1.0, F)) - (
                1.0 / t
            ) * (A.T @ (1.0 / slack))
            diag = np.where(zero, (1.0 / t) / F**2, w / np.where(zero, 1.0, F) ** 2)
            H = np.diag(diag) + (1.0 / t) * (A.T * (1.0 / slack**2)) @ A
            try:
                step = np.linalg.solve(H, grad)
            except np.linalg.LinAlgError:
                step = np.linalg.lstsq(H, grad, rcond=None)[0]
            eta = 1.0
            obj0 = obj(F, slack)
            moved = False
            while eta > 1e-14:
                Fn = F + eta * step
                if np.all(Fn > 0):
                    sl = 1.0 - A @ Fn
                    if np.all(sl > 0):
                        if obj(Fn, sl) >= obj0 - 1e-18:
                            moved = True
                            break
                eta *= 0.5
            if not moved:
                break
            F = F + eta * step
            if np.linalg.norm(eta * step) < 1e-15 * np.linalg.norm(F):
                break
        if t >= t_final:
            break
        t *= 10.0
    return F


def _barrier_continuation_mp(A_mp, w_mp, F_start, t0, t_final):
    """High-precision central-path continuation; returns (F, lambda, t)."""
    m = len(A_mp)
    n = 16
    F = [mpf(x) for x in F_start]
    t = mpf(t0)

    def slacks(Fv):
        return [1 - mp.fdot(A_mp[j], Fv) for j in range(m)]

    sl = slacks(F)
    if not all(s > 0 for s in sl):
        raise OptimizationError("barrier continuation: warm start infeasible", best=None)
    zero = [w_mp[i] == 0 for i in range(n)]
    stop_dec = mpf(10) ** (-(2 * mp.mp.dps) // 3)

    def path_obj(Fv, slv, tv):
        out = sum(w_mp[i] * mp.log(Fv[i]) for i in range(n) if not zero[i])
        out += sum(mp.log(s) for s in slv) / tv
        out += sum(mp.log(Fv[i]) for i in range(n) if zero[i]) / tv
        return out

    while True:
        for _ in range(60):
            sl = slacks(F)
            inv_sl = [1 / s for s in sl]
            grad = [
                ((1 / (t * F[i])) if zero[i] else w_mp[i] / F[i])
                - sum(A_mp[j][i] * inv_sl[j] for j in range(m)) / t
                for i in range(n)
            ]
            H = mp.matrix(n, n)
            for i in range(n):
                H[i, i] = (1 / (t * F[i] ** 2)) if zero[i] else w_mp[i] / F[i] ** 2
            for j in range(m):
                c = inv_sl[j] ** 2 / t
                row = A_mp[j]
                for i in range(n):
                    if row[i]:
                        ri = row[i] * c
                        for l in range(i, n):
                            if row[l]:
                                H[i, l] += ri * row[l]
            for i in range(n):
                for l in range(i + 1, n):
                    H[l, i] = H[i, l]
            step = mp.lu_solve(H, mp.matrix(grad))
            dec = sum(grad[i] * step[i] for i in range(n))
            obj0 = path_obj(F, sl, t)
            eta = mpf(1)
            accepted = False
            for _ in range(90):
                Fn = [F[i] + eta * step[i] for i in range(n)]
                if all(f > 0 for f in Fn):
                    sn = slacks(Fn)
                    if all(s > 0 for s in sn):
                        if path_obj(Fn, sn, t) > obj0:
                            F = Fn
                            accepted = True
                            break
                eta /= 2
            if not accepted or dec < stop_dec:
                break
        if t >= t_final:
            break
        t *= 10
    sl = slacks(F)
    lam = [1 / (t * sl[j]) for j in range(m)]
    return F, lam, t


def optimize_pef(
    nu: JointDistribution,
    alpha,
    polytope: PolytopeModel,
    mus,
    tol: float = 1e-6,
):
    """Rate-optimal estimation factor for statistics nu at the given power.

    Returns ``(F, report, rate)``.  The rate lower bound (of the returned
    strictly feasible F) and the barrier dual upper bound must agree to
    relative ``tol``, else :class:`OptimizationError` carries the best factor
    found.  ``mus`` lists every input distribution the factor must tolerate;
    the constraint set is their product with the polytope vertices.
    """
    if not mus:
        raise ParameterError("optimize_pef: at least one input distribution required")
    with mp.workdps(80):
        alpha_mp = _to_mpf(alpha)
        if not alpha_mp > 1:
            raise ParameterError("optimize_pef: alpha must exceed 1")
        w = nu.nu.reshape(16).astype(float)
        if w.sum() <= 0:
            raise ParameterError("optimize_pef: empty statistics")

        A = _constraint_rows_float(polytope, float(alpha_mp), mus)
        F0 = _barrier_warm_start(A, w, t_final=1e6)
        F0 = F0 * (1 - 1e-9)

        A_mp = _constraint_rows_mp(polytope, alpha_mp, mus)
        w_mp = [mpf(float(v)) for v in w]
        F_mp, lam, t = _barrier_continuation_mp(A_mp, w_mp, F0, mpf(10) ** 6, BARRIER_T_FINAL)

        m = len(A_mp)
        log2 = mp.log(2)
        rate_lb = sum(
            w_mp[i] * mp.log(F_mp[i], 2) for i in range(16) if w_mp[i] != 0
        ) / (alpha_mp - 1)
        # Dual value of lambda: g = sum_i sup_F (w_i ln F - s_i F) + sum lam
        #                         = sum_{w_i>0} w_i (ln(w_i/s_i) - 1) + sum lam
        s = [sum(A_mp[j][i] * lam[j] for j in range(m)) for i in range(16)]
        g = (
            sum(w_mp[i] * (mp.log(w_mp[i] / s[i]) - 1) for i in range(16) if w_mp[i] != 0)
            + sum(lam)
        )
        rate_ub = g / (log2 * (alpha_mp - 1))

        F = EstimationFactor(values=tuple(F_mp), alpha=alpha_mp, kind="PEF")
        report = feasibility_report(F, polytope, mus)
        gap = rate_ub - rate_lb
        if not gap <= tol * max(abs(rate_lb), mpf("1e-3")):
            raise OptimizationError(
                f"optimize_pef: dual gap {mp.nstr(gap, 5)} exceeds tolerance",
                best=F,
                residuals={"rate": float(rate_lb), "rate_upper": float(rate_ub)},
            )
        if report.worst_constraint > 1:
            # Cannot happen on the central path; repair and continue if it does.
            F = feasibility_shrink(F, report)
            report = feasibility_report(F, polytope, mus)
        return F, report, float(rate_lb)


@dataclass(frozen=True)
class AlphaScan:
    """Outcome of a power scan: all rows retained, best row by net rate."""

    alphas: tuple
    rates: tuple
    net_rates: tuple
    best_index: int
    factor: EstimationFactor
    report: FeasibilityReport

    @property
    def best_alpha(self):
        return self.alphas[self.best_index]

    @property
    def best_rate(self) -> float:
        return self.rates[self.best_index]


def scan_alpha(nu: JointDistribution, alphas, polytope: PolytopeModel, mus) -> AlphaScan:
    """Optimize the factor at each candidate power and keep the best net rate.

    Net rate is the certified rate minus the seed entropy spent per trial at
    the first listed input distribution's spot probability.  Ties break toward
    the smallest power, which also carries the mildest error-term penalty
    downstream.
    """
    if not alphas:
        raise ParameterError("scan_alpha: no candidate powers")
    alphas_mp = [_to_mpf(a) for a in alphas]
    r_in = input_entropy_rate(mus[0].q)
    rows = []
    for a in alphas_mp:
        F, report, rate = optimize_pef(nu, a, polytope, mus)
        rows.append((a, F, report, rate))
    net = [rate - r_in for (_, _, _, rate) in rows]
    best = 0
    for i in range(1, len(rows)):
        tie = abs(net[i] - net[best]) <= 1e-12 * max(1.0, abs(net[best]))
        if (net[i] > net[best] and not tie) or (tie and alphas_mp[i] < alphas_mp[best]):
            best = i
    a, F, report, rate = rows[best]
    return AlphaScan(
        alphas=tuple(alphas_mp),
        rates=tuple(r for (_, _, _, r) in rows),
        net_rates=tuple(net),
        best_index=best,
        factor=F,
        report=report,
    )
