"""Conversion of a PEF into a quantum-proof estimation factor.

A PEF certifies randomness against classical side information only.  Against
an adversary holding quantum memory, the factor must first be divided by a
certified bound on an adversarial objective: the adversary prepares a state
tau on a 4-dimensional space and a pair of measurement angles theta, and
collects

    g(tau; theta) = sum_cz mu(z) * Ftilde(cz) * Tr[P_{c|z;theta} tau^(1/alpha)]^alpha,

where Ftilde is the PEF normalized to unit sum.  Dividing the PEF by an upper
bound on the maximum of g yields a factor whose accumulated product bounds
smooth min-entropy conditioned on quantum side information.

The maximum is certified in two layers.  At fixed angles g is concave in tau,
so a conditional-gradient (Frank-Wolfe) iteration produces a feasible lower
bound together with a duality-gap upper bound.  Over the angle square
[0, pi]^2 a trigonometric mesh inequality turns corner values into a bound on
a whole cell: for cell widths phi1, phi2 <= pi/2,

    g anywhere in the cell <= (phi1/sin phi1)^alpha (phi2/sin phi2)^alpha
                              * max(upper bounds at the 4 corners),

and adaptive refinement tightens the certificate to a requested gap.  Angles
outside the square are equivalent to angles inside it under a sign flip
(conjugation by sigma_z on either arm); the reduction is not assumed blindly,
the random audit samples the full angle range.

All 16-vectors use the package-wide flat [a, b, x, y] value order.  Corner
evaluations are pure tasks reduced by max, so chunking and evaluation order
cannot change a certificate.
"""

import json
import math
import os
from dataclasses import dataclass

import numpy as np
import mpmath as mp
from mpmath import mpf

from .chsh import InputDistribution
from .errors import AuditError, OptimizationError, ParameterError
from .pef import EstimationFactor, VERIFY_DPS

# Floor for eigenvalues and overlaps before fractional powers.  With
# p = 1/alpha close to 1, floor**(p-1) stays of order one, so the floor does
# not inject large gradients; it only keeps 0**negative out of the arithmetic.
_EIG_FLOOR = 1e-300
# Relative eigenvalue spacing below which the divided difference switches to
# its diagonal limit p * lam**(p-1).
_DEGEN_REL = 1e-12
# Cap on the Frank-Wolfe step.  A full step makes the iterate rank 1; from
# there clipped eigenvalues distort the gradient and the reported gap.
_ETA_MAX = 0.98

DEFAULT_FW_TOL = 1e-9
DEFAULT_GRID_FW_TOL = 5e-9
DEFAULT_CHUNK = 20000

# Row j = 4*(2x+y) + (2a+b) of a measurement family maps to flat value index
# a*8 + b*4 + x*2 + y and input index 2x+y.
_FT_PERM = np.array(
    [a * 8 + b * 4 + x * 2 + y
     for x in (0, 1) for y in (0, 1) for a in (0, 1) for b in (0, 1)]
)
_MU_IDX = np.repeat(np.arange(4), 4)

_EMBED_LIMIT = 513 * 513


def _validate_ftilde(ftilde) -> np.ndarray:
    ft = np.asarray(ftilde, dtype=float)
    if ft.shape != (16,):
        raise ParameterError(f"ftilde: expected 16 values, got shape {ft.shape}")
    if not np.all(np.isfinite(ft)) or np.any(ft < 0):
        raise ParameterError("ftilde: entries must be finite and nonnegative")
    if abs(ft.sum() - 1.0) > 1e-9:
        raise ParameterError(f"ftilde: sum {ft.sum()!r} != 1")
    return ft


def _validate_alpha(alpha) -> float:
    a = float(alpha)
    if not math.isfinite(a) or a <= 1.0:
        raise ParameterError(f"alpha: {alpha!r} must be a finite power > 1")
    return a


def _weights(ftilde: np.ndarray, mu: InputDistribution) -> np.ndarray:
    """Per-row weights mu(z) * Ftilde(cz), row order 4*(2x+y) + (2a+b)."""
    return mu.mu[_MU_IDX] * ftilde[_FT_PERM]


def _half_angle_vectors(theta: float) -> np.ndarray:
    """[setting][outcome] -> 2-vector of the rank-1 measurement direction.

    Setting 0 measures sigma_z; setting 1 measures the axis rotated by theta
    in the z-x plane, whose outcome-0 eigenvector is (cos t/2, sin t/2).
    """
    c, s = math.cos(theta / 2.0), math.sin(theta / 2.0)
    return np.array([[[1.0, 0.0], [0.0, 1.0]], [[c, s], [-s, c]]])


@dataclass(frozen=True)
class AdversaryMeasurement:
    """Two-angle projective measurement family on the adversary's 4-space.

    ``vectors`` holds the 16 unit vectors whose outer products are the
    projectors, row j = 4*(2x+y) + (2a+b); ``projectors`` the corresponding
    rank-1 matrices.  The standard construction is real, but rotated copies
    (used by covariance checks) may be complex.
    """

    theta: tuple
    vectors: np.ndarray
    projectors: np.ndarray

    def __post_init__(self):
        t = tuple(float(v) for v in self.theta)
        if len(t) != 2 or not all(math.isfinite(v) for v in t):
            raise ParameterError(f"AdversaryMeasurement: bad theta {self.theta!r}")
        vec = np.asarray(self.vectors)
        proj = np.asarray(self.projectors)
        if vec.shape != (16, 4) or proj.shape != (16, 4, 4):
            raise ParameterError("AdversaryMeasurement: wrong array shapes")
        norms = np.einsum("ji,ji->j", vec.conj(), vec).real
        if np.max(np.abs(norms - 1.0)) > 1e-12:
            raise ParameterError("AdversaryMeasurement: vectors must be unit")
        herm = np.max(np.abs(proj - np.conj(np.swapaxes(proj, 1, 2))))
        idem = np.max(np.abs(np.einsum("jik,jkl->jil", proj, proj) - proj))
        if herm > 1e-12 or idem > 1e-12:
            raise ParameterError(
                f"AdversaryMeasurement: projector defect herm={herm:.2e} idem={idem:.2e}"
            )
        for z in range(4):
            s = proj[4 * z:4 * z + 4].sum(axis=0)
            if np.max(np.abs(s - np.eye(4))) > 1e-12:
                raise ParameterError(
                    f"AdversaryMeasurement: outcomes of setting pair {z} do not resolve identity"
                )
        object.__setattr__(self, "theta", t)
        object.__setattr__(self, "vectors", vec)
        object.__setattr__(self, "projectors", proj)


def adversary_measurements(theta) -> AdversaryMeasurement:
    """Build the measurement family at angles ``theta = (theta1, theta2)``.

    Setting 0 of each arm is fixed to sigma_z, setting 1 rotated by the arm's
    angle, and the 16 joint projectors are tensor products.
    """
    t1, t2 = (float(v) for v in theta)
    if not (math.isfinite(t1) and math.isfinite(t2)):
        raise ParameterError(f"adversary_measurements: non-finite theta {theta!r}")
    va = _half_angle_vectors(t1)
    vb = _half_angle_vectors(t2)
    rows = [
        np.kron(va[x, a], vb[y, b])
        for x in (0, 1) for y in (0, 1) for a in (0, 1) for b in (0, 1)
    ]
    vectors = np.array(rows)
    projectors = np.einsum("ji,jk->jik", vectors, vectors).astype(complex)
    return AdversaryMeasurement((t1, t2), vectors, projectors)


@dataclass(frozen=True)
class DensityOperator:
    """4x4 Hermitian state: trace one, eigenvalues >= -1e-12.

    Eigenvalues in [-1e-12, 0) are treated as roundoff and clipped to zero,
    with the matrix rebuilt from the clipped spectrum.
    """

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        if m.shape != (4, 4):
            raise ParameterError(f"DensityOperator: shape {m.shape} != (4, 4)")
        if np.max(np.abs(m - m.conj().T)) > 1e-10:
            raise ParameterError("DensityOperator: matrix is not Hermitian")
        tr = np.trace(m).real
        if abs(tr - 1.0) > 1e-10:
            raise ParameterError(f"DensityOperator: trace {tr!r} != 1")
        lam, u = np.linalg.eigh(m)
        if lam.min() < -1e-12:
            raise ParameterError(
                f"DensityOperator: eigenvalue {lam.min():.3e} below -1e-12"
            )
        if lam.min() < 0.0:
            lam = np.clip(lam, 0.0, None)
            m = (u * lam) @ u.conj().T
            m = 0.5 * (m + m.conj().T)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def maximally_mixed(cls) -> "DensityOperator":
        return cls(np.eye(4) / 4.0)


def _value_grad(tau_mat, vecs, wts, alpha, want_grad=True):
    """g and its gradient at one (possibly complex) Hermitian ``tau_mat``."""
    p = 1.0 / alpha
    lam, u = np.linalg.eigh(tau_mat)
    lam = np.clip(lam, _EIG_FLOOR, None)
    lam_p = lam ** p
    taup = (u * lam_p) @ u.conj().T
    q = np.einsum("ji,ik,jk->j", vecs.conj(), taup, vecs).real
    q = np.clip(q, _EIG_FLOOR, None)
    val = float(np.dot(wts, q ** alpha))
    if not want_grad:
        return val, None
    c = wts * alpha * q ** (alpha - 1.0)
    m = (vecs.T * c) @ vecs.conj()
    mt = u.conj().T @ m @ u
    dl = lam[:, None] - lam[None, :]
    dp = lam_p[:, None] - lam_p[None, :]
    small = np.abs(dl) < _DEGEN_REL * np.maximum(lam[:, None], lam[None, :])
    dd = np.where(small, p * lam[:, None] ** (p - 1.0), dp / np.where(small, 1.0, dl))
    grad = u @ (dd * mt) @ u.conj().T
    return val, 0.5 * (grad + grad.conj().T)


def inner_objective(tau, meas: AdversaryMeasurement, ftilde, mu: InputDistribution,
                    alpha) -> tuple:
    """Value and gradient of the adversarial objective at one state.

    ``tau`` may be a :class:`DensityOperator` or a plain Hermitian PSD array;
    the array form skips the trace check, which finite-difference audits need
    since the objective extends homogeneously off the trace-one slice.  The
    gradient comes from the eigendecomposition of tau and the first divided
    differences of x**(1/alpha), chain-ruled through the outer power.
    """
    a = _validate_alpha(alpha)
    ft = _validate_ftilde(ftilde)
    if isinstance(tau, DensityOperator):
        mat = tau.matrix
    else:
        mat = np.asarray(tau, dtype=complex)
        if mat.shape != (4, 4):
            raise ParameterError(f"inner_objective: tau shape {mat.shape} != (4, 4)")
        if np.max(np.abs(mat - mat.conj().T)) > 1e-10:
            raise ParameterError("inner_objective: tau is not Hermitian")
    wts = _weights(ft, mu)
    return _value_grad(mat, meas.vectors, wts, a)


@dataclass(frozen=True)
class InnerBound:
    """Sandwich on the fixed-angle maximum of the adversarial objective.

    ``lower`` is attained by ``tau`` (feasible, stored for re-checking);
    ``upper`` is the best value-plus-gap seen, valid by concavity.  A run
    that exhausts ``max_iters`` reports ``converged=False`` but the bounds
    still hold.  ``gap_trace`` records the certified upper - lower after
    each iteration; the raw per-step duality gap can wobble, the certified
    pair cannot.
    """

    theta: tuple
    lower: float
    upper: float
    converged: bool
    iterations: int
    tau: DensityOperator
    gap_trace: tuple

    def __post_init__(self):
        if self.upper < self.lower:
            raise ParameterError("InnerBound: upper below lower")


def frank_wolfe_ftheta(theta, ftilde, mu: InputDistribution, alpha,
                       tol: float = DEFAULT_FW_TOL, max_iters: int = 200) -> InnerBound:
    """Bound the fixed-angle maximum over states by conditional gradient.

    The linear subproblem over density operators is solved by the top
    eigenvector of the gradient, and the duality gap lambda_max(grad) - g
    follows from the objective being 1-homogeneous (<grad, tau> = g).  Steps
    use the quadratic model through the current value, the gap and the vertex
    value, capped at 0.98 to keep the iterate full rank; the contract is only
    the (lower, upper) sandwich, which holds for any step choice.
    """
    a = _validate_alpha(alpha)
    ft = _validate_ftilde(ftilde)
    if not tol > 0.0:
        raise ParameterError(f"frank_wolfe_ftheta: tol {tol!r} must be positive")
    if max_iters < 1:
        raise ParameterError("frank_wolfe_ftheta: max_iters must be at least 1")
    meas = adversary_measurements(theta)
    wts = _weights(ft, mu)
    vecs = meas.vectors
    tau = np.eye(4) / 4.0
    best = -np.inf
    best_tau = tau
    upper = np.inf
    gaps = []
    converged = False
    iterations = 0
    for it in range(1, max_iters + 1):
        iterations = it
        val, grad = _value_grad(tau, vecs, wts, a)
        if val > best:
            best = val
            best_tau = tau
        evals, evecs = np.linalg.eigh(grad)
        gap = float(evals[-1]) - val
        upper = min(upper, val + max(gap, 0.0))
        gaps.append(upper - best)
        if upper - best <= tol:
            converged = True
            break
        v = evecs[:, -1].real
        v = v / np.linalg.norm(v)
        qv = np.clip((vecs @ v) ** 2, _EIG_FLOOR, None)
        h1 = float(np.dot(wts, qv ** a))
        curv = val + gap - h1
        if curv > 0.0:
            eta = min(_ETA_MAX, max(0.0, gap / (2.0 * curv)))
        else:
            eta = _ETA_MAX
        tau = (1.0 - eta) * tau + eta * np.outer(v, v)
        tau = 0.5 * (tau + tau.T)
    upper = max(upper, best)
    return InnerBound(
        theta=tuple(float(t) for t in theta),
        lower=best,
        upper=upper,
        converged=converged,
        iterations=iterations,
        tau=DensityOperator(best_tau),
        gap_trace=tuple(gaps),
    )


def _batched_dirs(thetas: np.ndarray) -> np.ndarray:
    """Measurement directions for a batch of angle pairs, shape (B, 16, 4)."""
    th = np.asarray(thetas, dtype=float)
    n = th.shape[0]
    c1, s1 = np.cos(th[:, 0] / 2.0), np.sin(th[:, 0] / 2.0)
    c2, s2 = np.cos(th[:, 1] / 2.0), np.sin(th[:, 1] / 2.0)
    one, zero = np.ones(n), np.zeros(n)
    pa = [[np.stack([one, zero], 1), np.stack([zero, one], 1)],
          [np.stack([c1, s1], 1), np.stack([-s1, c1], 1)]]
    pb = [[np.stack([one, zero], 1), np.stack([zero, one], 1)],
          [np.stack([c2, s2], 1), np.stack([-s2, c2], 1)]]
    dirs = np.empty((n, 16, 4))
    j = 0
    for x in (0, 1):
        for y in (0, 1):
            for a in (0, 1):
                for b in (0, 1):
                    ua, ub = pa[x][a], pb[y][b]
                    dirs[:, j, 0] = ua[:, 0] * ub[:, 0]
                    dirs[:, j, 1] = ua[:, 0] * ub[:, 1]
                    dirs[:, j, 2] = ua[:, 1] * ub[:, 0]
                    dirs[:, j, 3] = ua[:, 1] * ub[:, 1]
                    j += 1
    return dirs


def _batched_value_grad(tau, dirs, wts, alpha, want_grad=True):
    """Vectorized objective over a batch; mirrors :func:`_value_grad`."""
    p = 1.0 / alpha
    lam, u = np.linalg.eigh(tau)
    lam = np.clip(lam, _EIG_FLOOR, None)
    lam_p = lam ** p
    taup = np.einsum("bik,bk,bjk->bij", u, lam_p, u.conj())
    q = np.einsum("bji,bik,bjk->bj", dirs, taup, dirs).real
    q = np.clip(q, _EIG_FLOOR, None)
    val = (q ** alpha) @ wts
    if not want_grad:
        return val, None
    c = wts * alpha * q ** (alpha - 1.0)
    m = np.einsum("bj,bji,bjk->bik", c, dirs, dirs)
    mt = np.einsum("bji,bjk,bkl->bil", u.conj(), m, u)
    dl = lam[:, :, None] - lam[:, None, :]
    dp = lam_p[:, :, None] - lam_p[:, None, :]
    big = np.maximum(lam[:, :, None], lam[:, None, :])
    small = np.abs(dl) < _DEGEN_REL * big
    dd = np.where(small, p * lam[:, :, None] ** (p - 1.0),
                  dp / np.where(small, 1.0, dl))
    grad = np.einsum("bik,bkl,bjl->bij", u, dd * mt, u.conj())
    return val, 0.5 * (grad + np.conj(np.swapaxes(grad, 1, 2)))


def _batched_fw(thetas, wts, alpha, tol, max_iters):
    """Frank-Wolfe sandwiches for a batch of angles in lockstep.

    Returns (lower, upper, converged) arrays.  Real arithmetic throughout:
    the standard directions are real, so gradients stay real symmetric.
    """
    n = np.asarray(thetas).shape[0]
    dirs = _batched_dirs(thetas)
    tau = np.broadcast_to(np.eye(4) / 4.0, (n, 4, 4)).copy()
    lower = np.full(n, -np.inf)
    upper = np.full(n, np.inf)
    active = np.ones(n, dtype=bool)
    it = 0
    while active.any() and it < max_iters:
        it += 1
        idx = np.nonzero(active)[0]
        val, grad = _batched_value_grad(tau[idx], dirs[idx], wts, alpha)
        lower[idx] = np.maximum(lower[idx], val)
        evals, evecs = np.linalg.eigh(grad)
        gap = np.maximum(evals[:, -1] - val, 0.0)
        upper[idx] = np.minimum(upper[idx], val + gap)
        conv = (upper[idx] - lower[idx]) <= tol
        active[idx[conv]] = False
        keep = ~conv
        idx2 = idx[keep]
        if idx2.size == 0:
            continue
        v = evecs[keep][:, :, -1]
        ov = np.einsum("bji,bi->bj", dirs[idx2], v)
        h1 = (np.clip(ov * ov, _EIG_FLOOR, None) ** alpha) @ wts
        curv = val[keep] + gap[keep] - h1
        safe = np.where(curv > 0.0, curv, 1.0)
        eta = np.where(curv > 0.0,
                       np.clip(gap[keep] / (2.0 * safe), 0.0, _ETA_MAX),
                       _ETA_MAX)
        vvt = np.einsum("bi,bj->bij", v, v)
        tau[idx2] = (1.0 - eta)[:, None, None] * tau[idx2] \
            + eta[:, None, None] * vvt
    upper = np.maximum(upper, lower)
    return lower, upper, ~active


@dataclass(frozen=True, eq=False)
class GridCertificate:
    """Certified sandwich on the angle-global maximum of the objective.

    The mesh is dyadic: ``corner_lower``/``corner_upper`` hold Frank-Wolfe
    bounds at the (n+1)**2 corners of the final n-cells-per-axis grid, NaN
    where a corner was never needed.  ``active_cells`` marks cells still open
    at the end; cells dropped earlier (their inflated bound fell below the
    global lower bound) are summarized by ``retired_upper``, which by the
    retirement rule never exceeds ``global_lower``.  ``history`` records
    (cells_per_axis, global_lower, global_upper) per depth and is monotone in
    both bounds.
    """

    alpha: float
    mu: InputDistribution
    ftilde: np.ndarray
    cells_per_axis: int
    refinement_depth: int
    global_lower: float
    global_upper: float
    converged: bool
    target_gap: float
    fw_tol: float
    fw_unconverged: int
    retired_upper: float
    history: tuple
    corner_lower: np.ndarray
    corner_upper: np.ndarray
    active_cells: np.ndarray

    def __post_init__(self):
        if not self.global_lower <= self.global_upper:
            raise ParameterError("GridCertificate: lower exceeds upper")
        lows = [h[1] for h in self.history]
        ups = [h[2] for h in self.history]
        if any(b < a for a, b in zip(lows, lows[1:])) or \
                any(b > a for a, b in zip(ups, ups[1:])):
            raise ParameterError("GridCertificate: history is not monotone")
        n = self.cells_per_axis
        if self.corner_lower.shape != (n + 1, n + 1) or \
                self.corner_upper.shape != (n + 1, n + 1) or \
                self.active_cells.shape != (n, n):
            raise ParameterError("GridCertificate: array shapes do not match grid")

    def to_jsonable(self, embed_limit: int = _EMBED_LIMIT) -> dict:
        """JSON form; corner arrays are embedded only up to ``embed_limit``."""
        def grid_list(arr):
            return [[None if math.isnan(v) else v for v in row] for row in arr.tolist()]

        d = {
            "kind": "grid_certificate",
            "alpha": format(self.alpha, ".17g"),
            "mu": self.mu.to_jsonable(),
            "ftilde": [format(v, ".17g") for v in self.ftilde],
            "cells_per_axis": self.cells_per_axis,
            "refinement_depth": self.refinement_depth,
            "global_lower": format(self.global_lower, ".17g"),
            "global_upper": format(self.global_upper, ".17g"),
            "converged": self.converged,
            "target_gap": format(self.target_gap, ".17g"),
            "fw_tol": format(self.fw_tol, ".17g"),
            "fw_unconverged": self.fw_unconverged,
            "retired_upper": None if math.isinf(self.retired_upper)
            else format(self.retired_upper, ".17g"),
            "history": [
                {"cells_per_axis": n, "global_lower": lo, "global_upper": up}
                for (n, lo, up) in self.history
            ],
        }
        if (self.cells_per_axis + 1) ** 2 <= embed_limit:
            d["corner_lower"] = grid_list(self.corner_lower)
            d["corner_upper"] = grid_list(self.corner_upper)
            d["active_cells"] = [[bool(v) for v in row]
                                 for row in self.active_cells.tolist()]
        else:
            d["corner_data"] = "external"
        return d

    @classmethod
    def from_jsonable(cls, obj: dict, arrays: dict | None = None) -> "GridCertificate":
        if "corner_lower" in obj:
            def grid_arr(rows):
                return np.array([[np.nan if v is None else float(v) for v in row]
                                 for row in rows])

            cl = grid_arr(obj["corner_lower"])
            cu = grid_arr(obj["corner_upper"])
            act = np.array(obj["active_cells"], dtype=bool)
        elif arrays is not None:
            cl, cu = arrays["corner_lower"], arrays["corner_upper"]
            act = arrays["active_cells"].astype(bool)
        else:
            raise ParameterError("GridCertificate: corner data missing")
        ret = obj.get("retired_upper")
        return cls(
            alpha=float(obj["alpha"]),
            mu=InputDistribution.from_jsonable(obj["mu"]),
            ftilde=np.array([float(s) for s in obj["ftilde"]]),
            cells_per_axis=int(obj["cells_per_axis"]),
            refinement_depth=int(obj["refinement_depth"]),
            global_lower=float(obj["global_lower"]),
            global_upper=float(obj["global_upper"]),
            converged=bool(obj["converged"]),
            target_gap=float(obj["target_gap"]),
            fw_tol=float(obj["fw_tol"]),
            fw_unconverged=int(obj["fw_unconverged"]),
            retired_upper=-np.inf if ret is None else float(ret),
            history=tuple((int(h["cells_per_axis"]), float(h["global_lower"]),
                           float(h["global_upper"])) for h in obj["history"]),
            corner_lower=cl,
            corner_upper=cu,
            active_cells=act,
        )

    def save(self, path: str) -> None:
        """Write JSON; large corner arrays go to a ``.npz`` sidecar."""
        obj = self.to_jsonable()
        if obj.get("corner_data") == "external":
            sidecar = path + ".npz"
            np.savez_compressed(
                sidecar,
                corner_lower=self.corner_lower,
                corner_upper=self.corner_upper,
                active_cells=self.active_cells,
            )
            obj["corner_data"] = {"npz": os.path.basename(sidecar)}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "GridCertificate":
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
        arrays = None
        ext = obj.get("corner_data")
        if isinstance(ext, dict):
            with np.load(os.path.join(os.path.dirname(path) or ".", ext["npz"])) as z:
                arrays = {k: z[k] for k in z.files}
        return cls.from_jsonable(obj, arrays)


def _inflation(width: float, alpha: float) -> float:
    return float((width / math.sin(width)) ** (2.0 * alpha))


def _cell_upper(corner_upper: np.ndarray, width: float, alpha: float) -> np.ndarray:
    cm = np.maximum(
        np.maximum(corner_upper[:-1, :-1], corner_upper[1:, :-1]),
        np.maximum(corner_upper[:-1, 1:], corner_upper[1:, 1:]),
    )
    return _inflation(width, alpha) * cm


def grid_bound_fmax(ftilde, mu: InputDistribution, alpha, initial_cells: int = 8,
                    target_gap: float = 0.0, *,
                    fw_tol: float = DEFAULT_GRID_FW_TOL, fw_max_iters: int = 80,
                    max_cells_per_axis: int = 4096,
                    chunk: int = DEFAULT_CHUNK) -> GridCertificate:
    """Certify the angle-global maximum by adaptive dyadic mesh refinement.

    Corners carry Frank-Wolfe sandwiches; a cell of width phi is bounded by
    (phi/sin phi)^(2 alpha) times its worst corner upper bound, valid for
    phi <= pi/2.  Each depth halves the cell width, re-using every corner
    already evaluated, and drops cells whose bound cannot reach the global
    lower bound.  Refinement stops once global_upper - global_lower is at
    most ``target_gap`` (0 runs to the cell budget) or when another halving
    would exceed ``max_cells_per_axis``; exhausting the budget is not an
    error, the certificate just reports ``converged=False``.
    """
    a = _validate_alpha(alpha)
    ft = _validate_ftilde(ftilde)
    if initial_cells < 1 or math.pi / max(initial_cells, 1) > math.pi / 2.0 + 1e-15:
        raise ParameterError(
            f"grid_bound_fmax: {initial_cells} cells per axis gives width "
            ">= pi/2; the mesh inequality needs at least 2 (sin degenerates at pi)"
        )
    if target_gap < 0.0:
        raise ParameterError("grid_bound_fmax: target_gap must be >= 0")
    if max_cells_per_axis < initial_cells:
        raise ParameterError("grid_bound_fmax: budget below the initial grid")
    wts = _weights(ft, mu)

    n = initial_cells
    corner_lower = np.full((n + 1, n + 1), np.nan)
    corner_upper = np.full((n + 1, n + 1), np.nan)
    active = np.ones((n, n), dtype=bool)
    retired_upper = -np.inf
    global_lower = -np.inf
    global_upper = np.inf
    history = []
    depth = 0
    fw_bad = 0

    while True:
        need = np.zeros((n + 1, n + 1), dtype=bool)
        need[:-1, :-1] |= active
        need[1:, :-1] |= active
        need[:-1, 1:] |= active
        need[1:, 1:] |= active
        todo = need & np.isnan(corner_upper)
        if todo.any():
            pts = np.argwhere(todo) * (math.pi / n)
            los = np.empty(len(pts))
            ups = np.empty(len(pts))
            for s in range(0, len(pts), chunk):
                lo, up, ok = _batched_fw(pts[s:s + chunk], wts, a, fw_tol, fw_max_iters)
                los[s:s + len(lo)] = lo
                ups[s:s + len(up)] = up
                fw_bad += int((~ok).sum())
            corner_lower[todo] = los
            corner_upper[todo] = ups
        global_lower = max(global_lower, float(np.nanmax(corner_lower)))
        cell_up = np.where(active, _cell_upper(corner_upper, math.pi / n, a), -np.inf)
        still = cell_up > global_lower
        dropped = active & ~still
        if dropped.any():
            retired_upper = max(retired_upper, float(cell_up[dropped].max()))
        active &= still
        cand = retired_upper
        if active.any():
            cand = max(cand, float(cell_up[active].max()))
        global_upper = min(global_upper, cand)
        history.append((n, global_lower, global_upper))
        if global_upper - global_lower <= target_gap:
            converged = True
            break
        if 2 * n > max_cells_per_axis or not active.any():
            converged = False
            break
        n2 = 2 * n
        cl = np.full((n2 + 1, n2 + 1), np.nan)
        cu = np.full((n2 + 1, n2 + 1), np.nan)
        cl[::2, ::2] = corner_lower
        cu[::2, ::2] = corner_upper
        a2 = np.zeros((n2, n2), dtype=bool)
        for di in (0, 1):
            for dj in (0, 1):
                a2[di::2, dj::2] = active
        corner_lower, corner_upper, active, n = cl, cu, a2, n2
        depth += 1

    return GridCertificate(
        alpha=a,
        mu=mu,
        ftilde=ft,
        cells_per_axis=n,
        refinement_depth=depth,
        global_lower=global_lower,
        global_upper=global_upper,
        converged=converged,
        target_gap=target_gap,
        fw_tol=fw_tol,
        fw_unconverged=fw_bad,
        retired_upper=retired_upper,
        history=tuple(history),
        corner_lower=corner_lower,
        corner_upper=corner_upper,
        active_cells=active,
    )


def audit_grid_certificate(cert: GridCertificate, tol: float = 1e-13) -> tuple:
    """Re-derive a certificate's bounds from its stored mesh data.

    Recomputes the global lower bound from corner values, the final-depth
    cell bounds from the inflation formula, and checks the retirement and
    monotonicity bookkeeping.  No Frank-Wolfe is re-run.  Returns the
    recomputed (global_lower, global_upper); raises :class:`AuditError` on
    any mismatch beyond ``tol``.
    """
    lower = float(np.nanmax(cert.corner_lower))
    if abs(lower - cert.global_lower) > tol:
        raise AuditError(
            f"grid certificate: corner lower bounds give {lower!r}, "
            f"stored {cert.global_lower!r}"
        )
    width = math.pi / cert.cells_per_axis
    cell_up = np.where(cert.active_cells,
                       _cell_upper(cert.corner_upper, width, cert.alpha), -np.inf)
    cand = cert.retired_upper
    if cert.active_cells.any():
        cand = max(cand, float(cell_up[cert.active_cells].max()))
    if cert.global_upper > cand + tol:
        raise AuditError(
            f"grid certificate: stored upper {cert.global_upper!r} above "
            f"recomputed cell bound {cand!r}"
        )
    if cert.retired_upper > cert.global_lower + tol:
        raise AuditError("grid certificate: a retired cell exceeded the lower bound")
    if not cert.global_lower <= cert.global_upper:
        raise AuditError("grid certificate: bounds out of order")
    hist_up = min(h[2] for h in cert.history)
    if abs(hist_up - cert.global_upper) > tol:
        raise AuditError("grid certificate: history does not support the stored upper")
    return lower, min(cand, hist_up)


def rescale_to_qef(fprime: EstimationFactor, mus, *, target_bound: float = 1.0 + 1e-6,
                   initial_cells: int = 8, max_cells_per_axis: int = 4096,
                   fw_tol: float = DEFAULT_GRID_FW_TOL, fw_max_iters: int = 80,
                   chunk: int = DEFAULT_CHUNK):
    """Divide a PEF by a certified bound on the adversarial maximum.

    Runs one grid certificate per input distribution in ``mus`` (the two
    extremal biased distributions, so any admissible bias is covered by
    convexity) and takes the worse of the global upper bounds.  The returned
    factor has kind QEF with ``rescale_bound = f0 * max bound`` recorded, so
    its per-trial rate is the PEF rate minus log2(rescale_bound)/(alpha-1).

    ``target_bound`` sets the refinement target: the mesh gap aims at 98% of
    target_bound - 1, leaving room for the landscape itself to sit slightly
    above 1.  If the budget runs out first, the looser certified bound is
    recorded rather than raising.
    """
    if not isinstance(fprime, EstimationFactor) or fprime.kind != "PEF":
        raise ParameterError("rescale_to_qef: fprime must be a PEF EstimationFactor")
    mus = tuple(mus)
    if not mus:
        raise ParameterError("rescale_to_qef: at least one input distribution")
    if not target_bound > 1.0:
        raise ParameterError("rescale_to_qef: target_bound must exceed 1")
    with mp.workdps(VERIFY_DPS):
        f0 = mp.fsum(fprime.values)
    f0_f = float(f0)
    ftilde = np.array([float(v / f0) for v in fprime.values])
    ssum = ftilde.sum()
    if abs(ssum - 1.0) > 1e-12:
        ftilde = ftilde / ssum
    alpha_f = float(fprime.alpha)
    target_gap = 0.98 * (target_bound - 1.0) / f0_f
    certs = tuple(
        grid_bound_fmax(ftilde, mu, alpha_f, initial_cells, target_gap,
                        fw_tol=fw_tol, fw_max_iters=fw_max_iters,
                        max_cells_per_axis=max_cells_per_axis, chunk=chunk)
        for mu in mus
    )
    fbound = max(c.global_upper for c in certs)
    with mp.workdps(VERIFY_DPS):
        rb = f0 * mpf(fbound)
        if rb < 1:
            # Dividing by less than 1 would inflate the factor; a unit
            # rescale is always sound.
            rb = mpf(1)
        qvals = tuple(v / rb for v in fprime.values)
    qef = EstimationFactor(qvals, fprime.alpha, kind="QEF", rescale_bound=rb)
    return qef, certs


def audit_qef(qef: EstimationFactor, mus, n_points: int = 10000, *,
              seed: int = 0, tol: float = 1e-12, batch: int = 2000) -> float:
    """Spot-check the QEF constraint at random states and angles.

    Samples angles over the full (-pi, pi] range on both arms (so the
    half-square reduction used by the grid gets checked, not assumed) and
    states of every rank from complex Wishart draws, then evaluates
    sum mu(z) F(cz) Tr[P tau^(1/alpha)]^alpha for each input distribution in
    ``mus``.  Raises :class:`AuditError` if any sample exceeds 1 + ``tol``;
    returns the worst value seen.
    """
    if qef.kind != "QEF":
        raise ParameterError("audit_qef: factor must have kind QEF")
    if n_points < 1:
        raise ParameterError("audit_qef: n_points must be positive")
    alpha_f = float(qef.alpha)
    vals = np.array([float(v) for v in qef.values])
    rng = np.random.default_rng(seed)
    worst = -np.inf
    worst_at = None
    mus = tuple(mus)
    for s in range(0, n_points, batch):
        b = min(batch, n_points - s)
        thetas = rng.uniform(-math.pi, math.pi, (b, 2))
        ranks = 1 + (np.arange(s, s + b) % 4)
        gin = rng.standard_normal((b, 4, 4)) + 1j * rng.standard_normal((b, 4, 4))
        mask = (np.arange(4)[None, :] < ranks[:, None]).astype(float)
        gin = gin * mask[:, None, :]
        tau = np.einsum("bik,bjk->bij", gin, gin.conj())
        tr = np.einsum("bii->b", tau).real
        tau = tau / tr[:, None, None]
        dirs = _batched_dirs(thetas)
        p = 1.0 / alpha_f
        lam, u = np.linalg.eigh(tau)
        lam = np.clip(lam, _EIG_FLOOR, None)
        taup = np.einsum("bik,bk,bjk->bij", u, lam ** p, u.conj())
        q = np.clip(np.einsum("bji,bik,bjk->bj", dirs, taup, dirs.conj()).real,
                    _EIG_FLOOR, None)
        powed = q ** alpha_f
        for mu in mus:
            wts = mu.mu[_MU_IDX] * vals[_FT_PERM]
            vv = powed @ wts
            k = int(np.argmax(vv))
            if vv[k] > worst:
                worst = float(vv[k])
                worst_at = (tuple(thetas[k]), float(mu.q))
        del tau, taup, q, powed, dirs
    if worst > 1.0 + tol:
        raise AuditError(
            f"QEF constraint reached {worst!r} > 1 + {tol!r} at "
            f"theta={worst_at[0]}, q={worst_at[1]}"
        )
    return worst
