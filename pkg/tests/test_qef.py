"""Tests for the PEF-to-QEF rescaler.

The four corners of the angle square all make the inner problem classical:
with both settings measuring (possibly relabeled) sigma_z, the objective
reduces to a maximum over four deterministic strategies, so Frank-Wolfe
sandwiches can be checked against exact constraint values computed through
the PEF module.  Grid depth values are frozen from a converged run.
"""

import json
import math

import numpy as np
import mpmath as mp
from mpmath import mpf
import pytest
from hypothesis import given, settings, strategies as st

from diqre import refdata
from diqre.chsh import build_polytope, build_spot_checking_inputs
from diqre.errors import AuditError, ParameterError
from diqre.pef import EstimationFactor, pef_constraint_value
from diqre.qef import (
    AdversaryMeasurement,
    DensityOperator,
    GridCertificate,
    adversary_measurements,
    audit_grid_certificate,
    audit_qef,
    frank_wolfe_ftheta,
    grid_bound_fmax,
    inner_objective,
    rescale_to_qef,
    _batched_fw,
    _weights,
)

F_REF = refdata.reference_factor()
with mp.workdps(50):
    F0 = mp.fsum(F_REF.values)
F0_F = float(F0)
FTILDE = np.array([float(v / F0) for v in F_REF.values])
ALPHA = float(F_REF.alpha)
MU_IDEAL, MU_LOW, MU_HIGH = build_spot_checking_inputs(
    float(refdata.Q_REF_FRACTION), refdata.EPS_B_REF
)
POLY = build_polytope()
UNIFORM = np.full(16, 1.0 / 16.0)


def _random_density(rng, dim_real=False, rank=4):
    g = rng.standard_normal((4, rank))
    if not dim_real:
        g = g + 1j * rng.standard_normal((4, rank))
    tau = g @ g.conj().T
    return tau / np.trace(tau).real


def test_measurement_construction_and_identities():
    pauli_x = np.array([[0.0, 1.0], [1.0, 0.0]])
    rng = np.random.default_rng(11)
    for t1, t2 in [(0.0, 0.0), (math.pi / 2, 0.3), (-1.2, math.pi),
                   *rng.uniform(-math.pi, math.pi, (5, 2))]:
        meas = adversary_measurements((t1, t2))
        proj = meas.projectors
        assert np.max(np.abs(np.einsum("jik,jkl->jil", proj, proj) - proj)) < 1e-14
        assert np.max(np.abs(proj - np.conj(np.swapaxes(proj, 1, 2)))) < 1e-14
        for z in range(4):
            s = proj[4 * z:4 * z + 4].sum(axis=0)
            assert np.max(np.abs(s - np.eye(4))) < 1e-14
        outer = np.einsum("ji,jk->jik", meas.vectors, np.conj(meas.vectors))
        assert np.max(np.abs(outer - proj)) < 1e-14

    # theta1 = 0 collapses setting 1 onto the sigma_z measurement of setting 0
    meas0 = adversary_measurements((0.0, 0.7))
    assert np.max(np.abs(meas0.projectors[:8] - meas0.projectors[8:])) < 1e-15

    # theta1 = pi/2 turns setting 1 into the sigma_x measurement
    meas_x = adversary_measurements((math.pi / 2, 0.0))
    qx0 = 0.5 * (np.eye(2) + pauli_x)
    # row j = 4*(2x+y) + (2a+b); (x, y, a, b) = (1, 0, 0, 0) is row 8
    want = np.kron(qx0, np.array([[1.0, 0.0], [0.0, 0.0]]))
    assert np.max(np.abs(meas_x.projectors[8] - want)) < 1e-15


def test_measurement_validation():
    with pytest.raises(ParameterError, match="theta"):
        adversary_measurements((math.nan, 0.0))
    good = adversary_measurements((0.4, 0.9))
    bad = good.projectors.copy()
    bad[3] = 0.5 * np.eye(4)
    with pytest.raises(ParameterError):
        AdversaryMeasurement(good.theta, good.vectors, bad)


def test_density_operator_contract():
    with pytest.raises(ParameterError, match="Hermitian"):
        DensityOperator(np.triu(np.ones((4, 4))) / 2.5)
    with pytest.raises(ParameterError, match="trace"):
        DensityOperator(np.eye(4) / 3.9)
    with pytest.raises(ParameterError, match="eigenvalue"):
        DensityOperator(np.diag([0.5, 0.5 + 1e-10, -1e-10, 0.0]))
    # roundoff-scale negative eigenvalue is clipped, not rejected
    tau = DensityOperator(np.diag([0.5, 0.5 + 5e-13, -5e-13, 0.0]))
    assert np.linalg.eigvalsh(tau.matrix).min() >= 0.0
    assert abs(np.trace(tau.matrix).real - 1.0) < 1e-11
    assert DensityOperator.maximally_mixed().matrix[0, 0] == pytest.approx(0.25)


def test_inner_objective_at_maximally_mixed():
    # Tr[(I/4)^(1/alpha) P]^alpha = (1/4)^(p*alpha) = 1/4 exactly for rank-1
    # projectors, for every alpha, so the value is sum(weights)/4.
    meas = adversary_measurements((1.1, 2.3))
    tau = DensityOperator.maximally_mixed()
    for alpha in (ALPHA, 1.5, 1.0001):
        val, grad = inner_objective(tau, meas, FTILDE, MU_IDEAL, alpha)
        want = _weights(FTILDE, MU_IDEAL).sum() / 4.0
        assert val == pytest.approx(want, rel=1e-14)
        assert grad.shape == (4, 4)
    val_u, _ = inner_objective(tau, meas, UNIFORM, MU_IDEAL, 1.25)
    assert val_u == pytest.approx(1.0 / 16.0, rel=1e-14)


def test_inner_objective_validation():
    meas = adversary_measurements((0.2, 0.4))
    tau = DensityOperator.maximally_mixed()
    with pytest.raises(ParameterError, match="alpha"):
        inner_objective(tau, meas, FTILDE, MU_IDEAL, 1.0)
    with pytest.raises(ParameterError, match="sum"):
        inner_objective(tau, meas, FTILDE * 0.5, MU_IDEAL, ALPHA)
    with pytest.raises(ParameterError, match="16"):
        inner_objective(tau, meas, FTILDE[:7], MU_IDEAL, ALPHA)
    with pytest.raises(ParameterError, match="Hermitian"):
        inner_objective(np.triu(np.ones((4, 4))), meas, FTILDE, MU_IDEAL, ALPHA)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(173)
    h = 1e-6
    worst = 0.0
    for trial in range(20):
        theta = tuple(rng.uniform(0.0, math.pi, 2))
        meas = adversary_measurements(theta)
        tau = _random_density(rng, dim_real=(trial % 2 == 0))
        _, grad = inner_objective(tau, meas, FTILDE, MU_IDEAL, ALPHA)
        for _ in range(6):
            i, k = rng.integers(0, 4, 2)
            e = np.zeros((4, 4), dtype=complex)
            e[i, k] += 0.5
            e[k, i] += 0.5
            if i != k and rng.random() < 0.5:
                e = 1j * (np.outer(np.eye(4)[i], np.eye(4)[k])
                          - np.outer(np.eye(4)[k], np.eye(4)[i])) / 2.0
            fp = inner_objective(tau + h * e, meas, FTILDE, MU_IDEAL, ALPHA)[0]
            fm = inner_objective(tau - h * e, meas, FTILDE, MU_IDEAL, ALPHA)[0]
            fd = (fp - fm) / (2.0 * h)
            an = np.einsum("ik,ki->", grad, e).real
            worst = max(worst, abs(fd - an))
    assert worst <= 1e-6, f"finite-difference mismatch {worst:.3e}"


def test_unitary_covariance():
    rng = np.random.default_rng(29)
    for _ in range(5):
        theta = tuple(rng.uniform(0.0, math.pi, 2))
        meas = adversary_measurements(theta)
        tau = _random_density(rng)
        u, _ = np.linalg.qr(rng.standard_normal((4, 4))
                            + 1j * rng.standard_normal((4, 4)))
        rotated = AdversaryMeasurement(
            meas.theta,
            meas.vectors @ u.T,
            np.einsum("ik,jkl,ml->jim", u, meas.projectors, np.conj(u)),
        )
        v0, _ = inner_objective(tau, meas, FTILDE, MU_IDEAL, ALPHA)
        v1, _ = inner_objective(u @ tau @ u.conj().T, rotated, FTILDE, MU_IDEAL, ALPHA)
        assert abs(v1 - v0) < 1e-12


def test_theta_sign_symmetry():
    # Conjugating an arm by sigma_z flips the sign of that arm's angle, so
    # the angle square [0, pi]^2 reaches every value of the full range.
    rng = np.random.default_rng(47)
    za = np.diag([1.0, 1.0, -1.0, -1.0])
    zb = np.diag([1.0, -1.0, 1.0, -1.0])
    for _ in range(6):
        t1, t2 = rng.uniform(-math.pi, math.pi, 2)
        tau = _random_density(rng)
        base, _ = inner_objective(tau, adversary_measurements((t1, t2)),
                                  FTILDE, MU_IDEAL, ALPHA)
        fa, _ = inner_objective(za @ tau @ za, adversary_measurements((-t1, t2)),
                                FTILDE, MU_IDEAL, ALPHA)
        fb, _ = inner_objective(zb @ tau @ zb, adversary_measurements((t1, -t2)),
                                FTILDE, MU_IDEAL, ALPHA)
        assert abs(fa - base) < 1e-13
        assert abs(fb - base) < 1e-13


def _det_strategy_max(flip_a, flip_b):
    """Exact classical value of the inner problem at angles in {0, pi}^2.

    With both arms measuring sigma_z up to relabeling, the objective is
    linear in the diagonal of tau, so its maximum over states is the largest
    constraint value among the four deterministic strategies consistent with
    the relabeling (a1 = a0 xor flip_a, b1 = b0 xor flip_b).
    """
    best = mpf(0)
    for a0 in (0, 1):
        for b0 in (0, 1):
            a1, b1 = a0 ^ flip_a, b0 ^ flip_b
            idx = 8 * a0 + 4 * a1 + 2 * b0 + b1
            val = pef_constraint_value(F_REF, POLY.vertices[idx], MU_IDEAL)
            if val > best:
                best = val
    return float(best)


def test_corner_angles_match_deterministic_oracles():
    corners = {
        (0.0, 0.0): (0, 0),
        (math.pi, 0.0): (1, 0),
        (0.0, math.pi): (0, 1),
        (math.pi, math.pi): (1, 1),
    }
    seen = {}
    for theta, flips in corners.items():
        oracle = _det_strategy_max(*flips)
        r = frank_wolfe_ftheta(theta, FTILDE, MU_IDEAL, ALPHA, tol=1e-10,
                               max_iters=300)
        assert F0_F * r.lower - 1e-11 <= oracle <= F0_F * r.upper + 1e-11, (
            f"theta={theta}: oracle {oracle!r} outside "
            f"[{F0_F * r.lower!r}, {F0_F * r.upper!r}]"
        )
        seen[theta] = oracle
    # The landscape genuinely pokes above 1 (which is why the PEF needs a
    # rescale at all), and not uniformly: one corner is feasible.
    assert seen[(math.pi, 0.0)] > 1.0 + 6e-9
    assert seen[(0.0, 0.0)] < 1.0


def test_frank_wolfe_contract_and_trace():
    r = frank_wolfe_ftheta((1.0, 2.0), FTILDE, MU_IDEAL, ALPHA, tol=1e-9)
    assert r.converged
    assert r.lower <= r.upper
    assert all(b <= a for a, b in zip(r.gap_trace, r.gap_trace[1:]))
    assert r.gap_trace[-1] <= 1e-9 < r.gap_trace[0]
    # the stored state reproduces the reported lower bound
    meas = adversary_measurements((1.0, 2.0))
    val, _ = inner_objective(r.tau, meas, FTILDE, MU_IDEAL, ALPHA)
    assert val == pytest.approx(r.lower, abs=1e-14)

    short = frank_wolfe_ftheta((1.0, 2.0), FTILDE, MU_IDEAL, ALPHA,
                               tol=1e-14, max_iters=3)
    assert not short.converged
    assert short.iterations == 3
    assert short.lower <= short.upper

    with pytest.raises(ParameterError, match="tol"):
        frank_wolfe_ftheta((0.1, 0.2), FTILDE, MU_IDEAL, ALPHA, tol=0.0)
    with pytest.raises(ParameterError, match="max_iters"):
        frank_wolfe_ftheta((0.1, 0.2), FTILDE, MU_IDEAL, ALPHA, max_iters=0)


def test_batched_matches_scalar():
    rng = np.random.default_rng(5)
    thetas = rng.uniform(0.0, math.pi, (12, 2))
    wts = _weights(FTILDE, MU_IDEAL)
    lo, up, conv = _batched_fw(thetas, wts, ALPHA, 1e-9, 200)
    assert conv.all()
    for k in range(len(thetas)):
        r = frank_wolfe_ftheta(tuple(thetas[k]), FTILDE, MU_IDEAL, ALPHA, tol=1e-9)
        assert abs(r.lower - lo[k]) < 1e-10
        assert abs(r.upper - up[k]) < 1e-10
    # determinism: pure function of its inputs
    lo2, up2, _ = _batched_fw(thetas, wts, ALPHA, 1e-9, 200)
    assert np.array_equal(lo, lo2) and np.array_equal(up, up2)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_frank_wolfe_upper_bound_property(seed):
    rng = np.random.default_rng(seed)
    ftilde = rng.dirichlet(np.ones(16))
    q = rng.uniform(1e-4, 0.4)
    mu = build_spot_checking_inputs(q, 0.0)[0]
    alpha = 1.0 + 10.0 ** rng.uniform(-7.0, -0.5)
    theta = tuple(rng.uniform(0.0, math.pi, 2))
    r = frank_wolfe_ftheta(theta, ftilde, mu, alpha, tol=1e-7, max_iters=60)
    assert r.lower <= r.upper
    meas = adversary_measurements(theta)
    val_best, _ = inner_objective(r.tau, meas, ftilde, mu, alpha)
    assert val_best == pytest.approx(r.lower, abs=1e-12)
    for rank in (1, 2, 4):
        tau = DensityOperator(_random_density(rng, rank=rank))
        val, _ = inner_objective(tau, meas, ftilde, mu, alpha)
        assert val <= r.upper + 1e-11


def test_grid_monotone_depths_frozen():
    cert = grid_bound_fmax(FTILDE, MU_IDEAL, ALPHA, initial_cells=64,
                           target_gap=0.0, max_cells_per_axis=256)
    assert not cert.converged  # target 0 is unreachable, budget stops it
    assert cert.cells_per_axis == 256 and cert.refinement_depth == 2
    ups = [F0_F * up - 1.0 for _, _, up in cert.history]
    los = [F0_F * lo - 1.0 for _, lo, _ in cert.history]
    frozen = (8.036231e-04, 2.008665e-04, 5.024597e-05)
    for got, want in zip(ups, frozen):
        assert got == pytest.approx(want, rel=1e-3)
    assert los[0] <= los[1] <= los[2]
    assert ups[0] > ups[1] > ups[2]
    # halving the width shrinks the inflation excess about fourfold
    assert ups[0] / ups[1] == pytest.approx(4.0, rel=0.02)
    assert cert.fw_unconverged <= 40
    audit_grid_certificate(cert)


def test_grid_single_cell_formula():
    cert = grid_bound_fmax(FTILDE, MU_IDEAL, ALPHA, initial_cells=2,
                           target_gap=0.0, max_cells_per_axis=2)
    width = math.pi / 2.0
    infl = (width / math.sin(width)) ** (2.0 * ALPHA)
    want = infl * np.nanmax(cert.corner_upper)
    assert cert.global_upper == pytest.approx(want, rel=1e-14)


def test_grid_validation():
    with pytest.raises(ParameterError, match="cells"):
        grid_bound_fmax(FTILDE, MU_IDEAL, ALPHA, initial_cells=1)
    with pytest.raises(ParameterError, match="target_gap"):
        grid_bound_fmax(FTILDE, MU_IDEAL, ALPHA, target_gap=-1e-9)
    with pytest.raises(ParameterError, match="budget"):
        grid_bound_fmax(FTILDE, MU_IDEAL, ALPHA, initial_cells=8,
                        max_cells_per_axis=4)


def test_grid_chunk_invariance():
    # Batched eigendecompositions can differ in the last ulp between batch
    # shapes, so invariance across chunk sizes holds to rounding noise only;
    # repeatability with a fixed chunking is exact (see the batched test).
    a = grid_bound_fmax(FTILDE, MU_IDEAL, ALPHA, initial_cells=4,
                        target_gap=0.0, max_cells_per_axis=8, chunk=7)
    b = grid_bound_fmax(FTILDE, MU_IDEAL, ALPHA, initial_cells=4,
                        target_gap=0.0, max_cells_per_axis=8, chunk=10000)
    assert abs(a.global_lower - b.global_lower) < 1e-12
    assert abs(a.global_upper - b.global_upper) < 1e-12
    assert np.array_equal(np.isnan(a.corner_upper), np.isnan(b.corner_upper))
    assert np.nanmax(np.abs(a.corner_upper - b.corner_upper)) < 1e-12


def test_certificate_json_roundtrip(tmp_path):
    cert = grid_bound_fmax(FTILDE, MU_IDEAL, ALPHA, initial_cells=4,
                           target_gap=0.0, max_cells_per_axis=8)
    back = GridCertificate.from_jsonable(json.loads(json.dumps(cert.to_jsonable())))
    assert back.global_lower == cert.global_lower
    assert back.global_upper == cert.global_upper
    assert back.history == cert.history
    assert np.array_equal(back.corner_upper, cert.corner_upper, equal_nan=True)
    audit_grid_certificate(back)

    path = str(tmp_path / "cert.json")
    cert.save(path)
    loaded = GridCertificate.load(path)
    assert loaded.global_upper == cert.global_upper

    # force the sidecar path by shrinking the embed limit
    obj = cert.to_jsonable(embed_limit=1)
    assert obj["corner_data"] == "external"
    assert "corner_upper" not in obj


def test_audit_rejects_tampered_certificate():
    cert = grid_bound_fmax(FTILDE, MU_IDEAL, ALPHA, initial_cells=4,
                           target_gap=0.0, max_cells_per_axis=4)
    obj = cert.to_jsonable()
    obj["global_upper"] = format(cert.global_upper * 0.999, ".17g")
    with pytest.raises(AuditError):
        audit_grid_certificate(GridCertificate.from_jsonable(obj))


def test_rescale_small_budget():
    qef, certs = rescale_to_qef(F_REF, (MU_LOW, MU_HIGH),
                                target_bound=1.0 + 1e-3, initial_cells=16,
                                max_cells_per_axis=64)
    assert qef.kind == "QEF"
    assert all(c.converged for c in certs)
    fbound = max(c.global_upper for c in certs)
    with mp.workdps(50):
        assert abs(qef.rescale_bound - F0 * mpf(fbound)) < mpf("1e-25")
        ratio = qef.values[3] / F_REF.values[3]
        assert abs(ratio * qef.rescale_bound - 1) < mpf("1e-30")
    assert 1.0 < float(qef.rescale_bound) < 1.0 + 1e-3
    # rate bookkeeping: dividing by the bound costs log2(bound)/(alpha-1)
    nu = refdata.reference_joint()
    penalty = float(mp.log(qef.rescale_bound, 2) / (qef.alpha - 1))
    assert qef.rate(nu) == pytest.approx(F_REF.rate(nu) - penalty, abs=1e-10)


def test_rescale_validation():
    with pytest.raises(ParameterError, match="PEF"):
        qef = EstimationFactor([1.0] * 16, "1.01", kind="QEF", rescale_bound=1.5)
        rescale_to_qef(qef, (MU_IDEAL,))
    with pytest.raises(ParameterError, match="input distribution"):
        rescale_to_qef(F_REF, ())
    with pytest.raises(ParameterError, match="target_bound"):
        rescale_to_qef(F_REF, (MU_IDEAL,), target_bound=1.0)


def test_audit_qef_passes_and_catches():
    qef, _ = rescale_to_qef(F_REF, (MU_LOW, MU_HIGH), target_bound=1.0 + 1e-3,
                            initial_cells=16, max_cells_per_axis=64)
    worst = audit_qef(qef, (MU_LOW, MU_HIGH), n_points=2000, seed=7)
    assert worst <= 1.0 + 1e-12
    assert worst > 0.99  # samples do approach the constraint boundary

    # a grossly overscaled factor must be caught
    bogus = EstimationFactor([v * mpf("1.5") for v in F_REF.values],
                             F_REF.alpha, kind="QEF", rescale_bound=mpf(1))
    with pytest.raises(AuditError):
        audit_qef(bogus, (MU_IDEAL,), n_points=2000, seed=7)

    with pytest.raises(ParameterError, match="QEF"):
        audit_qef(F_REF, (MU_IDEAL,), n_points=10)
