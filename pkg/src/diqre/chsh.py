"""Core distribution types, CHSH statistics, and the quantum-bounded polytope.

Index convention, fixed project-wide: a flat array of 16 probabilities is
ordered by ``flat = a*8 + b*4 + x*2 + y``, which is the C order of an array
indexed ``[a, b, x, y]`` with every index in {0, 1}.  Input-setting arrays of
length 4 are ordered by ``x*2 + y``.  All file formats state the convention
explicitly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ParameterError

INDEX_CONVENTION = "flat = a*8 + b*4 + x*2 + y (C order of [a, b, x, y])"

#: Mixing weight of the PR box in every polytope mixture vertex.  Solves
#: lam*4 + (1-lam)*2 = 2*sqrt(2), so each mixture attains the Tsirelson value
#: on its facet.
PR_WEIGHT = math.sqrt(2.0) - 1.0


def _as_prob_array(p, shape, name: str) -> np.ndarray:
    arr = np.asarray(p, dtype=float)
    if arr.size != int(np.prod(shape)):
        raise ParameterError(f"{name}: expected {int(np.prod(shape))} entries, got {arr.size}")
    return arr.reshape(shape)


@dataclass(frozen=True)
class ConditionalBehavior:
    """Conditional outcome distribution P(ab|xy) for the two-party CHSH scenario.

    ``p`` has shape (2, 2, 2, 2) indexed ``[a, b, x, y]``.  Entries lie in
    [0, 1] and every setting pair (x, y) is normalized to 1 within 1e-12.
    """

    p: np.ndarray

    def __post_init__(self):
        arr = _as_prob_array(self.p, (2, 2, 2, 2), "ConditionalBehavior")
        object.__setattr__(self, "p", arr)
        if np.any(arr < -1e-15) or np.any(arr > 1 + 1e-12):
            raise ParameterError("ConditionalBehavior: entries outside [0, 1]")
        sums = arr.sum(axis=(0, 1))
        if np.max(np.abs(sums - 1.0)) > 1e-12:
            raise ParameterError(
                f"ConditionalBehavior: setting normalization off by {np.max(np.abs(sums - 1.0)):.3e}"
            )

    @property
    def flat16(self) -> np.ndarray:
        """The 16 entries in the project flat order."""
        return self.p.reshape(16)

    def setting(self, x: int, y: int) -> np.ndarray:
        """P(ab|xy) as a 2x2 array indexed [a, b]."""
        return self.p[:, :, x, y]

    def to_jsonable(self) -> dict:
        return {
            "kind": "conditional_behavior",
            "index_convention": INDEX_CONVENTION,
            "p": [format(v, ".20g") for v in self.flat16],
        }

    @classmethod
    def from_jsonable(cls, obj: dict) -> "ConditionalBehavior":
        return cls(np.array([float(s) for s in obj["p"]]).reshape(2, 2, 2, 2))


@dataclass(frozen=True)
class InputDistribution:
    """Distribution mu(xy) over the four setting pairs, ordered ``x*2 + y``.

    ``q`` is the spot-checking probability the distribution was built from and
    ``eps_b`` the relative bias tolerance; both are metadata describing the
    construction (see :func:`build_spot_checking_inputs`).
    """

    mu: np.ndarray
    q: float
    eps_b: float = 0.0

    def __post_init__(self):
        arr = _as_prob_array(self.mu, (4,), "InputDistribution")
        object.__setattr__(self, "mu", arr)
        if np.any(arr < 0):
            raise ParameterError("InputDistribution: negative entry")
        if abs(arr.sum() - 1.0) > 1e-15:
            raise ParameterError(f"InputDistribution: sum {arr.sum()!r} != 1")

    def to_jsonable(self) -> dict:
        return {
            "kind": "input_distribution",
            "index_convention": "x*2 + y",
            "mu": [format(v, ".20g") for v in self.mu],
            "q": format(self.q, ".20g"),
            "eps_b": format(self.eps_b, ".20g"),
        }

    @classmethod
    def from_jsonable(cls, obj: dict) -> "InputDistribution":
        return cls(
            np.array([float(s) for s in obj["mu"]]),
            q=float(obj["q"]),
            eps_b=float(obj.get("eps_b", 0.0)),
        )


@dataclass(frozen=True)
class JointDistribution:
    """Joint distribution nu(abxy), factoring through a given input distribution.

    Invariants: entries nonnegative summing to 1 within 1e-12, the (x, y)
    marginal equals ``input.mu`` within 1e-12, and the conditional behavior is
    non-signaling within 1e-10.
    """

    nu: np.ndarray
    input: InputDistribution

    def __post_init__(self):
        arr = _as_prob_array(self.nu, (2, 2, 2, 2), "JointDistribution")
        object.__setattr__(self, "nu", arr)
        if np.any(arr < -1e-15):
            raise ParameterError("JointDistribution: negative entry")
        if abs(arr.sum() - 1.0) > 1e-12:
            raise ParameterError(f"JointDistribution: sum off by {arr.sum() - 1.0:.3e}")
        marg = arr.sum(axis=(0, 1)).reshape(4)
        if np.max(np.abs(marg - self.input.mu)) > 1e-12:
            raise ParameterError(
                f"JointDistribution: input marginal off by {np.max(np.abs(marg - self.input.mu)):.3e}"
            )
        rep = check_nonsignaling(self.conditional(), tol=1e-10)
        if not rep.passed:
            raise ParameterError(
                f"JointDistribution: signaling deviation {max(rep.max_alice, rep.max_bob):.3e} > 1e-10"
            )

    def conditional(self) -> ConditionalBehavior:
        """The behavior P(ab|xy) = nu(abxy) / nu(xy)."""
        marg = self.nu.sum(axis=(0, 1))
        return ConditionalBehavior(self.nu / marg[None, None, :, :])

    @property
    def flat16(self) -> np.ndarray:
        return self.nu.reshape(16)

    def to_jsonable(self) -> dict:
        return {
            "kind": "joint_distribution",
            "index_convention": INDEX_CONVENTION,
            "nu": [format(v, ".20g") for v in self.flat16],
            "input": self.input.to_jsonable(),
        }

    @classmethod
    def from_jsonable(cls, obj: dict) -> "JointDistribution":
        return cls(
            np.array([float(s) for s in obj["nu"]]).reshape(2, 2, 2, 2),
            InputDistribution.from_jsonable(obj["input"]),
        )


@dataclass(frozen=True)
class SignalingReport:
    """Maximum marginal deviation per party, against a tolerance."""

    max_alice: float
    max_bob: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_alice <= self.tol and self.max_bob <= self.tol


@dataclass(frozen=True)
class PolytopeModel:
    """The 80-vertex polytope bounding quantum spot-checking behaviors.

    16 local deterministic vertices plus, for each of the 8 signed CHSH
    facets, the facet's PR box mixed with each of the 8 deterministic points
    attaining facet value 2 (PR weight sqrt(2)-1, so the mixture sits exactly
    at the Tsirelson value 2*sqrt(2) of that facet).

    ``provenance[i]`` is ``("LOCAL_DETERMINISTIC", det_index)`` or
    ``("PR_MIXTURE", facet_index, det_index)``.
    """

    vertices: tuple
    provenance: tuple

    def vertex_array(self) -> np.ndarray:
        """All vertices as one (80, 16) float array in flat order."""
        return np.stack([v.flat16 for v in self.vertices])


def binary_entropy(q: float) -> float:
    """Binary entropy in bits; h(0) = h(1) = 0 by continuity."""
    if q < 0.0 or q > 1.0:
        raise ParameterError(f"binary_entropy: q={q!r} outside [0, 1]")
    if q == 0.0 or q == 1.0:
        return 0.0
    return -q * math.log2(q) - (1.0 - q) * math.log2(1.0 - q)


def input_entropy_rate(q: float) -> float:
    """Seed entropy consumed per spot-checking trial, h(q) + 2q bits.

    One Bernoulli(q) draw decides spot versus checking, and a checking trial
    additionally consumes 2 uniform bits to pick the setting pair.
    """
    if not 0.0 < q < 1.0:
        raise ParameterError(f"input_entropy_rate: q={q!r} outside (0, 1)")
    return binary_entropy(q) + 2.0 * q


def spot_checking_mu(q) -> list:
    """[1 - 3q/4, q/4, q/4, q/4] in the given arithmetic (floats, Fractions, mpf)."""
    quarter = q / 4
    return [1 - 3 * quarter, quarter, quarter, quarter]


def build_spot_checking_inputs(q: float, eps_b: float):
    """Ideal and extremal spot-checking input distributions.

    The bias tolerance is relative: the actual spot probability is assumed to
    lie in [q*(1-eps_b), q*(1+eps_b)], and any such distribution is a convex
    combination of the two extremal ones returned here.

    Returns ``(ideal, extremal_low, extremal_high)`` built from q, q*(1-eps_b)
    and q*(1+eps_b) respectively.
    """
    if not 0.0 < q < 1.0:
        raise ParameterError(f"build_spot_checking_inputs: q={q!r} outside (0, 1)")
    if eps_b < 0.0:
        raise ParameterError(f"build_spot_checking_inputs: eps_b={eps_b!r} negative")
    q_l = q * (1.0 - eps_b)
    q_u = q * (1.0 + eps_b)
    if not (0.0 < q_l and q_u < 1.0):
        raise ParameterError(
            f"build_spot_checking_inputs: biased range [{q_l!r}, {q_u!r}] leaves (0, 1)"
        )
    ideal = InputDistribution(np.array(spot_checking_mu(q)), q=q, eps_b=eps_b)
    low = InputDistribution(np.array(spot_checking_mu(q_l)), q=q_l, eps_b=eps_b)
    high = InputDistribution(np.array(spot_checking_mu(q_u)), q=q_u, eps_b=eps_b)
    return ideal, low, high


def joint_from_behavior(b: ConditionalBehavior, inputs: InputDistribution) -> JointDistribution:
    """Joint distribution nu(abxy) = mu(xy) * P(ab|xy)."""
    nu = b.p * inputs.mu.reshape(2, 2)[None, None, :, :]
    return JointDistribution(nu, inputs)


def correlators(b: ConditionalBehavior) -> np.ndarray:
    """E(xy) = sum_ab (-1)^(a xor b) P(ab|xy), as a (2, 2) array indexed [x, y]."""
    signs = np.array([[1.0, -1.0], [-1.0, 1.0]])  # (-1)^(a xor b) indexed [a, b]
    return np.einsum("ab,abxy->xy", signs, b.p)


def chsh_statistics(b: ConditionalBehavior):
    """CHSH correlator S = E00 + E01 + E10 - E11 and game value J = 1/2 + S/8."""
    e = correlators(b)
    s = e[0, 0] + e[0, 1] + e[1, 0] - e[1, 1]
    return s, 0.5 + s / 8.0


def check_nonsignaling(b: ConditionalBehavior, tol: float = 1e-10) -> SignalingReport:
    """Largest dependence of either party's marginal on the other's setting."""
    pa = b.p.sum(axis=1)  # [a, x, y]
    pb = b.p.sum(axis=0)  # [b, x, y]
    dev_a = float(np.max(np.abs(pa[:, :, 0] - pa[:, :, 1])))
    dev_b = float(np.max(np.abs(pb[:, 0, :] - pb[:, 1, :])))
    return SignalingReport(max_alice=dev_a, max_bob=dev_b, tol=tol)


# Deterministic vertices are enumerated lexicographically over the response
# bits (a(x=0), a(x=1), b(y=0), b(y=1)); facets over the sign patterns of
# (E00, E01, E10, E11) with an odd number of minus signs, with +1 sorting
# before -1, so facet 0 carries the textbook expression E00+E01+E10-E11.

DET_RESPONSES = tuple(
    (a0, a1, b0, b1)
    for a0 in (0, 1)
    for a1 in (0, 1)
    for b0 in (0, 1)
    for b1 in (0, 1)
)

FACET_SIGNS = tuple(
    (s00, s01, s10, s11)
    for s00 in (1, -1)
    for s01 in (1, -1)
    for s10 in (1, -1)
    for s11 in (1, -1)
    if (s00 * s01 * s10 * s11) == -1
)


def _det_table(resp) -> list:
    """Flat 16-list (ints) of the deterministic behavior with the given responses."""
    a_of_x, b_of_y = resp[:2], resp[2:]
    out = [0] * 16
    for x in (0, 1):
        for y in (0, 1):
            a, b = a_of_x[x], b_of_y[y]
            out[a * 8 + b * 4 + x * 2 + y] = 1
    return out


def _pr_table(signs, one) -> list:
    """Flat 16-list of the PR box with E(xy) = signs[x*2+y], entries 0 or 1/2.

    ``one`` fixes the arithmetic: pass 1.0 for floats or mpf(1) for mpmath.
    """
    half = one / 2
    out = [0 * one] * 16
    for x in (0, 1):
        for y in (0, 1):
            target = 0 if signs[x * 2 + y] == 1 else 1  # required a xor b
            for a in (0, 1):
                b = a ^ target
                out[a * 8 + b * 4 + x * 2 + y] = half
    return out


def _facet_value(signs, table) -> object:
    """sum_xy signs[xy] * E(xy) of a flat behavior table (any arithmetic)."""
    total = 0 * table[0]
    for x in (0, 1):
        for y in (0, 1):
            e = 0 * table[0]
            for a in (0, 1):
                for b in (0, 1):
                    v = table[a * 8 + b * 4 + x * 2 + y]
                    e = e + (v if (a ^ b) == 0 else -v)
            total = total + signs[x * 2 + y] * e
    return total


def polytope_tables(lam) -> list:
    """Provenance-tagged flat vertex tables in the arithmetic of ``lam``.

    ``lam`` is the PR mixing weight sqrt(2)-1 expressed in the desired
    arithmetic (float, mpmath mpf, ...).  Returns a list of
    ``(provenance_tuple, flat16_list)`` with the 16 deterministic vertices
    first, then the 64 mixtures grouped by facet.  This is the single source
    of the construction; the float and high-precision paths both call it.
    """
    one = lam / lam
    dets = [_det_table(r) for r in DET_RESPONSES]
    out = [(("LOCAL_DETERMINISTIC", i), [v * one for v in t]) for i, t in enumerate(dets)]
    for f, signs in enumerate(FACET_SIGNS):
        pr = _pr_table(signs, one)
        attaining = [i for i, t in enumerate(dets) if _facet_value(signs, t) == 2]
        assert len(attaining) == 8
        for i in attaining:
            mix = [lam * pv + (1 - lam) * dv for pv, dv in zip(pr, dets[i])]
            out.append((("PR_MIXTURE", f, i), mix))
    return out


def build_polytope() -> PolytopeModel:
    """Construct the 80-vertex polytope (deterministic, order-stable)."""
    tagged = polytope_tables(PR_WEIGHT)
    vertices = tuple(
        ConditionalBehavior(np.array(t, dtype=float).reshape(2, 2, 2, 2)) for _, t in tagged
    )
    provenance = tuple(tag for tag, _ in tagged)
    return PolytopeModel(vertices=vertices, provenance=provenance)
