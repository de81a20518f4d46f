"""Spot-checking expansion protocol: planning, execution, certification.

The protocol consumes seed bits to pick trial settings (almost always the
designated spot pair (0, 0), rarely a uniform checking pair), queries the
device, and accumulates the running product of per-trial estimation factors
in the log2 domain.  Crossing the planned threshold ``h`` certifies a smooth
min-entropy floor for the whole output string; exhausting the trial budget
first means the run failed and nothing is certified.

Planning happens once, up front: :func:`appoint_parameters` sizes the trial
budget so an honest device crosses the threshold with probability at least
``gamma_bar``, and the threshold itself books every bit the run might consume
plus the target expansion, so that success pays for the whole bill.

The trial loop is sequential in effect: settings are fixed by the seed before
the device is asked for outcomes, and the accumulator is updated in trial
order.  Internally trials are processed in blocks for speed; block boundaries
never change which uniform variate drives which trial, so transcripts are
reproducible bit for bit for a fixed block size.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.stats import norm

from .chsh import (
    ConditionalBehavior,
    InputDistribution,
    JointDistribution,
    binary_entropy,
    build_polytope,
    input_entropy_rate,
)
from .device import sample_trial, sample_trials
from .errors import (
    InfeasiblePlanError,
    ParameterError,
    ProtocolFailureError,
    SeedUnderflowError,
)
from .extractor import BitStream
from .pef import EstimationFactor, optimize_pef

__all__ = [
    "CompensatedSum",
    "SeedStream",
    "biased_bernoulli",
    "SimulatedDevice",
    "DeterministicDevice",
    "sigma_nu",
    "entropy_bound",
    "appoint_parameters",
    "ProtocolPlan",
    "plan_expansion",
    "ExpansionTranscript",
    "run_expansion",
    "certify",
    "ExpansionCurve",
    "net_expansion_curve",
    "save_outputs",
    "load_outputs",
    "product_input",
    "local_bias_analysis",
]

#: Seed bits examined per block by the trial loop.
SEED_WINDOW = 1 << 17

#: Checkpoint the accumulator every this many trials by default.
CHECKPOINT_INTERVAL = 100_000


class CompensatedSum:
    """Kahan-compensated scalar accumulator.

    Single values go through :meth:`add`; arrays are pairwise-summed by numpy
    first and the block total is then added with compensation, which keeps the
    error independent of how the stream of values was blocked.
    """

    __slots__ = ("_s", "_c")

    def __init__(self, value: float = 0.0):
        self._s = float(value)
        self._c = 0.0

    def add(self, x: float) -> None:
        y = x - self._c
        t = self._s + y
        self._c = (t - self._s) - y
        self._s = t

    def add_block(self, arr) -> None:
        self.add(float(np.sum(arr)))

    @property
    def value(self) -> float:
        return self._s


class SeedStream:
    """Cursor over a finite supply of seed bits.

    The backing bit string is unpacked once (one byte per bit), so streams are
    meant for desk-scale runs, not for billions of trials.  ``cursor`` is the
    number of bits consumed so far; reads past the end raise
    :class:`SeedUnderflowError`.
    """

    def __init__(self, source: BitStream):
        self.bits = source.to_bits()
        self.bits.setflags(write=False)
        self.cursor = 0

    def __len__(self) -> int:
        return self.bits.size

    @property
    def remaining(self) -> int:
        return self.bits.size - self.cursor

    def take(self, nbits: int) -> np.ndarray:
        if nbits < 0:
            raise ParameterError(f"SeedStream.take: nbits={nbits!r} negative")
        if nbits > self.remaining:
            raise SeedUnderflowError(
                f"seed exhausted: wanted {nbits} bits, {self.remaining} left"
            )
        out = self.bits[self.cursor : self.cursor + nbits]
        self.cursor += nbits
        return out

    def take_bit(self) -> int:
        if self.cursor >= self.bits.size:
            raise SeedUnderflowError("seed exhausted: wanted 1 bit, 0 left")
        b = int(self.bits[self.cursor])
        self.cursor += 1
        return b


def biased_bernoulli(q: float, seed: SeedStream) -> tuple:
    """Draw T ~ Bernoulli(q) by arithmetic decoding of seed bits.

    Seed bits refine a dyadic subinterval of [0, 1) until it lies entirely
    below or entirely above the split point 1 - q; T = 1 on the top slice.
    The comparison is exact (rational arithmetic on the float q), so the
    marginal of T is exactly Bernoulli(q) under uniform seed bits.

    Returns ``(T, bits_used)``.
    """
    if not 0.0 < q < 1.0:
        raise ParameterError(f"biased_bernoulli: q={q!r} outside (0, 1)")
    t = 1 - Fraction(q)
    u = 0
    d = 0
    while True:
        if d > 0:
            if Fraction(u, 1 << d) >= t:
                return 1, d
            if Fraction(u + 1, 1 << d) <= t:
                return 0, d
        u = (u << 1) | seed.take_bit()
        d += 1


def _resolution_depth(q: float) -> int:
    """Largest L with 2**-L >= q: a zero bit at depth <= L settles T = 0.

    A draw whose first L seed bits are all ones cannot be settled by the fast
    scan and falls back to the exact scalar decoder.
    """
    L = int(math.floor(-math.log2(q)))
    while L > 0 and 2.0 ** (-L) < q:
        L -= 1
    while 2.0 ** (-(L + 1)) >= q:
        L += 1
    return L


@dataclass
class SimulatedDevice:
    """Honest i.i.d. device drawing outcomes from a fixed behavior.

    One uniform variate is consumed per trial in trial order, whether queries
    arrive singly or in blocks, so outcome sequences depend only on the
    generator seed and the setting sequence.
    """

    behavior: ConditionalBehavior
    rng: np.random.Generator

    def query(self, x: int, y: int) -> tuple:
        out = sample_trial(self.behavior, x, y, self.rng)
        return out.a, out.b

    def query_block(self, xs: np.ndarray, ys: np.ndarray) -> tuple:
        return sample_trials(self.behavior, xs, ys, self.rng)


@dataclass(frozen=True)
class DeterministicDevice:
    """Local deterministic strategy: a depends only on x, b only on y."""

    a_of_x: tuple
    b_of_y: tuple

    def __post_init__(self):
        for v in (*self.a_of_x, *self.b_of_y):
            if v not in (0, 1):
                raise ParameterError("DeterministicDevice: responses are bits")

    def query(self, x: int, y: int) -> tuple:
        return self.a_of_x[x], self.b_of_y[y]

    def query_block(self, xs: np.ndarray, ys: np.ndarray) -> tuple:
        a = np.asarray(self.a_of_x, dtype=np.uint8)[xs]
        b = np.asarray(self.b_of_y, dtype=np.uint8)[ys]
        return a, b


def _query_one(device, x: int, y: int) -> tuple:
    a, b = device.query(x, y)
    if a not in (0, 1) or b not in (0, 1):
        raise ProtocolFailureError(
            f"device fault: outcome ({a!r}, {b!r}) is not a pair of bits"
        )
    return int(a), int(b)


def _query_block(device, xs: np.ndarray, ys: np.ndarray) -> tuple:
    a, b = device.query_block(xs, ys)
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != xs.shape or b.shape != ys.shape:
        raise ProtocolFailureError("device fault: outcome block shape mismatch")
    if a.size and (np.any((a != 0) & (a != 1)) or np.any((b != 0) & (b != 1))):
        raise ProtocolFailureError("device fault: outcome block contains non-bits")
    return a.astype(np.uint8), b.astype(np.uint8)


def sigma_nu(F: EstimationFactor, nu: JointDistribution) -> float:
    """Standard deviation of the per-trial witness log2 F(CZ) / (alpha - 1)
    under the joint distribution nu.

    Cells with nu = 0 do not contribute; a zero factor value on a cell with
    positive probability makes the deviation infinite.
    """
    a1 = float(F.alpha) - 1.0
    w = nu.flat16
    lv = F.log2_values()
    mask = w > 0
    x = lv[mask] / a1
    if not np.all(np.isfinite(x)):
        return math.inf
    ww = w[mask]
    m1 = float(np.dot(ww, x))
    m2 = float(np.dot(ww, x * x))
    return math.sqrt(max(m2 - m1 * m1, 0.0))


def entropy_bound(h: float, eps_s: float, gamma: float, alpha: float) -> float:
    """Certified smooth min-entropy on success: the threshold minus the
    smoothing penalty plus the (negative) success-probability adjustment."""
    if not 0.0 < eps_s <= 1.0:
        raise ParameterError(f"entropy_bound: eps_s={eps_s!r} outside (0, 1]")
    if not 0.0 < gamma <= 1.0:
        raise ParameterError(f"entropy_bound: gamma={gamma!r} outside (0, 1]")
    if not alpha > 1.0:
        raise ParameterError(f"entropy_bound: alpha={alpha!r} must exceed 1")
    if not math.isfinite(h):
        raise ParameterError(f"entropy_bound: h={h!r} not finite")
    a1 = alpha - 1.0
    return h - math.log2(2.0 / eps_s**2) / a1 + (alpha / a1) * math.log2(gamma)


def _threshold(k, k0, r_in, N, eps_s, gamma, alpha) -> float:
    a1 = alpha - 1.0
    return (
        k0
        + k
        + N * r_in
        + math.log2(2.0 / eps_s**2) / a1
        + (alpha / a1) * math.log2(1.0 / gamma)
    )


#: No plan may ask for more trials than this.
MAX_TRIALS = 10**15


def appoint_parameters(
    k: float,
    k0: float,
    eps_s: float,
    gamma_bar: float,
    gamma: float,
    r_nu: float,
    sigma_nu: float,
    r_in: float,
    alpha: float,
) -> tuple:
    """Size the trial budget N and the success threshold h.

    The threshold books the training entropy k0, the target expansion k, the
    worst-case seed consumption N * r_in, the smoothing penalty, and the
    success-probability adjustment.  N is the smallest integer for which a
    Gaussian model of the accumulator (mean N * r_nu, deviation
    sqrt(N) * sigma_nu) crosses the gamma_bar-substituted threshold with
    probability at least gamma_bar; the returned h is then recomputed with
    the actual gamma.

    Raises :class:`InfeasiblePlanError` when r_nu <= r_in or when no N up to
    ``MAX_TRIALS`` reaches the design probability.
    """
    for name, v in (("eps_s", eps_s), ("gamma_bar", gamma_bar), ("gamma", gamma)):
        if not 0.0 < v < 1.0:
            raise ParameterError(f"appoint_parameters: {name}={v!r} outside (0, 1)")
    if not alpha > 1.0:
        raise ParameterError(f"appoint_parameters: alpha={alpha!r} must exceed 1")
    if k < 0 or k0 < 0:
        raise ParameterError("appoint_parameters: k and k0 must be nonnegative")
    if sigma_nu < 0:
        raise ParameterError(f"appoint_parameters: sigma_nu={sigma_nu!r} negative")
    if not r_nu > r_in:
        raise InfeasiblePlanError(
            f"appoint_parameters: witness rate {r_nu!r} does not exceed the "
            f"consumption rate {r_in!r}; no trial budget can close the ledger"
        )

    def ok(N: int) -> bool:
        margin = N * r_nu - _threshold(k, k0, r_in, N, eps_s, gamma_bar, alpha)
        if sigma_nu == 0.0:
            return margin >= 0.0
        return bool(norm.cdf(margin / (math.sqrt(N) * sigma_nu)) >= gamma_bar)

    # The normalized margin is strictly increasing in N, so doubling then
    # bisecting finds the smallest satisfying integer.
    hi = 1
    while hi < MAX_TRIALS and not ok(hi):
        hi = min(hi * 2, MAX_TRIALS)
    if not ok(hi):
        raise InfeasiblePlanError(
            f"appoint_parameters: design probability {gamma_bar} is out of reach "
            f"within {MAX_TRIALS:.0e} trials"
        )
    lo = hi // 2  # largest tried value known to fail (or 0 when hi == 1)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    N = hi
    return N, _threshold(k, k0, r_in, N, eps_s, gamma, alpha)


@dataclass(frozen=True)
class ProtocolPlan:
    """Frozen parameters of one expansion run.

    ``F`` must be of kind QEF: the certificate this plan promises holds
    against quantum side information, which a plain PEF does not support.
    ``alpha`` duplicates ``F.alpha`` for the record and must agree with it.
    A plan is *viable* when r_nu > r_in; construction does not require
    viability (diagnostic runs with neutral factors are legitimate), but
    :func:`plan_expansion` only ever produces viable plans.
    """

    q: float
    eps_b: float
    alpha: float
    F: EstimationFactor
    k: float
    k0: float
    eps_s: float
    eps_x: float
    gamma: float
    gamma_bar: float
    r_in: float
    r_nu: float
    sigma_nu: float
    N: int
    h: float

    def __post_init__(self):
        if not 0.0 < self.q < 1.0:
            raise ParameterError(f"ProtocolPlan: q={self.q!r} outside (0, 1)")
        if self.eps_b < 0.0:
            raise ParameterError(f"ProtocolPlan: eps_b={self.eps_b!r} negative")
        if self.F.kind != "QEF":
            raise ParameterError(
                "ProtocolPlan: the estimation factor must be of kind QEF; a "
                "plain PEF certifies nothing against quantum side information"
            )
        if not self.alpha > 1.0:
            raise ParameterError(f"ProtocolPlan: alpha={self.alpha!r} must exceed 1")
        if abs(self.alpha - float(self.F.alpha)) > 1e-12 * self.alpha:
            raise ParameterError("ProtocolPlan: alpha disagrees with F.alpha")
        for name in ("eps_s", "eps_x", "gamma", "gamma_bar"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ParameterError(f"ProtocolPlan: {name}={v!r} outside (0, 1)")
        if self.k < 0 or self.k0 < 0:
            raise ParameterError("ProtocolPlan: k and k0 must be nonnegative")
        if self.r_in < 0 or not math.isfinite(self.r_nu):
            raise ParameterError("ProtocolPlan: bad rates")
        if self.sigma_nu < 0:
            raise ParameterError(f"ProtocolPlan: sigma_nu={self.sigma_nu!r} negative")
        if not (isinstance(self.N, (int, np.integer)) and self.N >= 1):
            raise ParameterError(f"ProtocolPlan: N={self.N!r} is not a positive integer")
        object.__setattr__(self, "N", int(self.N))
        if not (math.isfinite(self.h) and self.h > 0.0):
            raise ParameterError(f"ProtocolPlan: h={self.h!r} must be positive")

    @property
    def viable(self) -> bool:
        return self.r_nu > self.r_in

    def to_jsonable(self) -> dict:
        num = {
            f: format(float(getattr(self, f)), ".17g")
            for f in (
                "q", "eps_b", "alpha", "k", "k0", "eps_s", "eps_x",
                "gamma", "gamma_bar", "r_in", "r_nu", "sigma_nu", "h",
            )
        }
        return {"kind": "protocol_plan", **num, "N": self.N, "F": self.F.to_jsonable()}

    @classmethod
    def from_jsonable(cls, obj: dict) -> "ProtocolPlan":
        if obj.get("kind") != "protocol_plan":
            raise ParameterError(f"ProtocolPlan: unexpected kind {obj.get('kind')!r}")
        fields = {
            f: float(obj[f])
            for f in (
                "q", "eps_b", "alpha", "k", "k0", "eps_s", "eps_x",
                "gamma", "gamma_bar", "r_in", "r_nu", "sigma_nu", "h",
            )
        }
        return cls(F=EstimationFactor.from_jsonable(obj["F"]), N=int(obj["N"]), **fields)


def plan_expansion(
    F: EstimationFactor,
    nu: JointDistribution,
    *,
    q: float,
    eps_b: float,
    k: float,
    k0: float,
    eps_s: float,
    eps_x: float,
    gamma: float,
    gamma_bar: float,
) -> ProtocolPlan:
    """Assemble a full plan from a QEF and calibration statistics.

    Derives r_in from q, r_nu and sigma_nu from (F, nu), then sizes (N, h)
    via :func:`appoint_parameters`.
    """
    r_in = input_entropy_rate(q)
    r_nu = F.rate(nu)
    s = sigma_nu(F, nu)
    alpha = float(F.alpha)
    N, h = appoint_parameters(k, k0, eps_s, gamma_bar, gamma, r_nu, s, r_in, alpha)
    return ProtocolPlan(
        q=q, eps_b=eps_b, alpha=alpha, F=F, k=k, k0=k0, eps_s=eps_s, eps_x=eps_x,
        gamma=gamma, gamma_bar=gamma_bar, r_in=r_in, r_nu=r_nu, sigma_nu=s, N=N, h=h,
    )


_STOP_REASONS = ("THRESHOLD", "EXHAUSTED", "ABORTED")


@dataclass(frozen=True)
class ExpansionTranscript:
    """Record of one run of the trial loop.

    ``check_counts`` is indexed by ``x*2 + y`` and counts checking trials
    only; a checking trial may still land on (0, 0).  ``outputs`` holds the
    outcome bits in trial order, a before b; it is None on transcripts
    restored from JSON (the JSON form keeps only the digest).
    ``stop_reason`` is ABORTED only on the partial transcript attached to a
    seed-underflow error; completed runs stop on THRESHOLD or EXHAUSTED.
    """

    n: int
    log2_G: float
    spot_count: int
    check_counts: tuple
    outputs: BitStream | None
    inputs_consumed_bits: int
    ledger_accounting: float
    success: bool
    stop_reason: str
    checkpoints: tuple

    def __post_init__(self):
        if self.n < 0 or self.spot_count < 0 or self.inputs_consumed_bits < 0:
            raise ParameterError("ExpansionTranscript: negative count")
        cc = tuple(int(c) for c in self.check_counts)
        object.__setattr__(self, "check_counts", cc)
        if len(cc) != 4 or any(c < 0 for c in cc):
            raise ParameterError("ExpansionTranscript: check_counts must be 4 counts")
        if self.spot_count + sum(cc) != self.n:
            raise ParameterError("ExpansionTranscript: trial counts do not add up")
        if self.stop_reason not in _STOP_REASONS:
            raise ParameterError(
                f"ExpansionTranscript: stop_reason {self.stop_reason!r} unknown"
            )
        if self.outputs is not None and len(self.outputs) != 2 * self.n:
            raise ParameterError(
                f"ExpansionTranscript: outputs hold {len(self.outputs)} bits, "
                f"expected {2 * self.n}"
            )
        cps = tuple((int(a), float(b)) for a, b in self.checkpoints)
        object.__setattr__(self, "checkpoints", cps)
        if any(b[0] <= a[0] for a, b in zip(cps, cps[1:])):
            raise ParameterError("ExpansionTranscript: checkpoints out of order")

    def to_jsonable(self) -> dict:
        return {
            "kind": "expansion_transcript",
            "n": self.n,
            "log2_G": format(self.log2_G, ".17g"),
            "spot_count": self.spot_count,
            "check_counts": list(self.check_counts),
            "inputs_consumed_bits": self.inputs_consumed_bits,
            "ledger_accounting": format(self.ledger_accounting, ".17g"),
            "success": self.success,
            "stop_reason": self.stop_reason,
            "checkpoints": [[a, format(b, ".17g")] for a, b in self.checkpoints],
            "outputs_bits": 2 * self.n,
            "outputs_sha256": None if self.outputs is None else self.outputs.sha256(),
        }

    @classmethod
    def from_jsonable(cls, obj: dict) -> "ExpansionTranscript":
        if obj.get("kind") != "expansion_transcript":
            raise ParameterError(
                f"ExpansionTranscript: unexpected kind {obj.get('kind')!r}"
            )
        return cls(
            n=int(obj["n"]),
            log2_G=float(obj["log2_G"]),
            spot_count=int(obj["spot_count"]),
            check_counts=tuple(obj["check_counts"]),
            outputs=None,
            inputs_consumed_bits=int(obj["inputs_consumed_bits"]),
            ledger_accounting=float(obj["ledger_accounting"]),
            success=bool(obj["success"]),
            stop_reason=str(obj["stop_reason"]),
            checkpoints=tuple((int(a), float(b)) for a, b in obj["checkpoints"]),
        )


def _interleave(a_parts, b_parts, n: int) -> BitStream:
    if n == 0:
        return BitStream.zeros(0)
    a = np.concatenate(a_parts) if a_parts else np.empty(0, dtype=np.uint8)
    b = np.concatenate(b_parts) if b_parts else np.empty(0, dtype=np.uint8)
    bits = np.empty(2 * n, dtype=np.uint8)
    bits[0::2] = a
    bits[1::2] = b
    return BitStream.from_bits(bits)


def run_expansion(
    plan: ProtocolPlan,
    device,
    seed: SeedStream,
    *,
    checkpoint_interval: int = CHECKPOINT_INTERVAL,
    checkpoint_path=None,
    window_bits: int = SEED_WINDOW,
) -> ExpansionTranscript:
    """Execute the trial loop until the threshold is crossed or N trials ran.

    ``device`` must expose ``query(x, y) -> (a, b)`` and
    ``query_block(xs, ys) -> (a_array, b_array)``; settings are always fixed
    before outcomes are requested.  Runs of spot trials are processed in
    blocks; a block near the stopping point may query a few outcomes past it,
    which are then discarded unused (the run is equivalent to padding the
    remaining trials with a neutral factor).

    When ``checkpoint_path`` is given, every checkpoint is appended to that
    file as one JSON line ``{"n": ..., "log2_G": ...}`` as soon as it is
    taken, so an interrupted run still leaves its trace.

    On seed underflow the partial transcript (stop_reason ABORTED) travels on
    the raised error's ``transcript`` attribute.
    """
    if checkpoint_interval < 1:
        raise ParameterError(
            f"run_expansion: checkpoint_interval={checkpoint_interval!r} < 1"
        )
    if window_bits < 1:
        raise ParameterError(f"run_expansion: window_bits={window_bits!r} < 1")
    l2_flat = plan.F.log2_values()
    if not np.all(np.isfinite(l2_flat)):
        raise ParameterError(
            "run_expansion: the factor has zero-valued cells; every cell the "
            "device can hit needs a positive value"
        )
    l2 = l2_flat.reshape(2, 2, 2, 2)
    lspot = np.ascontiguousarray(l2[:, :, 0, 0]).reshape(4)
    target = plan.h * (plan.alpha - 1.0)
    L = _resolution_depth(plan.q)

    acc = CompensatedSum()
    start_cursor = seed.cursor
    n = 0
    spot = 0
    checks = [0, 0, 0, 0]
    a_parts: list = []
    b_parts: list = []
    checkpoints: list = []
    next_cp = checkpoint_interval
    stop_reason = None
    writer = open(checkpoint_path, "a") if checkpoint_path is not None else None

    def record(nn: int, val: float) -> None:
        checkpoints.append((nn, val))
        if writer is not None:
            writer.write(json.dumps({"n": nn, "log2_G": format(val, ".17g")}) + "\n")

    def build(reason: str) -> ExpansionTranscript:
        return ExpansionTranscript(
            n=n,
            log2_G=acc.value,
            spot_count=spot,
            check_counts=tuple(checks),
            outputs=_interleave(a_parts, b_parts, n),
            inputs_consumed_bits=seed.cursor - start_cursor,
            ledger_accounting=plan.k0 + n * plan.r_in,
            success=acc.value >= target,
            stop_reason=reason,
            checkpoints=tuple(checkpoints),
        )

    try:
        while stop_reason is None:
            if n >= plan.N:
                stop_reason = "EXHAUSTED"
                break
            window = seed.bits[seed.cursor : seed.cursor + window_bits]
            zpos = np.flatnonzero(window == 0)
            scalar_next = True
            if zpos.size:
                gaps = np.diff(zpos, prepend=-1) - 1
                deep = np.flatnonzero(gaps >= L)
                usable = int(deep[0]) if deep.size else int(zpos.size)
                scalar_next = bool(deep.size)
                m = min(usable, plan.N - n)
                if m > 0:
                    xs = np.zeros(m, dtype=np.uint8)
                    a_blk, b_blk = _query_block(device, xs, xs)
                    contrib = lspot[(a_blk.astype(np.intp) << 1) | b_blk]
                    base = acc.value
                    cum = np.cumsum(contrib)
                    hit = np.flatnonzero(base + cum >= target)
                    if hit.size:
                        j = int(hit[0])
                        acc.add_block(contrib[: j + 1])
                        m = j + 1
                        a_blk = a_blk[:m]
                        b_blk = b_blk[:m]
                        if acc.value >= target:
                            stop_reason = "THRESHOLD"
                        # else: summation-order fluke; the draws stay
                        # consumed and the loop re-examines from here.
                        scalar_next = False
                    else:
                        acc.add_block(contrib)
                    while next_cp <= n + m:
                        record(next_cp, base + float(cum[next_cp - n - 1]))
                        next_cp += checkpoint_interval
                    n += m
                    spot += m
                    seed.cursor += int(zpos[m - 1]) + 1
                    a_parts.append(a_blk)
                    b_parts.append(b_blk)
                    if m < usable:
                        # Trial budget cut the block short; re-check at the top.
                        scalar_next = False
                if stop_reason is not None:
                    break
            if scalar_next and n < plan.N:
                t_bit, _ = biased_bernoulli(plan.q, seed)
                if t_bit:
                    x = seed.take_bit()
                    y = seed.take_bit()
                    a, b = _query_one(device, x, y)
                    checks[x * 2 + y] += 1
                else:
                    a, b = _query_one(device, 0, 0)
                    spot += 1
                acc.add(float(l2[a, b, x, y] if t_bit else l2[a, b, 0, 0]))
                n += 1
                a_parts.append(np.array([a], dtype=np.uint8))
                b_parts.append(np.array([b], dtype=np.uint8))
                if n == next_cp:
                    record(n, acc.value)
                    next_cp += checkpoint_interval
                if acc.value >= target:
                    stop_reason = "THRESHOLD"
        if not checkpoints or checkpoints[-1][0] != n:
            record(n, acc.value)
        return build(stop_reason)
    except SeedUnderflowError as e:
        raise SeedUnderflowError(
            f"{e} (after {n} trials)", transcript=build("ABORTED")
        ) from None
    finally:
        if writer is not None:
            writer.close()


@dataclass(frozen=True)
class EntropyCertificate:
    """Smooth min-entropy floor certified by a successful run.

    The bound is a function of the planned threshold alone, so it is checked
    on construction against the other fields.
    """

    min_entropy_bound: float
    h: float
    eps_s: float
    gamma: float
    alpha: float
    n_stop: int

    def __post_init__(self):
        expect = entropy_bound(self.h, self.eps_s, self.gamma, self.alpha)
        if not abs(self.min_entropy_bound - expect) <= 1e-6 * max(abs(expect), 1.0):
            raise ParameterError(
                f"EntropyCertificate: bound {self.min_entropy_bound!r} does not "
                f"match its own parameters (expected {expect!r})"
            )
        if self.n_stop < 0:
            raise ParameterError(f"EntropyCertificate: n_stop={self.n_stop!r} negative")

    def to_jsonable(self) -> dict:
        return {
            "kind": "entropy_certificate",
            "min_entropy_bound": format(self.min_entropy_bound, ".17g"),
            "h": format(self.h, ".17g"),
            "eps_s": format(self.eps_s, ".17g"),
            "gamma": format(self.gamma, ".17g"),
            "alpha": format(self.alpha, ".17g"),
            "n_stop": self.n_stop,
        }

    @classmethod
    def from_jsonable(cls, obj: dict) -> "EntropyCertificate":
        if obj.get("kind") != "entropy_certificate":
            raise ParameterError(
                f"EntropyCertificate: unexpected kind {obj.get('kind')!r}"
            )
        return cls(
            min_entropy_bound=float(obj["min_entropy_bound"]),
            h=float(obj["h"]),
            eps_s=float(obj["eps_s"]),
            gamma=float(obj["gamma"]),
            alpha=float(obj["alpha"]),
            n_stop=int(obj["n_stop"]),
        )


def certify(transcript: ExpansionTranscript, plan: ProtocolPlan) -> EntropyCertificate:
    """Certificate for a successful transcript.

    The bound comes from the plan's threshold, not from the realized
    accumulator excess; overshooting h certifies nothing extra.
    """
    if not transcript.success:
        raise ProtocolFailureError(
            "certify: the run failed (threshold never reached); there is "
            "nothing to certify"
        )
    return EntropyCertificate(
        min_entropy_bound=entropy_bound(plan.h, plan.eps_s, plan.gamma, plan.alpha),
        h=plan.h,
        eps_s=plan.eps_s,
        gamma=plan.gamma,
        alpha=plan.alpha,
        n_stop=transcript.n,
    )


@dataclass(frozen=True)
class ExpansionCurve:
    """Net certified expansion against trial number, with its expectation line.

    ``net`` clamps at zero (nothing is certified before the bound overtakes
    the consumption ledger); ``expected`` is the straight line
    n * (r_nu - r_in) - penalties, left unclamped.
    """

    n: np.ndarray
    net: np.ndarray
    expected: np.ndarray


def net_expansion_curve(
    transcript: ExpansionTranscript, plan: ProtocolPlan
) -> ExpansionCurve:
    """Running balance of certified bits minus consumed bits at checkpoints."""
    if not transcript.checkpoints:
        raise ParameterError("net_expansion_curve: transcript carries no checkpoints")
    ns = np.array([c[0] for c in transcript.checkpoints], dtype=float)
    g = np.array([c[1] for c in transcript.checkpoints], dtype=float)
    a1 = plan.alpha - 1.0
    penalty = math.log2(2.0 / plan.eps_s**2) / a1 - (
        plan.alpha / a1
    ) * math.log2(plan.gamma)
    realized = g / a1 - ns * plan.r_in - penalty
    expected = ns * (plan.r_nu - plan.r_in) - penalty
    return ExpansionCurve(n=ns, net=np.maximum(realized, 0.0), expected=expected)


def save_outputs(transcript: ExpansionTranscript, path) -> None:
    """Write the outcome bits as raw bytes, 2 bits per trial (a then b),
    packed little-endian within each byte."""
    if transcript.outputs is None:
        raise ParameterError("save_outputs: transcript carries no output bits")
    bits = transcript.outputs.to_bits()
    with open(path, "wb") as f:
        f.write(np.packbits(bits, bitorder="little").tobytes())


def load_outputs(path, n_trials: int) -> BitStream:
    """Read back a file written by :func:`save_outputs`.

    The trial count is not stored in the raw format, so it must be supplied;
    the file length is checked against it exactly.
    """
    if n_trials < 0:
        raise ParameterError(f"load_outputs: n_trials={n_trials!r} negative")
    with open(path, "rb") as f:
        payload = f.read()
    nbits = 2 * n_trials
    if len(payload) != (nbits + 7) // 8:
        raise ParameterError(
            f"load_outputs: {len(payload)} bytes cannot hold exactly {nbits} bits"
        )
    bits = np.unpackbits(
        np.frombuffer(payload, dtype=np.uint8), count=nbits, bitorder="little"
    )
    return BitStream.from_bits(bits)


def product_input(q_local: float) -> InputDistribution:
    """Independent per-party settings: each side picks 1 with probability
    q_local, giving mu = ((1-q)^2, q(1-q), q(1-q), q^2) in x*2 + y order."""
    if not 0.0 < q_local < 1.0:
        raise ParameterError(f"product_input: q_local={q_local!r} outside (0, 1)")
    side = np.array([1.0 - q_local, q_local])
    mu = np.outer(side, side).reshape(4)
    mu = mu / mu.sum()
    return InputDistribution(mu, q=q_local, eps_b=0.0)


def local_bias_analysis(
    q_local: float,
    nu_sim: JointDistribution,
    alpha,
    polytope=None,
) -> tuple:
    """Can biased local settings alone fund net expansion?

    Both parties draw their own setting with bias q_local, so each trial
    consumes 2 * h(q_local) input bits.  The factor optimizer runs under the
    matching product input distribution and its rate is compared against that
    consumption.  Returns ``(r_out, r_in_local, feasible)``.

    ``nu_sim`` must carry the product input marginal for the same q_local;
    pass a precomputed polytope to amortize it over a sweep.
    """
    mu = product_input(q_local)
    if np.max(np.abs(nu_sim.input.mu - mu.mu)) > 1e-12:
        raise ParameterError(
            "local_bias_analysis: statistics were not collected under the "
            f"product input model for q_local={q_local!r}"
        )
    if polytope is None:
        polytope = build_polytope()
    _, _, r_out = optimize_pef(nu_sim, alpha, polytope, [mu])
    r_in_local = 2.0 * binary_entropy(q_local)
    return r_out, r_in_local, bool(r_out > r_in_local)
