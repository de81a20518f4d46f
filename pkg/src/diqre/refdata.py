"""Bundled reference dataset from the modeled photonic spot-checking experiment.

Three artifacts travel with the package so the pipeline can be exercised,
calibrated, and regression-tested without external files:

- a training-set table of raw input-output counts,
- the non-signaling joint distribution fitted to the full experimental run
  (used as the calibration target and as the honest-device behavior), and
- the reference per-trial estimation factor with its power alpha, recorded
  with 20 decimal digits per entry.

The tables are stored exactly as printed in the source data, rows by setting
pair (x, y) in order 00, 01, 10, 11 and columns by outcome pair (a, b) in the
same order; the loaders convert to the project-wide ``[a, b, x, y]`` layout.

The ideal spot probability of the reference run is q = 1/8376 (the printed
0.000119 is this fraction rounded; the joint distribution's setting marginal
matches 1/8376 to about 1e-17), with relative bias tolerance 0.2%.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from .chsh import ConditionalBehavior, InputDistribution, JointDistribution, spot_checking_mu

__all__ = [
    "Q_REF",
    "Q_REF_FRACTION",
    "EPS_B_REF",
    "ALPHA_REF",
    "QEF_DIVISOR",
    "training_counts_table",
    "reference_joint",
    "reference_behavior",
    "reference_factor",
    "reference_qef",
]

#: Ideal spot probability of the reference experiment.
Q_REF_FRACTION = Fraction(1, 8376)
Q_REF = float(Q_REF_FRACTION)

#: Relative bias tolerance on the spot probability.
EPS_B_REF = 0.002

#: Power of the reference estimation factor, as a decimal string.
ALPHA_REF = "1.000001172"

#: Divisor certified for the reference factor against quantum side information;
#: dividing every entry by it turns the recorded table into a usable QEF.
QEF_DIVISOR = "1.00000000112"

# Raw training counts n(abxy); row (x, y), column (a, b).
_COUNTS = (
    (42212881971, 318991793, 275003068, 629231576),
    (1240932, 27956, 6070, 21021),
    (1243249, 6689, 27566, 21427),
    (1201874, 45577, 45611, 3620),
)

# Full-run joint distribution nu(abxy); row (x, y), column (a, b).
_NU = (
    ("0.97199465625472059038", "0.00715304637435085818", "0.00631932133640711064", "0.01444343448724344329"),
    ("0.00002857430319592834", "0.00000065311397457615", "0.00000014282560923430", "0.00000047693964624017"),
    ("0.00002858371146706307", "0.00000015598344257690", "0.00000061881913175867", "0.00000048866838458032"),
    ("0.00002769260884464488", "0.00000104708606499509", "0.00000102451996051776", "0.00000008296755582123"),
)

# Reference estimation factor F(abxy); row (x, y), column (a, b).
_PEF = (
    ("1.00000000110510334216", "0.99999903566359593654", "0.99999908430264417003", "1.00000100579637485331"),
    ("1.00022934253952033856", "0.98995503866430756279", "0.93407594075304811731", "1.02073956349038930113"),
    ("1.00023612022915342478", "0.93601590290081493339", "0.98948855714127381677", "1.02175557026355190437"),
    ("0.99949697803240911131", "1.00975800133726889562", "1.01028078627036155268", "0.92372918497532785497"),
)


def _xy_table_to_abxy(table, convert=float) -> np.ndarray:
    """Reorder a row-(x,y) column-(a,b) table into an [a, b, x, y] array."""
    out = np.empty((2, 2, 2, 2), dtype=object if convert is str else float)
    for x in (0, 1):
        for y in (0, 1):
            for a in (0, 1):
                for b in (0, 1):
                    out[a, b, x, y] = convert(table[x * 2 + y][a * 2 + b])
    return out


def _flat_strings(table) -> tuple:
    """The 16 entries of a printed table in project flat order, as strings."""
    return tuple(
        table[x * 2 + y][a * 2 + b]
        for a in (0, 1)
        for b in (0, 1)
        for x in (0, 1)
        for y in (0, 1)
    )


def training_counts_table():
    """The training counts as a :class:`diqre.mle.CountTable`."""
    from .mle import CountTable  # local import, mle depends on chsh only

    counts = _xy_table_to_abxy(_COUNTS, convert=int).astype(np.int64)
    return CountTable(counts)


def reference_input() -> InputDistribution:
    """Ideal spot-checking input distribution of the reference run."""
    return InputDistribution(np.array(spot_checking_mu(Q_REF)), q=Q_REF, eps_b=EPS_B_REF)


def reference_joint() -> JointDistribution:
    """The full-run joint distribution nu(abxy)."""
    return JointDistribution(_xy_table_to_abxy(_NU), reference_input())


def reference_behavior() -> ConditionalBehavior:
    """Conditional behavior P(ab|xy) of the full-run joint distribution."""
    return reference_joint().conditional()


def reference_factor():
    """The reference estimation factor (kind PEF) at its recorded power."""
    from .pef import EstimationFactor

    return EstimationFactor(values=_flat_strings(_PEF), alpha=ALPHA_REF, kind="PEF")


def reference_qef():
    """The reference factor divided by its certified quantum-side-information
    bound, ready to drive the expansion protocol."""
    from mpmath import mp

    from .pef import EstimationFactor

    with mp.workdps(50):
        c = mp.mpf(QEF_DIVISOR)
        vals = tuple(mp.mpf(s) / c for s in _flat_strings(_PEF))
        return EstimationFactor(values=vals, alpha=ALPHA_REF, kind="QEF", rescale_bound=c)
