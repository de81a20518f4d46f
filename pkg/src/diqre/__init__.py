"""Device-independent quantum randomness expansion (DIQRE) certification pipeline.

The package covers the full chain for a spot-checking CHSH experiment:

- ``chsh``: distribution types, CHSH statistics, the quantum-bounded
  non-signaling polytope with 80 extreme points.
- ``device``: Eberhard-style photonic device simulator and trial sampler.
- ``mle``: maximum-likelihood projection of raw frequencies onto
  non-signaling distributions with a fixed input marginal.
- ``pef``: probability estimation factor optimization and high-precision
  feasibility verification.
- ``qef``: conversion of a PEF into a quantum estimation factor via a
  certified grid bound on the adversarial rescaling factor.
- ``protocol``: parameter appointment, the spot-checking trial loop with
  entropy accounting, and the min-entropy certificate.
- ``extractor``: Toeplitz hashing over GF(2), naive and blocked-FFT paths.
- ``cli``: end-to-end pipeline subcommands.
"""

__version__ = "0.1.0"

from .chsh import (
    ConditionalBehavior,
    InputDistribution,
    JointDistribution,
    PolytopeModel,
    build_polytope,
    build_spot_checking_inputs,
    chsh_statistics,
    check_nonsignaling,
    input_entropy_rate,
)

__all__ = [
    "ConditionalBehavior",
    "InputDistribution",
    "JointDistribution",
    "PolytopeModel",
    "build_polytope",
    "build_spot_checking_inputs",
    "chsh_statistics",
    "check_nonsignaling",
    "input_entropy_rate",
    "__version__",
]
