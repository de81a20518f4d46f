"""Toeplitz hashing over GF(2): naive oracle and blocked-FFT paths.

The hash is r = T v with T the m-by-n binary Toeplitz matrix whose diagonals
are read off a seed of m + n - 1 bits: T[i, j] = seed[(i - j) + (n - 1)], the
seed stored in ascending index so entry 0 is the top-right corner's diagonal
and entry m + n - 2 the bottom-left one.

``toeplitz_naive`` evaluates the definition by row-wise inner products and is
the oracle everything else is compared against.  ``toeplitz_fft`` cuts the
input into blocks of ``block_length`` bits and computes each block's
contribution as an integer cross-correlation through a zero-padded real FFT;
the per-block integer results are accumulated exactly and reduced mod 2 once
at the end, so block boundaries and accumulation order cannot change the
output.  Floating transforms carry a residual audit: if any pre-rounding
entry sits farther than ``_RESIDUAL_TOL`` from an integer the computation is
rejected rather than silently rounded.

Output sizing follows the leftover-hash convention m = floor(k - 2 log2(1 /
eps_x)).  Seed bits are reusable and deliberately not booked against any
entropy ledger; seeds arrive as files (see ``BitStream.save`` for the layout:
an 8-byte little-endian bit count, then MSB-first packed bytes).
"""

from __future__ import annotations

import hashlib
import math
import os
import struct
from dataclasses import dataclass

import numpy as np
from scipy import fft as _fft

from .errors import (
    InfeasiblePlanError,
    ParameterError,
    PrecisionError,
    ProtocolFailureError,
)

DEFAULT_BLOCK_LENGTH = 2 ** 22
_RESIDUAL_TOL = 0.25
_HEADER = struct.Struct("<Q")


@dataclass(frozen=True, eq=False)
class BitStream:
    """An immutable bit string, packed MSB-first into bytes.

    ``payload`` holds exactly ceil(length / 8) bytes and any pad bits in the
    final byte are zero, so equal bit strings have equal payloads and the
    serialized form is canonical.
    """

    payload: np.ndarray
    length: int

    def __post_init__(self):
        p = np.ascontiguousarray(self.payload, dtype=np.uint8)
        n = int(self.length)
        if n < 0:
            raise ParameterError(f"BitStream: negative length {n}")
        if p.ndim != 1 or p.size != (n + 7) // 8:
            raise ParameterError(
                f"BitStream: payload has {p.size} bytes, need {(n + 7) // 8} "
                f"for {n} bits"
            )
        if n % 8 and (int(p[-1]) & ((1 << (8 - n % 8)) - 1)):
            raise ParameterError("BitStream: nonzero pad bits in final byte")
        p.setflags(write=False)
        object.__setattr__(self, "payload", p)
        object.__setattr__(self, "length", n)

    @classmethod
    def from_bits(cls, bits) -> "BitStream":
        arr = np.asarray(bits, dtype=np.uint8)
        if arr.ndim != 1:
            raise ParameterError(f"BitStream: bits must be 1-d, got shape {arr.shape}")
        if arr.size and arr.max() > 1:
            raise ParameterError("BitStream: bits must be 0 or 1")
        return cls(np.packbits(arr), arr.size)

    @classmethod
    def zeros(cls, n: int) -> "BitStream":
        return cls(np.zeros((n + 7) // 8, dtype=np.uint8), n)

    @classmethod
    def random(cls, n: int, rng: np.random.Generator) -> "BitStream":
        """Uniform bits drawn bytewise (test and demo plumbing, not a seed source)."""
        p = rng.integers(0, 256, size=(n + 7) // 8, dtype=np.uint8)
        if n % 8:
            p[-1] &= 0xFF ^ ((1 << (8 - n % 8)) - 1)
        return cls(p, n)

    def to_bits(self) -> np.ndarray:
        return np.unpackbits(self.payload, count=self.length)

    def __len__(self) -> int:
        return self.length

    def __eq__(self, other) -> bool:
        if not isinstance(other, BitStream):
            return NotImplemented
        return self.length == other.length and bool(
            np.array_equal(self.payload, other.payload)
        )

    def __xor__(self, other: "BitStream") -> "BitStream":
        if not isinstance(other, BitStream):
            return NotImplemented
        if self.length != other.length:
            raise ParameterError(
                f"BitStream: xor of lengths {self.length} and {other.length}"
            )
        return BitStream(self.payload ^ other.payload, self.length)

    def sha256(self) -> str:
        """Digest of the canonical serialized form (header plus payload)."""
        h = hashlib.sha256()
        h.update(_HEADER.pack(self.length))
        h.update(self.payload.tobytes())
        return h.hexdigest()

    def save(self, path: str) -> None:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(self.length))
            fh.write(self.payload.tobytes())

    @classmethod
    def load(cls, path: str) -> "BitStream":
        size = os.path.getsize(path)
        if size < _HEADER.size:
            raise ParameterError(f"BitStream: {path!r} too short for a header")
        with open(path, "rb") as fh:
            (n,) = _HEADER.unpack(fh.read(_HEADER.size))
            payload = np.fromfile(fh, dtype=np.uint8)
        if payload.size != (n + 7) // 8:
            raise ParameterError(
                f"BitStream: {path!r} holds {payload.size} payload bytes, "
                f"header says {n} bits"
            )
        return cls(payload, n)


def _bit_window(stream: BitStream, lo: int, hi: int) -> np.ndarray:
    """Bits [lo, hi) as uint8, zero-filled outside the stream's range."""
    out = np.zeros(hi - lo, dtype=np.uint8)
    a = max(lo, 0)
    b = min(hi, stream.length)
    if a < b:
        first = a // 8
        chunk = np.unpackbits(stream.payload[first:(b + 7) // 8])
        out[a - lo:b - lo] = chunk[a - 8 * first:a - 8 * first + (b - a)]
    return out


def _check_lengths(seed: BitStream, v: BitStream, m: int) -> None:
    if m < 1:
        raise ParameterError(f"output length {m} must be at least 1")
    if v.length < 1:
        raise ParameterError("input must hold at least one bit")
    want = m + v.length - 1
    if seed.length != want:
        raise ParameterError(
            f"seed holds {seed.length} bits, need m + n - 1 = {want}"
        )


def toeplitz_naive(seed: BitStream, v: BitStream, m: int) -> BitStream:
    """Row-by-row evaluation of the Toeplitz hash; the exactness oracle.

    Output bit i is the inner product mod 2 of input v with seed bits i ..
    i + n - 1 read in descending order, which is row i of the matrix.
    """
    _check_lengths(seed, v, m)
    n = v.length
    s = seed.to_bits().astype(np.int64)
    x = v.to_bits().astype(np.int64)
    out = np.empty(m, dtype=np.uint8)
    for i in range(m):
        out[i] = np.dot(s[i:i + n][::-1], x) & 1
    return BitStream.from_bits(out)


def toeplitz_fft(seed: BitStream, v: BitStream, m: int,
                 block_length: int | None = None) -> BitStream:
    """Blocked-FFT Toeplitz hash, bit-exact equal to ``toeplitz_naive``.

    ``block_length`` of None hashes the whole input in one transform (the
    full-FFT path); otherwise the input is split into blocks of that many
    bits, the last one zero-padded, and each block contributes an integer
    cross-correlation with its m + block_length - 1 bit seed window.  Peak
    memory scales with the block length, not with n.
    """
    _check_lengths(seed, v, m)
    n = v.length
    ell = n if block_length is None else int(block_length)
    if not 1 <= ell <= n:
        raise ParameterError(f"block_length {ell} outside [1, {n}]")
    span = m + ell - 1
    nfft = _fft.next_fast_len(span, real=True)
    acc = np.zeros(m, dtype=np.int64)
    for b in range((n + ell - 1) // ell):
        vb = _bit_window(v, b * ell, (b + 1) * ell).astype(np.float64)
        if not vb.any():
            continue
        lo = (n - 1) - b * ell - (ell - 1)
        win = _bit_window(seed, lo, lo + span).astype(np.float64)
        conv = _fft.irfft(_fft.rfft(win, nfft) * _fft.rfft(vb, nfft), nfft)
        conv = conv[ell - 1:ell - 1 + m]
        rounded = np.rint(conv)
        residual = float(np.max(np.abs(conv - rounded)))
        if residual > _RESIDUAL_TOL:
            raise PrecisionError(
                f"transform residual {residual:.3f} in block {b} is beyond "
                f"{_RESIDUAL_TOL}; reduce block_length or use an exact "
                "integer transform"
            )
        acc += rounded.astype(np.int64)
    return BitStream.from_bits((acc & 1).astype(np.uint8))


def output_length(k: float, eps_x: float) -> int:
    """Extractable bits from min-entropy k at security eps_x.

    Uses the leftover-hash convention m = floor(k - 2 log2(1 / eps_x)); the
    published expansion figures may differ from this choice by order 100 bits.
    """
    if not 0.0 < eps_x <= 1.0:
        raise ParameterError(f"eps_x {eps_x!r} outside (0, 1]")
    if not math.isfinite(k):
        raise ParameterError(f"min-entropy {k!r} is not finite")
    penalty = 2.0 * math.log2(1.0 / eps_x)
    m = math.floor(k - penalty)
    if m < 1:
        raise InfeasiblePlanError(
            f"min-entropy {k} cannot fund any output at eps_x = {eps_x} "
            f"(penalty {penalty} bits)"
        )
    return m


@dataclass(frozen=True)
class ExtractionSpec:
    """Shape of one extraction: n input bits to m output bits at eps_x.

    ``k`` is the certified min-entropy funding the output; the leftover-hash
    budget m <= k - 2 log2(1 / eps_x) is enforced here.
    """

    n: int
    m: int
    eps_x: float
    k: float

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ParameterError(f"ExtractionSpec: lengths n={self.n} m={self.m}")
        if not 0.0 < self.eps_x <= 1.0:
            raise ParameterError(f"ExtractionSpec: eps_x {self.eps_x!r}")
        if self.m > self.k - 2.0 * math.log2(1.0 / self.eps_x):
            raise ParameterError(
                f"ExtractionSpec: m = {self.m} exceeds the leftover-hash "
                f"budget for k = {self.k}, eps_x = {self.eps_x}"
            )

    @property
    def seed_length(self) -> int:
        return self.m + self.n - 1


@dataclass(frozen=True)
class ExtractionResult:
    bits: BitStream
    spec: ExtractionSpec
    block_length: int
    total_soundness: float

    def to_jsonable(self) -> dict:
        return {
            "n": self.spec.n,
            "m": self.spec.m,
            "block_length": self.block_length,
            "eps_x": self.spec.eps_x,
            "total_soundness": self.total_soundness,
        }


def extract(v: BitStream, cert, eps_x: float, seed: BitStream,
            block_length: int | None = DEFAULT_BLOCK_LENGTH) -> ExtractionResult:
    """Hash the outcome record v down to its certified entropy content.

    ``cert`` is the min-entropy certificate of a successful run (anything
    exposing ``min_entropy_bound`` and ``eps_s``); a run that did not succeed
    has no certificate and extraction is refused outright.  The reported
    total soundness is 2 eps_s + eps_x.
    """
    if cert is None:
        raise ProtocolFailureError(
            "refusing to extract: no success certificate for this record"
        )
    try:
        k = float(cert.min_entropy_bound)
        eps_s = float(cert.eps_s)
    except AttributeError as exc:
        raise ParameterError(f"extract: not an entropy certificate: {exc}") from exc
    m = output_length(k, eps_x)
    spec = ExtractionSpec(n=v.length, m=m, eps_x=eps_x, k=k)
    if seed.length != spec.seed_length:
        raise ParameterError(
            f"extract: seed holds {seed.length} bits, need {spec.seed_length}"
        )
    if block_length is not None and block_length > v.length:
        block_length = v.length
    bits = toeplitz_fft(seed, v, m, block_length)
    return ExtractionResult(
        bits=bits,
        spec=spec,
        block_length=v.length if block_length is None else block_length,
        total_soundness=2.0 * eps_s + eps_x,
    )
