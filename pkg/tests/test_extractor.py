"""Tests for Toeplitz hashing.

The naive row-product path is the oracle: its 2x3 case is checked against a
hand evaluation of the matrix definition, and every FFT variant is then held
bit-exact to it.
"""

import struct
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diqre import extractor
from diqre.errors import (
    InfeasiblePlanError,
    ParameterError,
    PrecisionError,
    ProtocolFailureError,
)
from diqre.extractor import (
    BitStream,
    ExtractionSpec,
    extract,
    output_length,
    toeplitz_fft,
    toeplitz_naive,
)

HAND_SEED = BitStream.from_bits([1, 0, 1, 1])
HAND_V = BitStream.from_bits([1, 1, 0])


def test_bitstream_roundtrip_and_pad_invariant():
    rng = np.random.default_rng(3)
    for n in (0, 1, 7, 8, 9, 64, 65, 1000):
        bits = rng.integers(0, 2, n, dtype=np.uint8)
        bs = BitStream.from_bits(bits)
        assert len(bs) == n
        assert np.array_equal(bs.to_bits(), bits)
        assert bs == BitStream.from_bits(bits)
    # MSB-first packing: bit 0 is the high bit of byte 0
    assert BitStream.from_bits([1]).payload[0] == 0x80
    with pytest.raises(ParameterError, match="pad"):
        BitStream(np.array([0x81], dtype=np.uint8), 7)
    with pytest.raises(ParameterError, match="bytes"):
        BitStream(np.zeros(2, dtype=np.uint8), 3)
    with pytest.raises(ParameterError, match="0 or 1"):
        BitStream.from_bits([0, 2, 1])


def test_bitstream_file_layout(tmp_path):
    bs = BitStream.from_bits([1, 0, 1, 1, 1, 0, 0, 0, 1, 1, 0])
    path = str(tmp_path / "bits.bin")
    bs.save(path)
    raw = open(path, "rb").read()
    # 8-byte little-endian bit count, then the packed payload
    assert struct.unpack("<Q", raw[:8])[0] == 11
    assert len(raw) == 8 + 2
    assert BitStream.load(path) == bs

    open(path, "wb").write(raw[:9])
    with pytest.raises(ParameterError, match="header says"):
        BitStream.load(path)
    open(path, "wb").write(raw[:4])
    with pytest.raises(ParameterError, match="header"):
        BitStream.load(path)


def test_bitstream_xor_and_random():
    rng = np.random.default_rng(9)
    a = BitStream.random(101, rng)
    b = BitStream.random(101, rng)
    assert np.array_equal((a ^ b).to_bits(), a.to_bits() ^ b.to_bits())
    assert a ^ a == BitStream.zeros(101)
    with pytest.raises(ParameterError, match="lengths"):
        a ^ BitStream.zeros(100)
    assert a.sha256() != b.sha256()
    assert len(a.sha256()) == 64


def test_naive_hand_example():
    # T = [[a0 a-1 a-2], [a1 a0 a-1]] with seed (a-2, a-1, a0, a1) = (1,0,1,1):
    # r0 = 1*1 + 0*1 + 1*0 = 1, r1 = 1*1 + 1*1 + 0*0 = 0 (mod 2)
    assert list(toeplitz_naive(HAND_SEED, HAND_V, 2).to_bits()) == [1, 0]
    one = BitStream.from_bits([1])
    assert list(toeplitz_naive(one, one, 1).to_bits()) == [1]
    seed = BitStream.random(12, np.random.default_rng(0))
    assert toeplitz_naive(seed, BitStream.zeros(5), 8) == BitStream.zeros(8)
    with pytest.raises(ParameterError, match="m \\+ n - 1"):
        toeplitz_naive(HAND_SEED, HAND_V, 3)
    with pytest.raises(ParameterError, match="at least 1"):
        toeplitz_naive(HAND_SEED, HAND_V, 0)


def test_fft_hand_example_all_blockings():
    for ell in (1, 2, 3, None):
        got = toeplitz_fft(HAND_SEED, HAND_V, 2, ell)
        assert list(got.to_bits()) == [1, 0], f"block_length={ell}"


def test_fft_matches_naive_random():
    rng = np.random.default_rng(2026)
    for _ in range(60):
        n = int(rng.integers(1, 1025))
        m = int(rng.integers(1, 257))
        seed = BitStream.random(m + n - 1, rng)
        v = BitStream.random(n, rng)
        want = toeplitz_naive(seed, v, m)
        for ell in {1, min(7, n), min(64, n), n}:
            assert toeplitz_fft(seed, v, m, ell) == want, (n, m, ell)


def test_fft_block_length_validation():
    with pytest.raises(ParameterError, match="block_length"):
        toeplitz_fft(HAND_SEED, HAND_V, 2, 0)
    with pytest.raises(ParameterError, match="block_length"):
        toeplitz_fft(HAND_SEED, HAND_V, 2, 4)


def test_fft_precision_guard(monkeypatch):
    # force the audit to reject every nonzero residual
    monkeypatch.setattr(extractor, "_RESIDUAL_TOL", -1.0)
    rng = np.random.default_rng(1)
    seed = BitStream.random(511 + 64 - 1, rng)
    v = BitStream.random(511, rng)
    with pytest.raises(PrecisionError, match="block_length"):
        toeplitz_fft(seed, v, 64, 128)


def test_linearity():
    rng = np.random.default_rng(77)
    for _ in range(20):
        n = int(rng.integers(2, 400))
        m = int(rng.integers(1, 120))
        ell = min(32, n)
        seed = BitStream.random(m + n - 1, rng)
        v1 = BitStream.random(n, rng)
        v2 = BitStream.random(n, rng)
        lhs = toeplitz_fft(seed, v1 ^ v2, m, ell)
        rhs = toeplitz_fft(seed, v1, m, ell) ^ toeplitz_fft(seed, v2, m, ell)
        assert lhs == rhs


@settings(max_examples=60, deadline=None)
@given(
    n=st.integers(1, 48),
    m=st.integers(1, 24),
    ell=st.integers(1, 48),
    seed_int=st.integers(0, 2**32 - 1),
)
def test_fft_equals_naive_property(n, m, ell, seed_int):
    rng = np.random.default_rng(seed_int)
    seed = BitStream.random(m + n - 1, rng)
    v = BitStream.random(n, rng)
    assert toeplitz_fft(seed, v, m, min(ell, n)) == toeplitz_naive(seed, v, m)


def test_output_length():
    assert output_length(201.0, 2.0 ** -100) == 1
    assert output_length(5.47e8, 2.0 ** -100) == 547_000_000 - 200
    assert output_length(10.75, 1.0) == 10
    with pytest.raises(InfeasiblePlanError, match="cannot fund"):
        output_length(200.0, 2.0 ** -100)
    with pytest.raises(ParameterError, match="eps_x"):
        output_length(100.0, 0.0)
    with pytest.raises(ParameterError, match="finite"):
        output_length(float("nan"), 0.5)


def test_extraction_spec_budget():
    spec = ExtractionSpec(n=1000, m=10, eps_x=2.0 ** -16, k=50.0)
    assert spec.seed_length == 10 + 1000 - 1
    with pytest.raises(ParameterError, match="budget"):
        ExtractionSpec(n=1000, m=19, eps_x=2.0 ** -16, k=50.0)
    with pytest.raises(ParameterError, match="eps_x"):
        ExtractionSpec(n=1000, m=10, eps_x=1.5, k=50.0)


def test_extract_end_to_end(tmp_path):
    rng = np.random.default_rng(4)
    cert = SimpleNamespace(min_entropy_bound=340.0, eps_s=2.0 ** -32)
    n = 2000
    v = BitStream.random(n, rng)
    m = output_length(cert.min_entropy_bound, 2.0 ** -100)
    assert m == 140
    seed = BitStream.random(m + n - 1, rng)
    res = extract(v, cert, 2.0 ** -100, seed, block_length=256)
    assert res.bits == toeplitz_naive(seed, v, m)
    assert res.spec.m == m and res.spec.n == n
    assert res.block_length == 256
    assert res.total_soundness == pytest.approx(4.656612873077393e-10, rel=1e-12)
    assert res.to_jsonable()["m"] == m

    # an oversized default block length clamps to the input length
    res2 = extract(v, cert, 2.0 ** -100, seed)
    assert res2.bits == res.bits and res2.block_length == n

    # the seed file round trip reproduces the output bit for bit
    path = str(tmp_path / "seed.bin")
    seed.save(path)
    res3 = extract(v, cert, 2.0 ** -100, BitStream.load(path), block_length=512)
    assert res3.bits == res.bits


def test_extract_refusals():
    rng = np.random.default_rng(5)
    v = BitStream.random(64, rng)
    seed = BitStream.random(64 + 9, rng)
    good = SimpleNamespace(min_entropy_bound=30.0, eps_s=2.0 ** -32)
    with pytest.raises(ProtocolFailureError, match="no success certificate"):
        extract(v, None, 2.0 ** -10, seed)
    with pytest.raises(InfeasiblePlanError):
        extract(v, SimpleNamespace(min_entropy_bound=0.0, eps_s=0.1),
                2.0 ** -10, seed)
    with pytest.raises(ParameterError, match="certificate"):
        extract(v, object(), 2.0 ** -10, seed)
    with pytest.raises(ParameterError, match="seed holds"):
        extract(v, good, 2.0 ** -10, BitStream.random(5, rng))
    assert extract(v, good, 2.0 ** -10, seed).spec.m == 10
