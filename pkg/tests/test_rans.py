import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from freqcodec.entropy import CdfTable, build_table_from_pmfs
from freqcodec.rans import (
    RansError,
    SymbolStream,
    pack_substream,
    rans_decode,
    rans_encode,
    unpack_substream,
)


def table_from_freqs(freqs_list, offsets=None) -> CdfTable:
    """Freqs include the trailing escape slot."""
    nsym = [len(f) - 1 for f in freqs_list]
    offsets = offsets if offsets is not None else [0] * len(freqs_list)
    return CdfTable.from_freqs([np.asarray(f) for f in freqs_list], nsym, offsets)


def random_table(rng, n_ctx=4, max_sym=40) -> CdfTable:
    pmfs, offsets = [], []
    for _ in range(n_ctx):
        n = int(rng.integers(1, max_sym))
        p = rng.dirichlet(np.full(n, 0.5)) * (1 - 1e-4)
        pmfs.append(p)
        offsets.append(int(rng.integers(-n, 1)))
    return build_table_from_pmfs(pmfs, offsets)


def sample_stream(rng, table: CdfTable, n: int, escapes: float = 0.0) -> SymbolStream:
    ctx = rng.integers(0, table.num_contexts, size=n)
    values = np.empty(n, dtype=np.int64)
    for c in range(table.num_contexts):
        sel = ctx == c
        p = table.pmf(c)[:-1]
        values[sel] = rng.choice(len(p), size=sel.sum(), p=p / p.sum()) + table.offset[c]
    if escapes:
        esc = rng.random(n) < escapes
        values[esc] = rng.integers(-(2**31), 2**31, size=esc.sum())
    return SymbolStream(values, ctx)


def roundtrip(stream, table):
    data = rans_encode(stream, table)
    return data, rans_decode(data, table, len(stream), stream.contexts)


def test_empty_stream():
    table = table_from_freqs([[32768, 32767, 1]])
    data, back = roundtrip(SymbolStream([], []), table)
    assert data == b""
    assert len(back) == 0


def test_two_symbol_uniform_costs_one_bit():
    table = table_from_freqs([[32767, 32767, 2]])
    stream = SymbolStream(np.random.default_rng(0).integers(0, 2, 1024), np.zeros(1024))
    data, back = roundtrip(stream, table)
    assert back == stream
    assert 1024 / 8 <= len(data) <= 1024 / 8 + 8


def test_skewed_source_near_entropy():
    table = table_from_freqs([[58982, 6553, 1]])
    rng = np.random.default_rng(1)
    n = 100_000
    stream = SymbolStream((rng.random(n) < 0.1).astype(np.int64), np.zeros(n))
    data, back = roundtrip(stream, table)
    assert back == stream
    h = -(0.9 * math.log2(0.9) + 0.1 * math.log2(0.1))
    assert len(data) <= 1.01 * n * h / 8 + 8


def test_single_symbol_alphabet():
    table = table_from_freqs([[65535, 1]])
    stream = SymbolStream(np.zeros(5000, np.int64), np.zeros(5000))
    data, back = roundtrip(stream, table)
    assert back == stream
    assert data == b""


def test_escape_values_round_trip():
    table = table_from_freqs([[30000, 30000, 5536]], offsets=[-1])
    vals = np.array([-1, 0, 5, -(2**31), 2**31 - 1, 123456, -7, 0])
    stream = SymbolStream(vals, np.zeros(len(vals)))
    _, back = roundtrip(stream, table)
    np.testing.assert_array_equal(back.values, vals)
    assert table.code_length(vals, stream.contexts) > 5 * 32


def test_value_beyond_32_bits_rejected_with_position():
    table = table_from_freqs([[30000, 30000, 5536]])
    stream = SymbolStream([0, 1, 2**40], [0, 0, 0])
    with pytest.raises(RansError, match="symbol 2"):
        rans_encode(stream, table)


def test_bad_context_rejected():
    table = table_from_freqs([[30000, 35536 - 1, 1]])
    with pytest.raises(RansError, match="context"):
        rans_encode(SymbolStream([0, 0], [0, 3]), table)


def test_corruption_detected():
    rng = np.random.default_rng(2)
    table = random_table(rng)
    stream = sample_stream(rng, table, 5000)
    data = rans_encode(stream, table)
    with pytest.raises(RansError):
        rans_decode(data[:-3], table, len(stream), stream.contexts)
    with pytest.raises(RansError):
        rans_decode(data + b"\x00", table, len(stream), stream.contexts)
    flipped = bytearray(data)
    flipped[len(data) // 2] ^= 0x5A
    try:
        back = rans_decode(bytes(flipped), table, len(stream), stream.contexts)
    except RansError:
        pass
    else:
        assert back != stream


def test_encoding_is_deterministic():
    rng = np.random.default_rng(3)
    table = random_table(rng)
    stream = sample_stream(rng, table, 10_000, escapes=0.01)
    assert rans_encode(stream, table) == rans_encode(stream, table)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 3000), st.floats(0, 0.05))
def test_roundtrip_property(seed, n, escapes):
    rng = np.random.default_rng(seed)
    table = random_table(rng)
    stream = sample_stream(rng, table, n, escapes)
    data, back = roundtrip(stream, table)
    assert back == stream
    ideal = table.code_length(stream.values, stream.contexts)
    assert len(data) * 8 <= math.ceil(ideal) + 8 * 8 + 32


def test_run_of_most_probable_symbol_is_free():
    # the mode sits mid-table, so only the slot rotation makes this zero bytes
    table = table_from_freqs([[1000, 60000, 4535, 1]], offsets=[-1])
    stream = SymbolStream(np.zeros(200, np.int64), np.zeros(200))
    data, back = roundtrip(stream, table)
    assert back == stream and data == b""
    stream = SymbolStream(np.r_[np.zeros(50, np.int64), 1], np.zeros(51))
    data, back = roundtrip(stream, table)
    assert back == stream
    assert 0 < len(data) * 8 <= table.code_length(stream.values, stream.contexts) + 16 + 8


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 40))
def test_short_streams_cost_close_to_their_information(seed, n):
    rng = np.random.default_rng(seed)
    table = random_table(rng, n_ctx=2, max_sym=30)
    stream = sample_stream(rng, table, n)
    data, back = roundtrip(stream, table)
    assert back == stream
    # no fixed flush: startup costs at most the slot precision plus byte rounding
    assert len(data) * 8 <= table.code_length(stream.values, stream.contexts) + 16 + 8


def test_substream_framing():
    blob = pack_substream(7, b"abc") + pack_substream(0, b"")
    count, payload, pos = unpack_substream(blob)
    assert (count, payload) == (7, b"abc")
    count, payload, end = unpack_substream(blob, pos)
    assert (count, payload, end) == (0, b"", len(blob))
    with pytest.raises(RansError):
        unpack_substream(blob[:5])
    with pytest.raises(RansError):
        unpack_substream(pack_substream(1, b"abcd")[:-1])
