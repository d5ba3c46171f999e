"""Range-ANS entropy coder over :class:`~freqcodec.entropy.CdfTable` contexts.

32-bit state kept below ``RANS_L << 8`` with byte-wise renormalization.
Symbols are encoded last-to-first into a scratch buffer that is written
backwards, so the finished stream reads forward.  Values outside a context's
support are sent as the context's escape symbol followed by the raw 32-bit
value as two uniformly coded 16-bit halves.

The encoder starts from state 0 rather than ``RANS_L`` and the final state is
flushed as its significant bytes only, big-endian.  Each context's slot axis
is rotated so its most probable symbol starts at slot 0; a run of that symbol
then leaves a zero state untouched and a near-empty stream costs about its
information content instead of a fixed 32-bit flush.  The decoder reads a
byte whenever its state drops below ``RANS_L`` and input remains, and must end
at state 0 with every byte consumed.

Substream framing: ``u32 symbol count, u32 payload length, payload``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numba
import numpy as np

from .entropy import CdfTable

RANS_L = 1 << 23
MAX_FLUSH_BYTES = 4

_OK = 0
_ERR_CONTEXT = 1
_ERR_RANGE = 2
_ERR_STATE = 4


class RansError(ValueError):
    pass


@dataclass
class SymbolStream:
    values: np.ndarray
    contexts: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.int64).ravel()
        self.contexts = np.asarray(self.contexts, dtype=np.int64).ravel()
        if self.values.shape != self.contexts.shape:
            raise ValueError("values and contexts must have the same length")

    def __len__(self) -> int:
        return len(self.values)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SymbolStream)
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.contexts, other.contexts)
        )


@numba.njit(cache=True, nogil=True)
def _put(x, start, freq, prec, buf, pos):
    x_max = ((RANS_L >> prec) << 8) * freq
    while x >= x_max:
        pos -= 1
        buf[pos] = x & 0xFF
        x >>= 8
    return ((x // freq) << prec) + (x % freq) + start, pos


@numba.njit(cache=True, nogil=True)
def _encode_kernel(values, contexts, cdf, nsym, offset, rot, prec, buf):
    pos = buf.shape[0]
    x = np.int64(0)
    mask = (1 << prec) - 1
    n_ctx = nsym.shape[0]
    for i in range(values.shape[0] - 1, -1, -1):
        ctx = contexts[i]
        if ctx < 0 or ctx >= n_ctx:
            return _ERR_CONTEXT, i, pos
        v = values[i]
        idx = v - offset[ctx]
        if idx < 0 or idx >= nsym[ctx]:
            if v < -(1 << 31) or v >= (1 << 31):
                return _ERR_RANGE, i, pos
            raw = v & 0xFFFFFFFF
            x, pos = _put(x, raw & 0xFFFF, 1, 16, buf, pos)
            x, pos = _put(x, raw >> 16, 1, 16, buf, pos)
            idx = nsym[ctx]
        start = cdf[ctx, idx]
        freq = cdf[ctx, idx + 1] - start
        x, pos = _put(x, (start - rot[ctx]) & mask, freq, prec, buf, pos)
    while x > 0:
        pos -= 1
        buf[pos] = x & 0xFF
        x >>= 8
    return _OK, -1, pos


@numba.njit(cache=True, nogil=True)
def _take(x, start, freq, prec, data, pos):
    mask = (1 << prec) - 1
    x = freq * (x >> prec) + (x & mask) - start
    while x < RANS_L and pos < data.shape[0]:
        x = (x << 8) | data[pos]
        pos += 1
    return x, pos


@numba.njit(cache=True, nogil=True)
def _decode_kernel(data, contexts, cdf, nsym, offset, rot, prec, out):
    x = np.int64(0)
    pos = 0
    while x < RANS_L and pos < data.shape[0]:
        x = (x << 8) | data[pos]
        pos += 1
    mask = (1 << prec) - 1
    n_ctx = nsym.shape[0]
    for i in range(contexts.shape[0]):
        ctx = contexts[i]
        if ctx < 0 or ctx >= n_ctx:
            return _ERR_CONTEXT, i
        cf = ((x & mask) + rot[ctx]) & mask
        lo = 0
        hi = nsym[ctx] + 1
        while hi - lo > 1:
            mid = (lo + hi) >> 1
            if cdf[ctx, mid] <= cf:
                lo = mid
            else:
                hi = mid
        start = cdf[ctx, lo]
        freq = cdf[ctx, lo + 1] - start
        x, pos = _take(x, (start - rot[ctx]) & mask, freq, prec, data, pos)
        if lo == nsym[ctx]:
            hi16 = x & 0xFFFF
            x, pos = _take(x, hi16, 1, 16, data, pos)
            lo16 = x & 0xFFFF
            x, pos = _take(x, lo16, 1, 16, data, pos)
            raw = (hi16 << 16) | lo16
            out[i] = raw - (1 << 32) if raw >= (1 << 31) else raw
        else:
            out[i] = lo + offset[ctx]
    if x != 0 or pos != data.shape[0]:
        return _ERR_STATE, contexts.shape[0]
    return _OK, -1


def _table_arrays(table: CdfTable):
    cdf = np.ascontiguousarray(table.cdf, dtype=np.int64)
    nsym = np.ascontiguousarray(table.nsym, dtype=np.int64)
    # slot rotation: start of the most probable symbol (escape included)
    rot = np.zeros(len(nsym), dtype=np.int64)
    for ctx, n in enumerate(nsym):
        freqs = np.diff(cdf[ctx, : n + 2])
        rot[ctx] = cdf[ctx, int(np.argmax(freqs))]
    return cdf, nsym, np.ascontiguousarray(table.offset, dtype=np.int64), rot


def rans_encode(stream: SymbolStream, table: CdfTable) -> bytes:
    """Encode ``stream`` into a byte string; deterministic for fixed inputs."""
    cdf, nsym, offset, rot = _table_arrays(table)
    n = len(stream)
    buf = np.empty(MAX_FLUSH_BYTES + 8 * n + 16, dtype=np.uint8)
    status, where, pos = _encode_kernel(
        stream.values, stream.contexts, cdf, nsym, offset, rot, table.precision, buf
    )
    if status == _ERR_CONTEXT:
        raise RansError(f"symbol {where}: context {stream.contexts[where]} out of range")
    if status == _ERR_RANGE:
        raise RansError(f"symbol {where}: value {stream.values[where]} does not fit in 32 bits")
    return buf[pos:].tobytes()


def rans_decode(data: bytes, table: CdfTable, n: int, contexts) -> SymbolStream:
    """Exact inverse of :func:`rans_encode` for the same table and contexts."""
    contexts = np.ascontiguousarray(np.asarray(contexts, dtype=np.int64).ravel())
    if len(contexts) != n:
        raise RansError(f"expected {n} contexts, got {len(contexts)}")
    cdf, nsym, offset, rot = _table_arrays(table)
    out = np.zeros(n, dtype=np.int64)
    arr = np.frombuffer(data, dtype=np.uint8)
    status, where = _decode_kernel(arr, contexts, cdf, nsym, offset, rot, table.precision, out)
    if status == _ERR_CONTEXT:
        raise RansError(f"symbol {where}: context {contexts[where]} out of range")
    if status == _ERR_STATE:
        raise RansError("corrupt or truncated stream: final coder state or length mismatch")
    return SymbolStream(out, contexts)


def pack_substream(count: int, payload: bytes) -> bytes:
    return struct.pack("<II", count, len(payload)) + payload


def unpack_substream(blob: bytes, pos: int = 0) -> tuple[int, bytes, int]:
    """Returns (symbol count, payload, position after the substream)."""
    if pos + 8 > len(blob):
        raise RansError("truncated substream header")
    count, length = struct.unpack_from("<II", blob, pos)
    end = pos + 8 + length
    if end > len(blob):
        raise RansError("truncated substream payload")
    return count, blob[pos + 8 : end], end
