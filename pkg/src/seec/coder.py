"""Bit-exact range coder over integer cumulative-frequency tables.

Carry-propagating range coder in the LZMA style, with a 48-bit window held in
int64 so the arithmetic is identical in Python and in numba-compiled callers.
Frequency tables carry up to 16 bits of precision; ``range // total`` therefore
keeps at least 24 bits, which puts the truncation loss near 1e-7 bits/symbol.

The low-level ``enc_*`` / ``dec_*`` functions operate on small int64 state
arrays and are usable from other jitted kernels; :class:`RangeEncoder` and
:class:`RangeDecoder` wrap them for ordinary Python use.
"""

from __future__ import annotations

import numba
import numpy as np

WINDOW_BITS = 48
TOP = np.int64(1) << WINDOW_BITS
BOTTOM = np.int64(1) << (WINDOW_BITS - 8)
LOW_KEEP = BOTTOM - 1
FLUSH_BYTES = WINDOW_BITS // 8
MAX_TOTAL_BITS = 16

# encoder state slots
E_LOW, E_RANGE, E_CACHE, E_CACHE_SIZE, E_FIRST, E_POS = range(6)
# decoder state slots
D_CODE, D_RANGE, D_POS, D_LEN = range(4)


class StreamExhausted(Exception):
    """The decoder needed more bytes than the stream holds."""


@numba.njit(cache=True)
def _emit(buf, st, byte):
    if st[E_FIRST] == 1:
        st[E_FIRST] = 0
        return
    buf[st[E_POS]] = byte
    st[E_POS] += 1


@numba.njit(cache=True)
def _shift_low(buf, st):
    low = st[E_LOW]
    if (low & (TOP - 1)) < (np.int64(0xFF) << (WINDOW_BITS - 8)) or (low >> WINDOW_BITS) != 0:
        carry = low >> WINDOW_BITS
        temp = st[E_CACHE]
        while True:
            _emit(buf, st, (temp + carry) & 0xFF)
            temp = 0xFF
            st[E_CACHE_SIZE] -= 1
            if st[E_CACHE_SIZE] == 0:
                break
        st[E_CACHE] = (low >> (WINDOW_BITS - 8)) & 0xFF
    st[E_CACHE_SIZE] += 1
    st[E_LOW] = (low & LOW_KEEP) << 8


@numba.njit(cache=True)
def enc_init():
    st = np.zeros(6, dtype=np.int64)
    st[E_RANGE] = TOP - 1
    st[E_CACHE_SIZE] = 1
    st[E_FIRST] = 1
    return st


@numba.njit(cache=True)
def enc_encode(buf, st, cum_lo, freq, total):
    """Narrow the interval to [cum_lo, cum_lo + freq) out of ``total``.

    ``buf`` must have room for at least FLUSH_BYTES + 4 more bytes.
    """
    r = st[E_RANGE] // total
    st[E_LOW] += r * cum_lo
    st[E_RANGE] = r * freq
    while st[E_RANGE] < BOTTOM:
        st[E_RANGE] <<= 8
        _shift_low(buf, st)


@numba.njit(cache=True)
def enc_encode_cdf(buf, st, symbol, cdf):
    lo = cdf[symbol]
    enc_encode(buf, st, lo, cdf[symbol + 1] - lo, cdf[cdf.shape[0] - 1])


@numba.njit(cache=True)
def enc_finish(buf, st):
    """Pick the value in [low, low+range) with the most trailing zero bits,
    push it out, and return the byte count with trailing zeros elided."""
    low = st[E_LOW]
    hi = low + st[E_RANGE]
    k = WINDOW_BITS
    while k > 0:
        m = (np.int64(1) << k) - 1
        v = (low + m) & ~m
        if v < hi:
            low = v
            break
        k -= 1
    st[E_LOW] = low
    for _ in range(FLUSH_BYTES + 1):
        _shift_low(buf, st)
    n = st[E_POS]
    stripped = 0
    while n > 0 and buf[n - 1] == 0 and stripped < FLUSH_BYTES:
        n -= 1
        stripped += 1
    return n


@numba.njit(cache=True)
def _next_byte(data, st):
    pos = st[D_POS]
    st[D_POS] = pos + 1
    if pos < st[D_LEN]:
        return np.int64(data[pos])
    if pos < st[D_LEN] + FLUSH_BYTES:
        return np.int64(0)
    raise StreamExhausted("range decoder read past the end of the stream")


@numba.njit(cache=True)
def dec_init(data):
    st = np.zeros(4, dtype=np.int64)
    st[D_LEN] = data.shape[0]
    st[D_RANGE] = TOP - 1
    code = np.int64(0)
    for _ in range(FLUSH_BYTES):
        code = (code << 8) | _next_byte(data, st)
    st[D_CODE] = code
    return st


@numba.njit(cache=True)
def dec_target(st, total):
    """Scaled code value in [0, total) identifying the next symbol."""
    r = st[D_RANGE] // total
    q = st[D_CODE] // r
    if q >= total:
        q = total - 1
    return q


@numba.njit(cache=True)
def dec_consume(data, st, cum_lo, freq, total):
    r = st[D_RANGE] // total
    st[D_CODE] -= r * cum_lo
    st[D_RANGE] = r * freq
    while st[D_RANGE] < BOTTOM:
        st[D_CODE] = (st[D_CODE] << 8) | _next_byte(data, st)
        st[D_RANGE] <<= 8


@numba.njit(cache=True)
def dec_decode_cdf(data, st, cdf):
    n = cdf.shape[0] - 1
    total = cdf[n]
    q = dec_target(st, total)
    lo, hi = 0, n
    while hi - lo > 1:
        mid = (lo + hi) >> 1
        if cdf[mid] <= q:
            lo = mid
        else:
            hi = mid
    dec_consume(data, st, cdf[lo], cdf[lo + 1] - cdf[lo], total)
    return lo


@numba.njit(cache=True)
def _encode_rows(symbols, cdfs, buf):
    st = enc_init()
    for i in range(symbols.shape[0]):
        enc_encode_cdf(buf, st, symbols[i], cdfs[i])
    return enc_finish(buf, st)


@numba.njit(cache=True)
def _encode_shared(symbols, cdf, buf):
    st = enc_init()
    for i in range(symbols.shape[0]):
        enc_encode_cdf(buf, st, symbols[i], cdf)
    return enc_finish(buf, st)


@numba.njit(cache=True)
def _decode_rows(data, cdfs, out):
    st = dec_init(data)
    for i in range(out.shape[0]):
        out[i] = dec_decode_cdf(data, st, cdfs[i])


@numba.njit(cache=True)
def _decode_shared(data, cdf, out):
    st = dec_init(data)
    for i in range(out.shape[0]):
        out[i] = dec_decode_cdf(data, st, cdf)


def check_cdf(cdf) -> np.ndarray:
    cdf = np.ascontiguousarray(cdf, dtype=np.int64)
    if cdf.ndim != 1 or cdf.shape[0] < 2:
        raise ValueError("cdf table needs at least two entries")
    if cdf[0] != 0 or cdf[-1] > (1 << MAX_TOTAL_BITS):
        raise ValueError("cdf table must start at 0 and total at most 2^16")
    if np.any(np.diff(cdf) <= 0):
        raise ValueError("cdf table must be strictly increasing")
    return cdf


def buffer_capacity(n_symbols: int) -> int:
    """Upper bound on encoder output for ``n_symbols`` symbols of >= 1/2^16 mass."""
    return 2 * n_symbols + 4 * FLUSH_BYTES + 16


class RangeEncoder:
    """Incremental encoder; call :meth:`encode` per symbol, then :meth:`finish`."""

    def __init__(self, capacity: int = 1024):
        self._buf = np.zeros(max(capacity, 64), dtype=np.uint8)
        self._st = enc_init()
        self._done = False

    def encode(self, symbol: int, cdf) -> None:
        if self._done:
            raise RuntimeError("encoder already finished")
        if self._st[E_POS] + 4 * FLUSH_BYTES + 8 > self._buf.shape[0]:
            self._buf = np.concatenate([self._buf, np.zeros_like(self._buf)])
        cdf = np.asarray(cdf, dtype=np.int64)
        if not 0 <= symbol < cdf.shape[0] - 1:
            raise ValueError(f"symbol {symbol} outside alphabet of size {cdf.shape[0] - 1}")
        enc_encode_cdf(self._buf, self._st, int(symbol), cdf)

    def finish(self) -> bytes:
        if self._st[E_POS] + 4 * FLUSH_BYTES + 8 > self._buf.shape[0]:
            self._buf = np.concatenate([self._buf, np.zeros(64, dtype=np.uint8)])
        n = enc_finish(self._buf, self._st)
        self._done = True
        return self._buf[:n].tobytes()


class RangeDecoder:
    def __init__(self, data: bytes):
        self._data = np.frombuffer(bytes(data), dtype=np.uint8)
        self._st = dec_init(self._data)

    def decode(self, cdf) -> int:
        return int(dec_decode_cdf(self._data, self._st, np.asarray(cdf, dtype=np.int64)))

    @property
    def bytes_consumed(self) -> int:
        return int(min(self._st[D_POS], self._st[D_LEN]))


def encode_symbols(symbols, cdfs) -> bytes:
    """Encode a symbol sequence; ``cdfs`` is one shared table or one row per symbol."""
    symbols = np.ascontiguousarray(symbols, dtype=np.int64)
    cdfs = np.ascontiguousarray(cdfs, dtype=np.int64)
    buf = np.zeros(buffer_capacity(symbols.shape[0]), dtype=np.uint8)
    if cdfs.ndim == 1:
        n = _encode_shared(symbols, cdfs, buf)
    else:
        if cdfs.shape[0] != symbols.shape[0]:
            raise ValueError("need one cdf row per symbol")
        n = _encode_rows(symbols, cdfs, buf)
    return buf[:n].tobytes()


def decode_symbols(data: bytes, cdfs, count: int | None = None) -> np.ndarray:
    cdfs = np.ascontiguousarray(cdfs, dtype=np.int64)
    if cdfs.ndim == 1:
        if count is None:
            raise ValueError("count is required with a shared table")
        out = np.zeros(count, dtype=np.int64)
        _decode_shared(np.frombuffer(bytes(data), dtype=np.uint8), cdfs, out)
    else:
        out = np.zeros(cdfs.shape[0], dtype=np.int64)
        _decode_rows(np.frombuffer(bytes(data), dtype=np.uint8), cdfs, out)
    return out


def ideal_code_length(symbols, cdfs) -> float:
    """Sum of -log2(freq/total) over the sequence, in bits."""
    symbols = np.asarray(symbols, dtype=np.int64)
    cdfs = np.asarray(cdfs, dtype=np.int64)
    if cdfs.ndim == 1:
        freq = cdfs[symbols + 1] - cdfs[symbols]
        total = cdfs[-1]
    else:
        rows = np.arange(symbols.shape[0])
        freq = cdfs[rows, symbols + 1] - cdfs[rows, symbols]
        total = cdfs[:, -1]
    return float(-np.log2(freq / total).sum())
