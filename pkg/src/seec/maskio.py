"""Segmentation masks: PGM ingestion, validation and lossless compression.

Masks are coded row by row. Every row after the first starts with a binary
flag saying whether it repeats the row above. Otherwise the row is a list of
horizontal runs: the first run's class id, then for each run its length, and
for every later run its class coded among the N-1 classes other than the
previous run's (free when N = 2). Lengths use 256 tokens: v < 255 ends a run
of v + 1 more pixels and 255 means 255 more pixels follow. Every symbol goes
through an adaptive order-0 frequency model and the range coder.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numba
import numpy as np

from . import coder

INCREMENT = 32
MODEL_LIMIT = 1 << 16
THRESHOLD = 128
LEN_ESCAPE = 255


class MaskError(ValueError):
    """Mask file or mask contents are invalid."""


@dataclass
class MaskMap:
    """Per-pixel class ids (H, W) uint8 with every id below ``n_classes``."""

    ids: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.ids = np.ascontiguousarray(self.ids, dtype=np.uint8)
        if self.ids.ndim != 2:
            raise MaskError(f"mask must be 2-d, got shape {self.ids.shape}")
        if not 1 <= self.n_classes <= 255:
            raise MaskError(f"class count must be in [1, 255], got {self.n_classes}")
        if self.ids.size and int(self.ids.max()) >= self.n_classes:
            raise MaskError(f"mask id {int(self.ids.max())} is not below N={self.n_classes}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.ids.shape

    def one_hot(self, n: int) -> np.ndarray:
        return self.ids == n

    def check_image(self, image_hw: tuple[int, int]) -> None:
        if tuple(image_hw) != self.shape:
            raise MaskError(f"mask is {self.shape[1]}x{self.shape[0]} but image is {image_hw[1]}x{image_hw[0]}")


# -- PNM I/O ------------------------------------------------------------------------


def _parse_pnm(blob: bytes, magic: bytes):
    """Return (width, height, maxval, comments, pixel bytes)."""
    if blob[:2] != magic:
        raise MaskError(f"expected a binary {magic.decode()} file")
    pos = 2
    tokens: list[int] = []
    comments: list[str] = []
    while len(tokens) < 3:
        if pos >= len(blob):
            raise MaskError("truncated header")
        ch = blob[pos : pos + 1]
        if ch == b"#":
            end = blob.find(b"\n", pos)
            end = len(blob) if end < 0 else end
            comments.append(blob[pos + 1 : end].decode("latin-1").strip())
            pos = end + 1
        elif ch.isspace():
            pos += 1
        else:
            m = re.compile(rb"\d+").match(blob, pos)
            if m is None:
                raise MaskError("malformed header")
            tokens.append(int(m.group()))
            pos = m.end()
    if pos >= len(blob) or not blob[pos : pos + 1].isspace():
        raise MaskError("malformed header")
    w, h, maxval = tokens
    return w, h, maxval, comments, blob[pos + 1 :]


def read_pgm(path) -> tuple[np.ndarray, list[str]]:
    """8-bit binary PGM as (H, W) uint8 plus header comments."""
    with open(path, "rb") as fh:
        blob = fh.read()
    w, h, maxval, comments, body = _parse_pnm(blob, b"P5")
    if maxval != 255:
        raise MaskError(f"PGM maxval must be 255, got {maxval}")
    if len(body) < w * h:
        raise MaskError("truncated PGM data")
    return np.frombuffer(body[: w * h], dtype=np.uint8).reshape(h, w).copy(), comments


def write_pgm(path, arr: np.ndarray, comment: str | None = None) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    head = b"P5\n" + (f"# {comment}\n".encode() if comment else b"")
    with open(path, "wb") as fh:
        fh.write(head + f"{arr.shape[1]} {arr.shape[0]}\n255\n".encode() + arr.tobytes())


def read_ppm(path) -> np.ndarray:
    """8-bit binary PPM as (H, W, 3) uint8."""
    with open(path, "rb") as fh:
        blob = fh.read()
    w, h, maxval, _, body = _parse_pnm(blob, b"P6")
    if maxval != 255:
        raise MaskError(f"PPM maxval must be 255, got {maxval}")
    if len(body) < 3 * w * h:
        raise MaskError("truncated PPM data")
    return np.frombuffer(body[: 3 * w * h], dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(path, img: np.ndarray) -> None:
    img = np.ascontiguousarray(img, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise MaskError(f"PPM needs an (H, W, 3) image, got {img.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode() + img.tobytes())


def _declared_classes(comments: list[str]) -> int | None:
    for c in comments:
        m = re.fullmatch(r"classes\s*=\s*(\d+)", c)
        if m:
            return int(m.group(1))
    return None


def mask_from_gray(gray: np.ndarray, n_classes: int, raw_ids: bool = False) -> MaskMap:
    """Raw ids are taken as-is; otherwise a two-class threshold at 128 applies."""
    if raw_ids:
        return MaskMap(gray, n_classes)
    if n_classes != 2:
        raise MaskError("without a classes=N comment the mask is binary, so N must be 2")
    return MaskMap((gray >= THRESHOLD).astype(np.uint8), 2)


def load_mask(path, n_classes: int = 2, image_hw: tuple[int, int] | None = None) -> MaskMap:
    """Read a P5 mask. A ``# classes=N`` comment means raw ids; N must match."""
    gray, comments = read_pgm(path)
    declared = _declared_classes(comments)
    if declared is not None and declared != n_classes:
        raise MaskError(f"mask declares classes={declared} but the model has N={n_classes}")
    mask = mask_from_gray(gray, n_classes, raw_ids=declared is not None)
    if image_hw is not None:
        mask.check_image(image_hw)
    return mask


def save_mask(path, mask: MaskMap) -> None:
    if mask.n_classes == 2:
        write_pgm(path, mask.ids * np.uint8(255))
    else:
        write_pgm(path, mask.ids, comment=f"classes={mask.n_classes}")


# -- codec ----------------------------------------------------------------------------


@numba.njit(cache=True)
def _model_new(n):
    return np.ones(n, dtype=np.int64)


@numba.njit(cache=True)
def _model_update(freq, s):
    total = 0
    for v in range(freq.shape[0]):
        total += freq[v]
    if total + INCREMENT > MODEL_LIMIT:
        for v in range(freq.shape[0]):
            freq[v] = (freq[v] + 1) >> 1
    freq[s] += INCREMENT


@numba.njit(cache=True)
def _put(buf, st, freq, s):
    lo = 0
    total = 0
    for v in range(freq.shape[0]):
        if v == s:
            lo = total
        total += freq[v]
    coder.enc_encode(buf, st, lo, freq[s], total)
    _model_update(freq, s)


@numba.njit(cache=True)
def _get(data, st, freq):
    total = 0
    for v in range(freq.shape[0]):
        total += freq[v]
    q = coder.dec_target(st, total)
    lo = 0
    s = 0
    while lo + freq[s] <= q:
        lo += freq[s]
        s += 1
    coder.dec_consume(data, st, lo, freq[s], total)
    _model_update(freq, s)
    return s


@numba.njit(cache=True)
def _encode_mask(ids, n, buf):
    H, W = ids.shape
    st = coder.enc_init()
    m_flag = _model_new(2)
    m_first = _model_new(max(n, 1))
    m_next = _model_new(max(n - 1, 1))
    m_len = _model_new(256)
    for r in range(H):
        if r > 0:
            same = 1
            for c in range(W):
                if ids[r, c] != ids[r - 1, c]:
                    same = 0
                    break
            _put(buf, st, m_flag, same)
            if same == 1:
                continue
        c = 0
        prev = -1
        while c < W:
            cls = ids[r, c]
            run = 1
            while c + run < W and ids[r, c + run] == cls:
                run += 1
            if prev < 0:
                if n > 1:
                    _put(buf, st, m_first, cls)
            elif n > 2:
                _put(buf, st, m_next, cls if cls < prev else cls - 1)
            left = run
            while left > LEN_ESCAPE:
                _put(buf, st, m_len, LEN_ESCAPE)
                left -= LEN_ESCAPE
            _put(buf, st, m_len, left - 1)
            prev = cls
            c += run
    return coder.enc_finish(buf, st)


@numba.njit(cache=True)
def _decode_mask(data, H, W, n, ids):
    st = coder.dec_init(data)
    m_flag = _model_new(2)
    m_first = _model_new(max(n, 1))
    m_next = _model_new(max(n - 1, 1))
    m_len = _model_new(256)
    for r in range(H):
        if r > 0:
            if _get(data, st, m_flag) == 1:
                for c in range(W):
                    ids[r, c] = ids[r - 1, c]
                continue
        c = 0
        prev = -1
        while c < W:
            if prev < 0:
                cls = _get(data, st, m_first) if n > 1 else 0
            elif n > 2:
                cls = _get(data, st, m_next)
                if cls >= prev:
                    cls += 1
            else:
                cls = 1 - prev
            run = 0
            while True:
                t = _get(data, st, m_len)
                if t == LEN_ESCAPE:
                    run += LEN_ESCAPE
                else:
                    run += t + 1
                    break
            if c + run > W:
                return False
            for k in range(run):
                ids[r, c + k] = cls
            prev = cls
            c += run
    return True


def compress_mask(mask: MaskMap) -> bytes:
    ids = mask.ids
    buf = np.zeros(coder.buffer_capacity(2 * ids.size + ids.shape[0]) + 64, dtype=np.uint8)
    n = _encode_mask(ids, mask.n_classes, buf)
    return buf[:n].tobytes()


def decompress_mask(data: bytes, height: int, width: int, n_classes: int) -> MaskMap:
    """Inverse of :func:`compress_mask`; raises coder.StreamExhausted on truncation."""
    ids = np.zeros((height, width), dtype=np.uint8)
    if height and width:
        ok = _decode_mask(np.frombuffer(bytes(data), dtype=np.uint8), height, width, n_classes, ids)
        if not ok:
            raise MaskError("corrupt mask stream: run overflows the row")
    return MaskMap(ids, n_classes)
