"""The .seec bitstream and the end-to-end encode/decode pipelines.

Layout (little-endian)::

    magic "SEEC" | version u8 | flags u8 | H u32 | W u32 | pad_h u8 | pad_w u8
    | N u8 | K u8 | model hash 16 bytes | section lengths 4 x u32
    | z-stream | y-stream | mask-stream | pixel-stream

Bit 0 of flags marks ROI mode. The image is reflect-padded to multiples of 16
for the latent path. Padded pixels are not coded: each is a copy of a pixel
that precedes it in raster order, so the decoder rebuilds it for free.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import sic, smem
from .coder import decode_symbols, encode_symbols
from .dlm import nll_bits
from .maskio import MaskMap, compress_mask, decompress_mask
from .model import SeecModel

MAGIC = b"SEEC"
VERSION = 1
FLAG_ROI = 0x01
HEADER = struct.Struct("<4sBBIIBBBB16s4I")
HEADER_BYTES = HEADER.size
SECTIONS = ("z", "y", "mask", "pixels")


class FormatError(ValueError):
    """Stream is not a valid .seec stream (magic, version, truncation)."""


class ModelMismatchError(ValueError):
    """Stream was produced with different weights."""


@dataclass
class Header:
    height: int
    width: int
    pad_h: int
    pad_w: int
    n_classes: int
    K: int
    model_hash: bytes
    lengths: tuple[int, int, int, int]
    roi: bool = False
    version: int = VERSION

    def pack(self) -> bytes:
        return HEADER.pack(
            MAGIC, self.version, FLAG_ROI if self.roi else 0, self.height, self.width,
            self.pad_h, self.pad_w, self.n_classes, self.K, self.model_hash, *self.lengths,
        )

    @classmethod
    def unpack(cls, blob: bytes) -> "Header":
        if len(blob) < HEADER_BYTES:
            raise FormatError("stream shorter than the header")
        magic, ver, flags, H, W, ph, pw, N, K, digest, *lengths = HEADER.unpack_from(blob)
        if magic != MAGIC:
            raise FormatError("bad magic: not a .seec stream")
        if ver != VERSION:
            raise FormatError(f"unsupported format version {ver}")
        if flags & ~FLAG_ROI:
            raise FormatError(f"unknown flag bits {flags:#x}")
        return cls(H, W, ph, pw, N, K, digest, tuple(lengths), bool(flags & FLAG_ROI), ver)


@dataclass
class EncodeStats:
    """Byte counts per part plus model rate estimates, all for one image."""

    height: int
    width: int
    header_bytes: int
    section_bytes: dict
    seconds: float = 0.0
    clamped: int = 0
    estimate: dict = field(default_factory=dict)

    @property
    def total_bytes(self) -> int:
        return self.header_bytes + sum(self.section_bytes.values())

    def bpp(self, part: str = "total") -> float:
        px = self.height * self.width
        s = self.section_bytes
        nbytes = {
            "total": self.total_bytes,
            "latent": s["z"] + s["y"],
            "mask": s["mask"],
            "pixel": s["pixels"],
        }[part]
        return 8.0 * nbytes / px

    def line(self) -> str:
        return " ".join(
            [f"bpp_{k}={self.bpp(k):.6f}" for k in ("total", "latent", "mask", "pixel")]
            + [f"seconds={self.seconds:.3f}"]
        )


# -- padding ---------------------------------------------------------------------


def reflect_index(n: int, total: int) -> np.ndarray:
    """Source index of each of ``total`` positions when reflecting a length-n axis.

    Uses mirror reflection without repeating the edge; a single-element axis
    repeats its only element.
    """
    i = np.arange(total)
    if n == 1:
        return np.zeros(total, dtype=np.int64)
    period = 2 * (n - 1)
    k = i % period
    return np.where(k >= n, period - k, k).astype(np.int64)


def pad_amounts(height: int, width: int) -> tuple[int, int]:
    return (-height) % sic.STRIDE, (-width) % sic.STRIDE


def pad_image(arr: np.ndarray, pad_h: int, pad_w: int) -> np.ndarray:
    H, W = arr.shape[:2]
    return arr[reflect_index(H, H + pad_h)][:, reflect_index(W, W + pad_w)]


# -- latent path -------------------------------------------------------------------


def _clamp_round(t: np.ndarray, lim: int) -> tuple[np.ndarray, int]:
    r = sic.quantize(t, "round")
    over = int(np.count_nonzero((r < -lim) | (r > lim - 1)))
    return np.clip(r, -lim, lim - 1), over


def latent_path(model: SeecModel, padded: np.ndarray):
    """Quantized latents, their priors, and synthesis features for one padded image."""
    p = model.params
    lim = model.config.y_clamp
    x = smem.normalize(padded.transpose(2, 0, 1)[None])
    y_hat, over_y = _clamp_round(sic.analyze(p, x).data, lim)
    z_hat, over_z = _clamp_round(sic.hyper_analyze(p, y_hat).data, lim)
    mu, sigma = hyper_side(model, z_hat, y_hat.shape[2:])
    return y_hat, z_hat, mu, sigma, over_y + over_z


def hyper_side(model: SeecModel, z_hat: np.ndarray, y_hw) -> tuple[np.ndarray, np.ndarray]:
    mu, sigma = sic.hyper_synthesize(model.params, z_hat, tuple(y_hw))
    return mu.data, sigma.data


def _z_tables(model: SeecModel, z_shape) -> np.ndarray:
    _, C, h, w = z_shape
    mu = np.repeat(model.params["sic.zprior.mu"], h * w)
    s = np.repeat(sic.zprior_scales(model.params), h * w)
    lim = model.config.y_clamp
    return sic.latent_cdfs(mu, s, -lim, 2 * lim, False)


def _y_tables(model: SeecModel, mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    lim = model.config.y_clamp
    return sic.latent_cdfs(np.ascontiguousarray(mu.ravel()), np.ascontiguousarray(sigma.ravel()), -lim, 2 * lim, True)


def _hyper_size(n: int) -> int:
    half = lambda v: (v - 1) // 2 + 1
    return half(half(n))


def _source_maps(H: int, W: int, ph: int, pw: int):
    return reflect_index(H, H + ph), reflect_index(W, W + pw)


# -- pipelines -----------------------------------------------------------------------


def validate_image(img) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"image must be (H, W, 3), got shape {img.shape}")
    if img.dtype != np.uint8:
        raise ValueError(f"image must be uint8, got {img.dtype}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError("image must be at least 1x1")
    if img.shape[0] >= 2**32 or img.shape[1] >= 2**32:
        raise ValueError("image dimensions overflow the header")
    return np.ascontiguousarray(img)


def encode_image(
    img: np.ndarray, mask: MaskMap, model: SeecModel, roi: bool = False, estimate: bool = False
) -> tuple[bytes, EncodeStats]:
    """Compress one RGB image. With ``estimate`` the model's own rate
    estimates (bits) are filled into the returned stats."""
    t0 = time.perf_counter()
    cfg = model.config
    img = validate_image(img)
    H, W = img.shape[:2]
    mask.check_image((H, W))
    if mask.n_classes != cfg.N:
        raise ValueError(f"mask has N={mask.n_classes} classes but the model expects {cfg.N}")
    ph, pw = pad_amounts(H, W)
    padded = pad_image(img, ph, pw)
    pmask = pad_image(mask.ids, ph, pw).astype(np.int64)

    y_hat, z_hat, mu, sigma, clamped = latent_path(model, padded)
    lim = cfg.y_clamp
    z_bytes = encode_symbols((z_hat + lim).astype(np.int64).ravel(), _z_tables(model, z_hat.shape))
    y_bytes = encode_symbols((y_hat + lim).astype(np.int64).ravel(), _y_tables(model, mu, sigma))
    m_bytes = compress_mask(mask)
    f = sic.synthesize(model.params, y_hat).data
    p_bytes, work = smem.encode_pixels(
        model.params, padded, pmask, f, cfg.K, cfg.shared_mixture, roi, *_source_maps(H, W, ph, pw)
    )
    head = Header(H, W, ph, pw, cfg.N, cfg.K, model.model_hash(),
                  (len(z_bytes), len(y_bytes), len(m_bytes), len(p_bytes)), roi)
    blob = head.pack() + z_bytes + y_bytes + m_bytes + p_bytes
    stats = EncodeStats(
        H, W, HEADER_BYTES,
        dict(zip(SECTIONS, head.lengths)),
        clamped=clamped,
    )
    if estimate:
        stats.estimate = rate_estimate(model, y_hat, z_hat, mu, sigma, work, pmask, f, (H, W), roi)
    stats.seconds = time.perf_counter() - t0
    return blob, stats


def rate_estimate(model, y_hat, z_hat, mu, sigma, work, pmask, f, hw, roi) -> dict:
    """Model code lengths in bits for the latents and the coded pixels."""
    p = model.params
    zs = sic.zprior_scales(p)
    r_y, r_z = sic.latent_rates(y_hat, mu, sigma, z_hat, p["sic.zprior.mu"], zs)
    x = work.transpose(2, 0, 1)[None].astype(np.int64)
    raw = smem.predict_raw(p, x, f, pmask[None])
    bits = nll_bits(raw, x, model.config.K, model.config.shared_mixture).data[0]
    H, W = hw
    coded = np.zeros(bits.shape, dtype=bool)
    coded[:H, :W] = True
    if roi:
        coded &= pmask != 0
    return {"R_y": r_y, "R_z": r_z, "R_pixel": float(bits[coded].sum())}


def read_header(blob: bytes) -> Header:
    head = Header.unpack(blob)
    need = HEADER_BYTES + sum(head.lengths)
    if len(blob) < need:
        raise FormatError(f"truncated stream: {len(blob)} bytes, header promises {need}")
    if len(blob) > need:
        raise FormatError(f"{len(blob) - need} trailing bytes after the last section")
    return head


def decode_image(blob: bytes, model: SeecModel) -> np.ndarray:
    cfg = model.config
    head = read_header(blob)
    if head.model_hash != model.model_hash():
        raise ModelMismatchError("stream was encoded with different weights (model hash mismatch)")
    if head.n_classes != cfg.N or head.K != cfg.K:
        raise ModelMismatchError("header N/K disagree with the model")
    if (head.pad_h, head.pad_w) != pad_amounts(head.height, head.width):
        raise FormatError("inconsistent padding fields")
    pos = HEADER_BYTES
    parts = []
    for n in head.lengths:
        parts.append(blob[pos : pos + n])
        pos += n
    z_b, y_b, m_b, p_b = parts
    H, W = head.height, head.width
    Hp, Wp = H + head.pad_h, W + head.pad_w
    lim = cfg.y_clamp
    y_shape = (1, cfg.c_y, Hp // sic.STRIDE, Wp // sic.STRIDE)
    z_shape = (1, cfg.c_z, _hyper_size(y_shape[2]), _hyper_size(y_shape[3]))
    z_hat = (decode_symbols(z_b, _z_tables(model, z_shape)) - lim).astype(np.float64).reshape(z_shape)
    mu, sigma = hyper_side(model, z_hat, y_shape[2:])
    y_hat = (decode_symbols(y_b, _y_tables(model, mu, sigma)) - lim).astype(np.float64).reshape(y_shape)
    mask = decompress_mask(m_b, H, W, head.n_classes)
    pmask = pad_image(mask.ids, head.pad_h, head.pad_w).astype(np.int64)
    f = sic.synthesize(model.params, y_hat).data
    img = smem.decode_pixels(
        model.params, p_b, pmask, f, cfg.K, cfg.shared_mixture, head.roi, *_source_maps(H, W, head.pad_h, head.pad_w)
    )
    return img[:H, :W].copy()


def decode_mask(blob: bytes) -> MaskMap:
    head = read_header(blob)
    pos = HEADER_BYTES + head.lengths[0] + head.lengths[1]
    return decompress_mask(blob[pos : pos + head.lengths[2]], head.height, head.width, head.n_classes)
