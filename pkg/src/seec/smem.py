"""Mask-gated entropy models over fused latent and context features.

The context network is a type-A 5x5 masked convolution, leaky-ReLU, then a
type-B 5x5 masked convolution (one network shared by all classes). Latent
features f and context C_x go through separate 1x1 projections that are summed
and passed through leaky-ReLU to give f_s. Each class owns a head of two 1x1
layers turning f_s into mixture parameters; a pixel only ever sees the head of
its own class.

Two evaluation paths exist. :func:`predict_raw` computes every pixel's head
output at once from a known image (training and the full-recompute oracle).
:func:`encode_pixels` and :func:`decode_pixels` share one compiled kernel
that walks the image in raster order and builds the context incrementally, so
the tables the encoder and decoder construct are identical bit for bit.
"""

from __future__ import annotations

import math

import numba
import numpy as np

from . import coder
from . import ndtensor as nd
from .dlm import S_MIN, head_channels, nll_bits, normalize, pixel_argmax, pixel_cdf
from .ndtensor import ContractError, Tensor


def matched_head_width(c_fused: int, c_head: int, K: int, N: int, shared: bool) -> int:
    """Hidden width of one head whose parameter count equals N heads of width c_head."""
    O = head_channels(K, shared)
    per_head = c_fused * c_head + c_head + c_head * O + O
    return max(1, round((N * per_head - O) / (c_fused + 1 + O)))


def _spread_means(K: int) -> np.ndarray:
    return np.linspace(-0.8, 0.8, K) if K > 1 else np.zeros(1)


def init_params(
    rng: np.random.Generator,
    c_f: int,
    c_ctx: int,
    c_fused: int,
    c_head: int,
    K: int,
    n_heads: int,
    shared: bool,
) -> dict:
    """Fresh weights. Head outputs start close to a flat pmf over [0, 255]."""
    g = math.sqrt(2.0)
    p: dict[str, np.ndarray] = {}
    p["smem.ctx.a.w"] = rng.normal(0, g / math.sqrt(3 * 12), size=(c_ctx, 3, 5, 5))
    p["smem.ctx.a.b"] = np.zeros(c_ctx)
    p["smem.ctx.b.w"] = rng.normal(0, g / math.sqrt(c_ctx * 13), size=(c_ctx, c_ctx, 5, 5))
    p["smem.ctx.b.b"] = np.zeros(c_ctx)
    p["smem.fuse.f.w"] = rng.normal(0, 1 / math.sqrt(c_f), size=(c_fused, c_f, 1, 1))
    p["smem.fuse.f.b"] = np.zeros(c_fused)
    p["smem.fuse.c.w"] = rng.normal(0, 1 / math.sqrt(c_ctx), size=(c_fused, c_ctx, 1, 1))
    p["smem.fuse.c.b"] = np.zeros(c_fused)
    O = head_channels(K, shared)
    nw = K if shared else 3 * K
    bias = np.zeros(O)
    bias[nw : nw + 3 * K] = np.tile(_spread_means(K), 3)
    bias[nw + 3 * K : nw + 6 * K] = math.log(math.expm1(0.25 - S_MIN))
    for n in range(n_heads):
        p[f"smem.head.{n}.0.w"] = rng.normal(0, g / math.sqrt(c_fused), size=(c_head, c_fused, 1, 1))
        p[f"smem.head.{n}.0.b"] = np.zeros(c_head)
        p[f"smem.head.{n}.1.w"] = rng.normal(0, 0.01 / math.sqrt(c_head), size=(O, c_head, 1, 1))
        p[f"smem.head.{n}.1.b"] = bias.copy()
    return p


def _p(params, name):
    return nd.as_tensor(params[name])


def context_features(params, x_norm) -> Tensor:
    """Causal context C_x from a normalized image (B, 3, H, W)."""
    h = nd.masked_conv2d(nd.as_tensor(x_norm), _p(params, "smem.ctx.a.w"), _p(params, "smem.ctx.a.b"), "A")
    h = nd.leaky_relu(h)
    return nd.masked_conv2d(h, _p(params, "smem.ctx.b.w"), _p(params, "smem.ctx.b.b"), "B")


def fuse(params, f, c_x) -> Tensor:
    f, c_x = nd.as_tensor(f), nd.as_tensor(c_x)
    if f.shape[0] != c_x.shape[0] or f.shape[2:] != c_x.shape[2:]:
        raise ContractError(f"feature shapes {f.shape} and {c_x.shape} disagree")
    a = nd.conv2d(f, _p(params, "smem.fuse.f.w"), _p(params, "smem.fuse.f.b"))
    b = nd.conv2d(c_x, _p(params, "smem.fuse.c.w"), _p(params, "smem.fuse.c.b"))
    return nd.leaky_relu(a + b)


def head_forward(params, n: int, feats: Tensor) -> Tensor:
    """Apply head n to a (B, C, H, W) feature map."""
    h = nd.conv2d(feats, _p(params, f"smem.head.{n}.0.w"), _p(params, f"smem.head.{n}.0.b"))
    return nd.conv2d(nd.leaky_relu(h), _p(params, f"smem.head.{n}.1.w"), _p(params, f"smem.head.{n}.1.b"))


def n_heads(params) -> int:
    n = 0
    while f"smem.head.{n}.0.w" in params:
        n += 1
    return n


def route_and_predict(params, f_s, mask) -> Tensor:
    """Head output (B, O, H, W) where pixel i takes head mask[i].

    With a single head every pixel uses it regardless of the mask. Heads whose
    class is absent are never evaluated.
    """
    f_s = nd.as_tensor(f_s)
    B, C, H, W = f_s.shape
    nh = n_heads(params)
    if nh == 1:
        return head_forward(params, 0, f_s)
    mask = np.asarray(mask)
    if mask.shape != (B, H, W):
        raise ContractError(f"mask shape {mask.shape} does not match features {f_s.shape}")
    if mask.size and (mask.min() < 0 or mask.max() >= nh):
        raise ValueError(f"mask class ids must lie in [0, {nh})")
    flat = f_s.transpose(1, 0, 2, 3).reshape(C, B * H * W)
    labels = mask.reshape(-1)
    outs, order = [], []
    for n in range(nh):
        idx = np.flatnonzero(labels == n)
        if idx.size == 0:
            continue
        cols = nd.take(flat, idx, axis=1).reshape(1, C, 1, idx.size)
        outs.append(head_forward(params, n, cols).reshape(-1, idx.size))
        order.append(idx)
    perm = np.concatenate(order)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    cat = outs[0] if len(outs) == 1 else nd.concat(outs, axis=1)
    out = nd.take(cat, inv, axis=1)
    return out.reshape(-1, B, H, W).transpose(1, 0, 2, 3)


def predict_raw(params, x: np.ndarray, f, mask) -> Tensor:
    """Full-recompute head output for integer images x (B, 3, H, W)."""
    c_x = context_features(params, normalize(x))
    return route_and_predict(params, fuse(params, f, c_x), mask)


def pixel_rate(x: np.ndarray, raw, mask, K: int, shared: bool, n_classes: int):
    """(total bits, per-class bit subtotals) for integer images under head output raw."""
    bits = nll_bits(nd.as_tensor(raw), x, K, shared).data
    mask = np.asarray(mask)
    per_class = [float(bits[mask == n].sum()) for n in range(n_classes)]
    return float(bits.sum()), per_class


# -- streaming path ----------------------------------------------------------------

_TAPS_A = np.array([(i - 2, j - 2) for i in range(5) for j in range(5) if nd.causal_mask(5, 5, "A")[i, j]], dtype=np.int64)
_TAPS_B = np.array([(i - 2, j - 2) for i in range(5) for j in range(5) if nd.causal_mask(5, 5, "B")[i, j]], dtype=np.int64)


def stream_weights(params) -> tuple:
    """Repack weights for the per-pixel kernel (taps first, output channel last)."""
    wa = params["smem.ctx.a.w"]
    wb = params["smem.ctx.b.w"]
    tap = lambda w, taps: np.ascontiguousarray(
        np.stack([w[:, :, di + 2, dj + 2].T for di, dj in taps])
    )
    nh = n_heads(params)
    w1 = np.stack([params[f"smem.head.{n}.0.w"][:, :, 0, 0].T for n in range(nh)])
    b1 = np.stack([params[f"smem.head.{n}.0.b"] for n in range(nh)])
    w2 = np.stack([params[f"smem.head.{n}.1.w"][:, :, 0, 0].T for n in range(nh)])
    b2 = np.stack([params[f"smem.head.{n}.1.b"] for n in range(nh)])
    return (
        tap(wa, _TAPS_A),
        np.ascontiguousarray(params["smem.ctx.a.b"]),
        tap(wb, _TAPS_B),
        np.ascontiguousarray(params["smem.ctx.b.b"]),
        np.ascontiguousarray(params["smem.fuse.c.w"][:, :, 0, 0].T),
        np.ascontiguousarray(w1),
        np.ascontiguousarray(b1),
        np.ascontiguousarray(w2),
        np.ascontiguousarray(b2),
    )


def feature_projection(params, f: np.ndarray) -> np.ndarray:
    """conv1x1_a(f) plus both fusion biases, channels last: (H, W, C_fused)."""
    wf = params["smem.fuse.f.w"][:, :, 0, 0]
    C = f.shape[1]
    cols = np.ascontiguousarray(f[0].reshape(C, -1).T)
    out = cols @ wf.T + params["smem.fuse.f.b"] + params["smem.fuse.c.b"]
    return np.ascontiguousarray(out.reshape(f.shape[2], f.shape[3], -1))


@numba.njit(cache=True, inline="always")
def _leaky(v):
    return v if v > 0.0 else 0.01 * v


@numba.njit(cache=True)
def _unpack(out, K, shared, log_w, means, scales, coeffs):
    G = 1 if shared else 3
    for g in range(G):
        top = -np.inf
        for k in range(K):
            if out[g * K + k] > top:
                top = out[g * K + k]
        tot = 0.0
        for k in range(K):
            tot += math.exp(out[g * K + k] - top)
        lt = math.log(tot)
        for k in range(K):
            log_w[g, k] = out[g * K + k] - top - lt
    nw = G * K
    for c in range(3):
        for k in range(K):
            means[c, k] = out[nw + c * K + k]
            r = out[nw + 3 * K + c * K + k]
            scales[c, k] = max(r, 0.0) + math.log1p(math.exp(-abs(r))) + S_MIN
            coeffs[c, k] = math.tanh(out[nw + 6 * K + c * K + k])


@numba.njit(cache=True)
def _stream(img, mask, fproj, wa, ba, taps_a, wb, bb, taps_b, wcx, w1, b1, w2, b2,
            rmap, cmap, K, shared, roi, decode, data, buf, st):
    H, W = mask.shape
    Cc = ba.shape[0]
    F = fproj.shape[2]
    Hd = b1.shape[1]
    O = b2.shape[1]
    G = 1 if shared else 3
    nh = b1.shape[0]
    h1 = np.zeros((H, W, Cc))
    cx = np.empty(Cc)
    fs = np.empty(F)
    hid = np.empty(Hd)
    out = np.empty(O)
    log_w = np.empty((G, K))
    means = np.empty((3, K))
    scales = np.empty((3, K))
    coeffs = np.empty((3, K))
    wk = np.empty(K)
    mk = np.empty(K)
    pmf = np.empty(256)
    cdf = np.empty(257, dtype=np.int64)
    for r in range(H):
        for c in range(W):
            # layer A at (r, c): reads only raster-earlier pixels
            for o in range(Cc):
                cx[o] = ba[o]
            for t in range(taps_a.shape[0]):
                rr = r + taps_a[t, 0]
                cc = c + taps_a[t, 1]
                if rr < 0 or cc < 0 or cc >= W:
                    continue
                for ch in range(3):
                    v = img[rr, cc, ch] / 127.5 - 1.0
                    for o in range(Cc):
                        cx[o] += wa[t, ch, o] * v
            for o in range(Cc):
                h1[r, c, o] = _leaky(cx[o])
            if rmap[r] != r or cmap[c] != c:
                # padding: a copy of an earlier pixel, never coded
                for ch in range(3):
                    img[r, c, ch] = img[rmap[r], cmap[c], ch]
                continue
            # layer B includes the centre tap
            for o in range(Cc):
                cx[o] = bb[o]
            for t in range(taps_b.shape[0]):
                rr = r + taps_b[t, 0]
                cc = c + taps_b[t, 1]
                if rr < 0 or cc < 0 or cc >= W:
                    continue
                for i in range(Cc):
                    v = h1[rr, cc, i]
                    for o in range(Cc):
                        cx[o] += wb[t, i, o] * v
            for o in range(F):
                fs[o] = fproj[r, c, o]
            for i in range(Cc):
                v = cx[i]
                for o in range(F):
                    fs[o] += wcx[i, o] * v
            for o in range(F):
                fs[o] = _leaky(fs[o])
            n = mask[r, c] if nh > 1 else 0
            for j in range(Hd):
                hid[j] = b1[n, j]
            for i in range(F):
                v = fs[i]
                for j in range(Hd):
                    hid[j] += w1[n, i, j] * v
            for o in range(O):
                out[o] = b2[n, o]
            for j in range(Hd):
                v = _leaky(hid[j])
                for o in range(O):
                    out[o] += w2[n, j, o] * v
            _unpack(out, K, shared, log_w, means, scales, coeffs)
            if roi and mask[r, c] == 0:
                xr, xg, xb = pixel_argmax(log_w, means, scales, coeffs, shared)
                img[r, c, 0] = xr
                img[r, c, 1] = xg
                img[r, c, 2] = xb
                continue
            for ch in range(3):
                pixel_cdf(log_w, means, scales, coeffs, shared, ch, img[r, c, 0], img[r, c, 1], wk, mk, pmf, cdf)
                if decode:
                    img[r, c, ch] = coder.dec_decode_cdf(data, st, cdf)
                else:
                    coder.enc_encode_cdf(buf, st, img[r, c, ch], cdf)
    if decode:
        return 0
    return coder.enc_finish(buf, st)


def _check_stream_inputs(params, mask, f, K, shared):
    H, W = mask.shape
    if f.shape[0] != 1 or f.shape[2:] != (H, W):
        raise ContractError(f"features {f.shape} do not cover a {H}x{W} image")
    if head_channels(K, shared) != params["smem.head.0.1.b"].shape[0]:
        raise ContractError("K / mixture layout disagrees with the head width")


def _maps(mask, src_rows, src_cols):
    H, W = mask.shape
    rows = np.arange(H) if src_rows is None else np.asarray(src_rows)
    cols = np.arange(W) if src_cols is None else np.asarray(src_cols)
    if rows.shape != (H,) or cols.shape != (W,):
        raise ContractError("source maps must cover every row and column")
    if np.any(rows > np.arange(H)) or np.any(cols > np.arange(W)):
        raise ContractError("a padded pixel must copy an earlier one")
    return rows.astype(np.int64), cols.astype(np.int64)


def encode_pixels(params, img, mask, f, K: int, shared: bool, roi: bool, src_rows=None, src_cols=None):
    """Code the pixel stream of an (H, W, 3) uint8 image.

    Pixel (r, c) with src_rows[r] != r or src_cols[c] != c is padding: it is
    not coded and must equal pixel (src_rows[r], src_cols[c]).
    Returns (stream bytes, working image). In ROI mode the working image holds
    the argmax reconstructions of skipped pixels, which is what the decoder
    will produce.
    """
    mask = np.ascontiguousarray(mask, dtype=np.int64)
    _check_stream_inputs(params, mask, f, K, shared)
    work = np.ascontiguousarray(img, dtype=np.int64).copy()
    buf = np.zeros(coder.buffer_capacity(3 * mask.size), dtype=np.uint8)
    n = _stream(
        work, mask, feature_projection(params, f), *_unpack_weights(params),
        *_maps(mask, src_rows, src_cols), K, shared, roi, False, np.zeros(1, dtype=np.uint8), buf, coder.enc_init(),
    )
    return buf[:n].tobytes(), work.astype(np.uint8)


def decode_pixels(params, data: bytes, mask, f, K: int, shared: bool, roi: bool, src_rows=None, src_cols=None) -> np.ndarray:
    mask = np.ascontiguousarray(mask, dtype=np.int64)
    _check_stream_inputs(params, mask, f, K, shared)
    H, W = mask.shape
    img = np.zeros((H, W, 3), dtype=np.int64)
    arr = np.frombuffer(bytes(data), dtype=np.uint8)
    _stream(
        img, mask, feature_projection(params, f), *_unpack_weights(params),
        *_maps(mask, src_rows, src_cols), K, shared, roi, True, arr, np.zeros(1, dtype=np.uint8), coder.dec_init(arr),
    )
    return img.astype(np.uint8)


def _unpack_weights(params):
    wa, ba, wb, bb, wcx, w1, b1, w2, b2 = stream_weights(params)
    return wa, ba, _TAPS_A, wb, bb, _TAPS_B, wcx, w1, b1, w2, b2
