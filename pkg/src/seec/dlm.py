"""Multi-channel discretized logistic mixture likelihood.

Pixel values x in {0..255} live on the network's [-1, 1] scale as
``x / 127.5 - 1``; a bin is that value +- 1/255. Means, scales and the
autoregressive conditioning values all use this scale, so the green mean is
shifted by ``beta_r * (x_r / 127.5 - 1)`` and so on. :func:`bin_probability`
is the one function that speaks pixel units directly.

Two parameter layouts exist. The channel-specific layout carries one set of
mixture logits per colour channel and factorises the pixel as
p(r) p(g|r) p(b|r,g), each a K-component mixture. The shared layout is the
classic single-weight variant where the K components are joint over the three
channels, which makes the conditional weights for g and b posterior weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from . import ndtensor as nd
from .ndtensor import Tensor

S_MIN = 1e-3 / 127.5  # 1e-3 in pixel-value units, expressed on the [-1, 1] scale
HALF_BIN = 1.0 / 255.0
PROB_FLOOR = 1e-12
LOG_FLOOR = float(np.log(PROB_FLOOR))
CDF_BITS = 16
CDF_TOTAL = 1 << CDF_BITS
DEFAULT_K = 5
_EDGE = 1e100  # stands in for +-inf at the clipped outer bins
_TAIL = 40.0  # sigmoid(-40) ~ 4e-18, below any representable table count

LN2 = float(np.log(2.0))


def normalize(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) / 127.5 - 1.0


def head_channels(K: int, shared: bool = False) -> int:
    """Output channels an entropy head emits for K components."""
    return (K if shared else 3 * K) + 9 * K


@dataclass
class DlmParams:
    """Per-pixel mixture parameters, leading axes are arbitrary.

    ``log_weights``: (..., 3, K), or (..., 1, K) when ``shared``.
    ``means`` and ``scales``: (..., 3, K) on the [-1, 1] scale.
    ``coeffs``: (..., 3, K) holding beta_r, beta_g, beta_b along axis -2.
    """

    log_weights: np.ndarray
    means: np.ndarray
    scales: np.ndarray
    coeffs: np.ndarray
    shared: bool = False

    @property
    def K(self) -> int:
        return self.means.shape[-1]

    def at(self, idx) -> "DlmParams":
        return DlmParams(
            self.log_weights[idx], self.means[idx], self.scales[idx], self.coeffs[idx], self.shared
        )

    @classmethod
    def from_raw(cls, raw: np.ndarray, K: int, shared: bool = False) -> "DlmParams":
        """Build from head output with channels on axis 0: (C, ...)."""
        raw = np.asarray(raw, dtype=np.float64)
        rest = raw.shape[1:]
        nw = K if shared else 3 * K
        groups = raw.shape[0]
        if groups != head_channels(K, shared):
            raise ValueError(f"expected {head_channels(K, shared)} channels, got {groups}")
        move = lambda a, c: np.moveaxis(a.reshape((c, K) + rest), (0, 1), (-2, -1))
        logits = move(raw[:nw], 1 if shared else 3)
        logits = logits - logits.max(axis=-1, keepdims=True)
        log_w = logits - np.log(np.exp(logits).sum(axis=-1, keepdims=True))
        means = move(raw[nw : nw + 3 * K], 3)
        scales = np.logaddexp(0.0, move(raw[nw + 3 * K : nw + 6 * K], 3)) + S_MIN
        coeffs = np.tanh(move(raw[nw + 6 * K :], 3))
        return cls(log_w, means, scales, coeffs, shared)

    def validate(self) -> None:
        w = np.exp(self.log_weights)
        if not np.allclose(w.sum(axis=-1), 1.0, atol=1e-9):
            raise ValueError("mixture weights must sum to one")
        if np.any(self.scales < S_MIN * (1 - 1e-12)):
            raise ValueError("scales below S_MIN")
        if np.any(np.abs(self.coeffs) > 1.0):
            raise ValueError("coefficients outside [-1, 1]")


# -- scalar building blocks ---------------------------------------------------


def _sigmoid(t):
    return 0.5 * (1.0 + np.tanh(0.5 * t))


def bin_probability(x, mu, s):
    """Mass of integer pixel value x under a logistic with mean mu, scale s.

    All arguments in pixel units. The outer bins absorb the tails.
    """
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    hi = np.where(x >= 255, np.inf, (x + 0.5 - mu) / s)
    lo = np.where(x <= 0, -np.inf, (x - 0.5 - mu) / s)
    # evaluate on the side of the mean where the CDF is small, avoiding cancellation
    flip = (hi + lo) > 0
    u = np.where(flip, -lo, hi)
    v = np.where(flip, -hi, lo)
    out = _sigmoid(u) - _sigmoid(v)
    return out if out.ndim else float(out)


def conditional_means(means, coeffs, x_r, x_g):
    """Channel-autoregressive means; x_r, x_g on the same scale as ``means``.

    means, coeffs: (..., 3, K). Returns an array of the same shape.
    """
    means = np.asarray(means, dtype=np.float64)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    x_r = np.asarray(x_r, dtype=np.float64)[..., None]
    x_g = np.asarray(x_g, dtype=np.float64)[..., None]
    out = means.copy()
    out[..., 1, :] = means[..., 1, :] + coeffs[..., 0, :] * x_r
    out[..., 2, :] = means[..., 2, :] + coeffs[..., 1, :] * x_r + coeffs[..., 2, :] * x_g
    return out


# -- jitted kernels shared by the codec ------------------------------------------


@numba.njit(cache=True, inline="always")
def _sig(t):
    if t >= 0:
        return 1.0 / (1.0 + np.exp(-t))
    e = np.exp(t)
    return e / (1.0 + e)


@numba.njit(cache=True)
def mixture_pmf(weights, mu_hat, scales, pmf):
    """Fill pmf[0..255] with the mixture mass per bin, via CDF differences at
    the 255 interior edges so the masses telescope to exactly one.

    Along the edges t grows by a constant step, so exp(-t) is carried forward
    by one multiplication instead of a fresh exp per edge.
    """
    K = weights.shape[0]
    for v in range(255):
        pmf[v] = 0.0
    for k in range(K):
        wk = weights[k]
        inv = 1.0 / scales[k]
        # edges with t <= -TAIL add nothing, edges with t > TAIL add the full weight
        lo = int(np.floor((mu_hat[k] + 1.0 - _TAIL * scales[k]) * 127.5 - 0.5)) + 1
        hi = int(np.floor((mu_hat[k] + 1.0 + _TAIL * scales[k]) * 127.5 - 0.5)) + 1
        lo = min(max(lo, 0), 255)
        hi = min(max(hi, lo), 255)
        if hi > lo:
            q = np.exp(-inv / 127.5)
            u = np.exp(-((lo + 0.5) / 127.5 - 1.0 - mu_hat[k]) * inv)
            for v in range(lo, hi):
                pmf[v] += wk / (1.0 + u)
                u *= q
        for v in range(hi, 255):
            pmf[v] += wk
    # pmf[v] now holds the CDF at edge v; difference it in place
    prev = 0.0
    for v in range(255):
        F = pmf[v]
        p = F - prev
        pmf[v] = p if p > 0.0 else 0.0
        prev = F if F > prev else prev
    wsum = 0.0
    for k in range(K):
        wsum += weights[k]
    last = wsum - prev
    pmf[255] = last if last > 0.0 else 0.0


@numba.njit(cache=True)
def quantize_pmf(pmf, cdf):
    """Quantize a pmf into a 16-bit cumulative table with every count >= 1.

    Counts start as round(p * 2^16) floored at one. A deficit goes to the
    largest bin (lowest index among equals), and so does an excess whenever
    that bin can absorb it while keeping a count of one. Otherwise the excess
    is taken back one count at a time, sweeping bins in order of decreasing
    count and skipping bins at one.
    """
    n = pmf.shape[0]
    total = np.int64(0)
    best = 0
    for v in range(n):
        c = np.int64(np.floor(pmf[v] * CDF_TOTAL + 0.5))
        if c < 1:
            c = 1
        cdf[v + 1] = c
        total += c
        if c > cdf[best + 1]:
            best = v
    diff = total - CDF_TOTAL
    if diff < cdf[best + 1]:
        cdf[best + 1] -= diff
    else:
        counts = cdf[1:].copy()
        order = np.argsort(-counts, kind="mergesort")
        while diff > 0:
            for i in range(n):
                j = order[i]
                if counts[j] > 1:
                    counts[j] -= 1
                    diff -= 1
                    if diff == 0:
                        break
        cdf[1:] = counts
    cdf[0] = 0
    for v in range(n):
        cdf[v + 1] += cdf[v]


@numba.njit(cache=True, inline="always")
def _log_sig(t):
    if t >= 0:
        return -np.log1p(np.exp(-t))
    return t - np.log1p(np.exp(t))


@numba.njit(cache=True)
def component_mass(v, mu, s):
    """Single-logistic mass of bin v (normalized units), cancellation-free."""
    xn = v / 127.5 - 1.0
    hi = (xn + HALF_BIN - mu) / s
    lo = (xn - HALF_BIN - mu) / s
    if v == 0:
        return _sig(hi)
    if v == 255:
        return _sig(-lo)
    if hi + lo > 0:
        return _sig(-lo) - _sig(-hi)
    return _sig(hi) - _sig(lo)


@numba.njit(cache=True)
def argmax_channel(weights, mu_hat, scales):
    """Most probable bin of a mixture channel; ties go to the smaller value."""
    K = weights.shape[0]
    best = -1.0
    arg = 0
    for v in range(256):
        p = 0.0
        for k in range(K):
            p += weights[k] * component_mass(v, mu_hat[k], scales[k])
        if p > best:
            best = p
            arg = v
    return arg


@numba.njit(cache=True)
def channel_weights_and_means(log_w, means, coeffs, scales, shared, c, xr, xg, w_out, mu_out):
    """Weights and conditional means for channel c given decoded r (xr) and g (xg).

    xr, xg are integer pixel values; unused ones may be anything.
    """
    K = means.shape[1]
    xrn = xr / 127.5 - 1.0
    xgn = xg / 127.5 - 1.0
    for k in range(K):
        if c == 0:
            mu_out[k] = means[0, k]
        elif c == 1:
            mu_out[k] = means[1, k] + coeffs[0, k] * xrn
        else:
            mu_out[k] = means[2, k] + coeffs[1, k] * xrn + coeffs[2, k] * xgn
    if not shared:
        for k in range(K):
            w_out[k] = np.exp(log_w[c, k])
        return
    # joint mixture: posterior component weights given the channels already seen
    acc = np.empty(K)
    top = -np.inf
    for k in range(K):
        a = log_w[0, k]
        if c >= 1:
            a += np.log(max(component_mass(xr, means[0, k], scales[0, k]), 1e-300))
        if c >= 2:
            mg = means[1, k] + coeffs[0, k] * xrn
            a += np.log(max(component_mass(xg, mg, scales[1, k]), 1e-300))
        acc[k] = a
        if a > top:
            top = a
    tot = 0.0
    for k in range(K):
        acc[k] = np.exp(acc[k] - top)
        tot += acc[k]
    for k in range(K):
        w_out[k] = acc[k] / tot


@numba.njit(cache=True)
def pixel_cdf(log_w, means, scales, coeffs, shared, c, xr, xg, w, mu, pmf, cdf):
    channel_weights_and_means(log_w, means, coeffs, scales, shared, c, xr, xg, w, mu)
    mixture_pmf(w, mu, scales[c], pmf)
    quantize_pmf(pmf, cdf)


@numba.njit(cache=True)
def pixel_argmax(log_w, means, scales, coeffs, shared):
    K = means.shape[1]
    w = np.empty(K)
    mu = np.empty(K)
    channel_weights_and_means(log_w, means, coeffs, scales, shared, 0, 0, 0, w, mu)
    r = argmax_channel(w, mu, scales[0])
    channel_weights_and_means(log_w, means, coeffs, scales, shared, 1, r, 0, w, mu)
    g = argmax_channel(w, mu, scales[1])
    channel_weights_and_means(log_w, means, coeffs, scales, shared, 2, r, g, w, mu)
    b = argmax_channel(w, mu, scales[2])
    return r, g, b


# -- per-pixel public API -------------------------------------------------------


def _pixel_arrays(params: DlmParams):
    return (
        np.ascontiguousarray(params.log_weights, dtype=np.float64),
        np.ascontiguousarray(params.means, dtype=np.float64),
        np.ascontiguousarray(params.scales, dtype=np.float64),
        np.ascontiguousarray(params.coeffs, dtype=np.float64),
    )


def channel_pmf(params: DlmParams, channel: int, x_r: int = 0, x_g: int = 0) -> np.ndarray:
    """256-bin pmf of one channel of one pixel, given the earlier channels."""
    lw, mu, s, cf = _pixel_arrays(params)
    K = mu.shape[1]
    w, m, pmf = np.empty(K), np.empty(K), np.empty(256)
    channel_weights_and_means(lw, mu, cf, s, params.shared, channel, int(x_r), int(x_g), w, m)
    mixture_pmf(w, m, s[channel], pmf)
    return pmf


def build_cdf_table(params: DlmParams, channel: int, x_r: int = 0, x_g: int = 0) -> np.ndarray:
    """Quantized 257-entry cumulative table for one channel of one pixel."""
    lw, mu, s, cf = _pixel_arrays(params)
    K = mu.shape[1]
    cdf = np.empty(257, dtype=np.int64)
    pixel_cdf(lw, mu, s, cf, params.shared, channel, int(x_r), int(x_g), np.empty(K), np.empty(K), np.empty(256), cdf)
    return cdf


def cdf_from_pmf(pmf) -> np.ndarray:
    pmf = np.ascontiguousarray(pmf, dtype=np.float64)
    cdf = np.empty(pmf.shape[0] + 1, dtype=np.int64)
    quantize_pmf(pmf, cdf)
    return cdf


def argmax_sample(params: DlmParams) -> tuple[int, int, int]:
    """Channel-sequential mode (r, then g given r, then b given r and g)."""
    lw, mu, s, cf = _pixel_arrays(params)
    r, g, b = pixel_argmax(lw, mu, s, cf, params.shared)
    return int(r), int(g), int(b)


# -- differentiable likelihood ---------------------------------------------------


def log_bin_mass(upper: Tensor, lower: Tensor) -> Tensor:
    """log(sigmoid(upper) - sigmoid(lower)) for upper > lower, evaluated on the
    tail side so neither cancellation nor underflow occurs."""
    flip = (upper.data + lower.data) > 0
    u = nd.where(flip, -lower, upper)
    v = nd.where(flip, -upper, lower)
    lu = nd.log_sigmoid(u)
    return lu + nd.log(-nd.expm1(nd.log_sigmoid(v) - lu))


def _split_raw(raw: Tensor, K: int, shared: bool):
    """(B, C, H, W) head output -> logits (B,G,K,H,W), means/log-scales/coeffs (B,3,K,H,W)."""
    B, C, H, W = raw.shape
    nw = K if shared else 3 * K
    G = 1 if shared else 3
    logits = raw[:, :nw].reshape(B, G, K, H, W)
    means = raw[:, nw : nw + 3 * K].reshape(B, 3, K, H, W)
    scales = nd.softplus(raw[:, nw + 3 * K : nw + 6 * K].reshape(B, 3, K, H, W)) + S_MIN
    coeffs = nd.tanh(raw[:, nw + 6 * K :].reshape(B, 3, K, H, W))
    return logits, means, scales, coeffs


def _const(a) -> Tensor:
    return Tensor(np.ascontiguousarray(a))


def nll_bits(raw: Tensor, x: np.ndarray, K: int, shared: bool = False) -> Tensor:
    """Per-pixel code length in bits, shape (B, H, W).

    raw: head output (B, C, H, W); x: integer image (B, 3, H, W).
    Channel-specific: each channel's mixture mass is floored at 1e-12.
    Shared: the joint pixel mass is floored at 1e-36.
    """
    x = np.asarray(x)
    B, _, H, W = raw.shape
    if x.shape != (B, 3, H, W):
        raise nd.ContractError(f"image shape {x.shape} does not match params {raw.shape}")
    logits, means, scales, coeffs = _split_raw(raw, K, shared)
    return _nll_core(nd.log_softmax(logits, axis=2), means, scales, coeffs, x, shared)


def _nll_core(log_w, means, scales, coeffs, x, shared):
    B, _, K, H, W = means.shape
    xn = normalize(x)
    xk = lambda c: np.broadcast_to(xn[:, c : c + 1], (B, K, H, W))
    mr = means[:, 0]
    mg = means[:, 1] + coeffs[:, 0] * _const(xk(0))
    mb = means[:, 2] + coeffs[:, 1] * _const(xk(0)) + coeffs[:, 2] * _const(xk(1))
    mu_hat = nd.stack([mr, mg, mb], axis=1)

    xb = np.broadcast_to(xn[:, :, None], (B, 3, K, H, W))
    xi = np.broadcast_to(x[:, :, None], (B, 3, K, H, W))
    up = nd.where(xi >= 255, _const(np.full(xb.shape, _EDGE)), (_const(xb + HALF_BIN) - mu_hat) / scales)
    lo = nd.where(xi <= 0, _const(np.full(xb.shape, -_EDGE)), (_const(xb - HALF_BIN) - mu_hat) / scales)
    log_mass = log_bin_mass(up, lo)
    if shared:
        joint = log_w.reshape(B, K, H, W) + log_mass.sum(axis=1)
        logp = nd.maximum(nd.logsumexp(joint, axis=1), 3 * LOG_FLOOR)
    else:
        per_channel = nd.maximum(nd.logsumexp(log_w + log_mass, axis=2), LOG_FLOOR)
        logp = per_channel.sum(axis=1)
    return logp * (-1.0 / LN2)


def pixel_log_likelihood(params: DlmParams, x_r, x_g, x_b) -> np.ndarray:
    """log2 p(x_r) + log2 p(x_g|x_r) + log2 p(x_b|x_r,x_g), vectorised over pixels.

    ``params`` fields have shape (..., 3, K); x_* broadcast against the
    leading axes.
    """
    lead = params.means.shape[:-2]
    n = int(np.prod(lead)) if lead else 1
    x = np.stack([np.broadcast_to(np.asarray(v), lead).reshape(n) for v in (x_r, x_g, x_b)])
    # (..., G, K) -> (1, G, K, 1, n)
    as5 = lambda a: Tensor(np.moveaxis(np.asarray(a, dtype=np.float64).reshape((n,) + a.shape[-2:]), 0, -1)[None, :, :, None])
    bits = _nll_core(
        as5(params.log_weights),
        as5(params.means),
        as5(params.scales),
        as5(params.coeffs),
        x.reshape(1, 3, 1, n),
        params.shared,
    ).data
    return -bits.reshape(lead) if lead else -float(bits.ravel()[0])
