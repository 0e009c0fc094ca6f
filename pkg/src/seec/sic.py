"""Latent path: analysis/synthesis transforms, hyper-prior and latent rates.

g_a is four 5x5 stride-2 convolutions (so latents sit at 1/16 resolution),
g_s mirrors it with transposed convolutions, h_a is two more stride-2
convolutions and h_s two transposed ones emitting a mean and a raw scale per
latent channel. Leaky-ReLU sits between layers, never after the last one.
"""

from __future__ import annotations

import math

import numba
import numpy as np

from . import ndtensor as nd
from .dlm import quantize_pmf
from .ndtensor import Tensor

SIGMA_MIN = 0.11
RATE_FLOOR = 1e-12
LOG_RATE_FLOOR = math.log(RATE_FLOOR)
LN2 = math.log(2.0)
STRIDE = 16


def _conv_init(rng, o, c, k, gain=math.sqrt(2.0)):
    return rng.normal(0.0, gain / math.sqrt(c * k * k), size=(o, c, k, k))


def init_params(rng: np.random.Generator, c_hidden: int, c_y: int, c_z: int, c_f: int) -> dict:
    p: dict[str, np.ndarray] = {}
    chans = [3, c_hidden, c_hidden, c_hidden, c_y]
    for i in range(4):
        gain = 1.0 if i == 3 else math.sqrt(2.0)
        p[f"sic.ga.{i}.w"] = _conv_init(rng, chans[i + 1], chans[i], 5, gain)
        p[f"sic.ga.{i}.b"] = np.zeros(chans[i + 1])
    chans = [c_y, c_hidden, c_hidden, c_hidden, c_f]
    for i in range(4):
        # transposed kernels are (in, out, k, k); 4 taps land on each output pixel
        p[f"sic.gs.{i}.w"] = _conv_init(rng, chans[i + 1], chans[i], 5).transpose(1, 0, 2, 3) * 2.0
        p[f"sic.gs.{i}.b"] = np.zeros(chans[i + 1])
    p["sic.ha.0.w"] = _conv_init(rng, c_z, c_y, 5)
    p["sic.ha.0.b"] = np.zeros(c_z)
    p["sic.ha.1.w"] = _conv_init(rng, c_z, c_z, 5, 1.0)
    p["sic.ha.1.b"] = np.zeros(c_z)
    p["sic.hs.0.w"] = _conv_init(rng, c_z, c_z, 5).transpose(1, 0, 2, 3) * 2.0
    p["sic.hs.0.b"] = np.zeros(c_z)
    p["sic.hs.1.w"] = _conv_init(rng, 2 * c_y, c_z, 5, 0.1).transpose(1, 0, 2, 3)
    b = np.zeros(2 * c_y)
    b[c_y:] = 1.0  # sigma starts near softplus(1) + SIGMA_MIN
    p["sic.hs.1.b"] = b
    p["sic.zprior.mu"] = np.zeros(c_z)
    p["sic.zprior.raw_s"] = np.full(c_z, 0.5413)  # softplus^-1(1.0)
    return p


def _wb(params, name: str):
    return nd.as_tensor(params[name + ".w"]), nd.as_tensor(params[name + ".b"])


def _down(t: Tensor, params, prefix: str, n: int) -> Tensor:
    for i in range(n):
        w, b = _wb(params, f"{prefix}.{i}")
        t = nd.conv2d(t, w, b, stride=2, pad=2)
        if i < n - 1:
            t = nd.leaky_relu(t)
    return t


def _up(t: Tensor, params, prefix: str, n: int) -> Tensor:
    for i in range(n):
        w, b = _wb(params, f"{prefix}.{i}")
        t = nd.conv_transpose2d(t, w, b, stride=2, pad=2, output_padding=1)
        if i < n - 1:
            t = nd.leaky_relu(t)
    return t


def analyze(params, x_norm) -> Tensor:
    """(B,3,H,W) on [-1,1] -> latent (B,C_y,H/16,W/16); H, W multiples of 16."""
    x_norm = nd.as_tensor(x_norm)
    if x_norm.shape[2] % STRIDE or x_norm.shape[3] % STRIDE:
        raise nd.ContractError(f"spatial size {x_norm.shape[2:]} is not a multiple of {STRIDE}")
    return _down(x_norm, params, "sic.ga", 4)


def synthesize(params, y_hat) -> Tensor:
    """Latent -> features at 16x the latent resolution."""
    return _up(nd.as_tensor(y_hat), params, "sic.gs", 4)


def hyper_analyze(params, y) -> Tensor:
    return _down(nd.as_tensor(y), params, "sic.ha", 2)


def hyper_synthesize(params, z_hat: Tensor, y_hw: tuple[int, int]) -> tuple[Tensor, Tensor]:
    """Gaussian (mean, sigma) for every latent element, cropped to ``y_hw``."""
    out = _up(nd.as_tensor(z_hat), params, "sic.hs", 2)
    H, W = y_hw
    out = out[:, :, :H, :W]
    c_y = out.shape[1] // 2
    mu = out[:, :c_y]
    sigma = nd.softplus(out[:, c_y:]) + SIGMA_MIN
    return mu, sigma


def quantize(t, mode: str, rng: np.random.Generator | None = None):
    """``noise`` adds U(-1/2, 1/2) (training); ``round`` rounds half away from zero.

    Accepts a Tensor (noise keeps the graph) or an ndarray.
    """
    data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    if mode == "noise":
        if rng is None:
            raise ValueError("noise quantization needs a generator")
        u = rng.uniform(-0.5, 0.5, size=data.shape)
        return t + Tensor(u) if isinstance(t, Tensor) else data + u
    if mode == "round":
        r = np.sign(data) * np.floor(np.abs(data) + 0.5)
        return Tensor(r) if isinstance(t, Tensor) else r
    raise ValueError(f"unknown quantization mode {mode!r}")


def zprior_scales(params) -> np.ndarray:
    return np.logaddexp(0.0, params["sic.zprior.raw_s"]) + 1e-3


# -- rates -------------------------------------------------------------------


def _log_mass(upper: Tensor, lower: Tensor, log_cdf) -> Tensor:
    flip = (upper.data + lower.data) > 0
    u = nd.where(flip, -lower, upper)
    v = nd.where(flip, -upper, lower)
    lu = log_cdf(u)
    return lu + nd.log(-nd.expm1(log_cdf(v) - lu))


def gaussian_bits(y: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    """Elementwise -log2 of the unit bin around y under N(mu, sigma)."""
    lm = _log_mass((y + 0.5 - mu) / sigma, (y - 0.5 - mu) / sigma, nd.log_ndtr)
    return nd.maximum(lm, LOG_RATE_FLOOR) * (-1.0 / LN2)


def logistic_bits(z: Tensor, mu: Tensor, s: Tensor) -> Tensor:
    lm = _log_mass((z + 0.5 - mu) / s, (z - 0.5 - mu) / s, nd.log_sigmoid)
    return nd.maximum(lm, LOG_RATE_FLOOR) * (-1.0 / LN2)


def zprior_tensors(params, shape) -> tuple[Tensor, Tensor]:
    """Broadcast the per-channel z prior over a (B, C_z, h, w) shape."""
    mu = nd.as_tensor(params["sic.zprior.mu"])
    s = nd.softplus(nd.as_tensor(params["sic.zprior.raw_s"])) + 1e-3
    rs = lambda t: nd.broadcast_to(t.reshape(1, -1, 1, 1), shape)
    return rs(mu), rs(s)


def latent_rates(y_hat, mu, sigma, z_hat, z_mu, z_s) -> tuple[float, float]:
    """(R_y, R_z) in bits for quantized latents; arrays, no gradients."""
    as_t = lambda a: Tensor(np.asarray(a, dtype=np.float64))
    ry = gaussian_bits(as_t(y_hat), as_t(mu), as_t(sigma)).data.sum()
    zb = np.broadcast_to(np.asarray(z_mu).reshape(1, -1, 1, 1), np.shape(z_hat))
    sb = np.broadcast_to(np.asarray(z_s).reshape(1, -1, 1, 1), np.shape(z_hat))
    rz = logistic_bits(as_t(z_hat), as_t(zb), as_t(sb)).data.sum()
    return float(ry), float(rz)


# -- coding tables -------------------------------------------------------------


@numba.njit(cache=True)
def _ndtr(t):
    return 0.5 * math.erfc(-t / math.sqrt(2.0))


@numba.njit(cache=True)
def _sigm(t):
    if t >= 0:
        return 1.0 / (1.0 + math.exp(-t))
    e = math.exp(t)
    return e / (1.0 + e)


@numba.njit(cache=True)
def latent_cdfs(mu, scale, lo, alphabet, gaussian):
    """One quantized table per element over symbols lo..lo+alphabet-1.

    The outer symbols absorb the tails. Gaussian when ``gaussian`` else logistic.
    """
    n = mu.shape[0]
    out = np.empty((n, alphabet + 1), dtype=np.int64)
    pmf = np.empty(alphabet)
    for i in range(n):
        prev = 0.0
        for a in range(alphabet - 1):
            t = (lo + a + 0.5 - mu[i]) / scale[i]
            F = _ndtr(t) if gaussian else _sigm(t)
            p = F - prev
            pmf[a] = p if p > 0.0 else 0.0
            prev = F if F > prev else prev
        last = 1.0 - prev
        pmf[alphabet - 1] = last if last > 0.0 else 0.0
        quantize_pmf(pmf, out[i])
    return out

