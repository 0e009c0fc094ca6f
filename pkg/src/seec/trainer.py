"""Rate-objective training, the synthetic two-region corpus, and ablations."""

from __future__ import annotations

import copy
import io
import math
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable

import numpy as np

from . import ndtensor as nd
from . import sic, smem
from .dlm import nll_bits, normalize
from .model import ModelConfig, SeecModel
from .ndtensor import Tensor


class TrainingError(RuntimeError):
    """Training produced a NaN loss or diverged."""


@dataclass(frozen=True)
class TrainConfig:
    K: int = 5
    N: int = 2
    c_hidden: int = 64
    c_y: int = 64
    c_z: int = 32
    c_f: int = 64
    c_ctx: int = 32
    c_fused: int = 64
    c_head: int = 64
    batch_size: int = 32
    patch_size: int = 64
    lr: float = 1e-4
    lr_decay: float = 0.9
    patience: int = 1
    epochs: int = 30
    steps_per_epoch: int = 0  # 0 means one full pass over the training set
    seed: int = 0
    n_train: int = 512
    n_val: int = 64
    mask_cells: int = 4  # SynthCorpus mask grid; more cells give more region boundary per patch
    clip_norm: float = 10.0
    log_every: int = 50
    single_head: bool = False
    shared_mixture: bool = False

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("steps_per_epoch", "seed", "log_every"):
                if v < 0:
                    raise ValueError(f"{f.name} must be non-negative, got {v}")
            elif f.type not in ("bool", bool) and not v > 0:
                raise ValueError(f"{f.name} must be positive, got {v}")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")
        if self.patch_size % sic.STRIDE:
            raise ValueError(f"patch_size must be a multiple of {sic.STRIDE}")

    def model_config(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: v for k, v in asdict(self).items() if k in names})


# -- configuration files ---------------------------------------------------------------


def _coerce(name: str, kind, text: str):
    text = text.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        text = text[1:-1]
    if kind in ("bool", bool):
        low = text.lower()
        if low not in ("true", "false", "1", "0"):
            raise ValueError(f"{name}: expected true/false, got {text!r}")
        return low in ("true", "1")
    if kind in ("int", int):
        return int(text)
    return float(text)


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Read ``key = value`` lines (``#`` comments, optional ``[section]`` headers).

    Unknown keys are an error.
    """
    base = base or TrainConfig()
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        try:
            updates[key] = _coerce(key, kinds[key], value)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return replace(base, **updates)


def format_config(cfg: TrainConfig) -> str:
    out = []
    for k, v in asdict(cfg).items():
        out.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(out) + "\n"


# -- synthetic corpus ---------------------------------------------------------------------


def _smooth_field(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    """Bilinear upsampling of a cells x cells Gaussian grid to size x size."""
    g = rng.normal(size=(cells + 1, cells + 1))
    t = np.linspace(0, cells, size)
    i = np.minimum(t.astype(int), cells - 1)
    fr = t - i
    rows = g[i] * (1 - fr)[:, None] + g[i + 1] * fr[:, None]
    return rows[:, i] * (1 - fr)[None, :] + rows[:, i + 1] * fr[None, :]


def region_mask(rng: np.random.Generator, size: int, cells: int = 4) -> np.ndarray:
    """Random two-region mask with a wiggly boundary; never a single class."""
    while True:
        m = (_smooth_field(rng, size, cells) > 0).astype(np.uint8)
        share = m.mean()
        if 0.2 <= share <= 0.8:
            return m


def synth_image(rng: np.random.Generator, mask: np.ndarray) -> np.ndarray:
    """Class 0: smooth colour gradient plus N(0, 2^2). Class 1: N(0, 40^2)
    texture around a per-image colour shift. Returns (3, H, W) uint8."""
    size = mask.shape[0]
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    base = rng.uniform(60, 190, size=3)[:, None, None]
    slope = rng.uniform(-50, 50, size=(3, 2))
    smooth = base + slope[:, 0, None, None] * yy + slope[:, 1, None, None] * xx
    smooth = smooth + rng.normal(0, 2.0, size=smooth.shape)
    shift = rng.uniform(70, 185, size=3)[:, None, None]
    texture = shift + rng.normal(0, 40.0, size=smooth.shape)
    img = np.where(mask[None] == 1, texture, smooth)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


@dataclass
class SynthCorpus:
    """Images (n, 3, S, S) uint8 and their exact generating masks (n, S, S)."""

    images: np.ndarray
    masks: np.ndarray

    @classmethod
    def generate(cls, n: int, size: int = 64, seed: int = 0, cells: int = 4) -> "SynthCorpus":
        rng = np.random.default_rng(seed)
        masks = np.stack([region_mask(rng, size, cells) for _ in range(n)])
        images = np.stack([synth_image(rng, m) for m in masks])
        return cls(images, masks)

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, idx) -> "SynthCorpus":
        return SynthCorpus(self.images[idx], self.masks[idx])


def corpus_for(cfg: TrainConfig) -> tuple[SynthCorpus, SynthCorpus]:
    full = SynthCorpus.generate(cfg.n_train + cfg.n_val, cfg.patch_size, seed=cfg.seed, cells=cfg.mask_cells)
    return full.subset(slice(0, cfg.n_train)), full.subset(slice(cfg.n_train, None))


def order0_entropy_bpp(images: np.ndarray) -> float:
    """Empirical entropy of a per-channel order-0 histogram, summed over channels."""
    total = 0.0
    for c in range(images.shape[1]):
        counts = np.bincount(images[:, c].ravel(), minlength=256).astype(np.float64)
        p = counts[counts > 0] / counts.sum()
        total += float(-(p * np.log2(p)).sum())
    return total


# -- objective ---------------------------------------------------------------------------------


@dataclass
class LossTerms:
    R_y: float
    R_z: float
    R_pixel: float
    pixels: int

    @property
    def bpp(self) -> float:
        return (self.R_y + self.R_z + self.R_pixel) / self.pixels


def total_loss(params, mcfg: ModelConfig, x: np.ndarray, mask: np.ndarray, rng: np.random.Generator):
    """Noise-relaxed rate in bits per pixel for a batch x (B, 3, H, W) uint8.

    ``params`` maps names to Tensors (trainable) or arrays. Returns the scalar
    loss Tensor and the three rate terms in bits.
    """
    x = np.asarray(x)
    B, _, H, W = x.shape
    xn = normalize(x)
    y = sic.analyze(params, xn)
    y_t = sic.quantize(y, "noise", rng)
    z_t = sic.quantize(sic.hyper_analyze(params, y_t), "noise", rng)
    mu, sigma = sic.hyper_synthesize(params, z_t, y.shape[2:])
    r_y = sic.gaussian_bits(y_t, mu, sigma).sum()
    zmu, zs = sic.zprior_tensors(params, z_t.shape)
    r_z = sic.logistic_bits(z_t, zmu, zs).sum()
    f = sic.synthesize(params, y_t)
    f_s = smem.fuse(params, f, smem.context_features(params, xn))
    raw = smem.route_and_predict(params, f_s, mask)
    r_pix = nll_bits(raw, x.astype(np.int64), mcfg.K, mcfg.shared_mixture).sum()
    pixels = B * H * W
    loss = (r_y + r_z + r_pix) * (1.0 / pixels)
    return loss, LossTerms(float(r_y.data), float(r_z.data), float(r_pix.data), pixels)


def evaluate_bpp(model: SeecModel, images: np.ndarray, masks: np.ndarray, batch: int = 16) -> LossTerms:
    """Rate with rounded latents, the quantity the codec actually pays for."""
    p = model.params
    cfg = model.config
    lim = cfg.y_clamp
    ry = rz = rp = 0.0
    for s in range(0, images.shape[0], batch):
        x = images[s : s + batch].astype(np.int64)
        m = masks[s : s + batch]
        y_hat = np.clip(sic.quantize(sic.analyze(p, normalize(x)).data, "round"), -lim, lim - 1)
        z_hat = np.clip(sic.quantize(sic.hyper_analyze(p, y_hat).data, "round"), -lim, lim - 1)
        mu, sigma = sic.hyper_synthesize(p, z_hat, y_hat.shape[2:])
        a, b = sic.latent_rates(y_hat, mu.data, sigma.data, z_hat, p["sic.zprior.mu"], sic.zprior_scales(p))
        f = sic.synthesize(p, y_hat)
        raw = smem.predict_raw(p, x, f, m)
        ry += a
        rz += b
        rp += float(nll_bits(raw, x, cfg.K, cfg.shared_mixture).data.sum())
    return LossTerms(ry, rz, rp, int(np.prod(images.shape[:1] + images.shape[2:])))


# -- optimisation ------------------------------------------------------------------------


class Adam:
    def __init__(self, names, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor]) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for name, t in params.items():
            g = t.grad
            if g is None:
                continue  # e.g. a head whose class was absent from the batch
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            t.data = t.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    model: SeecModel
    history: list = field(default_factory=list)
    best_val: float = math.inf
    steps: int = 0


def _log(msg: str, stream) -> None:
    if stream is not None:
        print(msg, file=stream, flush=True)


def train(
    cfg: TrainConfig,
    corpus: tuple[SynthCorpus, SynthCorpus] | None = None,
    log: io.TextIOBase | None = sys.stderr,
    on_step: Callable[[int, LossTerms], None] | None = None,
) -> TrainResult:
    """Adam on the noise-relaxed rate; keeps the best validation checkpoint."""
    train_set, val_set = corpus if corpus is not None else corpus_for(cfg)
    mcfg = cfg.model_config()
    model = SeecModel.init(mcfg, cfg.seed)
    params = {k: Tensor(v.copy(), requires_grad=True) for k, v in model.params.items()}
    opt = Adam(params, cfg.lr)
    rng = np.random.default_rng([cfg.seed, 1])
    n = len(train_set)
    bs = min(cfg.batch_size, n)
    per_epoch = cfg.steps_per_epoch or max(1, n // bs)
    result = TrainResult(SeecModel(mcfg, model.params))
    best = None
    stale = 0
    init_loss = None
    above = 0
    step = 0
    order = np.empty(0, dtype=np.int64)
    for epoch in range(cfg.epochs):
        for _ in range(per_epoch):
            if order.size < bs:
                order = np.concatenate([order, rng.permutation(n)])
            idx, order = order[:bs], order[bs:]
            for t in params.values():
                t.zero_grad()
            loss, terms = total_loss(params, mcfg, train_set.images[idx], train_set.masks[idx], rng)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(
                    f"non-finite loss at step {step}: R_y={terms.R_y} R_z={terms.R_z} R_pixel={terms.R_pixel}"
                )
            init_loss = value if init_loss is None else init_loss
            above = above + 1 if value > 2 * init_loss else 0
            if above >= 50:
                raise TrainingError(f"diverged: loss above twice the initial {init_loss:.3f} for 50 steps")
            loss.backward()
            _clip(params, cfg.clip_norm)
            opt.step(params)
            step += 1
            if on_step is not None:
                on_step(step, terms)
            if cfg.log_every and step % cfg.log_every == 0:
                _log(
                    f"step={step} loss={value:.4f} R_y={terms.R_y / terms.pixels:.4f} "
                    f"R_z={terms.R_z / terms.pixels:.4f} R_pixel={terms.R_pixel / terms.pixels:.4f} lr={opt.lr:.3g}",
                    log,
                )
        current = SeecModel(mcfg, {k: t.data.copy() for k, t in params.items()})
        val = evaluate_bpp(current, val_set.images, val_set.masks).bpp
        result.history.append({"epoch": epoch + 1, "step": step, "val_bpp": val, "lr": opt.lr})
        _log(f"epoch={epoch + 1} val_bpp={val:.4f} lr={opt.lr:.3g}", log)
        if val < result.best_val:
            result.best_val = val
            best = current
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                opt.lr *= cfg.lr_decay
                stale = 0
    result.model = best if best is not None else SeecModel(mcfg, {k: t.data.copy() for k, t in params.items()})
    result.steps = step
    return result


def _clip(params: dict[str, Tensor], max_norm: float) -> None:
    sq = sum(float((t.grad**2).sum()) for t in params.values() if t.grad is not None)
    norm = math.sqrt(sq)
    if norm > max_norm:
        scale = max_norm / norm
        for t in params.values():
            if t.grad is not None:
                t.grad = t.grad * scale


# -- ablation --------------------------------------------------------------------------------

ARMS = {
    "smem_on_mcdlm_on": dict(single_head=False, shared_mixture=False),
    "smem_off_mcdlm_on": dict(single_head=True, shared_mixture=False),
    "smem_on_mcdlm_off": dict(single_head=False, shared_mixture=True),
    "smem_off_mcdlm_off": dict(single_head=True, shared_mixture=True),
}
MASK_VARIANTS = ("correct", "random", "inverted")


def mask_variant(masks: np.ndarray, kind: str, seed: int, n_classes: int = 2, cells: int = 4) -> np.ndarray:
    if kind == "correct":
        return masks
    if kind == "inverted":
        if n_classes != 2:
            raise ValueError("inverted masks are defined for two classes")
        return (1 - masks).astype(masks.dtype)
    if kind == "random":
        rng = np.random.default_rng([seed, 7])
        return np.stack([region_mask(rng, masks.shape[1], cells) for _ in range(masks.shape[0])])
    raise ValueError(f"unknown mask variant {kind!r}")


@dataclass
class AblationReport:
    rows: list = field(default_factory=list)  # (arm, mask, bpp, n_params)
    meta: dict = field(default_factory=dict)

    def bpp(self, arm: str, mask: str = "correct") -> float:
        for a, m, b, _ in self.rows:
            if a == arm and m == mask:
                return b
        raise KeyError((arm, mask))

    def text(self) -> str:
        lines = [f"{k}={v}" for k, v in self.meta.items()]
        lines += [f"bpp.{a}.{m}={b:.6f}" for a, m, b, _ in self.rows]
        lines += [f"params.{a}={p}" for a, m, b, p in self.rows if m == "correct"]
        return "\n".join(lines) + "\n"

    def csv(self) -> str:
        out = ["arm,mask,bpp,params"]
        out += [f"{a},{m},{b:.6f},{p}" for a, m, b, p in self.rows]
        return "\n".join(out) + "\n"


def ablate(
    cfg: TrainConfig,
    arms: tuple[str, ...] = tuple(ARMS),
    mask_arm: str = "smem_on_mcdlm_on",
    log: io.TextIOBase | None = sys.stderr,
) -> tuple[AblationReport, dict[str, SeecModel]]:
    """Train every arm on the same corpus, seed and step budget, then evaluate.

    Mask variants are evaluated on ``mask_arm`` only.
    """
    for a in arms:
        if a not in ARMS:
            raise ValueError(f"unknown arm {a!r}")
    corpus = corpus_for(cfg)
    val = corpus[1]
    report = AblationReport(meta={"seed": cfg.seed, "epochs": cfg.epochs, "batch_size": cfg.batch_size})
    models = {}
    for a in arms:
        _log(f"arm={a} training", log)
        res = train(replace(cfg, **ARMS[a]), corpus, log=log)
        models[a] = res.model
        kinds = MASK_VARIANTS if a == mask_arm else ("correct",)
        for kind in kinds:
            m = mask_variant(val.masks, kind, cfg.seed, cfg.N, cfg.mask_cells)
            b = evaluate_bpp(res.model, val.images, m).bpp
            report.rows.append((a, kind, b, res.model.n_parameters()))
            _log(f"arm={a} mask={kind} bpp={b:.4f}", log)
    report.meta["order0_entropy_bpp"] = round(order0_entropy_bpp(val.images), 6)
    return report, models


def clone(model: SeecModel) -> SeecModel:
    return SeecModel(model.config, copy.deepcopy(model.params))
