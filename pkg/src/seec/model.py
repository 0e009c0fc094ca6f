"""Model configuration and the weight bundle shared by codec and trainer."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import ndtensor as nd
from . import sic, smem
from .dlm import DEFAULT_K


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters; all of them are stored in checkpoints."""

    K: int = DEFAULT_K
    N: int = 2
    c_hidden: int = 64
    c_y: int = 64
    c_z: int = 32
    c_f: int = 64
    c_ctx: int = 32
    c_fused: int = 64
    c_head: int = 64
    y_clamp: int = 64
    single_head: bool = False
    shared_mixture: bool = False

    def __post_init__(self):
        if not 1 <= self.K <= 10:
            raise ValueError(f"K must be in [1, 10], got {self.K}")
        if not 1 <= self.N <= 255:
            raise ValueError(f"N must be in [1, 255], got {self.N}")
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type in ("int", int) and v <= 0:
                raise ValueError(f"{f.name} must be positive, got {v}")
        if self.y_clamp > 127:
            raise ValueError("y_clamp must be at most 127")

    @property
    def n_heads(self) -> int:
        return 1 if self.single_head else self.N

    @property
    def head_width(self) -> int:
        if not self.single_head:
            return self.c_head
        return smem.matched_head_width(self.c_fused, self.c_head, self.K, self.N, self.shared_mixture)

    def to_meta(self) -> dict[str, np.ndarray]:
        return {f"meta.{k}": np.array(float(v)) for k, v in asdict(self).items()}

    @classmethod
    def from_meta(cls, params: dict) -> "ModelConfig":
        kw = {}
        for f in fields(cls):
            key = f"meta.{f.name}"
            if key not in params:
                raise ValueError(f"checkpoint lacks {key}")
            v = float(np.asarray(params[key]).reshape(-1)[0])
            kw[f.name] = bool(v) if f.type in ("bool", bool) else int(v)
        return cls(**kw)


class SeecModel:
    """Configuration plus named float64 weight arrays."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items() if not k.startswith("meta.")}

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "SeecModel":
        rng = np.random.default_rng(seed)
        p = sic.init_params(rng, config.c_hidden, config.c_y, config.c_z, config.c_f)
        p.update(
            smem.init_params(
                rng, config.c_f, config.c_ctx, config.c_fused, config.head_width,
                config.K, config.n_heads, config.shared_mixture,
            )
        )
        return cls(config, p)

    def state(self) -> dict[str, np.ndarray]:
        out = dict(self.params)
        out.update(self.config.to_meta())
        return out

    def checkpoint_bytes(self) -> bytes:
        return nd.checkpoint_bytes(self.state())

    def model_hash(self) -> bytes:
        """128-bit digest of the canonical checkpoint bytes."""
        return hashlib.blake2b(self.checkpoint_bytes(), digest_size=16).digest()

    def save(self, path) -> bytes:
        return nd.save_checkpoint(path, self.state())

    @classmethod
    def load(cls, path) -> "SeecModel":
        return cls.from_state(nd.load_checkpoint(path))

    @classmethod
    def from_state(cls, state: dict) -> "SeecModel":
        return cls(ModelConfig.from_meta(state), state)

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))
