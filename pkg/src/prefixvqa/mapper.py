"""Mapping network: one pooled image feature -> a visual prefix of token embeddings."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .checkpoint import read_checkpoint, write_checkpoint
from .errors import CheckpointError, ConfigError, DimensionError
from .tensor import Tensor

FEATURE_DIM = 512


@dataclass(frozen=True)
class MapperConfig:
    embed_dim: int
    prefix_len: int = 8
    feature_dim: int = FEATURE_DIM
    seed: int = 0

    @property
    def widths(self) -> tuple[int, int, int]:
        out = self.prefix_len * self.embed_dim
        return self.feature_dim, out // 2, out

    def validate(self) -> None:
        if self.prefix_len < 1 or self.embed_dim < 1:
            raise ConfigError("prefix_len and embed_dim must be positive")
        if (self.prefix_len * self.embed_dim) % 2:
            raise ConfigError(f"prefix_len*embed_dim = {self.prefix_len * self.embed_dim} must be even")

    def to_dict(self) -> dict:
        return asdict(self)


class Mapper:
    """Two affine maps with a GELU between them: 512 -> (l*e)/2 -> l*e."""

    def __init__(self, cfg: MapperConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params

    def trainable(self) -> dict[str, Tensor]:
        return {f"mapper.{k}": v for k, v in self.params.items()}

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def raw(self, feats: Tensor) -> Tensor:
        if feats.shape[-1] != self.cfg.feature_dim:
            raise DimensionError(f"feature length {feats.shape[-1]} != {self.cfg.feature_dim}")
        P = self.params
        h = T.gelu(T.linear(feats, P["fc1.w"], P["fc1.b"]))
        return T.linear(h, P["fc2.w"], P["fc2.b"])

    def __call__(self, feats) -> Tensor:
        """(512,) -> (l, e) or (B, 512) -> (B, l, e)."""
        feats = feats if isinstance(feats, Tensor) else Tensor(feats)
        out = self.raw(feats)
        shape = out.shape[:-1] + (self.cfg.prefix_len, self.cfg.embed_dim)
        return T.reshape(out, shape)


def init_mapper(cfg: MapperConfig) -> Mapper:
    cfg.validate()
    d_in, d_hid, d_out = cfg.widths
    rng = np.random.default_rng(cfg.seed)
    params = {
        "fc1.w": Tensor(rng.normal(0.0, 0.02, (d_hid, d_in)), requires_grad=True, name="fc1.w"),
        "fc1.b": Tensor(np.zeros(d_hid), requires_grad=True, name="fc1.b"),
        "fc2.w": Tensor(rng.normal(0.0, 0.02, (d_out, d_hid)), requires_grad=True, name="fc2.w"),
        "fc2.b": Tensor(np.zeros(d_out), requires_grad=True, name="fc2.b"),
    }
    return Mapper(cfg, params)


def map_features(mapper: Mapper, feat) -> Tensor:
    feat = feat if isinstance(feat, Tensor) else Tensor(feat)
    if feat.ndim != 1 or feat.shape[0] != mapper.cfg.feature_dim:
        raise DimensionError(f"visual feature must have length {mapper.cfg.feature_dim}, got shape {feat.shape}")
    return mapper(feat)


def save_mapper(mapper: Mapper, path) -> None:
    write_checkpoint(path, {"kind": "mapper", "mapper": mapper.cfg.to_dict()},
                     {k: v.data for k, v in mapper.params.items()})


def load_mapper(path) -> Mapper:
    config, tensors = read_checkpoint(path)
    if config.get("kind") != "mapper":
        raise CheckpointError(f"{path}: not a mapper checkpoint")
    mapper = init_mapper(MapperConfig(**config["mapper"]))
    for k, p in mapper.params.items():
        if k not in tensors or tensors[k].shape != p.shape:
            raise CheckpointError(f"{path}: mapper tensor {k!r} missing or misshapen")
        p.data = tensors[k]
    return mapper
