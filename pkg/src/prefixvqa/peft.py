"""Parameter-efficient adapters over a frozen :class:`TransformerLM`.

Four variants: ``frozen`` (no LM parameters train), ``prompt`` (m learnable
input embeddings prepended to the sequence), ``prefix`` (p learnable
key/value vectors per attention layer) and ``lora`` (low-rank updates to the
query/value projections).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .checkpoint import read_checkpoint, write_checkpoint
from .errors import CheckpointError, ConfigError, LengthError, VariantError
from .lm import AttentionExtras, ModelConfig, TransformerLM, count_parameters
from .tensor import Tensor

VARIANTS = ("frozen", "prompt", "prefix", "lora")


@dataclass(frozen=True)
class PeftConfig:
    variant: str = "frozen"
    n_virtual: int = 30  # prompt tuning m
    prefix_len: int = 50  # prefix tuning p
    rank: int = 8
    alpha: float = 16.0
    targets: tuple[str, ...] = ("q", "v")
    seed: int = 0

    def validate(self, model_cfg: ModelConfig | None = None) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown PEFT variant {self.variant!r}; expected one of {VARIANTS}")
        if self.variant == "prompt" and self.n_virtual < 1:
            raise ConfigError("prompt tuning needs at least one virtual token")
        if self.variant == "prefix" and self.prefix_len < 1:
            raise ConfigError("prefix tuning needs prefix length >= 1")
        if self.variant == "lora":
            if self.rank < 1:
                raise ConfigError("LoRA rank must be positive")
            if not self.targets or not set(self.targets) <= {"q", "v"}:
                raise ConfigError(f"LoRA targets must be a nonempty subset of {{q, v}}, got {self.targets}")
            if model_cfg is not None and self.rank > model_cfg.embed_dim:
                raise ConfigError(f"LoRA rank {self.rank} exceeds embed_dim {model_cfg.embed_dim}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["targets"] = list(self.targets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> PeftConfig:
        d = dict(d)
        if "targets" in d:
            d["targets"] = tuple(d["targets"])
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def adapter_shapes(model_cfg: ModelConfig, cfg: PeftConfig) -> dict[str, tuple[int, ...]]:
    e, L = model_cfg.embed_dim, model_cfg.n_layers
    if cfg.variant == "prompt":
        return {"prompt": (cfg.n_virtual, e)}
    if cfg.variant == "prefix":
        shapes = {}
        for j in range(L):
            shapes[f"prefix.{j}.k"] = (cfg.prefix_len, e)
            shapes[f"prefix.{j}.v"] = (cfg.prefix_len, e)
        return shapes
    if cfg.variant == "lora":
        shapes = {}
        for j in range(L):
            for t in cfg.targets:
                shapes[f"lora.{j}.{t}.A"] = (cfg.rank, e)
                shapes[f"lora.{j}.{t}.B"] = (e, cfg.rank)
        return shapes
    return {}


def parameter_budget(model_cfg: ModelConfig, cfg: PeftConfig) -> tuple[int, float]:
    """(trainable LM parameters, percent of total LM parameters) without allocating."""
    cfg.validate(model_cfg)
    count = sum(math.prod(s) for s in adapter_shapes(model_cfg, cfg).values())
    return count, 100.0 * count / count_parameters(model_cfg)


class AdaptedModel:
    """A frozen base model plus the adapter tensors of one PEFT variant."""

    def __init__(self, base: TransformerLM, cfg: PeftConfig, adapter: dict[str, Tensor]):
        self.base = base
        self.cfg = cfg
        self.adapter = adapter

    @property
    def config(self) -> ModelConfig:
        return self.base.config

    @property
    def variant(self) -> str:
        return self.cfg.variant

    def trainable(self) -> dict[str, Tensor]:
        return dict(self.adapter)

    def extras(self) -> AttentionExtras:
        ex = AttentionExtras()
        if self.variant == "prefix":
            ex.prefix_kv = [prefix_extend(j, self.adapter[f"prefix.{j}.k"], self.adapter[f"prefix.{j}.v"])
                            for j in range(self.config.n_layers)]
        elif self.variant == "lora":
            for j in range(self.config.n_layers):
                for t in self.cfg.targets:
                    ex.lora[(j, t)] = (self.adapter[f"lora.{j}.{t}.A"], self.adapter[f"lora.{j}.{t}.B"],
                                       self.cfg.alpha, self.cfg.rank)
        elif self.variant == "prompt":
            ex.n_virtual = self.cfg.n_virtual
        return ex

    def forward(self, embedded: Tensor, key_mask=None) -> Tensor:
        """Logits aligned with ``embedded`` (virtual prompt rows are dropped)."""
        ex = self.extras()
        if ex.n_virtual:
            single = embedded.ndim == 2
            x = T.reshape(embedded, (1,) + embedded.shape) if single else embedded
            m = ex.n_virtual
            x = prompt_prepend(self.adapter["prompt"], x, self.config.max_positions)
            if key_mask is not None:
                km = np.asarray(key_mask, dtype=bool).reshape(x.shape[0], -1)
                key_mask = np.concatenate([np.ones((x.shape[0], m), dtype=bool), km], axis=1)
            logits = self.base.forward(x, ex, key_mask)
            logits = T.slice_(logits, 1, m, logits.shape[1])
            return T.reshape(logits, logits.shape[1:]) if single else logits
        return self.base.forward(embedded, ex, key_mask)

    def embed_tokens(self, ids) -> Tensor:
        return self.base.embed_tokens(ids)


def attach_adapter(base: TransformerLM, cfg: PeftConfig) -> AdaptedModel:
    """Freeze ``base`` and graft freshly initialized adapter tensors onto it."""
    cfg.validate(base.config)
    base.freeze()
    rng = np.random.default_rng(cfg.seed)
    adapter: dict[str, Tensor] = {}
    for name, shape in adapter_shapes(base.config, cfg).items():
        data = np.zeros(shape) if name.endswith(".B") else rng.normal(0.0, 0.02, size=shape)
        adapter[name] = Tensor(data, requires_grad=True, name=name)
    return AdaptedModel(base, cfg, adapter)


def prefix_extend(layer_index: int, keys: Tensor, values: Tensor) -> tuple[Tensor, Tensor]:
    if keys.ndim != 2 or keys.shape != values.shape or keys.shape[0] < 1:
        raise ConfigError(f"layer {layer_index}: bad prefix shapes {keys.shape}/{values.shape}")
    return keys, values


def prompt_prepend(prompt: Tensor, embedded: Tensor, max_positions: int | None = None) -> Tensor:
    """``[M, p]`` along the sequence axis; ``embedded`` may be (n, e) or (B, n, e)."""
    m = prompt.shape[0]
    if m < 1:
        raise ConfigError("prompt_prepend needs m >= 1")
    n = embedded.shape[-2]
    if max_positions is not None and m + n > max_positions:
        raise LengthError(f"{m} virtual + {n} real tokens exceed max_positions {max_positions}")
    if embedded.ndim == 2:
        return T.concat([prompt, embedded], axis=0)
    return T.concat([T.expand(prompt, (embedded.shape[0],)), embedded], axis=1)


def merge_lora(adapted) -> TransformerLM:
    """Fold ``(alpha/r) B A`` into the base projections; returns a plain model."""
    if not isinstance(adapted, AdaptedModel) or adapted.variant != "lora":
        raise VariantError("merge_lora needs a LoRA-adapted model")
    merged = adapted.base.copy()
    scaling = adapted.cfg.alpha / adapted.cfg.rank
    for j in range(merged.config.n_layers):
        for t in adapted.cfg.targets:
            a = adapted.adapter[f"lora.{j}.{t}.A"].data
            b = adapted.adapter[f"lora.{j}.{t}.B"].data
            w = merged.params[f"h.{j}.attn.{t}.w"]
            w.data = w.data + scaling * (b @ a)
    merged.freeze()
    return merged


def trainable_parameter_count(adapted: AdaptedModel) -> tuple[int, float]:
    """Adapter parameters inside the LM (the mapper is not counted) and their share in percent."""
    count = sum(t.data.size for t in adapted.adapter.values())
    return count, 100.0 * count / adapted.base.parameter_count()


def save_adapter(adapted: AdaptedModel, path) -> None:
    write_checkpoint(path, {"kind": "adapter", "peft": adapted.cfg.to_dict(),
                            "model": adapted.config.to_dict()},
                     {k: v.data for k, v in adapted.adapter.items()})


def load_adapter(base: TransformerLM, path) -> AdaptedModel:
    config, tensors = read_checkpoint(path)
    if config.get("kind") != "adapter":
        raise CheckpointError(f"{path}: not an adapter checkpoint")
    cfg = PeftConfig.from_dict(config["peft"])
    try:
        cfg.validate(base.config)
    except ConfigError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    expected = adapter_shapes(base.config, cfg)
    if set(tensors) != set(expected) or any(tensors[k].shape != s for k, s in expected.items()):
        raise CheckpointError(f"{path}: adapter tensors do not fit base model {base.config}")
    saved = config.get("model", {})
    if saved.get("embed_dim") != base.config.embed_dim or saved.get("n_layers") != base.config.n_layers:
        raise CheckpointError(f"{path}: adapter was saved for a different base shape")
    base.freeze()
    adapter = {k: Tensor(tensors[k], requires_grad=True, name=k) for k in expected}
    return AdaptedModel(base, cfg, adapter)
