"""Decoder-only causal transformer (GPT-2 layout) over pre-embedded inputs."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import read_checkpoint, write_checkpoint
from .errors import CheckpointError, ConfigError, LengthError
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 4
    embed_dim: int = 64
    vocab_size: int = 64
    max_positions: int = 64
    ff_mult: int = 4
    seed: int = 0

    def validate(self) -> None:
        for key in ("n_layers", "n_heads", "embed_dim", "vocab_size", "max_positions", "ff_mult"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")
        if self.embed_dim % self.n_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**{k: int(v) for k, v in d.items() if k in cls.__dataclass_fields__})


ATTN_PROJ = ("q", "k", "v", "o")


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape of every base-model tensor, in canonical order."""
    e, f = cfg.embed_dim, cfg.ff_mult * cfg.embed_dim
    shapes: dict[str, tuple[int, ...]] = {
        "wte": (cfg.vocab_size, e),
        "wpe": (cfg.max_positions, e),
    }
    for i in range(cfg.n_layers):
        p = f"h.{i}."
        shapes[p + "ln_1.g"] = (e,)
        shapes[p + "ln_1.b"] = (e,)
        for name in ATTN_PROJ:
            shapes[p + f"attn.{name}.w"] = (e, e)
            shapes[p + f"attn.{name}.b"] = (e,)
        shapes[p + "ln_2.g"] = (e,)
        shapes[p + "ln_2.b"] = (e,)
        shapes[p + "mlp.fc.w"] = (f, e)
        shapes[p + "mlp.fc.b"] = (f,)
        shapes[p + "mlp.proj.w"] = (e, f)
        shapes[p + "mlp.proj.b"] = (e,)
    shapes["ln_f.g"] = (e,)
    shapes["ln_f.b"] = (e,)
    return shapes


def count_parameters(cfg: ModelConfig) -> int:
    return sum(math.prod(s) for s in parameter_shapes(cfg).values())


@dataclass
class AttentionExtras:
    """Adapter hooks consumed by :meth:`TransformerLM.forward`.

    ``prefix_kv[j]`` is a (keys, values) pair of shape (p, e) for layer j.
    ``lora[(j, target)]`` is an (A, B, alpha, r) tuple for target in {"q", "v"}.
    """

    prefix_kv: list[tuple[Tensor, Tensor]] | None = None
    lora: dict[tuple[int, str], tuple[Tensor, Tensor, float, int]] = field(default_factory=dict)
    n_virtual: int = 0

    @property
    def prefix_len(self) -> int:
        if not self.prefix_kv:
            return 0
        lengths = {k.shape[0] for k, _ in self.prefix_kv}
        if len(lengths) != 1:
            raise ConfigError(f"prefix lengths differ across layers: {sorted(lengths)}")
        return lengths.pop()


def lora_linear(x: Tensor, weight: Tensor, bias: Tensor | None, a: Tensor, b: Tensor,
                alpha: float, r: int) -> Tensor:
    """``x W^T + bias + (alpha/r) (x A^T) B^T``."""
    base = T.linear(x, weight, bias)
    delta = T.linear(T.linear(x, a), b)
    return T.add(base, T.scale(delta, alpha / r))


class TransformerLM:
    """Pre-norm transformer with learned positions and a tied output head."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None

    def copy(self) -> TransformerLM:
        return TransformerLM(self.config, {k: Tensor(v.data, v.requires_grad, name=k)
                                           for k, v in self.params.items()})

    # -- embedding ----------------------------------------------------------

    def embed_tokens(self, ids) -> Tensor:
        """Token plus position embedding for a (n,) or (B, n) id array."""
        ids = np.asarray(ids, dtype=np.int64)
        n = ids.shape[-1] if ids.ndim else 0
        if n > self.config.max_positions:
            raise LengthError(f"sequence length {n} exceeds max_positions {self.config.max_positions}")
        tok = T.embedding_lookup(self.params["wte"], ids)
        return self.add_positions(tok)

    def add_positions(self, x: Tensor) -> Tensor:
        n = x.shape[-2]
        if n > self.config.max_positions:
            raise LengthError(f"sequence length {n} exceeds max_positions {self.config.max_positions}")
        return T.add(x, T.slice_(self.params["wpe"], 0, 0, n))

    # -- forward ------------------------------------------------------------

    def forward(self, embedded: Tensor, extras: AttentionExtras | None = None,
                key_mask=None) -> Tensor:
        """Logits for a (n, e) or (B, n, e) embedded sequence.

        ``key_mask`` (B, n) marks real (non-padding) positions; padding is
        excluded from attention keys.
        """
        extras = extras or AttentionExtras()
        single = embedded.ndim == 2
        x = T.reshape(embedded, (1,) + embedded.shape) if single else embedded
        bsz, n, e = x.shape
        cfg = self.config
        if n < 1:
            raise LengthError("forward needs at least one position")
        p_len = extras.prefix_len
        if n + p_len > cfg.max_positions:
            raise LengthError(f"length {n} + prefix {p_len} exceeds max_positions {cfg.max_positions}")

        causal = np.tril(np.ones((n, n), dtype=bool))
        mask = np.broadcast_to(causal, (bsz, n, n))
        if key_mask is not None:
            km = np.asarray(key_mask, dtype=bool).reshape(bsz, n)
            mask = mask & km[:, None, :]
        if p_len:
            mask = np.concatenate([np.ones((bsz, n, p_len), dtype=bool), mask], axis=-1)
        mask = mask[:, None, :, :]

        for j in range(cfg.n_layers):
            x = self._block(j, x, mask, extras)
        x = T.layer_norm(x, self.params["ln_f.g"], self.params["ln_f.b"])
        logits = T.linear(x, self.params["wte"])
        if single:
            logits = T.reshape(logits, logits.shape[1:])
        return logits

    def next_token_logits(self, embedded: Tensor, extras: AttentionExtras | None = None) -> Tensor:
        logits = self.forward(embedded, extras)
        return T.index(logits, (..., -1, slice(None)))

    def _proj(self, j: int, name: str, h: Tensor, extras: AttentionExtras) -> Tensor:
        w = self.params[f"h.{j}.attn.{name}.w"]
        b = self.params[f"h.{j}.attn.{name}.b"]
        hook = extras.lora.get((j, name))
        if hook is None:
            return T.linear(h, w, b)
        a_mat, b_mat, alpha, r = hook
        return lora_linear(h, w, b, a_mat, b_mat, alpha, r)

    def _block(self, j: int, x: Tensor, mask: np.ndarray, extras: AttentionExtras) -> Tensor:
        P = self.params
        pre = f"h.{j}."
        bsz, n, e = x.shape
        H = self.config.n_heads
        d = e // H

        h = T.layer_norm(x, P[pre + "ln_1.g"], P[pre + "ln_1.b"])
        q = self._heads(self._proj(j, "q", h, extras), bsz, n, H, d)
        k = self._heads(self._proj(j, "k", h, extras), bsz, n, H, d)
        v = self._heads(self._proj(j, "v", h, extras), bsz, n, H, d)
        if extras.prefix_kv:
            pk, pv = extras.prefix_kv[j]
            p = pk.shape[0]
            pk = T.expand(T.transpose(T.reshape(pk, (p, H, d)), (1, 0, 2)), (bsz,))
            pv = T.expand(T.transpose(T.reshape(pv, (p, H, d)), (1, 0, 2)), (bsz,))
            k = T.concat([pk, k], axis=2)
            v = T.concat([pv, v], axis=2)
        scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(d))
        attn = T.masked_softmax(scores, mask)
        ctx = T.matmul(attn, v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (bsz, n, e))
        x = T.add(x, T.linear(ctx, P[pre + "attn.o.w"], P[pre + "attn.o.b"]))

        h = T.layer_norm(x, P[pre + "ln_2.g"], P[pre + "ln_2.b"])
        h = T.gelu(T.linear(h, P[pre + "mlp.fc.w"], P[pre + "mlp.fc.b"]))
        return T.add(x, T.linear(h, P[pre + "mlp.proj.w"], P[pre + "mlp.proj.b"]))

    @staticmethod
    def _heads(t: Tensor, bsz: int, n: int, H: int, d: int) -> Tensor:
        return T.transpose(T.reshape(t, (bsz, n, H, d)), (0, 2, 1, 3))


def init_model(config: ModelConfig) -> TransformerLM:
    """Seeded N(0, 0.02) weights; layer-norm gains 1 and all biases 0."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    params: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".g"):
            data = np.ones(shape)
        elif name.endswith(".b"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, 0.02, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return TransformerLM(config, params)


def save_model(model: TransformerLM, path) -> None:
    write_checkpoint(path, {"kind": "lm", "model": model.config.to_dict()},
                     {name: t.data for name, t in model.params.items()})


def load_model(path) -> TransformerLM:
    config, tensors = read_checkpoint(path)
    if config.get("kind") != "lm":
        raise CheckpointError(f"{path}: not a language-model checkpoint")
    cfg = ModelConfig.from_dict(config["model"])
    expected = parameter_shapes(cfg)
    if set(tensors) != set(expected) or any(tensors[k].shape != s for k, s in expected.items()):
        raise CheckpointError(f"{path}: tensors do not match config {cfg}")
    return TransformerLM(cfg, {k: Tensor(tensors[k], requires_grad=False, name=k) for k in expected})
