"""AdamW with linear warmup, answer-token likelihood training and early stopping."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, TrainingError
from .prompt import Batch, EncodedSample, PromptTemplate, assemble_prompt, embed_batch, pad_batch
from .tensor import Tensor


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-3
    warmup_steps: int = 600
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 16
    max_epochs: int = 30
    early_stop_tolerance: int = 3
    max_steps: int | None = None
    seed: int = 0

    def __post_init__(self):
        positive = ("learning_rate", "beta1", "beta2", "eps", "batch_size", "max_epochs")
        bad = [k for k in positive if not getattr(self, k) > 0]
        if self.warmup_steps < 0 or self.weight_decay < 0:
            bad.append("warmup_steps/weight_decay")
        if not (self.beta1 < 1 and self.beta2 < 1):
            bad.append("betas")
        if self.early_stop_tolerance < 1:
            bad.append("early_stop_tolerance")
        if self.max_steps is not None and self.max_steps < 1:
            bad.append("max_steps")
        if bad:
            raise ConfigError(f"invalid training config: {', '.join(bad)}")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to the peak rate over ``warmup_steps``, constant afterwards."""
    if cfg.warmup_steps <= 0:
        return cfg.learning_rate
    return cfg.learning_rate * min(1.0, (step + 1) / cfg.warmup_steps)


def decays(name: str) -> bool:
    """Weight decay applies to weight matrices only."""
    return name.endswith(".w") or name.endswith(".A") or name.endswith(".B")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict[str, Tensor], state: OptimizerState, cfg: TrainConfig,
               step: int | None = None, lr: float | None = None) -> None:
    """Decoupled weight decay, then a bias-corrected Adam update; clears gradients."""
    step = state.step if step is None else step
    lr = lr_at(step, cfg) if lr is None else lr
    t = step + 1
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        if p.grad is None:
            raise TrainingError(f"trainable tensor {name!r} received no gradient")
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = cfg.beta1 * state.m[name] + (1 - cfg.beta1) * g
        v = state.v[name] = cfg.beta2 * state.v[name] + (1 - cfg.beta2) * g * g
        data = p.data
        if cfg.weight_decay and decays(name):
            data = data - lr * cfg.weight_decay * data
        p.data = data - lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        p.grad = None
    state.step = step + 1


@dataclass
class EarlyStopper:
    tolerance: int = 3
    best: float = math.inf
    best_epoch: int = 0
    epochs_since_improvement: int = 0
    epoch: int = 0


def early_stop_update(stopper: EarlyStopper, val_loss: float) -> str:
    """Record one epoch's validation loss; returns "continue" or "stop"."""
    stopper.epoch += 1
    if val_loss < stopper.best:
        stopper.best = val_loss
        stopper.best_epoch = stopper.epoch
        stopper.epochs_since_improvement = 0
    else:
        stopper.epochs_since_improvement += 1
    return "stop" if stopper.epochs_since_improvement >= stopper.tolerance else "continue"


# ---------------------------------------------------------------------------


@dataclass
class EncodedSplit:
    samples: list[EncodedSample]
    feats: np.ndarray  # (N, feature_dim)

    def __len__(self) -> int:
        return len(self.samples)

    def batch(self, idx) -> tuple[Batch, np.ndarray]:
        return pad_batch([self.samples[i] for i in idx]), self.feats[idx]


def encode_split(tok, samples, features: dict[str, np.ndarray], budget, template=PromptTemplate.REGULAR,
                 prefix_len: int = 8, mode: str = "train") -> EncodedSplit:
    enc = [assemble_prompt(tok, s.question, s.answer, budget, template, mode, prefix_len) for s in samples]
    feats = np.stack([np.asarray(features[s.image_id], dtype=np.float64) for s in samples]) if samples \
        else np.zeros((0, 512))
    return EncodedSplit(enc, feats)


def sequence_loss(model, mapper, batch: Batch, feats) -> Tensor:
    """Mean over samples of the per-sample mean answer-token cross-entropy."""
    x = embed_batch(model, mapper, batch, feats)
    logits = model.forward(x, key_mask=batch.key_mask)
    n = logits.shape[1]
    logits = T.slice_(logits, 1, 0, n - 1)
    return T.cross_entropy_masked(logits, batch.ids[:, 1:], batch.loss_mask[:, 1:])


def split_loss(model, mapper, split: EncodedSplit, batch_size: int = 64) -> float:
    """Mean per-sample loss over a split, without recording a graph."""
    total = 0.0
    with T.no_grad():
        for start in range(0, len(split), batch_size):
            idx = np.arange(start, min(start + batch_size, len(split)))
            batch, feats = split.batch(idx)
            total += float(sequence_loss(model, mapper, batch, feats).data) * len(idx)
    return total / len(split)


@dataclass
class TrainReport:
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    stop_epoch: int = 0
    best_epoch: int = 0
    best_val_loss: float = math.inf
    steps: int = 0
    stopped_early: bool = False
    elapsed_s: float = 0.0
    best_state: dict[str, np.ndarray] | None = field(default=None, repr=False)

    def to_text(self, header: dict | None = None) -> str:
        lines = [f"{k}={v}" for k, v in (header or {}).items()]
        lines += [
            f"epochs={self.stop_epoch}",
            f"best_epoch={self.best_epoch}",
            f"best_val_loss={self.best_val_loss:.6f}",
            f"steps={self.steps}",
            f"stopped_early={str(self.stopped_early).lower()}",
            f"elapsed_s={self.elapsed_s:.2f}",
            "train_losses=" + ",".join(f"{x:.6f}" for x in self.train_losses),
            "val_losses=" + ",".join(f"{x:.6f}" for x in self.val_losses),
        ]
        return "\n".join(lines) + "\n"


def trainable_set(model, mapper, uses_image: bool = True) -> dict[str, Tensor]:
    # A prompt with no image slot never reaches the mapper, so it has nothing to learn.
    params = dict(mapper.trainable()) if uses_image else {}
    params.update(model.trainable())
    return params


def train(model, mapper, train_split: EncodedSplit, val_split: EncodedSplit, cfg: TrainConfig,
          *, restore_best: bool = True, log=None) -> TrainReport:
    """Minimize answer-token cross-entropy over the adapter + mapper parameters."""
    if len(train_split) == 0 or len(val_split) == 0:
        raise TrainingError("train and validation splits must be nonempty")
    uses_image = any(s.visual_start is not None for s in train_split.samples)
    params = trainable_set(model, mapper, uses_image)
    if not params:
        raise TrainingError("nothing to train: frozen model and no image slot in the prompt")
    state = OptimizerState()
    stopper = EarlyStopper(cfg.early_stop_tolerance)
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport()
    t0 = time.perf_counter()
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_split))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            if cfg.max_steps is not None and state.step >= cfg.max_steps:
                break
            batch, feats = train_split.batch(order[start:start + cfg.batch_size])
            loss = sequence_loss(model, mapper, batch, feats)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"loss diverged to {value} at epoch {epoch}, step {state.step} "
                                    f"(lr={lr_at(state.step, cfg):.3g})")
            T.backward(loss)
            adamw_step(params, state, cfg)
            epoch_losses.append(value)
            report.step_losses.append(value)
        if not epoch_losses:
            break
        report.train_losses.append(float(np.mean(epoch_losses)))
        val = split_loss(model, mapper, val_split)
        report.val_losses.append(val)
        report.stop_epoch = epoch
        decision = early_stop_update(stopper, val)
        if stopper.best_epoch == epoch:
            report.best_state = {k: p.data.copy() for k, p in params.items()}
        if log is not None:
            log(f"epoch {epoch}: train {report.train_losses[-1]:.4f} val {val:.4f}")
        if decision == "stop":
            report.stopped_early = True
            break
    report.steps = state.step
    report.best_epoch = stopper.best_epoch
    report.best_val_loss = stopper.best
    if restore_best and report.best_state is not None:
        for k, p in params.items():
            p.data = report.best_state[k].copy()
    report.elapsed_s = time.perf_counter() - t0
    return report


def pretrain_lm(model, tok, texts: Sequence[str], cfg: TrainConfig, *, answer_only: bool = False,
                log=None) -> TrainReport:
    """Full-parameter next-token training of a base model on plain text.

    Every token after the first contributes to the loss, or with
    ``answer_only`` just the tokens after the first "answer:" marker.  This is
    the desk-scale stand-in for starting from a pre-trained language model.
    """
    if not texts:
        raise TrainingError("pretraining corpus is empty")
    from .prompt import EOS, PAD

    seqs = [np.asarray(tok.encode(t) + [EOS], dtype=np.int64) for t in texts]
    answer_id = tok.id("answer:")
    too_long = max(len(s) for s in seqs)
    if too_long > model.config.max_positions:
        raise TrainingError(f"corpus line of {too_long} tokens exceeds max_positions")
    for p in model.params.values():
        p.requires_grad = True
    params = dict(model.params)
    state = OptimizerState()
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport()
    t0 = time.perf_counter()
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(seqs))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            chunk = [seqs[i] for i in order[start:start + cfg.batch_size]]
            n = max(len(s) for s in chunk)
            ids = np.full((len(chunk), n), PAD, dtype=np.int64)
            for row, s in enumerate(chunk):
                ids[row, : len(s)] = s
            key_mask = ids != PAD
            loss_mask = key_mask
            if answer_only:
                loss_mask = key_mask & (np.cumsum(ids == answer_id, axis=1) > 0) & (ids != answer_id)
            logits = model.forward(model.embed_tokens(ids), key_mask=key_mask)
            loss = T.cross_entropy_masked(T.slice_(logits, 1, 0, n - 1), ids[:, 1:], loss_mask[:, 1:])
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"pretraining loss diverged at epoch {epoch}, step {state.step}")
            T.backward(loss)
            adamw_step(params, state, cfg)
            losses.append(value)
            report.step_losses.append(value)
        report.train_losses.append(float(np.mean(losses)))
        report.stop_epoch = epoch
        if log is not None:
            log(f"pretrain epoch {epoch}: loss {report.train_losses[-1]:.4f}")
    report.steps = state.step
    report.elapsed_s = time.perf_counter() - t0
    return report
