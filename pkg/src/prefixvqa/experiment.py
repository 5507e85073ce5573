"""Desk-scale experiment wiring shared by the CLI and the acceptance suite.

A run has three stages: build a vocabulary and length budget from the
training split, pretrain a small base model on text so it can read the
question/context/answer layout, then fine-tune an adapter plus the visual
mapper on the VQA samples.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .data import DatasetManifest
from .lm import ModelConfig, TransformerLM, init_model
from .mapper import Mapper, MapperConfig, init_mapper
from .peft import AdaptedModel, PeftConfig, attach_adapter
from .prompt import LengthBudget, PromptTemplate, Tokenizer, build_vocab
from .train import TrainConfig, TrainReport, encode_split, pretrain_lm, train

# Desk-scale defaults.  Fine-tuning keeps the optimizer settings of the
# training module but waits longer before stopping, since a 300-sample
# validation split gives a noisy loss.
PRETRAIN = TrainConfig(learning_rate=1e-3, warmup_steps=100, max_epochs=25)
FINETUNE = TrainConfig(max_epochs=40, early_stop_tolerance=8)
MODEL_SHAPE = {"n_layers": 2, "n_heads": 4, "embed_dim": 64, "max_positions": 64}


def build_tokenizer(manifest: DatasetManifest, corpus: Sequence[str] = ()) -> Tokenizer:
    train_split = manifest.splits["train"]
    return build_vocab(list(corpus) + [s.question for s in train_split] + [s.answer for s in train_split])


def length_budget(tok: Tokenizer, manifest: DatasetManifest) -> LengthBudget:
    train_split = manifest.splits["train"]
    return LengthBudget.from_texts(tok, [s.question for s in train_split], [s.answer for s in train_split])


def model_config(tok: Tokenizer, seed: int = 0, **shape) -> ModelConfig:
    return ModelConfig(vocab_size=len(tok), seed=seed, **{**MODEL_SHAPE, **shape})


def pretrain_base(tok: Tokenizer, corpus: Sequence[str], cfg: ModelConfig,
                  train_cfg: TrainConfig = PRETRAIN, log=None) -> tuple[TransformerLM, TrainReport]:
    """Fresh base model trained on the answer tokens of ``corpus``; returned frozen."""
    base = init_model(cfg)
    report = pretrain_lm(base, tok, corpus, train_cfg, answer_only=True, log=log)
    base.freeze()
    return base, report


@dataclass
class FineTuned:
    model: AdaptedModel
    mapper: Mapper
    report: TrainReport
    template: PromptTemplate


def finetune(base: TransformerLM, tok: Tokenizer, budget: LengthBudget, manifest: DatasetManifest,
             features, peft: PeftConfig, template=PromptTemplate.REGULAR,
             train_cfg: TrainConfig = FINETUNE, prefix_len: int = 8, log=None) -> FineTuned:
    """Attach ``peft`` to a copy of ``base`` and train it with a fresh mapper."""
    template = PromptTemplate(template)
    model = attach_adapter(base.copy(), peft)
    mapper = init_mapper(MapperConfig(embed_dim=base.config.embed_dim, prefix_len=prefix_len, seed=peft.seed))
    tr = encode_split(tok, manifest.splits["train"], features, budget, template, prefix_len)
    va = encode_split(tok, manifest.splits["val"], features, budget, template, prefix_len)
    report = train(model, mapper, tr, va, train_cfg, log=log)
    return FineTuned(model, mapper, report, template)
