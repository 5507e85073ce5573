"""Tokenization, length budgets, prompt templates, padding and loss masks."""

from __future__ import annotations

import enum
import math
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .errors import InputError
from .tensor import Tensor

PAD, UNK, EOS = 0, 1, 2
SPECIALS = ("<pad>", "<unk>", "<eos>")
MARKERS = ("question:", "context:", "answer:")

_TOKEN_RE = re.compile(r"question:|context:|answer:|\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Tokenizer:
    def __init__(self, itos: Sequence[str]):
        if tuple(itos[:3]) != SPECIALS or tuple(itos[3:6]) != MARKERS:
            raise InputError("vocabulary must start with <pad> <unk> <eos> question: context: answer:")
        self.itos = list(itos)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise InputError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def encode(self, text: str) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokenize(text)]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.itos[i] for i in ids if i not in (PAD, EOS))

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> Tokenizer:
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def build_vocab(corpus: Sequence[str], min_count: int = 1) -> Tokenizer:
    """Ids ordered by (count desc, token asc) after the reserved and marker tokens."""
    if not corpus:
        raise InputError("cannot build a vocabulary from an empty corpus")
    counts = Counter(t for text in corpus for t in tokenize(text))
    reserved = set(SPECIALS) | set(MARKERS)
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in reserved),
                  key=lambda t: (-counts[t], t))
    return Tokenizer(list(SPECIALS) + list(MARKERS) + kept)


def compute_length_budget(token_lengths: Sequence[int]) -> int:
    """ceil(mean + 3 * population std) of the token lengths."""
    if len(token_lengths) == 0:
        raise InputError("length budget needs at least one length")
    arr = np.asarray(token_lengths, dtype=np.float64)
    value = arr.mean() + 3.0 * arr.std()
    # guard against 2.0000000000000004-style float noise pushing ceil up
    return max(1, int(math.ceil(value - 1e-9)))


@dataclass(frozen=True)
class LengthBudget:
    question: int
    answer: int

    def __post_init__(self):
        if self.question < 1 or self.answer < 1:
            raise InputError(f"length budgets must be >= 1, got {self}")

    @classmethod
    def from_texts(cls, tok: Tokenizer, questions: Sequence[str], answers: Sequence[str]) -> LengthBudget:
        return cls(compute_length_budget([len(tok.encode(q)) for q in questions]),
                   compute_length_budget([len(tok.encode(a)) for a in answers]))


class PromptTemplate(str, enum.Enum):
    REGULAR = "regular"
    WITHOUT_QUESTION = "no_question"
    WITHOUT_IMAGE = "no_image"
    SWAPPED = "swapped"

    @property
    def has_image(self) -> bool:
        return self is not PromptTemplate.WITHOUT_IMAGE

    @property
    def has_question(self) -> bool:
        return self is not PromptTemplate.WITHOUT_QUESTION


@dataclass
class EncodedSample:
    ids: np.ndarray
    loss_mask: np.ndarray
    visual_start: int | None
    prefix_len: int
    answer_ids: list[int]
    embedded: Tensor | None = None

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def visual_span(self) -> range | None:
        if self.visual_start is None:
            return None
        return range(self.visual_start, self.visual_start + self.prefix_len)


def assemble_prompt(tok: Tokenizer, question: str, answer: str | None, budget: LengthBudget,
                    template: PromptTemplate = PromptTemplate.REGULAR, mode: str = "train",
                    prefix_len: int = 8, *, model=None, mapper=None, feat=None) -> EncodedSample:
    """Lay out ``question: q context: <visual> answer: [a <eos>]`` per ``template``.

    Visual slots hold PAD ids; :func:`embed_batch` overwrites them with the
    mapper output.  When ``model``, ``mapper`` and ``feat`` are all given the
    embedded sequence is filled in as well.
    """
    template = PromptTemplate(template)
    if mode not in ("train", "inference"):
        raise InputError(f"mode must be 'train' or 'inference', got {mode!r}")
    q_ids = tok.encode(question)[: budget.question] if template.has_question else []
    if template.has_question and not q_ids:
        raise InputError("question is empty")
    if mode == "train":
        if answer is None or not tok.encode(answer):
            raise InputError("train mode needs a nonempty answer")
        a_ids = tok.encode(answer)[: budget.answer]
    else:
        a_ids = tok.encode(answer)[: budget.answer] if answer else []

    q_block = [tok.id("question:")] + q_ids
    c_block = [tok.id("context:")] + [PAD] * prefix_len
    if template is PromptTemplate.REGULAR:
        blocks = [q_block, c_block]
    elif template is PromptTemplate.SWAPPED:
        blocks = [c_block, q_block]
    elif template is PromptTemplate.WITHOUT_QUESTION:
        blocks = [c_block]
    else:
        blocks = [q_block]

    ids: list[int] = []
    visual_start = None
    for block in blocks:
        if block is c_block:
            visual_start = len(ids) + 1
        ids.extend(block)
    ids.append(tok.id("answer:"))
    n_prompt = len(ids)
    if mode == "train":
        ids.extend(a_ids + [EOS])
    ids_arr = np.asarray(ids, dtype=np.int64)
    mask = np.zeros(len(ids), dtype=bool)
    mask[n_prompt:] = True
    sample = EncodedSample(ids_arr, mask, visual_start, prefix_len, list(a_ids))
    if model is not None and mapper is not None and feat is not None:
        batch = pad_batch([sample])
        sample.embedded = T.reshape(embed_batch(model, mapper, batch, np.asarray(feat)[None]),
                                    (len(ids), -1))
    return sample


@dataclass
class Batch:
    ids: np.ndarray          # (B, n)
    loss_mask: np.ndarray    # (B, n)
    key_mask: np.ndarray     # (B, n), True on real positions
    lengths: np.ndarray      # (B,)
    visual_starts: np.ndarray | None
    prefix_len: int

    def __len__(self) -> int:
        return self.ids.shape[0]


def pad_batch(samples: Sequence[EncodedSample], length: int | None = None) -> Batch:
    """Right-pad with PAD to the batch maximum (or ``length``)."""
    if not samples:
        raise InputError("pad_batch needs at least one sample")
    has_visual = {s.visual_start is not None for s in samples}
    if len(has_visual) != 1:
        raise InputError("cannot batch samples with and without a visual slot")
    lengths = np.array([len(s) for s in samples], dtype=np.int64)
    n = int(lengths.max()) if length is None else int(length)
    if n < lengths.max():
        raise InputError(f"pad length {n} shorter than longest sample {lengths.max()}")
    bsz = len(samples)
    ids = np.full((bsz, n), PAD, dtype=np.int64)
    loss_mask = np.zeros((bsz, n), dtype=bool)
    for i, s in enumerate(samples):
        ids[i, : len(s)] = s.ids
        loss_mask[i, : len(s)] = s.loss_mask
    key_mask = np.arange(n)[None, :] < lengths[:, None]
    starts = np.array([s.visual_start for s in samples], dtype=np.int64) if has_visual.pop() else None
    return Batch(ids, loss_mask, key_mask, lengths, starts, samples[0].prefix_len)


def embed_batch(model, mapper, batch: Batch, feats) -> Tensor:
    """Token embeddings with visual slots replaced by the mapper output, plus positions.

    ``model`` is a :class:`TransformerLM` or an adapted model exposing ``base``.
    """
    base = getattr(model, "base", model)
    tok = T.embedding_lookup(base.params["wte"], batch.ids)
    if batch.visual_starts is not None:
        feats = feats if isinstance(feats, Tensor) else Tensor(feats)
        tok = T.place_rows(tok, mapper(feats), batch.visual_starts)
    return base.add_positions(tok)
