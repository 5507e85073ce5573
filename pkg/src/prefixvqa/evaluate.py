"""Greedy answer generation, BLEU-1 / token F1 / exact match, and stratified reports."""

from __future__ import annotations

import math
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import ANSWER_TYPES, VqaSample
from .errors import DataError, InputError
from .prompt import EOS, Batch, LengthBudget, PromptTemplate, Tokenizer, assemble_prompt, embed_batch, pad_batch
from .train import TrainConfig, encode_split, train

_PUNCT = str.maketrans("", "", string.punctuation)


def normalize(text: str) -> str:
    """Lowercase, drop punctuation, collapse whitespace."""
    return " ".join(text.lower().translate(_PUNCT).split())


def _tokens(text: str) -> list[str]:
    return normalize(text).split()


def bleu1(candidate: str, reference: str) -> float:
    """Clipped unigram precision times the brevity penalty."""
    ref = _tokens(reference)
    if not ref:
        raise InputError("BLEU-1 needs a nonempty reference")
    cand = _tokens(candidate)
    if not cand:
        return 0.0
    ref_counts = Counter(ref)
    clipped = sum(min(c, ref_counts[t]) for t, c in Counter(cand).items())
    bp = min(1.0, math.exp(1.0 - len(ref) / len(cand)))
    return bp * clipped / len(cand)


def token_f1(candidate: str, reference: str) -> float:
    ref = _tokens(reference)
    if not ref:
        raise InputError("token F1 needs a nonempty reference")
    cand = _tokens(candidate)
    overlap = sum((Counter(cand) & Counter(ref)).values())
    if overlap == 0:
        return 0.0
    p, r = overlap / len(cand), overlap / len(ref)
    return 2 * p * r / (p + r)


def exact_match(candidate: str, reference: str) -> int:
    return int(normalize(candidate) == normalize(reference))


# ---------------------------------------------------------------------------
# generation


def generate_ids(model, mapper, samples, feats, max_new: int) -> list[list[int]]:
    """Greedy decoding for a batch of inference-mode samples.

    Each step re-runs the full prefix (no key/value cache) and appends the
    argmax token at every unfinished sample's end; ties go to the lowest id.
    """
    batch = pad_batch(samples)
    bsz = len(samples)
    lengths = batch.lengths.copy()
    ids = np.zeros((bsz, int(lengths.max()) + max_new), dtype=np.int64)
    ids[:, : batch.ids.shape[1]] = batch.ids
    out: list[list[int]] = [[] for _ in range(bsz)]
    active = np.ones(bsz, dtype=bool)
    feats = np.asarray(feats, dtype=np.float64)
    with T.no_grad():
        for _ in range(max_new):
            if not active.any():
                break
            idx = np.flatnonzero(active)
            n = int(lengths[idx].max())
            step = Batch(ids[idx, :n], np.zeros((len(idx), n), dtype=bool),
                         np.arange(n)[None, :] < lengths[idx, None], lengths[idx],
                         None if batch.visual_starts is None else batch.visual_starts[idx],
                         batch.prefix_len)
            x = embed_batch(model, mapper, step, feats[idx])
            logits = model.forward(x, key_mask=step.key_mask).data
            last = logits[np.arange(len(idx)), lengths[idx] - 1]
            nxt = np.argmax(last, axis=-1)
            for row, b in enumerate(idx):
                tok_id = int(nxt[row])
                if tok_id == EOS:
                    active[b] = False
                    continue
                out[b].append(tok_id)
                ids[b, lengths[b]] = tok_id
                lengths[b] += 1
                if len(out[b]) >= max_new:
                    active[b] = False
    return out


def generate_answer(model, mapper, tok: Tokenizer, question: str, feat, budget: LengthBudget,
                    template=PromptTemplate.REGULAR) -> str:
    sample = assemble_prompt(tok, question, None, budget, template, "inference", mapper.cfg.prefix_len)
    ids = generate_ids(model, mapper, [sample], np.asarray(feat)[None], budget.answer)[0]
    return tok.decode(ids)


# ---------------------------------------------------------------------------
# reports


@dataclass
class TranscriptRow:
    sample_id: str
    question: str
    reference: str
    candidate: str
    answer_type: str


@dataclass
class EvalReport:
    scores: dict[str, dict[str, float] | None]
    counts: dict[str, int]
    transcript: list[TranscriptRow] = field(default_factory=list)

    def accuracy(self, stratum: str = "overall") -> float | None:
        s = self.scores.get(stratum)
        return None if s is None else s["accuracy"]

    def to_text(self, header: dict | None = None) -> str:
        lines = [f"{k}={v}" for k, v in (header or {}).items()]
        for stratum in ("overall", "open", "yesno"):
            if lines:
                lines.append("")
            lines.append(f"[{stratum}]")
            s = self.scores.get(stratum)
            if s is not None:
                for key in ("bleu1", "f1", "accuracy"):
                    lines.append(f"{key}={s[key]:.4f}")
            lines.append(f"count={self.counts.get(stratum, 0)}")
        return "\n".join(lines) + "\n"

    def transcript_text(self) -> str:
        return "".join(f"{r.sample_id}\t{r.question}\t{r.reference}\t{r.candidate}\n" for r in self.transcript)

    def write(self, report_path, transcript_path=None, header: dict | None = None) -> None:
        Path(report_path).write_text(self.to_text(header), encoding="utf-8")
        if transcript_path is not None:
            Path(transcript_path).write_text(self.transcript_text(), encoding="utf-8")


def score_transcript(rows: Sequence[TranscriptRow]) -> EvalReport:
    """Aggregate per-sample metrics overall and per answer-type stratum."""
    per: dict[str, list[tuple[float, float, float]]] = {t: [] for t in ANSWER_TYPES}
    for r in rows:
        if r.answer_type not in per:
            raise DataError(f"unknown answer stratum {r.answer_type!r} for {r.sample_id}")
        per[r.answer_type].append((bleu1(r.candidate, r.reference), token_f1(r.candidate, r.reference),
                                   float(exact_match(r.candidate, r.reference))))
    scores: dict[str, dict[str, float] | None] = {}
    counts = {t: len(v) for t, v in per.items()}
    for t, vals in per.items():
        scores[t] = None if not vals else dict(zip(("bleu1", "f1", "accuracy"),
                                                   (float(x) for x in np.mean(vals, axis=0))))
    everything = [v for vals in per.values() for v in vals]
    counts["overall"] = len(everything)
    scores["overall"] = None if not everything else dict(
        zip(("bleu1", "f1", "accuracy"), (float(x) for x in np.mean(everything, axis=0))))
    return EvalReport(scores, counts, list(rows))


def evaluate_split(model, mapper, tok: Tokenizer, samples: Sequence[VqaSample], features,
                   budget: LengthBudget, template=PromptTemplate.REGULAR,
                   batch_size: int = 64) -> EvalReport:
    for s in samples:
        if s.answer_type not in ANSWER_TYPES:
            raise DataError(f"unknown answer stratum {s.answer_type!r}")
    split = encode_split(tok, samples, features, budget, template, mapper.cfg.prefix_len, mode="inference")
    rows: list[TranscriptRow] = []
    for start in range(0, len(samples), batch_size):
        idx = np.arange(start, min(start + batch_size, len(samples)))
        gen = generate_ids(model, mapper, [split.samples[i] for i in idx], split.feats[idx], budget.answer)
        for i, ids in zip(idx, gen):
            s = samples[i]
            rows.append(TranscriptRow(f"{s.image_id}#{i}", s.question, s.answer, tok.decode(ids), s.answer_type))
    return score_transcript(rows)


ABLATION_TEMPLATES = (PromptTemplate.REGULAR, PromptTemplate.WITHOUT_QUESTION,
                      PromptTemplate.WITHOUT_IMAGE, PromptTemplate.SWAPPED)


@dataclass
class AblationResult:
    reports: dict[PromptTemplate, EvalReport]
    train_reports: dict

    def to_text(self, header: dict | None = None) -> str:
        lines = [f"{k}={v}" for k, v in (header or {}).items()]
        lines.append("template\tbleu1\tf1\taccuracy\topen_accuracy\tyesno_accuracy\tcount")
        for tpl, rep in self.reports.items():
            o = rep.scores["overall"]
            op = rep.accuracy("open")
            yn = rep.accuracy("yesno")
            lines.append("\t".join([tpl.value, f"{o['bleu1']:.4f}", f"{o['f1']:.4f}", f"{o['accuracy']:.4f}",
                                    "-" if op is None else f"{op:.4f}", "-" if yn is None else f"{yn:.4f}",
                                    str(rep.counts["overall"])]))
        return "\n".join(lines) + "\n"


def run_prompt_ablation(factory: Callable, tok: Tokenizer, budget: LengthBudget, manifest, features,
                        cfg: TrainConfig, templates=ABLATION_TEMPLATES, eval_split: str = "test",
                        log=None) -> AblationResult:
    """Train a fresh (model, mapper) from ``factory()`` per template and evaluate it."""
    reports, train_reports = {}, {}
    for tpl in templates:
        model, mapper = factory()
        prefix_len = mapper.cfg.prefix_len
        tr = encode_split(tok, manifest.splits["train"], features, budget, tpl, prefix_len)
        va = encode_split(tok, manifest.splits["val"], features, budget, tpl, prefix_len)
        train_reports[tpl] = train(model, mapper, tr, va, cfg)
        reports[tpl] = evaluate_split(model, mapper, tok, manifest.splits[eval_split], features, budget, tpl)
        if log is not None:
            log(f"{tpl.value}: accuracy {reports[tpl].accuracy():.4f}")
    return AblationResult(reports, train_reports)
