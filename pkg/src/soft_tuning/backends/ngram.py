"""Additively smoothed word-level n-gram language model.

Serves as the trainable in-process backend for full desk-scale pipeline
loops.  Snapshots are immutable; fine-tuning accumulates weighted counts
into a copy-on-write clone, which keeps the whole model lineage queryable.
Distribution sharpening under self-training emerges naturally: growing
counts dilute the constant smoothing mass, so rarely seen continuations
lose probability round over round.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..domain import FINISH_EOS, FINISH_LENGTH, GenerationRecord, TrainingPair
from ..errors import BackendError, FinetuneError
from .base import ModelBackend, NextTokenDistribution, SamplingConfig

EOS_TOKEN = "<eos>"
UNK_TOKEN = "<unk>"


@dataclass(frozen=True)
class NGramModel:
    """Immutable smoothed n-gram snapshot.

    p(w | ctx) = (count(ctx, w) + alpha) / (count(ctx, .) + alpha * |vocab|),
    strictly positive for every vocabulary token.
    """

    order: int
    alpha: float
    vocab: tuple[str, ...]
    counts: Mapping[tuple[str, ...], Mapping[str, float]]

    def __post_init__(self):
        if self.order < 1:
            raise ValueError(f"order must be >= 1, got {self.order}")
        if self.alpha <= 0:
            raise ValueError(f"smoothing alpha must be > 0, got {self.alpha}")
        if not self.vocab:
            raise ValueError("vocabulary must be non-empty")
        for reserved in (EOS_TOKEN, UNK_TOKEN):
            if reserved not in self.vocab:
                raise ValueError(f"vocabulary must contain {reserved}")

    # -- construction -------------------------------------------------------

    @classmethod
    def with_vocab(cls, words: Iterable[str], order: int = 2, alpha: float = 0.1) -> "NGramModel":
        """An untrained model over the given word set plus reserved tokens."""
        vocab = tuple(sorted(set(words) | {EOS_TOKEN, UNK_TOKEN}))
        return cls(order=order, alpha=alpha, vocab=vocab, counts={})

    @classmethod
    def from_corpus(cls, lines: Iterable[str], order: int = 2, alpha: float = 0.1) -> "NGramModel":
        """Build vocabulary from a corpus and count each line as one stream."""
        lines = list(lines)
        words: set[str] = set()
        for line in lines:
            words.update(line.split())
        model = cls.with_vocab(words, order=order, alpha=alpha)
        streams = [line.split() for line in lines if line.split()]
        return model.add_streams(streams, weight=1.0)

    # -- tokenization -------------------------------------------------------

    def tokenize(self, text: str) -> list[str]:
        """Whitespace tokens, unknown words mapped to the reserved token."""
        vocab = set(self.vocab)
        return [t if t in vocab else UNK_TOKEN for t in text.split()]

    def context_of(self, tokens: Sequence[str]) -> tuple[str, ...]:
        """The last order-1 tokens, left-padded with the unknown token."""
        need = self.order - 1
        ctx = list(tokens[-need:]) if need else []
        while len(ctx) < need:
            ctx.insert(0, UNK_TOKEN)
        return tuple(ctx)

    # -- probabilities ------------------------------------------------------

    @cached_property
    def vocab_index(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.vocab)}

    def conditional(self, context: tuple[str, ...]) -> np.ndarray:
        """Smoothed next-token distribution for a context tuple."""
        v = len(self.vocab)
        probs = np.full(v, self.alpha, dtype=float)
        total = self.alpha * v
        row = self.counts.get(context)
        if row:
            index = self.vocab_index
            for tok, c in row.items():
                probs[index[tok]] += c
                total += c
        return probs / total

    # -- training -----------------------------------------------------------

    def add_streams(self, streams: Iterable[Sequence[str]], weight: float = 1.0) -> "NGramModel":
        """A new snapshot with ``weight`` x the n-gram counts of each stream
        (tokens + end-of-sequence) added; this snapshot is unchanged."""
        if weight <= 0:
            raise FinetuneError(f"count weight must be > 0, got {weight}")
        vocab = set(self.vocab)
        new_counts: dict[tuple[str, ...], dict[str, float]] = dict(self.counts)
        copied: set[tuple[str, ...]] = set()
        for stream in streams:
            tokens = [t if t in vocab else UNK_TOKEN for t in stream] + [EOS_TOKEN]
            padded = [UNK_TOKEN] * (self.order - 1) + tokens
            for i in range(len(padded) - self.order + 1):
                window = padded[i : i + self.order]
                ctx, tok = tuple(window[:-1]), window[-1]
                if ctx not in copied:
                    new_counts[ctx] = dict(new_counts.get(ctx) or {})
                    copied.add(ctx)
                row = new_counts[ctx]
                row[tok] = row.get(tok, 0.0) + weight
        return NGramModel(order=self.order, alpha=self.alpha, vocab=self.vocab, counts=new_counts)

    def finetuned(self, pairs: Sequence[TrainingPair], weight: float = 1.0) -> "NGramModel":
        """Accumulate counts of "prompt response <eos>" streams per pair."""
        if not pairs:
            raise FinetuneError("finetune requires at least one training pair")
        streams = [p.prompt_text.split() + p.response_text.split() for p in pairs]
        return self.add_streams(streams, weight=weight)

    # -- persistence --------------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "order": self.order,
            "alpha": self.alpha,
            "eos_token": EOS_TOKEN,
            "unk_token": UNK_TOKEN,
            "vocab": list(self.vocab),
            "counts": {
                " ".join(ctx): {t: c for t, c in sorted(row.items())}
                for ctx, row in sorted(self.counts.items())
            },
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "NGramModel":
        counts = {
            tuple(ctx.split(" ")) if ctx else (): {t: float(c) for t, c in row.items()}
            for ctx, row in d["counts"].items()
        }
        return cls(order=int(d["order"]), alpha=float(d["alpha"]), vocab=tuple(d["vocab"]), counts=counts)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), sort_keys=True, indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "NGramModel":
        return cls.from_json_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def temperature_adjust(probs: np.ndarray, temperature: float) -> np.ndarray:
    """Renormalized p^(1/T), computed in log space."""
    logw = np.log(probs) / temperature
    logw -= logw.max()
    w = np.exp(logw)
    return w / w.sum()


def nucleus_mask(probs: np.ndarray, top_p: float) -> np.ndarray:
    """Indices of the smallest descending-probability set with mass >= top_p."""
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order])
    cutoff = int(np.searchsorted(cum, top_p, side="left"))
    cutoff = min(cutoff, len(order) - 1)
    return order[: cutoff + 1]


class NGramBackend(ModelBackend):
    """Registry of n-gram snapshots behind the backend contract."""

    persistent_models = False

    def __init__(self, initial_model: NGramModel, initial_ref: str = "m0"):
        self._models: dict[str, NGramModel] = {initial_ref: initial_model}
        self._initial_ref = initial_ref
        self._finetune_count = 0

    @property
    def initial_ref(self) -> str:
        return self._initial_ref

    def model(self, model_ref: str) -> NGramModel:
        try:
            return self._models[model_ref]
        except KeyError:
            raise BackendError(f"unknown model reference {model_ref!r}") from None

    def register(self, model_ref: str, model: NGramModel) -> None:
        self._models[model_ref] = model

    def generate(
        self,
        model_ref: str,
        prompt_text: str,
        sampling: SamplingConfig,
        rng: np.random.Generator,
    ) -> GenerationRecord:
        model = self.model(model_ref)
        eos_i = model.vocab_index[EOS_TOKEN]
        context = model.tokenize(prompt_text)

        emitted: list[tuple[str, float]] = []
        eos_trace: list[float] = []
        finish = FINISH_LENGTH
        for _ in range(sampling.max_new_tokens):
            probs = model.conditional(model.context_of(context))
            adjusted = temperature_adjust(probs, sampling.temperature)
            keep = nucleus_mask(adjusted, sampling.top_p)
            kept = adjusted[keep]
            choice = int(rng.choice(keep, p=kept / kept.sum()))
            token = model.vocab[choice]
            emitted.append((token, float(adjusted[choice])))
            eos_trace.append(float(adjusted[eos_i]))
            if choice == eos_i:
                finish = FINISH_EOS
                break
            context.append(token)

        visible = [t for t, _ in emitted if t != EOS_TOKEN]
        return GenerationRecord(
            prompt_id="",
            response_text=" ".join(visible),
            tokens=tuple(emitted),
            finish=finish,
            eos_probability_trace=tuple(eos_trace),
        )

    def next_token_distribution(self, model_ref: str, context_text: str) -> NextTokenDistribution:
        model = self.model(model_ref)
        probs = model.conditional(model.context_of(model.tokenize(context_text)))
        return NextTokenDistribution(
            tokens=model.vocab,
            probs=tuple(float(p) for p in probs),
            eos_index=model.vocab_index[EOS_TOKEN],
            complete=True,
        )

    def finetune(
        self,
        model_ref: str,
        pairs: Sequence[TrainingPair],
        params: dict,
        state_dir: Path | None = None,
    ) -> str:
        model = self.model(model_ref)
        weight = float(params.get("weight", 1.0))
        new_model = model.finetuned(pairs, weight=weight)
        self._finetune_count += 1
        new_ref = f"ft{self._finetune_count}"
        self._models[new_ref] = new_model
        return new_ref
