"""Difficulty scoring and easy-to-hard segmentation.

A prompt's difficulty is the sentence perplexity of the response the model
generates for it: the geometric mean of inverse token probabilities.  The
dataset is scored once with the starting model, sorted ascending, and sliced
into contiguous per-round subsets; random mode shuffles instead of sorting.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .backends.base import ModelBackend, SamplingConfig
from .domain import (
    IclPool,
    PrincipleSet,
    Prompt,
    PromptDataset,
    assemble_prompt,
    sample_icl,
)
from .errors import DataFormatError, GenerationError
from .seeding import derive_rng, derive_seed

MODE_RANDOM = "random"
MODE_EASY_TO_HARD = "easy_to_hard"


@dataclass(frozen=True)
class PerplexityScore:
    prompt_id: str
    value: float
    token_count: int
    seed: int | None = None

    def __post_init__(self):
        if not math.isfinite(self.value) or self.value < 1.0:
            raise ValueError(f"perplexity must be finite and >= 1, got {self.value}")
        if self.token_count < 1:
            raise ValueError("token_count must be >= 1")


def sentence_perplexity(token_probs: Sequence[float]) -> float:
    """Geometric mean of inverse token probabilities.

    Computed in log space, exp(-(1/N) * sum(log p_i)), so long sequences of
    small probabilities do not underflow.
    """
    if len(token_probs) == 0:
        raise ValueError("sentence_perplexity requires a non-empty probability sequence")
    probs = np.asarray(token_probs, dtype=float)
    if np.any(probs <= 0.0) or np.any(probs > 1.0):
        raise ValueError("token probabilities must lie in (0, 1]")
    return float(np.exp(-np.mean(np.log(probs))))


def score_dataset(
    backend: ModelBackend,
    model_ref: str,
    dataset: PromptDataset,
    pool: IclPool,
    principles: PrincipleSet,
    sampling: SamplingConfig,
    k: int = 4,
    seed: int = 0,
    few_shot: bool = True,
    parallelism: int = 1,
) -> list[PerplexityScore]:
    """One generation per prompt; returns its response perplexity, in dataset order.

    Each prompt draws its own child seed from ``seed``, so results do not
    depend on execution order and a fixed seed reproduces the scores exactly.
    ``few_shot=False`` scores from the bare question without assembly.
    """
    if len(dataset) == 0:
        raise ValueError("cannot score an empty dataset")

    def score_one(position: int, prompt: Prompt) -> PerplexityScore:
        child_seed = derive_seed(seed, "score", position)
        rng = np.random.default_rng(child_seed)
        if few_shot:
            examples = sample_icl(pool, k, derive_rng(seed, "score-icl", position))
            text = assemble_prompt(principles, examples, prompt).text
        else:
            text = prompt.text
        try:
            record = backend.generate(model_ref, text, sampling, rng)
        except Exception as exc:
            raise GenerationError(str(exc), prompt_id=prompt.id) from exc
        if not record.tokens:
            raise GenerationError("backend returned an empty response", prompt_id=prompt.id)
        return PerplexityScore(
            prompt_id=prompt.id,
            value=sentence_perplexity(record.token_probs),
            token_count=len(record.tokens),
            seed=child_seed,
        )

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool_exec:
            return list(pool_exec.map(score_one, range(len(dataset)), dataset))
    return [score_one(i, p) for i, p in enumerate(dataset)]


@dataclass(frozen=True)
class SegmentPlan:
    """An exact partition of the dataset ids into T per-round subsets."""

    mode: str
    T: int
    segments: tuple[tuple[str, ...], ...]
    seed: int | None = None

    def __post_init__(self):
        if self.mode not in (MODE_RANDOM, MODE_EASY_TO_HARD):
            raise ValueError(f"unknown segmentation mode {self.mode!r}")
        if self.T != len(self.segments):
            raise ValueError("T must equal the number of segments")
        all_ids = [i for seg in self.segments for i in seg]
        if len(set(all_ids)) != len(all_ids):
            raise ValueError("segments must be pairwise disjoint")

    @property
    def all_ids(self) -> tuple[str, ...]:
        return tuple(i for seg in self.segments for i in seg)

    def to_json_dict(self) -> dict:
        return {"mode": self.mode, "T": self.T, "seed": self.seed, "segments": [list(s) for s in self.segments]}

    @classmethod
    def from_json_dict(cls, d: dict) -> "SegmentPlan":
        return cls(
            mode=d["mode"],
            T=int(d["T"]),
            seed=d.get("seed"),
            segments=tuple(tuple(s) for s in d["segments"]),
        )


def plan_segments(
    dataset: PromptDataset,
    T: int,
    mode: str = MODE_RANDOM,
    scores: Sequence[PerplexityScore] | None = None,
    seed: int | None = None,
) -> SegmentPlan:
    """Partition the dataset into T even segments.

    easy_to_hard sorts ascending by score (stable, ties keep dataset order)
    then slices contiguously; random shuffles with the given seed.  Sizes
    differ by at most one, with the remainder on the earliest segments.
    """
    n = len(dataset)
    if not (1 <= T <= n):
        raise ValueError(f"T must be in 1..{n}, got {T}")

    if mode == MODE_EASY_TO_HARD:
        if scores is None:
            raise ValueError("easy_to_hard mode requires perplexity scores")
        by_id = {}
        for s in scores:
            if s.prompt_id in by_id:
                raise DataFormatError(f"duplicate score for prompt {s.prompt_id!r}")
            by_id[s.prompt_id] = s
        missing = [p.id for p in dataset if p.id not in by_id]
        if missing:
            raise DataFormatError(f"missing scores for prompts: {missing[:5]}")
        extra = set(by_id) - set(dataset.ids)
        if extra:
            raise DataFormatError(f"scores cover unknown prompts: {sorted(extra)[:5]}")
        ordered = sorted(dataset.ids, key=lambda pid: by_id[pid].value)  # stable
        plan_seed = None
    elif mode == MODE_RANDOM:
        if seed is None:
            raise ValueError("random mode requires a seed")
        rng = np.random.default_rng(seed)
        ids = list(dataset.ids)
        order = rng.permutation(n)
        ordered = [ids[int(i)] for i in order]
        plan_seed = seed
    else:
        raise ValueError(f"unknown segmentation mode {mode!r}")

    base, remainder = divmod(n, T)
    segments = []
    start = 0
    for t in range(T):
        size = base + (1 if t < remainder else 0)
        segments.append(tuple(ordered[start : start + size]))
        start += size
    return SegmentPlan(mode=mode, T=T, segments=tuple(segments), seed=plan_seed)


# ---------------------------------------------------------------------------
# file interfaces


def save_scores(scores: Sequence[PerplexityScore], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in scores:
            f.write(
                json.dumps(
                    {
                        "schema_version": "1",
                        "prompt_id": s.prompt_id,
                        "perplexity": s.value,
                        "token_count": s.token_count,
                        "seed": s.seed,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def load_scores(path: str | Path) -> list[PerplexityScore]:
    scores = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            d = json.loads(line)
            scores.append(
                PerplexityScore(
                    prompt_id=d["prompt_id"],
                    value=float(d["perplexity"]),
                    token_count=int(d["token_count"]),
                    seed=d.get("seed"),
                )
            )
    return scores


def save_plan(plan: SegmentPlan, path: str | Path) -> None:
    Path(path).write_text(json.dumps(plan.to_json_dict(), sort_keys=True, indent=2), encoding="utf-8")


def load_plan(path: str | Path) -> SegmentPlan:
    return SegmentPlan.from_json_dict(json.loads(Path(path).read_text(encoding="utf-8")))
