"""The model-backend contract.

A backend hosts a lineage of immutable model snapshots addressed by string
references.  Fine-tuning never mutates an existing snapshot; it registers a
new one, so earlier models in the lineage stay queryable (the pipeline's
early stop returns a pre-fine-tune survivor).
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..domain import GenerationRecord, TrainingPair
from ..errors import CapabilityError, ConfigError

# Fine-tune hyperparameters are an opaque map forwarded to the backend.
DEFAULT_FINETUNE_PARAMS: dict = {
    "r": 64,
    "alpha": 16,
    "max_seq_len": 512,
    "max_lr": 1e-4,
}


@dataclass(frozen=True)
class SamplingConfig:
    temperature: float = 0.7
    top_p: float = 0.95
    max_new_tokens: int = 512
    seed: int | None = None

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if not (0 < self.top_p <= 1):
            raise ConfigError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.max_new_tokens < 1:
            raise ConfigError(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")


@dataclass(frozen=True)
class NextTokenDistribution:
    """A next-token probability distribution.

    ``complete`` distributions cover the whole vocabulary and sum to one;
    top-k responses from remote servers are incomplete and carry the
    unreturned mass in ``remainder``.
    """

    tokens: tuple[str, ...]
    probs: tuple[float, ...]
    eos_index: int | None
    complete: bool = True
    remainder: float = 0.0

    def __post_init__(self):
        if len(self.tokens) != len(self.probs):
            raise ValueError("tokens and probs must have the same length")
        if self.eos_index is not None and not (0 <= self.eos_index < len(self.tokens)):
            raise ValueError(f"eos_index {self.eos_index} out of range")

    @property
    def eos_prob(self) -> float:
        if self.eos_index is None:
            raise CapabilityError(
                "distribution does not include the end-of-sequence token; "
                "EOS probes need a backend that returns it"
            )
        return self.probs[self.eos_index]

    def prob_of(self, token: str) -> float | None:
        """Probability of a token string, or None when it is not covered."""
        try:
            return self.probs[self.tokens.index(token)]
        except ValueError:
            return 0.0 if self.complete else None

    def as_array(self) -> np.ndarray:
        return np.asarray(self.probs, dtype=float)


class ModelBackend(ABC):
    """Generate, inspect and fine-tune models addressed by reference."""

    #: True when model references survive process restarts (remote services);
    #: in-process backends rebuild lineage by replaying fine-tunes on resume.
    persistent_models: bool = False

    @abstractmethod
    def generate(
        self,
        model_ref: str,
        prompt_text: str,
        sampling: SamplingConfig,
        rng: np.random.Generator,
    ) -> GenerationRecord:
        """Sample one response.  Recorded token probabilities are the
        post-temperature, pre-top-p model probabilities of the sampled
        tokens."""

    @abstractmethod
    def next_token_distribution(self, model_ref: str, context_text: str) -> NextTokenDistribution:
        """The model's next-token distribution after the given context."""

    @abstractmethod
    def finetune(
        self,
        model_ref: str,
        pairs: Sequence[TrainingPair],
        params: dict,
        state_dir: Path | None = None,
    ) -> str:
        """Fine-tune from ``model_ref`` on ``pairs``; returns the new model's
        reference.  ``state_dir``, when provided, is a per-round directory a
        backend may use to persist idempotency state across retries."""
