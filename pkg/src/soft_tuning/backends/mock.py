"""Scripted replay backend for pipeline and probe tests.

A script is an ordered list of canned responses keyed by (model_ref, kind).
Each request consumes the next unconsumed entry for its key; "*" entries
match any model reference.  Running out of entries for a requested key is an
error that names the request.
"""

from __future__ import annotations

import json
import threading
from collections import deque
from pathlib import Path
from typing import Sequence

import numpy as np

from ..domain import GenerationRecord, TrainingPair
from ..errors import MockScriptError
from .base import ModelBackend, NextTokenDistribution, SamplingConfig

KIND_GENERATE = "generate"
KIND_DISTRIBUTION = "distribution"
KIND_FINETUNE = "finetune"
_KINDS = (KIND_GENERATE, KIND_DISTRIBUTION, KIND_FINETUNE)


class MockBackend(ModelBackend):
    persistent_models = False

    def __init__(self, script: Sequence[dict]):
        self._queues: dict[tuple[str, str], deque[dict]] = {}
        for pos, entry in enumerate(script):
            kind = entry.get("kind")
            if kind not in _KINDS:
                raise MockScriptError(f"script entry {pos}: unknown kind {kind!r}")
            key = (entry.get("model", "*"), kind)
            self._queues.setdefault(key, deque()).append(entry)
        self.calls: list[tuple[str, str]] = []
        self._lock = threading.Lock()

    @classmethod
    def from_script_file(cls, path: str | Path) -> "MockBackend":
        entries = []
        with open(path, encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    entries.append(json.loads(line))
        return cls(entries)

    def _next(self, model_ref: str, kind: str) -> dict:
        with self._lock:
            self.calls.append((kind, model_ref))
            for key in ((model_ref, kind), ("*", kind)):
                queue = self._queues.get(key)
                if queue:
                    return queue.popleft()
        raise MockScriptError(f"no scripted response left for ({model_ref!r}, {kind!r})")

    def generate(
        self,
        model_ref: str,
        prompt_text: str,
        sampling: SamplingConfig,
        rng: np.random.Generator,
    ) -> GenerationRecord:
        entry = self._next(model_ref, KIND_GENERATE)
        return GenerationRecord.from_json_dict({"prompt_id": "", **entry["record"]})

    def next_token_distribution(self, model_ref: str, context_text: str) -> NextTokenDistribution:
        entry = self._next(model_ref, KIND_DISTRIBUTION)
        d = entry["distribution"]
        return NextTokenDistribution(
            tokens=tuple(d["tokens"]),
            probs=tuple(float(p) for p in d["probs"]),
            eos_index=d.get("eos_index"),
            complete=bool(d.get("complete", True)),
            remainder=float(d.get("remainder", 0.0)),
        )

    def finetune(
        self,
        model_ref: str,
        pairs: Sequence[TrainingPair],
        params: dict,
        state_dir: Path | None = None,
    ) -> str:
        entry = self._next(model_ref, KIND_FINETUNE)
        return entry["result_model"]
