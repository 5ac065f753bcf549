"""JSON-over-HTTP model backend.

Drives an external inference and fine-tuning service through three
endpoints: POST /v1/generate, POST /v1/finetune (+ GET /v1/jobs/{id}
polling), and POST /v1/next_token.  All log probabilities on the wire are
natural log.  Generate requests carry a deterministic request id and seed
drawn from the caller's random source, so they are safely retryable and
recorded sessions replay byte-for-byte.

Fine-tune submission is deduplicated per round directory: an idempotency key
(content hash of the round and its pairs) plus any known job id are persisted
before and after the POST, so a crashed or retried round polls the existing
job instead of creating a second one.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import httpx
import numpy as np

from .backends.base import ModelBackend, NextTokenDistribution, SamplingConfig
from .domain import FINISH_EOS, FINISH_LENGTH, GenerationRecord, TrainingPair
from .errors import BackendError, ConfigError, FinetuneError, ProtocolError

ENV_URL = "SOFT_REMOTE_URL"
ENV_TOKEN = "SOFT_REMOTE_TOKEN"

_FINISH_MAP = {
    "eos": FINISH_EOS,
    "stop": FINISH_EOS,
    "length": FINISH_LENGTH,
    "length_limit": FINISH_LENGTH,
}

_KEY_FILE = "finetune_key.json"


@dataclass(frozen=True)
class RemoteConfig:
    base_url: str
    auth_token: str | None = None
    timeout: float = 30.0
    max_attempts: int = 3
    backoff_base: float = 0.5
    poll_interval: float = 2.0
    poll_timeout: float = 3600.0

    def __post_init__(self):
        if not self.base_url:
            raise ConfigError("remote base_url must be set")
        if self.max_attempts < 1:
            raise ConfigError(f"max_attempts must be >= 1, got {self.max_attempts}")
        if self.timeout <= 0 or self.poll_interval <= 0 or self.poll_timeout <= 0:
            raise ConfigError("remote timeouts must be > 0")

    @classmethod
    def with_env_overrides(cls, **kwargs) -> "RemoteConfig":
        """Build a config letting SOFT_REMOTE_URL / SOFT_REMOTE_TOKEN win."""
        url = os.environ.get(ENV_URL)
        token = os.environ.get(ENV_TOKEN)
        if url:
            kwargs["base_url"] = url
        if token:
            kwargs["auth_token"] = token
        return cls(**kwargs)


@dataclass(frozen=True)
class FinetuneJob:
    job_id: str
    status: str  # queued | running | succeeded | failed
    result_model_id: str | None = None
    error: str | None = None

    def __post_init__(self):
        if self.status not in ("queued", "running", "succeeded", "failed"):
            raise ProtocolError(f"unknown job status {self.status!r}")
        if (self.status == "succeeded") != (self.result_model_id is not None):
            raise ProtocolError("result_model_id must be present exactly when status is succeeded")

    @property
    def terminal(self) -> bool:
        return self.status in ("succeeded", "failed")


def pair_content_key(round_tag: str, pairs: Sequence[TrainingPair]) -> str:
    """Idempotency key: content hash over the round tag and its sorted pairs."""
    pair_hashes = sorted(
        hashlib.sha256(json.dumps([p.prompt_text, p.response_text]).encode()).hexdigest()
        for p in pairs
    )
    payload = json.dumps([round_tag, pair_hashes]).encode()
    return hashlib.sha256(payload).hexdigest()


class RemoteBackend(ModelBackend):
    persistent_models = True

    def __init__(self, config: RemoteConfig, transport: httpx.BaseTransport | None = None):
        self.config = config
        headers = {}
        if config.auth_token:
            headers["Authorization"] = f"Bearer {config.auth_token}"
        self._client = httpx.Client(
            base_url=config.base_url,
            headers=headers,
            timeout=config.timeout,
            transport=transport,
        )
        self.retries_used = 0

    def close(self) -> None:
        self._client.close()

    # -- transport ----------------------------------------------------------

    def _request(self, method: str, path: str, body: dict | None = None, retryable: bool = True) -> dict:
        attempts = self.config.max_attempts if retryable else 1
        last_error: Exception | None = None
        for attempt in range(attempts):
            if attempt > 0:
                self.retries_used += 1
                if self.config.backoff_base > 0:
                    time.sleep(self.config.backoff_base * (2 ** (attempt - 1)))
            try:
                response = self._client.request(method, path, json=body)
            except httpx.TransportError as exc:
                last_error = exc
                continue
            if response.status_code >= 500:
                last_error = BackendError(f"{method} {path}: server error {response.status_code}")
                continue
            if response.status_code >= 400:
                raise ConfigError(f"{method} {path}: {response.status_code} {response.text}")
            try:
                return response.json()
            except json.JSONDecodeError as exc:
                raise ProtocolError(f"{method} {path}: response is not JSON: {exc}") from None
        raise BackendError(f"{method} {path}: failed after {attempts} attempt(s): {last_error}")

    # -- generate -----------------------------------------------------------

    def generate(
        self,
        model_ref: str,
        prompt_text: str,
        sampling: SamplingConfig,
        rng: np.random.Generator,
    ) -> GenerationRecord:
        seed = int(rng.integers(0, 2**63 - 1))
        request_id = hashlib.sha256(
            json.dumps([model_ref, prompt_text, seed]).encode()
        ).hexdigest()[:32]
        body = {
            "model": model_ref,
            "prompt": prompt_text,
            "temperature": sampling.temperature,
            "top_p": sampling.top_p,
            "max_tokens": sampling.max_new_tokens,
            "seed": seed,
            "logprobs": True,
            "eos_logprobs": True,
            "request_id": request_id,
        }
        payload = self._request("POST", "/v1/generate", body, retryable=True)
        return self._parse_generate(payload)

    @staticmethod
    def _parse_generate(payload: dict) -> GenerationRecord:
        if "tokens" not in payload:
            raise ProtocolError("generate response is missing the tokens array")
        if "text" not in payload or "finish_reason" not in payload:
            raise ProtocolError("generate response is missing text or finish_reason")
        tokens = []
        for i, entry in enumerate(payload["tokens"]):
            if "token" not in entry or "logprob" not in entry:
                raise ProtocolError(f"token entry {i} is missing token or logprob")
            tokens.append((entry["token"], math.exp(float(entry["logprob"]))))
        finish = _FINISH_MAP.get(payload["finish_reason"])
        if finish is None:
            raise ProtocolError(f"unknown finish_reason {payload['finish_reason']!r}")
        trace = payload.get("eos_logprobs")
        eos_trace = None
        if trace is not None:
            if len(trace) != len(tokens):
                raise ProtocolError("eos_logprobs length does not match tokens")
            eos_trace = tuple(0.0 if lp is None else math.exp(float(lp)) for lp in trace)
        return GenerationRecord(
            prompt_id="",
            response_text=payload["text"],
            tokens=tuple(tokens),
            finish=finish,
            eos_probability_trace=eos_trace,
        )

    # -- next-token distribution ---------------------------------------------

    def next_token_distribution(self, model_ref: str, context_text: str) -> NextTokenDistribution:
        payload = self._request(
            "POST", "/v1/next_token", {"model": model_ref, "prompt": context_text, "top_k": 0}, retryable=True
        )
        mode = payload.get("mode", "full")
        if "tokens" not in payload or "probs" not in payload:
            raise ProtocolError("next_token response is missing tokens or probs")
        tokens = tuple(payload["tokens"])
        probs = tuple(float(p) for p in payload["probs"])
        eos_index = payload.get("eos_index")
        if mode == "full":
            total = sum(probs)
            if abs(total - 1.0) > 1e-6:
                raise ProtocolError(f"full distribution sums to {total}, expected 1 (+-1e-6)")
            return NextTokenDistribution(tokens=tokens, probs=probs, eos_index=eos_index, complete=True)
        if mode == "top_k":
            remainder = float(payload.get("remainder", 0.0))
            return NextTokenDistribution(
                tokens=tokens, probs=probs, eos_index=eos_index, complete=False, remainder=remainder
            )
        raise ProtocolError(f"unknown next_token mode {mode!r}")

    # -- fine-tuning ----------------------------------------------------------

    def finetune(
        self,
        model_ref: str,
        pairs: Sequence[TrainingPair],
        params: dict,
        state_dir: Path | None = None,
    ) -> str:
        if not pairs:
            raise FinetuneError("finetune requires at least one training pair")

        key_path = state_dir / _KEY_FILE if state_dir is not None else None
        state = {"idempotency_key": None, "job_id": None, "result_model_id": None}
        if key_path is not None and key_path.exists():
            state = json.loads(key_path.read_text(encoding="utf-8"))
            if state.get("result_model_id"):
                return state["result_model_id"]

        if state.get("job_id"):
            job_id = state["job_id"]
        else:
            round_tag = state_dir.name if state_dir is not None else ""
            key = state.get("idempotency_key") or pair_content_key(round_tag, pairs)
            state["idempotency_key"] = key
            if key_path is not None:
                _write_json(key_path, state)  # key on disk before the first POST
            body = {
                "base_model": model_ref,
                "pairs": [{"prompt": p.prompt_text, "response": p.response_text} for p in pairs],
                "hyperparams": dict(params),
                "idempotency_key": key,
            }
            payload = self._request("POST", "/v1/finetune", body, retryable=False)
            if "job_id" not in payload:
                raise ProtocolError("finetune response is missing job_id")
            job_id = payload["job_id"]
            state["job_id"] = job_id
            if key_path is not None:
                _write_json(key_path, state)

        job = self._poll_job(job_id)
        if job.status == "failed":
            raise FinetuneError(f"fine-tune job {job_id} failed: {job.error or 'no error message'}")
        state["result_model_id"] = job.result_model_id
        if key_path is not None:
            _write_json(key_path, state)
        return job.result_model_id

    def _poll_job(self, job_id: str) -> FinetuneJob:
        deadline = time.monotonic() + self.config.poll_timeout
        while True:
            payload = self._request("GET", f"/v1/jobs/{job_id}", retryable=True)
            job = FinetuneJob(
                job_id=payload.get("job_id", job_id),
                status=payload.get("status", ""),
                result_model_id=payload.get("result_model_id"),
                error=payload.get("error"),
            )
            if job.terminal:
                return job
            if time.monotonic() >= deadline:
                raise FinetuneError(f"fine-tune job {job_id} did not finish within {self.config.poll_timeout}s")
            time.sleep(self.config.poll_interval)


def _write_json(path: Path, obj: dict) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")
