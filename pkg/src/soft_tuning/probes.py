"""Collapse detection.

Two gates drive the pipeline's early stop, both watching the end-of-sequence
token: on an unbiased four-choice set, EOS overtaking the least probable
option label; on a generation set, the average EOS probability over
reference-response positions jumping by a configured ratio round over round.
Tail mass, output length and refusal rate are diagnostics only; they are
reported but never veto a round.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .backends.base import ModelBackend, NextTokenDistribution
from .domain import (
    GenerationRecord,
    RefusalPattern,
    _data_path,
    _iter_jsonl,
    load_refusal_patterns,
    refusal_rate,
)
from .errors import CapabilityError, ConfigError, DataFormatError

GATE_EOS_CHOICE = "eos_choice"
GATE_EOS_GEN = "eos_gen"

OPTION_LABELS = ("A", "B", "C", "D")


@dataclass(frozen=True)
class ChoiceValidationItem:
    """A four-option multiple-choice question with no extra context."""

    question: str
    options: tuple[str, str, str, str]

    def __post_init__(self):
        if len(self.options) != 4 or any(not o for o in self.options):
            raise DataFormatError("choice item needs exactly four non-empty options")
        if not self.question:
            raise DataFormatError("choice item question must be non-empty")

    def render(self, answer_suffix: str = "Answer:") -> str:
        opts = " ".join(f"{label}. {text}" for label, text in zip(OPTION_LABELS, self.options))
        return f"{self.question}\n{opts}\n{answer_suffix}"


@dataclass(frozen=True)
class GenValidationItem:
    """A generation question with a reference response pre-generated by the
    starting model, kept token-aligned so EOS probability can be read at
    every position."""

    question: str
    reference_response: str
    reference_tokens: tuple[str, ...]

    def __post_init__(self):
        if not self.reference_response:
            raise DataFormatError("reference_response must be non-empty")
        if not self.reference_tokens:
            raise DataFormatError("reference_tokens must be non-empty")

    @property
    def token_join(self) -> str:
        """Separator that reconstructs the response from its tokens."""
        if "".join(self.reference_tokens) == self.reference_response:
            return ""
        return " "

    def position_context(self, i: int) -> str:
        """Context text for probing the i-th token position (0-based)."""
        prefix = self.token_join.join(self.reference_tokens[:i])
        return f"{self.question}\n{prefix}" if prefix else f"{self.question}\n"


@dataclass(frozen=True)
class ProbeConfig:
    eos_gen_ratio: float = 2.0
    tail_K: tuple[int, ...] = (10, 100)
    enabled_gates: tuple[str, ...] = (GATE_EOS_CHOICE, GATE_EOS_GEN)
    refusal_patterns: tuple[RefusalPattern, ...] | None = None
    answer_suffix: str = "Answer:"
    option_token_variants: tuple[str, ...] = ("{label}", " {label}", "{label}.")
    choice_aggregate: str = "majority"  # or "any"
    tail_context: str | None = None

    def __post_init__(self):
        if self.eos_gen_ratio <= 1:
            raise ConfigError(f"eos_gen_ratio must be > 1, got {self.eos_gen_ratio}")
        if any(k < 1 for k in self.tail_K):
            raise ConfigError("tail_K values must be >= 1")
        unknown = set(self.enabled_gates) - {GATE_EOS_CHOICE, GATE_EOS_GEN}
        if unknown:
            raise ConfigError(f"unknown gates: {sorted(unknown)}")
        if self.choice_aggregate not in ("majority", "any"):
            raise ConfigError(f"choice_aggregate must be 'majority' or 'any'")

    def patterns(self) -> tuple[RefusalPattern, ...]:
        return self.refusal_patterns if self.refusal_patterns is not None else load_refusal_patterns()

    def to_json_dict(self) -> dict:
        return {
            "eos_gen_ratio": self.eos_gen_ratio,
            "tail_K": list(self.tail_K),
            "enabled_gates": list(self.enabled_gates),
            "refusal_patterns": None
            if self.refusal_patterns is None
            else [{"kind": p.kind, "value": p.value} for p in self.refusal_patterns],
            "answer_suffix": self.answer_suffix,
            "option_token_variants": list(self.option_token_variants),
            "choice_aggregate": self.choice_aggregate,
            "tail_context": self.tail_context,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ProbeConfig":
        raw_patterns = d.get("refusal_patterns")
        return cls(
            eos_gen_ratio=float(d.get("eos_gen_ratio", 2.0)),
            tail_K=tuple(int(k) for k in d.get("tail_K", (10, 100))),
            enabled_gates=tuple(d.get("enabled_gates", (GATE_EOS_CHOICE, GATE_EOS_GEN))),
            refusal_patterns=None
            if raw_patterns is None
            else tuple(RefusalPattern(kind=p["kind"], value=p["value"]) for p in raw_patterns),
            answer_suffix=d.get("answer_suffix", "Answer:"),
            option_token_variants=tuple(d.get("option_token_variants", ("{label}", " {label}", "{label}."))),
            choice_aggregate=d.get("choice_aggregate", "majority"),
            tail_context=d.get("tail_context"),
        )


@dataclass(frozen=True)
class ChoiceItemResult:
    eos_prob: float
    min_option_prob: float
    triggered: bool


@dataclass(frozen=True)
class ChoiceGateResult:
    items: tuple[ChoiceItemResult, ...]
    triggered: bool


@dataclass(frozen=True)
class GenGateResult:
    avg_eos_prob: float
    previous: float | None
    triggered: bool


@dataclass
class ProbeState:
    """Round-to-round carrier for the generation gate baseline."""

    previous_gen_avg: float | None = None


@dataclass(frozen=True)
class ProbeReport:
    verdict: bool
    eos_choice: ChoiceGateResult | None = None
    eos_gen: GenGateResult | None = None
    tail_mass: dict[int, float] = field(default_factory=dict)
    avg_output_length: float | None = None
    refusal_rate: float | None = None
    warnings: tuple[str, ...] = ()

    def to_json_dict(self) -> dict:
        return {
            "schema_version": "1",
            "verdict": self.verdict,
            "eos_choice": None
            if self.eos_choice is None
            else {
                "items": [
                    {
                        "eos_prob": i.eos_prob,
                        "min_option_prob": i.min_option_prob,
                        "triggered": i.triggered,
                    }
                    for i in self.eos_choice.items
                ],
                "triggered": self.eos_choice.triggered,
            },
            "eos_gen": None
            if self.eos_gen is None
            else {
                "avg_eos_prob": self.eos_gen.avg_eos_prob,
                "previous": self.eos_gen.previous,
                "triggered": self.eos_gen.triggered,
            },
            "tail_mass": {str(k): v for k, v in self.tail_mass.items()},
            "avg_output_length": self.avg_output_length,
            "refusal_rate": self.refusal_rate,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ProbeReport":
        choice = d.get("eos_choice")
        gen = d.get("eos_gen")
        return cls(
            verdict=bool(d["verdict"]),
            eos_choice=None
            if choice is None
            else ChoiceGateResult(
                items=tuple(
                    ChoiceItemResult(
                        eos_prob=float(i["eos_prob"]),
                        min_option_prob=float(i["min_option_prob"]),
                        triggered=bool(i["triggered"]),
                    )
                    for i in choice["items"]
                ),
                triggered=bool(choice["triggered"]),
            ),
            eos_gen=None
            if gen is None
            else GenGateResult(
                avg_eos_prob=float(gen["avg_eos_prob"]),
                previous=None if gen.get("previous") is None else float(gen["previous"]),
                triggered=bool(gen["triggered"]),
            ),
            tail_mass={int(k): float(v) for k, v in d.get("tail_mass", {}).items()},
            avg_output_length=d.get("avg_output_length"),
            refusal_rate=d.get("refusal_rate"),
            warnings=tuple(d.get("warnings", ())),
        )


# ---------------------------------------------------------------------------
# operations


def tail_mass(distribution, K: int) -> float:
    """Sum of the K smallest probabilities of a full next-token distribution."""
    if isinstance(distribution, NextTokenDistribution):
        if not distribution.complete:
            raise CapabilityError(
                "tail mass needs the full vocabulary distribution; "
                "this backend returned a top-k truncation"
            )
        probs = distribution.as_array()
    else:
        probs = np.asarray(distribution, dtype=float)
    if not (1 <= K <= probs.size):
        raise ValueError(f"K must be in 1..{probs.size}, got {K}")
    total = float(probs.sum())
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"distribution sums to {total}, expected 1 (+-1e-6)")
    return float(np.sort(probs)[:K].sum())


def option_probability(dist: NextTokenDistribution, label: str, variants: Sequence[str]) -> float:
    """Probability mass on a choice label, summed over its token variants."""
    found = []
    for template in variants:
        p = dist.prob_of(template.format(label=label))
        if p is not None:
            found.append(p)
    if not found:
        raise CapabilityError(
            f"option label {label!r} is not present in the returned distribution; "
            "the choice probe needs a backend that covers the option tokens"
        )
    return float(sum(found))


def eos_choice_probe(
    backend: ModelBackend,
    model_ref: str,
    items: Sequence[ChoiceValidationItem],
    cfg: ProbeConfig,
) -> ChoiceGateResult:
    """Per item: does EOS outweigh the least probable option label?

    The gate aggregates per-item triggers by strict majority (or any-item,
    per configuration).
    """
    if not items:
        raise ValueError("eos_choice_probe requires at least one item")
    results = []
    for item in items:
        dist = backend.next_token_distribution(model_ref, item.render(cfg.answer_suffix))
        eos_p = dist.eos_prob
        min_opt = min(
            option_probability(dist, label, cfg.option_token_variants) for label in OPTION_LABELS
        )
        results.append(
            ChoiceItemResult(eos_prob=eos_p, min_option_prob=min_opt, triggered=eos_p > min_opt)
        )
    hits = sum(1 for r in results if r.triggered)
    if cfg.choice_aggregate == "any":
        aggregated = hits >= 1
    else:
        aggregated = 2 * hits > len(results)
    return ChoiceGateResult(items=tuple(results), triggered=aggregated)


def eos_gen_probe(
    backend: ModelBackend,
    model_ref: str,
    items: Sequence[GenValidationItem],
    previous_avg: float | None,
    ratio: float,
) -> GenGateResult:
    """Average EOS probability over every reference-response token position;
    triggers when it reaches ratio x the previous round's average."""
    if not items:
        raise ValueError("eos_gen_probe requires at least one item")
    if ratio <= 1:
        raise ValueError(f"ratio must be > 1, got {ratio}")
    eos_probs = []
    for item in items:
        for i in range(len(item.reference_tokens)):
            dist = backend.next_token_distribution(model_ref, item.position_context(i))
            eos_probs.append(dist.eos_prob)
    avg = float(np.mean(eos_probs))
    triggered = previous_avg is not None and avg >= ratio * previous_avg
    return GenGateResult(avg_eos_prob=avg, previous=previous_avg, triggered=triggered)


def avg_output_length(records: Sequence[GenerationRecord]) -> float:
    """Mean count of tokens emitted before EOS or truncation."""
    if not records:
        raise ValueError("avg_output_length requires at least one record")
    return float(np.mean([r.output_length for r in records]))


def validate(
    backend: ModelBackend,
    model_ref: str,
    choice_items: Sequence[ChoiceValidationItem] | None,
    gen_items: Sequence[GenValidationItem] | None,
    state: ProbeState,
    cfg: ProbeConfig,
    records: Sequence[GenerationRecord] | None = None,
) -> ProbeReport:
    """Run the enabled gates plus all diagnostics; verdict is healthy only
    when no enabled gate triggered.  Diagnostics failures become warnings and
    never flip the verdict.  Updates ``state`` with this round's generation
    average so the next round compares against it.
    """
    if not cfg.enabled_gates:
        raise ValueError("validate requires at least one enabled gate")

    choice_result = None
    gen_result = None
    if GATE_EOS_CHOICE in cfg.enabled_gates:
        if not choice_items:
            raise ConfigError("eos_choice gate is enabled but no choice validation items were given")
        choice_result = eos_choice_probe(backend, model_ref, choice_items, cfg)
    if GATE_EOS_GEN in cfg.enabled_gates:
        if not gen_items:
            raise ConfigError("eos_gen gate is enabled but no generation validation items were given")
        gen_result = eos_gen_probe(
            backend, model_ref, gen_items, state.previous_gen_avg, cfg.eos_gen_ratio
        )
        state.previous_gen_avg = gen_result.avg_eos_prob

    verdict = not (
        (choice_result.triggered if choice_result else False)
        or (gen_result.triggered if gen_result else False)
    )
    diag = _diagnostics(backend, model_ref, choice_items, cfg, records)
    return ProbeReport(
        verdict=verdict,
        eos_choice=choice_result,
        eos_gen=gen_result,
        tail_mass=diag["tail_mass"],
        avg_output_length=diag["avg_output_length"],
        refusal_rate=diag["refusal_rate"],
        warnings=tuple(diag["warnings"]),
    )


def diagnostics_report(
    backend: ModelBackend,
    model_ref: str,
    choice_items: Sequence[ChoiceValidationItem] | None,
    cfg: ProbeConfig,
    records: Sequence[GenerationRecord] | None = None,
) -> ProbeReport:
    """A gate-free report (always healthy) carrying only diagnostics."""
    diag = _diagnostics(backend, model_ref, choice_items, cfg, records)
    return ProbeReport(
        verdict=True,
        tail_mass=diag["tail_mass"],
        avg_output_length=diag["avg_output_length"],
        refusal_rate=diag["refusal_rate"],
        warnings=tuple(diag["warnings"]),
    )


def _diagnostics(backend, model_ref, choice_items, cfg: ProbeConfig, records) -> dict:
    warnings: list[str] = []
    masses: dict[int, float] = {}
    context = cfg.tail_context
    if context is None and choice_items:
        context = choice_items[0].render(cfg.answer_suffix)
    if context is None:
        warnings.append("tail_mass skipped: no probe context available")
    else:
        try:
            dist = backend.next_token_distribution(model_ref, context)
            for k in cfg.tail_K:
                masses[k] = tail_mass(dist, min(k, len(dist.probs)))
        except Exception as exc:
            warnings.append(f"tail_mass failed: {exc}")

    length = None
    rate = None
    if records:
        try:
            length = avg_output_length(records)
        except Exception as exc:
            warnings.append(f"avg_output_length failed: {exc}")
        try:
            rate = refusal_rate(records, cfg.patterns())
        except Exception as exc:
            warnings.append(f"refusal_rate failed: {exc}")
    return {"tail_mass": masses, "avg_output_length": length, "refusal_rate": rate, "warnings": warnings}


# ---------------------------------------------------------------------------
# validation-set files


def load_choice_items(path: str | Path | None = None) -> tuple[ChoiceValidationItem, ...]:
    """JSONL {question, options: [4 strings]}; default is the packaged set."""
    source = _data_path("validation_choice.jsonl") if path is None else path
    items = []
    for lineno, obj in _iter_jsonl(source):
        try:
            items.append(ChoiceValidationItem(question=obj["question"], options=tuple(obj["options"])))
        except KeyError as exc:
            raise DataFormatError(f"choice item line {lineno}: missing field {exc}") from None
    return tuple(items)


def load_gen_questions(path: str | Path | None = None) -> tuple[str, ...]:
    """JSONL {question}; default is the packaged generation set."""
    source = _data_path("validation_gen_questions.jsonl") if path is None else path
    questions = []
    for lineno, obj in _iter_jsonl(source):
        if "question" not in obj:
            raise DataFormatError(f"generation item line {lineno}: missing field 'question'")
        questions.append(obj["question"])
    return tuple(questions)


def load_gen_items(path: str | Path) -> tuple[GenValidationItem, ...]:
    """JSONL {question, reference_response, reference_tokens}."""
    items = []
    for lineno, obj in _iter_jsonl(path):
        try:
            items.append(
                GenValidationItem(
                    question=obj["question"],
                    reference_response=obj["reference_response"],
                    reference_tokens=tuple(obj["reference_tokens"]),
                )
            )
        except KeyError as exc:
            raise DataFormatError(f"generation item line {lineno}: missing field {exc}") from None
    return tuple(items)


def save_gen_items(items: Sequence[GenValidationItem], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for it in items:
            f.write(
                json.dumps(
                    {
                        "schema_version": "1",
                        "question": it.question,
                        "reference_response": it.reference_response,
                        "reference_tokens": list(it.reference_tokens),
                    },
                    ensure_ascii=False,
                    sort_keys=True,
                )
                + "\n"
            )
