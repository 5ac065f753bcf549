"""Core vocabulary: prompts, the ICL example pool, guiding principles,
few-shot prompt assembly, generation records and training pairs.

Everything here is an immutable value object; the only stateful input to any
operation is an explicitly passed random generator.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib.resources import files
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataFormatError

FINISH_EOS = "eos"
FINISH_LENGTH = "length_limit"

DEFAULT_POOL_SIZE = 48
DEFAULT_REFUSAL_COUNT = 5


def _data_path(name: str):
    return files("soft_tuning.data").joinpath(name)


# ---------------------------------------------------------------------------
# prompts


@dataclass(frozen=True)
class Prompt:
    """A single task question."""

    id: str
    text: str
    origin: str = ""

    def __post_init__(self):
        if not self.id:
            raise DataFormatError("prompt id must be non-empty")
        if not self.text:
            raise DataFormatError(f"prompt {self.id!r}: text must be non-empty")


@dataclass(frozen=True)
class PromptDataset:
    """Ordered prompt collection; order is the curriculum order after sorting."""

    prompts: tuple[Prompt, ...]

    def __post_init__(self):
        seen = set()
        for p in self.prompts:
            if p.id in seen:
                raise DataFormatError(f"duplicate prompt id {p.id!r}")
            seen.add(p.id)

    def __len__(self) -> int:
        return len(self.prompts)

    def __iter__(self):
        return iter(self.prompts)

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(p.id for p in self.prompts)

    def by_id(self, prompt_id: str) -> Prompt:
        for p in self.prompts:
            if p.id == prompt_id:
                return p
        raise KeyError(prompt_id)

    def subset(self, ids: Sequence[str]) -> tuple[Prompt, ...]:
        index = {p.id: p for p in self.prompts}
        return tuple(index[i] for i in ids)


def load_prompt_dataset(path: str | Path) -> PromptDataset:
    """Read a JSONL prompt file with fields id, text, origin."""
    prompts = []
    for lineno, obj in _iter_jsonl(path):
        try:
            prompts.append(Prompt(id=str(obj["id"]), text=obj["text"], origin=obj.get("origin", "")))
        except KeyError as exc:
            raise DataFormatError(f"{path}:{lineno}: missing field {exc}") from None
    return PromptDataset(tuple(prompts))


def save_prompt_dataset(dataset: PromptDataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in dataset:
            f.write(json.dumps({"id": p.id, "text": p.text, "origin": p.origin}, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# refusal patterns


@dataclass(frozen=True)
class RefusalPattern:
    """Case-insensitive prefix or regex matched against a response text."""

    kind: str  # "prefix" | "regex"
    value: str

    def __post_init__(self):
        if self.kind not in ("prefix", "regex"):
            raise DataFormatError(f"unknown refusal pattern kind {self.kind!r}")

    def matches(self, text: str) -> bool:
        if self.kind == "prefix":
            return text.lstrip().lower().startswith(self.value.lower())
        return re.search(self.value, text, re.IGNORECASE) is not None


def load_refusal_patterns(path: str | Path | None = None) -> tuple[RefusalPattern, ...]:
    """Load a pattern list; with no path, the packaged defaults."""
    if path is None:
        raw = json.loads(_data_path("refusal_patterns.json").read_text(encoding="utf-8"))
    else:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return tuple(RefusalPattern(kind=e["kind"], value=e["value"]) for e in raw)


def matches_any(text: str, patterns: Sequence[RefusalPattern]) -> bool:
    return any(p.matches(text) for p in patterns)


# ---------------------------------------------------------------------------
# ICL pool


@dataclass(frozen=True)
class IclExample:
    """One pool demonstration: a user turn, the assistant's internal thoughts,
    and the assistant's visible reply."""

    user_text: str
    internal_thoughts: str
    assistant_text: str
    polarity: str = "positive"  # "positive" | "negative"
    refusal: bool = False
    pool_index: int | None = None

    def __post_init__(self):
        for name in ("user_text", "internal_thoughts", "assistant_text"):
            if not getattr(self, name):
                raise DataFormatError(f"ICL example field {name} must be non-empty")
        if self.polarity not in ("positive", "negative"):
            raise DataFormatError(f"unknown polarity {self.polarity!r}")


@dataclass(frozen=True)
class IclPool:
    """The demonstration pool examples are drawn from, batch by batch."""

    examples: tuple[IclExample, ...]
    expected_size: int = DEFAULT_POOL_SIZE
    expected_refusal_count: int = DEFAULT_REFUSAL_COUNT

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def refusal_count(self) -> int:
        return sum(1 for e in self.examples if e.refusal)


def load_pool(
    source: str | Path,
    strict: bool = True,
    expected_size: int = DEFAULT_POOL_SIZE,
    expected_refusal_count: int = DEFAULT_REFUSAL_COUNT,
    refusal_patterns: Sequence[RefusalPattern] | None = None,
) -> tuple[IclPool, list[str]]:
    """Load an ICL pool from JSONL with fields user, internal_thoughts,
    assistant, polarity, refusal.

    Strict mode enforces the expected pool size, the expected refusal count,
    and that every refusal-flagged entry matches a configured refusal
    pattern; lenient mode downgrades those to returned warnings.  Malformed
    entries are errors in both modes.
    """
    if refusal_patterns is None:
        refusal_patterns = load_refusal_patterns()

    examples = []
    for lineno, obj in _iter_jsonl(source):
        idx = len(examples)
        try:
            example = IclExample(
                user_text=obj["user"],
                internal_thoughts=obj["internal_thoughts"],
                assistant_text=obj["assistant"],
                polarity=obj.get("polarity", "positive"),
                refusal=bool(obj.get("refusal", False)),
                pool_index=idx,
            )
        except KeyError as exc:
            raise DataFormatError(f"pool entry {idx} (line {lineno}): missing field {exc}") from None
        except DataFormatError as exc:
            raise DataFormatError(f"pool entry {idx} (line {lineno}): {exc}") from None
        examples.append(example)

    warnings: list[str] = []
    problems: list[str] = []
    if len(examples) != expected_size:
        problems.append(f"size mismatch {len(examples)} != {expected_size}")
    refusal_count = sum(1 for e in examples if e.refusal)
    if refusal_count != expected_refusal_count:
        problems.append(f"refusal count mismatch {refusal_count} != {expected_refusal_count}")
    for e in examples:
        if e.refusal and not matches_any(e.assistant_text, refusal_patterns):
            problems.append(
                f"pool entry {e.pool_index}: flagged refusal but matches no refusal pattern"
            )

    if problems and strict:
        raise DataFormatError("; ".join(problems))
    warnings.extend(problems)

    pool = IclPool(
        examples=tuple(examples),
        expected_size=expected_size,
        expected_refusal_count=expected_refusal_count,
    )
    return pool, warnings


def save_pool(pool: IclPool, path: str | Path) -> None:
    """Write a pool back to JSONL; load_pool(save_pool(p)) is identity on examples."""
    with open(path, "w", encoding="utf-8") as f:
        for e in pool.examples:
            f.write(
                json.dumps(
                    {
                        "user": e.user_text,
                        "internal_thoughts": e.internal_thoughts,
                        "assistant": e.assistant_text,
                        "polarity": e.polarity,
                        "refusal": e.refusal,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def default_pool_path():
    return _data_path("icl_pool.jsonl")


def sample_icl(pool: IclPool, k: int, rng: np.random.Generator) -> list[IclExample]:
    """Draw k distinct examples without replacement, in draw order."""
    if k < 1 or k > len(pool):
        raise ValueError(f"cannot draw {k} examples from a pool of {len(pool)}")
    indices = rng.choice(len(pool), size=k, replace=False)
    return [pool.examples[int(i)] for i in indices]


# ---------------------------------------------------------------------------
# principles and prompt assembly


@dataclass(frozen=True)
class PrincipleSet:
    """The 16 general rules plus the fixed template text around them."""

    rules: tuple[tuple[int, str, str], ...]  # (index, title, body)
    preamble: str
    assistant_name: str = "SOFT"
    title: str = "# SOFT"
    rules_header: str = "## General Rules"
    examples_header: str = "## Examples"
    examples_intro: str = ""
    separator_user: str = "Good job! Clear context"
    separator_reply: str = "Thank you! For further questions or guidance on any issue, just reach out. I'm here to assist."
    question_turn: str = "User: {question}"

    def __post_init__(self):
        if len(self.rules) != 16:
            raise DataFormatError(f"principle set must have exactly 16 rules, got {len(self.rules)}")
        for pos, (index, title, body) in enumerate(self.rules):
            if index != pos + 1:
                raise DataFormatError(f"rule at position {pos} has index {index}, expected {pos + 1}")
            if not title or not body:
                raise DataFormatError(f"rule {index}: title and body must be non-empty")
        if "{question}" not in self.question_turn:
            raise DataFormatError("question_turn must contain the {question} slot")


def load_principles(path: str | Path | None = None) -> PrincipleSet:
    """Load a principle set; with no path, the packaged 16-rule default."""
    if path is None:
        raw = json.loads(_data_path("principles.json").read_text(encoding="utf-8"))
    else:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        rules = tuple((r["index"], r["title"], r["body"]) for r in raw["rules"])
        return PrincipleSet(
            rules=rules,
            preamble=raw["preamble"],
            assistant_name=raw.get("assistant_name", "SOFT"),
            title=raw.get("title", "# SOFT"),
            rules_header=raw.get("rules_header", "## General Rules"),
            examples_header=raw.get("examples_header", "## Examples"),
            examples_intro=raw.get("examples_intro", ""),
            separator_user=raw.get("separator_user", "Good job! Clear context"),
            separator_reply=raw.get(
                "separator_reply",
                "Thank you! For further questions or guidance on any issue, just reach out. I'm here to assist.",
            ),
            question_turn=raw.get("question_turn", "User: {question}"),
        )
    except KeyError as exc:
        raise DataFormatError(f"principles file missing field {exc}") from None


@dataclass(frozen=True)
class AssembledPrompt:
    """A fully rendered few-shot model input."""

    text: str
    example_ids: tuple[int, ...]
    prompt_id: str


def assemble_prompt(
    principles: PrincipleSet,
    examples: Sequence[IclExample],
    prompt: Prompt,
) -> AssembledPrompt:
    """Render principles, demonstrations and the question into one input.

    Layout: title, rules header, preamble, the 16 rules in order, examples
    header and intro, then each demonstration as User / internal-thoughts /
    reply turns followed by the fixed hand-off block, and finally the bare
    question as the last user turn.
    """
    if not examples:
        raise ValueError("assemble_prompt requires at least one ICL example")

    name = principles.assistant_name
    blocks: list[str] = [principles.title, principles.rules_header, principles.preamble]
    for index, title, body in principles.rules:
        blocks.append(f"{index} ({title}). {body}")
    blocks.append(principles.examples_header)
    if principles.examples_intro:
        blocks.append(principles.examples_intro)
    for ex in examples:
        blocks.append(f"User: {ex.user_text}")
        blocks.append(f"{name} (internal thoughts): {ex.internal_thoughts}")
        blocks.append(f"{name}: {ex.assistant_text}")
        blocks.append(f"User: {principles.separator_user}")
        blocks.append(f"{name} (auto reply): {principles.separator_reply}")
    blocks.append(principles.question_turn.format(question=prompt.text))

    example_ids = tuple(
        ex.pool_index if ex.pool_index is not None else i for i, ex in enumerate(examples)
    )
    if len(set(example_ids)) != len(example_ids):
        raise ValueError(f"drawn examples are not distinct: {example_ids}")
    return AssembledPrompt(text="\n\n".join(blocks), example_ids=example_ids, prompt_id=prompt.id)


# ---------------------------------------------------------------------------
# generation records and training pairs


@dataclass(frozen=True)
class GenerationRecord:
    """One model response with per-token probabilities.

    ``tokens`` holds (token, probability) in emission order, including the
    terminal end-of-sequence token when generation stopped at one.
    ``eos_probability_trace`` is the probability mass the model put on the
    end-of-sequence token at each emitted position.
    """

    prompt_id: str
    response_text: str
    tokens: tuple[tuple[str, float], ...]
    finish: str
    eos_probability_trace: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.finish not in (FINISH_EOS, FINISH_LENGTH):
            raise DataFormatError(f"unknown finish reason {self.finish!r}")
        if self.response_text and not self.tokens:
            raise DataFormatError("non-empty response_text requires tokens")
        for tok, p in self.tokens:
            if not (0.0 < p <= 1.0):
                raise DataFormatError(f"token {tok!r} probability {p} outside (0, 1]")
        if self.eos_probability_trace is not None:
            if len(self.eos_probability_trace) != len(self.tokens):
                raise DataFormatError("eos_probability_trace length must match tokens")
            for p in self.eos_probability_trace:
                if not (0.0 <= p <= 1.0):
                    raise DataFormatError(f"eos trace value {p} outside [0, 1]")

    @property
    def token_probs(self) -> tuple[float, ...]:
        return tuple(p for _, p in self.tokens)

    @property
    def output_length(self) -> int:
        """Tokens emitted before the end-of-sequence token or truncation."""
        n = len(self.tokens)
        if self.finish == FINISH_EOS and n > 0:
            return n - 1
        return n

    def to_json_dict(self) -> dict:
        d = {
            "schema_version": "1",
            "prompt_id": self.prompt_id,
            "response_text": self.response_text,
            "tokens": [[t, p] for t, p in self.tokens],
            "finish": self.finish,
        }
        if self.eos_probability_trace is not None:
            d["eos_probability_trace"] = list(self.eos_probability_trace)
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "GenerationRecord":
        trace = d.get("eos_probability_trace")
        return cls(
            prompt_id=d["prompt_id"],
            response_text=d["response_text"],
            tokens=tuple((t, float(p)) for t, p in d["tokens"]),
            finish=d["finish"],
            eos_probability_trace=None if trace is None else tuple(float(p) for p in trace),
        )


@dataclass(frozen=True)
class TrainingPair:
    """A fine-tuning example: the bare question paired with the model's reply.

    The few-shot context used at generation time is stripped; prompt_text is
    the originating question, never the assembled input.
    """

    prompt_text: str
    response_text: str


def refusal_rate(
    records: Sequence[GenerationRecord],
    patterns: Sequence[RefusalPattern],
) -> float:
    """Fraction of records whose response matches at least one pattern."""
    if not records:
        raise ValueError("refusal_rate requires at least one record")
    hits = sum(1 for r in records if matches_any(r.response_text, patterns))
    return hits / len(records)


# ---------------------------------------------------------------------------
# shared JSONL helper


def _iter_jsonl(path: str | Path) -> Iterable[tuple[int, dict]]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except TypeError:
        text = path.read_text(encoding="utf-8")  # importlib.resources traversable
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}:{lineno}: invalid JSON: {exc}") from None
        if not isinstance(obj, dict):
            raise DataFormatError(f"{path}:{lineno}: expected a JSON object")
        yield lineno, obj
