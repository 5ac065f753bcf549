import json
import re
from collections import Counter

import numpy as np
import pytest

from soft_tuning.domain import (
    GenerationRecord,
    IclExample,
    IclPool,
    Prompt,
    PromptDataset,
    RefusalPattern,
    assemble_prompt,
    load_pool,
    load_refusal_patterns,
    refusal_rate,
    sample_icl,
    save_pool,
)
from soft_tuning.errors import DataFormatError


def make_record(text, prompt_id="p"):
    tokens = tuple((w, 0.5) for w in text.split()) or (("<eos>", 0.5),)
    return GenerationRecord(prompt_id=prompt_id, response_text=text, tokens=tokens, finish="eos")


# ---------------------------------------------------------------------------
# pool loading


class TestLoadPool:
    def test_packaged_pool_is_strict_clean(self, pool):
        assert len(pool) == 48
        assert pool.refusal_count == 5
        assert sum(1 for e in pool.examples if e.polarity == "negative") == 5

    def test_empty_file_strict_errors(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        with pytest.raises(DataFormatError, match=r"size mismatch 0 != 48"):
            load_pool(path)

    def test_small_file_lenient_returns_warnings(self, write_jsonl):
        rows = [
            {"user": f"u{i}", "internal_thoughts": f"t{i}", "assistant": f"a{i}",
             "polarity": "positive", "refusal": False}
            for i in range(3)
        ]
        path = write_jsonl("small.jsonl", rows)
        loaded, warnings = load_pool(path, strict=False)
        assert len(loaded) == 3
        assert any("size mismatch 3 != 48" in w for w in warnings)

    def test_malformed_entry_names_index(self, write_jsonl):
        rows = [
            {"user": "u", "internal_thoughts": "t", "assistant": "a"},
            {"user": "u", "assistant": "a"},  # missing thoughts
        ]
        path = write_jsonl("bad.jsonl", rows)
        with pytest.raises(DataFormatError, match=r"entry 1"):
            load_pool(path, strict=False)

    def test_refusal_flag_must_match_a_pattern(self, write_jsonl):
        rows = [
            {"user": "u", "internal_thoughts": "t", "assistant": "a perfectly normal answer",
             "polarity": "negative", "refusal": True}
        ]
        path = write_jsonl("flag.jsonl", rows)
        with pytest.raises(DataFormatError, match="matches no refusal pattern"):
            load_pool(path, expected_size=1, expected_refusal_count=1)

    def test_round_trip_identity(self, pool, tmp_path):
        out = tmp_path / "again.jsonl"
        save_pool(pool, out)
        again, warnings = load_pool(out)
        assert not warnings
        assert again.examples == pool.examples


# ---------------------------------------------------------------------------
# ICL sampling


class TestSampleIcl:
    def test_draws_k_distinct(self, pool):
        drawn = sample_icl(pool, 4, np.random.default_rng(11))
        assert len(drawn) == 4
        assert len({e.pool_index for e in drawn}) == 4

    def test_pool_of_one_forced(self):
        only = IclExample(user_text="u", internal_thoughts="t", assistant_text="a", pool_index=0)
        tiny = IclPool(examples=(only,), expected_size=1, expected_refusal_count=0)
        assert sample_icl(tiny, 1, np.random.default_rng(0)) == [only]

    def test_fixed_seed_is_deterministic(self, pool):
        a = sample_icl(pool, 4, np.random.default_rng(123))
        b = sample_icl(pool, 4, np.random.default_rng(123))
        assert [e.pool_index for e in a] == [e.pool_index for e in b]

    def test_k_larger_than_pool_errors(self, pool):
        with pytest.raises(ValueError):
            sample_icl(pool, 49, np.random.default_rng(0))

    def test_uniformity_smoke(self, pool):
        # 10k draws of 4 from 48: every index lands near expectation 4/48
        counts = Counter()
        rng = np.random.default_rng(7)
        draws = 10_000
        for _ in range(draws):
            for e in sample_icl(pool, 4, rng):
                counts[e.pool_index] += 1
        expected = draws * 4 / 48
        for idx in range(48):
            assert abs(counts[idx] - expected) <= 0.2 * expected, f"index {idx}: {counts[idx]}"


# ---------------------------------------------------------------------------
# prompt assembly + the independent template parser oracle


def parse_assembled(text: str, principles) -> tuple[int, int, str]:
    """Oracle: recover (rule count, example count, question) from rendered text."""
    rules_part, sep, examples_part = text.partition(f"\n\n{principles.examples_header}\n\n")
    assert sep, "examples header missing"
    rule_count = len(re.findall(r"(?m)^\d+ \([^)]+\)\. ", rules_part))
    hand_off = (
        f"User: {principles.separator_user}\n\n"
        f"{principles.assistant_name} (auto reply): {principles.separator_reply}"
    )
    example_count = examples_part.count(hand_off)
    question = examples_part.rsplit("\n\nUser: ", 1)[1]
    return rule_count, example_count, question


class TestAssemblePrompt:
    def test_structure(self, pool, principles):
        examples = sample_icl(pool, 4, np.random.default_rng(5))
        q = Prompt(id="q", text="Why is the sky blue?")
        assembled = assemble_prompt(principles, examples, q)
        text = assembled.text
        rule16 = text.index("16 (operational).")
        first_example = text.index(f"User: {examples[0].user_text}")
        assert rule16 < first_example
        assert text.endswith("User: Why is the sky blue?")
        assert assembled.prompt_id == "q"
        assert assembled.example_ids == tuple(e.pool_index for e in examples)

    def test_single_example_single_separator(self, pool, principles):
        examples = sample_icl(pool, 1, np.random.default_rng(5))
        assembled = assemble_prompt(principles, examples, Prompt(id="q", text="hi there"))
        _, n_examples, _ = parse_assembled(assembled.text, principles)
        assert n_examples == 1

    def test_round_trip(self, pool, principles):
        examples = sample_icl(pool, 4, np.random.default_rng(5))
        q = Prompt(id="q", text="What changed?")
        assembled = assemble_prompt(principles, examples, q)
        assert parse_assembled(assembled.text, principles) == (16, 4, "What changed?")

    def test_injective_on_question(self, pool, principles):
        examples = sample_icl(pool, 4, np.random.default_rng(5))
        a = assemble_prompt(principles, examples, Prompt(id="a", text="first question"))
        b = assemble_prompt(principles, examples, Prompt(id="b", text="second question"))
        assert a.text != b.text
        prefix_a = a.text.rsplit("\n\nUser: ", 1)[0]
        prefix_b = b.text.rsplit("\n\nUser: ", 1)[0]
        assert prefix_a == prefix_b

    def test_requires_examples(self, principles):
        with pytest.raises(ValueError):
            assemble_prompt(principles, [], Prompt(id="q", text="hm"))


# ---------------------------------------------------------------------------
# refusal rate


class TestRefusalRate:
    def test_published_ratio(self):
        patterns = load_refusal_patterns()
        matching = [make_record("As an AI language model, I lack specific information about x") for _ in range(1246)]
        clean = [make_record("Here is a thorough, helpful answer.") for _ in range(2043 - 1246)]
        rate = refusal_rate(matching + clean, patterns)
        assert rate == pytest.approx(0.6099, abs=1e-4)

    def test_none_match(self):
        patterns = load_refusal_patterns()
        records = [make_record("a fine answer") for _ in range(10)]
        assert refusal_rate(records, patterns) == 0.0

    def test_all_match(self):
        patterns = load_refusal_patterns()
        records = [make_record("As an AI language model, I am unable to help") for _ in range(10)]
        assert refusal_rate(records, patterns) == 1.0

    def test_permutation_invariant(self):
        patterns = load_refusal_patterns()
        records = [make_record("As an AI language model, I am unable to x")] * 3 + [
            make_record("fine")
        ] * 5
        rng = np.random.default_rng(3)
        shuffled = list(records)
        rng.shuffle(shuffled)
        assert refusal_rate(records, patterns) == refusal_rate(shuffled, patterns)

    def test_empty_errors(self):
        with pytest.raises(ValueError):
            refusal_rate([], load_refusal_patterns())

    def test_regex_patterns_match(self):
        pattern = RefusalPattern(kind="regex", value=r"cannot (help|assist)")
        assert pattern.matches("Sadly I CANNOT ASSIST with that")
        assert not pattern.matches("happy to help")


# ---------------------------------------------------------------------------
# record invariants and dataset loading


class TestRecords:
    def test_probability_bounds(self):
        with pytest.raises(DataFormatError):
            GenerationRecord(prompt_id="p", response_text="x", tokens=(("x", 0.0),), finish="eos")
        with pytest.raises(DataFormatError):
            GenerationRecord(prompt_id="p", response_text="x", tokens=(("x", 1.5),), finish="eos")

    def test_trace_length_must_match(self):
        with pytest.raises(DataFormatError):
            GenerationRecord(
                prompt_id="p",
                response_text="x",
                tokens=(("x", 0.5),),
                finish="eos",
                eos_probability_trace=(0.1, 0.2),
            )

    def test_output_length_excludes_terminal_eos(self):
        rec = GenerationRecord(
            prompt_id="p",
            response_text="a b",
            tokens=(("a", 0.5), ("b", 0.5), ("<eos>", 0.5)),
            finish="eos",
        )
        assert rec.output_length == 2
        truncated = GenerationRecord(
            prompt_id="p", response_text="a b", tokens=(("a", 0.5), ("b", 0.5)), finish="length_limit"
        )
        assert truncated.output_length == 2

    def test_json_round_trip(self):
        rec = GenerationRecord(
            prompt_id="p",
            response_text="a",
            tokens=(("a", 0.25), ("<eos>", 0.5)),
            finish="eos",
            eos_probability_trace=(0.1, 0.5),
        )
        assert GenerationRecord.from_json_dict(json.loads(json.dumps(rec.to_json_dict()))) == rec


class TestPromptDataset:
    def test_duplicate_ids_rejected(self):
        with pytest.raises(DataFormatError, match="duplicate"):
            PromptDataset((Prompt(id="a", text="x"), Prompt(id="a", text="y")))

    def test_empty_text_rejected(self):
        with pytest.raises(DataFormatError):
            Prompt(id="a", text="")
