"""The T-round bootstrapping loop.

Each round draws fresh demonstrations per generation batch, answers its
prompt segment few-shot, fine-tunes the current model on (bare question,
response) pairs, and then gates the new model through the collapse probes.
A failed gate ends the run and returns the pre-fine-tune survivor.  Prompts
are never reused across rounds, and every round's artifact is flushed to
disk before the next begins, so interrupted runs resume where they stopped.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .backends.base import DEFAULT_FINETUNE_PARAMS, ModelBackend, SamplingConfig
from .curriculum import (
    MODE_EASY_TO_HARD,
    MODE_RANDOM,
    SegmentPlan,
    plan_segments,
    save_scores,
    score_dataset,
)
from .domain import (
    FINISH_EOS,
    GenerationRecord,
    IclPool,
    PrincipleSet,
    Prompt,
    PromptDataset,
    TrainingPair,
    assemble_prompt,
    sample_icl,
)
from .errors import ConfigError, GenerationError
from .probes import (
    GATE_EOS_CHOICE,
    GATE_EOS_GEN,
    ChoiceValidationItem,
    GenValidationItem,
    ProbeConfig,
    ProbeReport,
    ProbeState,
    diagnostics_report,
    eos_gen_probe,
    load_gen_items,
    save_gen_items,
    validate,
)
from .seeding import derive_rng

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "1"

STOP_COMPLETED = "completed_all_rounds"
STOP_VALIDATION_FAILED = "validation_failed_at"


@dataclass(frozen=True)
class SeedConfig:
    pool_sampling: int = 0
    segmentation: int = 1
    scoring: int = 2

    def to_json_dict(self) -> dict:
        return {"pool_sampling": self.pool_sampling, "segmentation": self.segmentation, "scoring": self.scoring}

    @classmethod
    def from_json_dict(cls, d: dict) -> "SeedConfig":
        return cls(
            pool_sampling=int(d.get("pool_sampling", 0)),
            segmentation=int(d.get("segmentation", 1)),
            scoring=int(d.get("scoring", 2)),
        )


@dataclass(frozen=True)
class SoftConfig:
    """Everything that parameterizes one pipeline run."""

    T: int
    k: int = 4
    batch_size: int = 1
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    finetune: dict = field(default_factory=lambda: dict(DEFAULT_FINETUNE_PARAMS))
    segmentation_mode: str = MODE_RANDOM
    seeds: SeedConfig = field(default_factory=SeedConfig)
    probe_thresholds: ProbeConfig = field(default_factory=ProbeConfig)
    scoring_few_shot: bool = True
    parallelism: int = 1

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.segmentation_mode not in (MODE_RANDOM, MODE_EASY_TO_HARD):
            raise ConfigError(f"unknown segmentation_mode {self.segmentation_mode!r}")
        if self.parallelism < 1:
            raise ConfigError(f"parallelism must be >= 1, got {self.parallelism}")

    @property
    def generation_seed(self) -> int:
        return self.sampling.seed if self.sampling.seed is not None else 0

    def to_json_dict(self) -> dict:
        return {
            "T": self.T,
            "k": self.k,
            "batch_size": self.batch_size,
            "sampling": {
                "temperature": self.sampling.temperature,
                "top_p": self.sampling.top_p,
                "max_new_tokens": self.sampling.max_new_tokens,
                "seed": self.sampling.seed,
            },
            "finetune": dict(self.finetune),
            "segmentation_mode": self.segmentation_mode,
            "seeds": self.seeds.to_json_dict(),
            "probe_thresholds": self.probe_thresholds.to_json_dict(),
            "scoring_few_shot": self.scoring_few_shot,
            "parallelism": self.parallelism,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SoftConfig":
        sampling = d.get("sampling", {})
        return cls(
            T=int(d["T"]),
            k=int(d.get("k", 4)),
            batch_size=int(d.get("batch_size", 1)),
            sampling=SamplingConfig(
                temperature=float(sampling.get("temperature", 0.7)),
                top_p=float(sampling.get("top_p", 0.95)),
                max_new_tokens=int(sampling.get("max_new_tokens", 512)),
                seed=sampling.get("seed"),
            ),
            finetune=dict(d.get("finetune", DEFAULT_FINETUNE_PARAMS)),
            segmentation_mode=d.get("segmentation_mode", MODE_RANDOM),
            seeds=SeedConfig.from_json_dict(d.get("seeds", {})),
            probe_thresholds=ProbeConfig.from_json_dict(d.get("probe_thresholds", {})),
            scoring_few_shot=bool(d.get("scoring_few_shot", True)),
            parallelism=int(d.get("parallelism", 1)),
        )


@dataclass(frozen=True)
class StopReason:
    kind: str
    round_index: int | None = None

    def __post_init__(self):
        if self.kind not in (STOP_COMPLETED, STOP_VALIDATION_FAILED):
            raise ValueError(f"unknown stop reason {self.kind!r}")
        if (self.kind == STOP_VALIDATION_FAILED) != (self.round_index is not None):
            raise ValueError("round_index is required exactly for validation_failed_at")

    def to_json_dict(self) -> dict:
        return {"kind": self.kind, "round": self.round_index}


@dataclass(frozen=True)
class RoundArtifact:
    """Everything one bootstrapping round produced."""

    round_index: int
    input_model: str
    output_model: str
    segment_prompt_ids: tuple[str, ...]
    records: tuple[GenerationRecord, ...]
    training_pairs: tuple[TrainingPair, ...]
    probe_report: ProbeReport | None = None
    stopped_after: bool = False

    def __post_init__(self):
        if not (len(self.records) == len(self.training_pairs) == len(self.segment_prompt_ids)):
            raise ValueError("records, pairs and segment ids must have equal length")


@dataclass(frozen=True)
class RunHistory:
    config: SoftConfig
    plan: SegmentPlan
    rounds: tuple[RoundArtifact, ...]
    final_model: str
    stop_reason: StopReason

    def __post_init__(self):
        seen: set[str] = set()
        for r in self.rounds:
            overlap = seen & set(r.segment_prompt_ids)
            if overlap:
                raise ValueError(f"prompt ids reused across rounds: {sorted(overlap)[:5]}")
            seen.update(r.segment_prompt_ids)
        if self.stop_reason.kind == STOP_VALIDATION_FAILED:
            t = self.stop_reason.round_index
            if len(self.rounds) != t + 1:
                raise ValueError("validation_failed_at(t) requires exactly t+1 rounds")
            if self.final_model != self.rounds[t].input_model:
                raise ValueError("early stop must return the failed round's input model")


@dataclass(frozen=True)
class ValidationSets:
    """Probe inputs for the run: choice items plus either ready generation
    items or bare questions whose references the starting model will write."""

    choice_items: tuple[ChoiceValidationItem, ...] = ()
    gen_items: tuple[GenValidationItem, ...] = ()
    gen_questions: tuple[str, ...] = ()


def bootstrap_round(
    backend: ModelBackend,
    model_ref: str,
    segment: Sequence[Prompt],
    pool: IclPool,
    principles: PrincipleSet,
    cfg: SoftConfig,
    round_index: int,
    state_dir: Path | None = None,
    persist: Callable[[Sequence[GenerationRecord], Sequence[TrainingPair]], None] | None = None,
) -> RoundArtifact:
    """Answer one segment few-shot and fine-tune on the resulting pairs.

    Demonstrations are redrawn for every generation batch.  Training pairs
    carry the bare question, never the assembled few-shot input.  ``persist``
    runs after generation and before fine-tuning, so a fine-tune failure
    leaves the round's records on disk.
    """
    if not segment:
        raise ValueError("bootstrap_round requires a non-empty segment")

    jobs = []  # (position, prompt, assembled_text)
    for batch_start in range(0, len(segment), cfg.batch_size):
        batch = segment[batch_start : batch_start + cfg.batch_size]
        batch_index = batch_start // cfg.batch_size
        icl_rng = derive_rng(cfg.seeds.pool_sampling, "icl", round_index, batch_index)
        examples = sample_icl(pool, cfg.k, icl_rng)
        for offset, prompt in enumerate(batch):
            assembled = assemble_prompt(principles, examples, prompt)
            jobs.append((batch_start + offset, prompt, assembled.text))

    def generate_one(job) -> GenerationRecord:
        position, prompt, text = job
        rng = derive_rng(cfg.generation_seed, "gen", round_index, position)
        try:
            record = backend.generate(model_ref, text, cfg.sampling, rng)
        except Exception as exc:
            raise GenerationError(str(exc), prompt_id=prompt.id) from exc
        return dataclasses.replace(record, prompt_id=prompt.id)

    if cfg.parallelism > 1:
        with ThreadPoolExecutor(max_workers=cfg.parallelism) as executor:
            records = list(executor.map(generate_one, jobs))
    else:
        records = [generate_one(job) for job in jobs]

    pairs = [
        TrainingPair(prompt_text=prompt.text, response_text=record.response_text)
        for (_, prompt, _), record in zip(jobs, records)
    ]
    if persist is not None:
        persist(records, pairs)

    new_ref = backend.finetune(model_ref, pairs, cfg.finetune, state_dir=state_dir)
    return RoundArtifact(
        round_index=round_index,
        input_model=model_ref,
        output_model=new_ref,
        segment_prompt_ids=tuple(p.id for p in segment),
        records=tuple(records),
        training_pairs=tuple(pairs),
    )


# ---------------------------------------------------------------------------
# run directory persistence

_RECORDS = "records.jsonl"
_PAIRS = "pairs.jsonl"
_PROBES = "probes.json"
_MODEL_REF = "model_ref.json"
_RUN = "run.json"
_HISTORY = "history.json"
_SCORES = "scores.jsonl"
_GEN_ITEMS = "validation_gen.jsonl"
_BASELINE = "probe_baseline.json"


def _dump(obj: dict, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _round_dir(run_dir: Path, t: int) -> Path:
    return run_dir / "rounds" / str(t)


def _write_round_files(round_dir: Path, records, pairs) -> None:
    round_dir.mkdir(parents=True, exist_ok=True)
    with open(round_dir / _RECORDS, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r.to_json_dict(), sort_keys=True, ensure_ascii=False) + "\n")
    with open(round_dir / _PAIRS, "w", encoding="utf-8") as f:
        for p in pairs:
            f.write(
                json.dumps(
                    {"schema_version": SCHEMA_VERSION, "prompt_text": p.prompt_text, "response_text": p.response_text},
                    sort_keys=True,
                    ensure_ascii=False,
                )
                + "\n"
            )


def load_round_records(round_dir: Path) -> tuple[GenerationRecord, ...]:
    records = []
    with open(round_dir / _RECORDS, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                records.append(GenerationRecord.from_json_dict(json.loads(line)))
    return tuple(records)


def load_round_pairs(round_dir: Path) -> tuple[TrainingPair, ...]:
    pairs = []
    with open(round_dir / _PAIRS, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                d = json.loads(line)
                pairs.append(TrainingPair(prompt_text=d["prompt_text"], response_text=d["response_text"]))
    return tuple(pairs)


def _round_complete(round_dir: Path) -> bool:
    return (round_dir / _PROBES).exists() and (round_dir / _MODEL_REF).exists()


def write_history(run_dir: Path, history: RunHistory) -> None:
    _dump(
        {
            "schema_version": SCHEMA_VERSION,
            "config": history.config.to_json_dict(),
            "plan": history.plan.to_json_dict(),
            "final_model": history.final_model,
            "stop_reason": history.stop_reason.to_json_dict(),
            "rounds": [
                {
                    "round": r.round_index,
                    "input_model": r.input_model,
                    "output_model": r.output_model,
                    "segment_prompt_ids": list(r.segment_prompt_ids),
                    "stopped_after": r.stopped_after,
                }
                for r in history.rounds
            ],
        },
        run_dir / _HISTORY,
    )


def load_history(run_dir: str | Path) -> RunHistory:
    """Rebuild a RunHistory from a finished run directory."""
    run_dir = Path(run_dir)
    d = json.loads((run_dir / _HISTORY).read_text(encoding="utf-8"))
    rounds = []
    for rd in d["rounds"]:
        t = rd["round"]
        round_dir = _round_dir(run_dir, t)
        probe = ProbeReport.from_json_dict(json.loads((round_dir / _PROBES).read_text(encoding="utf-8")))
        rounds.append(
            RoundArtifact(
                round_index=t,
                input_model=rd["input_model"],
                output_model=rd["output_model"],
                segment_prompt_ids=tuple(rd["segment_prompt_ids"]),
                records=load_round_records(round_dir),
                training_pairs=load_round_pairs(round_dir),
                probe_report=probe,
                stopped_after=rd["stopped_after"],
            )
        )
    stop = d["stop_reason"]
    return RunHistory(
        config=SoftConfig.from_json_dict(d["config"]),
        plan=SegmentPlan.from_json_dict(d["plan"]),
        rounds=tuple(rounds),
        final_model=d["final_model"],
        stop_reason=StopReason(kind=stop["kind"], round_index=stop.get("round")),
    )


# ---------------------------------------------------------------------------
# the full loop


def run_soft(
    backend: ModelBackend,
    initial_model: str,
    dataset: PromptDataset,
    pool: IclPool,
    principles: PrincipleSet,
    validation: ValidationSets,
    cfg: SoftConfig,
    run_dir: str | Path,
    resume: bool = False,
) -> RunHistory:
    """Plan segments, run T bootstrap rounds with the probe gate after each
    fine-tune, and persist every artifact before moving on.

    With ``resume``, completed rounds found in ``run_dir`` are loaded instead
    of re-run; in-process backends rebuild their model lineage by replaying
    the persisted training pairs, which is deterministic under fixed seeds.
    """
    if len(dataset) < cfg.T:
        raise ConfigError(f"dataset has {len(dataset)} prompts; needs at least T={cfg.T}")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    if resume and (run_dir / _HISTORY).exists():
        logger.info("run already complete; loading history from %s", run_dir)
        return load_history(run_dir)

    # config provenance precedes any backend call
    run_payload = {"schema_version": SCHEMA_VERSION, "config": cfg.to_json_dict(), "plan": None}
    existing_plan = None
    if resume and (run_dir / _RUN).exists():
        previous = json.loads((run_dir / _RUN).read_text(encoding="utf-8"))
        if previous.get("plan") is not None:
            existing_plan = SegmentPlan.from_json_dict(previous["plan"])
    if existing_plan is None:
        _dump(run_payload, run_dir / _RUN)

    # plan segments (scoring the dataset with the starting model when ordered)
    if existing_plan is not None:
        plan = existing_plan
    elif cfg.segmentation_mode == MODE_EASY_TO_HARD:
        scores = score_dataset(
            backend,
            initial_model,
            dataset,
            pool,
            principles,
            cfg.sampling,
            k=cfg.k,
            seed=cfg.seeds.scoring,
            few_shot=cfg.scoring_few_shot,
            parallelism=cfg.parallelism,
        )
        save_scores(scores, run_dir / _SCORES)
        plan = plan_segments(dataset, cfg.T, mode=MODE_EASY_TO_HARD, scores=scores)
    else:
        plan = plan_segments(dataset, cfg.T, mode=MODE_RANDOM, seed=cfg.seeds.segmentation)
    run_payload["plan"] = plan.to_json_dict()
    _dump(run_payload, run_dir / _RUN)

    probe_cfg = cfg.probe_thresholds
    gen_items, state = _prepare_gen_gate(backend, initial_model, validation, cfg, run_dir, resume)
    choice_items = validation.choice_items
    if GATE_EOS_CHOICE in probe_cfg.enabled_gates and not choice_items:
        raise ConfigError("eos_choice gate is enabled but the run has no choice validation items")

    rounds: list[RoundArtifact] = []
    current = initial_model
    for t in range(cfg.T):
        round_dir = _round_dir(run_dir, t)
        if resume and _round_complete(round_dir):
            artifact = _reload_round(backend, run_dir, t, cfg, state)
            rounds.append(artifact)
            current = artifact.output_model
            if artifact.stopped_after:
                history = RunHistory(
                    config=cfg,
                    plan=plan,
                    rounds=tuple(rounds),
                    final_model=artifact.input_model,
                    stop_reason=StopReason(STOP_VALIDATION_FAILED, t),
                )
                write_history(run_dir, history)
                return history
            continue

        segment = dataset.subset(plan.segments[t])
        round_dir.mkdir(parents=True, exist_ok=True)
        artifact = bootstrap_round(
            backend,
            current,
            segment,
            pool,
            principles,
            cfg,
            round_index=t,
            state_dir=round_dir,
            persist=lambda records, pairs: _write_round_files(round_dir, records, pairs),
        )
        _dump(
            {
                "schema_version": SCHEMA_VERSION,
                "round": t,
                "input_model": artifact.input_model,
                "output_model": artifact.output_model,
            },
            round_dir / _MODEL_REF,
        )

        if probe_cfg.enabled_gates:
            report = validate(
                backend,
                artifact.output_model,
                choice_items,
                gen_items,
                state,
                probe_cfg,
                records=artifact.records,
            )
        else:
            report = diagnostics_report(
                backend, artifact.output_model, choice_items, probe_cfg, records=artifact.records
            )
        healthy = report.verdict
        artifact = dataclasses.replace(artifact, probe_report=report, stopped_after=not healthy)
        _dump(report.to_json_dict() | {"round": t}, round_dir / _PROBES)
        rounds.append(artifact)

        if not healthy:
            logger.info("validation failed on round %d; returning the surviving model", t)
            history = RunHistory(
                config=cfg,
                plan=plan,
                rounds=tuple(rounds),
                final_model=artifact.input_model,
                stop_reason=StopReason(STOP_VALIDATION_FAILED, t),
            )
            write_history(run_dir, history)
            return history
        current = artifact.output_model

    history = RunHistory(
        config=cfg,
        plan=plan,
        rounds=tuple(rounds),
        final_model=current,
        stop_reason=StopReason(STOP_COMPLETED),
    )
    write_history(run_dir, history)
    return history


def _prepare_gen_gate(
    backend: ModelBackend,
    initial_model: str,
    validation: ValidationSets,
    cfg: SoftConfig,
    run_dir: Path,
    resume: bool,
) -> tuple[tuple[GenValidationItem, ...], ProbeState]:
    """Materialize generation-gate reference items and the baseline average.

    References are written once by the starting model and persisted; a
    resumed run reloads them instead of spending fresh backend calls.  Fresh
    runs ignore leftovers from an earlier run in the same directory.
    """
    probe_cfg = cfg.probe_thresholds
    if GATE_EOS_GEN not in probe_cfg.enabled_gates:
        return validation.gen_items, ProbeState()

    items_path = run_dir / _GEN_ITEMS
    baseline_path = run_dir / _BASELINE

    if resume and items_path.exists():
        gen_items = load_gen_items(items_path)
    elif validation.gen_items:
        gen_items = validation.gen_items
        save_gen_items(gen_items, items_path)
    elif validation.gen_questions:
        gen_items = []
        for i, question in enumerate(validation.gen_questions):
            rng = derive_rng(cfg.seeds.scoring, "gen-validation-ref", i)
            record = backend.generate(initial_model, question, cfg.sampling, rng)
            if not record.response_text:
                logger.warning("reference for generation question %d is empty; skipping", i)
                continue
            tokens = [tok for tok, _ in record.tokens]
            if record.finish == FINISH_EOS:
                tokens = tokens[:-1]
            gen_items.append(
                GenValidationItem(
                    question=question,
                    reference_response=record.response_text,
                    reference_tokens=tuple(tokens),
                )
            )
        if not gen_items:
            raise ConfigError("eos_gen gate enabled but every reference generation came back empty")
        gen_items = tuple(gen_items)
        save_gen_items(gen_items, items_path)
    else:
        raise ConfigError("eos_gen gate is enabled but no generation validation items or questions were given")

    if resume and baseline_path.exists():
        baseline = json.loads(baseline_path.read_text(encoding="utf-8"))["baseline_avg_eos_prob"]
    else:
        result = eos_gen_probe(backend, initial_model, gen_items, None, probe_cfg.eos_gen_ratio)
        baseline = result.avg_eos_prob
        _dump({"schema_version": SCHEMA_VERSION, "baseline_avg_eos_prob": baseline}, baseline_path)
    return tuple(gen_items), ProbeState(previous_gen_avg=baseline)


def _reload_round(
    backend: ModelBackend,
    run_dir: Path,
    t: int,
    cfg: SoftConfig,
    state: ProbeState,
) -> RoundArtifact:
    """Load a completed round from disk and restore backend lineage."""
    round_dir = _round_dir(run_dir, t)
    ref_info = json.loads((round_dir / _MODEL_REF).read_text(encoding="utf-8"))
    probe = ProbeReport.from_json_dict(json.loads((round_dir / _PROBES).read_text(encoding="utf-8")))
    records = load_round_records(round_dir)
    pairs = load_round_pairs(round_dir)

    if not backend.persistent_models:
        replayed = backend.finetune(ref_info["input_model"], pairs, cfg.finetune, state_dir=round_dir)
        if replayed != ref_info["output_model"]:
            raise ConfigError(
                f"resume replay produced model {replayed!r} but round {t} recorded "
                f"{ref_info['output_model']!r}; the run directory does not match this configuration"
            )
    if probe.eos_gen is not None:
        state.previous_gen_avg = probe.eos_gen.avg_eos_prob

    return RoundArtifact(
        round_index=t,
        input_model=ref_info["input_model"],
        output_model=ref_info["output_model"],
        segment_prompt_ids=tuple(r.prompt_id for r in records),
        records=records,
        training_pairs=pairs,
        probe_report=probe,
        stopped_after=not probe.verdict,
    )
