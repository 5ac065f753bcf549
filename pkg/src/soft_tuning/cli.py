"""Command-line surface: run, score, report, probe.

Exit codes: 0 run completed all rounds, 2 configuration or data error,
3 early stop (the probe gate ended the run; a valid outcome, distinct from
completing all rounds), 4 backend failure, 1 anything else.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import sys
from pathlib import Path

import click

from .config import build_backend, load_run_config
from .curriculum import MODE_EASY_TO_HARD, plan_segments, save_plan, save_scores, score_dataset
from .domain import load_pool, load_principles, load_prompt_dataset
from .errors import BackendError, ConfigError, DataFormatError, SoftError
from .pipeline import (
    STOP_VALIDATION_FAILED,
    SeedConfig,
    ValidationSets,
    run_soft,
)
from .probes import (
    ProbeState,
    load_choice_items,
    load_gen_items,
    load_gen_questions,
    validate,
)

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_CONFIG = 2
EXIT_EARLY_STOP = 3
EXIT_BACKEND = 4


def _fail(code: int, message: str):
    click.echo(message, err=True)
    raise SystemExit(code)


def _guarded(fn):
    try:
        return fn()
    except (ConfigError, DataFormatError) as exc:
        _fail(EXIT_CONFIG, f"config error: {exc}")
    except BackendError as exc:
        _fail(EXIT_BACKEND, f"backend error: {exc}")
    except KeyboardInterrupt:
        _fail(130, "interrupted; completed rounds are on disk and the run can be resumed")
    except SoftError as exc:
        _fail(EXIT_OTHER, f"error: {exc}")


@click.group()
def main():
    """Bootstrapping self-alignment pipeline."""


def _load_validation(spec) -> ValidationSets:
    choice = load_choice_items(spec.data.validation_choice)
    gen_path = spec.data.validation_gen
    gen_items = ()
    gen_questions = ()
    if gen_path is None:
        gen_questions = load_gen_questions(None)
    else:
        first = _peek_first_object(gen_path)
        if first is not None and "reference_response" in first:
            gen_items = load_gen_items(gen_path)
        else:
            gen_questions = load_gen_questions(gen_path)
    return ValidationSets(choice_items=choice, gen_items=gen_items, gen_questions=gen_questions)


def _peek_first_object(path) -> dict | None:
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                return json.loads(line)
    return None


def _load_inputs(spec):
    if spec.data.dataset is None:
        raise ConfigError("config must set data.dataset")
    dataset = load_prompt_dataset(spec.data.dataset)
    pool_path = spec.data.pool
    if pool_path is None:
        from .domain import default_pool_path

        pool_path = default_pool_path()
    pool, warnings = load_pool(pool_path, strict=spec.pool_strict)
    for w in warnings:
        click.echo(f"pool warning: {w}", err=True)
    principles = load_principles(spec.data.principles)
    return dataset, pool, principles


@main.command()
@click.argument("config_path", type=click.Path(exists=False))
@click.option("--backend", "backend_kind", type=click.Choice(["ngram", "remote", "mock"]), default=None)
@click.option("--resume", is_flag=True, help="Continue a run directory with completed rounds in it.")
@click.option("--out", "run_dir", type=click.Path(), default=None, help="Override run_dir.")
@click.option("--pool-seed", type=int, default=None)
@click.option("--segmentation-seed", type=int, default=None)
@click.option("--scoring-seed", type=int, default=None)
def run(config_path, backend_kind, resume, run_dir, pool_seed, segmentation_seed, scoring_seed):
    """Execute the full bootstrapping loop from a config file."""

    def body():
        spec = load_run_config(config_path)
        soft_cfg = spec.soft
        seeds = soft_cfg.seeds
        if any(s is not None for s in (pool_seed, segmentation_seed, scoring_seed)):
            seeds = SeedConfig(
                pool_sampling=pool_seed if pool_seed is not None else seeds.pool_sampling,
                segmentation=segmentation_seed if segmentation_seed is not None else seeds.segmentation,
                scoring=scoring_seed if scoring_seed is not None else seeds.scoring,
            )
            soft_cfg = dataclasses.replace(soft_cfg, seeds=seeds)
        backend_spec = spec.backend
        if backend_kind is not None and backend_kind != backend_spec.kind:
            backend_spec = dataclasses.replace(backend_spec, kind=backend_kind)
        target_dir = Path(run_dir) if run_dir is not None else spec.run_dir

        dataset, pool, principles = _load_inputs(spec)
        validation = _load_validation(spec)
        backend, initial_model = build_backend(backend_spec)
        history = run_soft(
            backend,
            initial_model,
            dataset,
            pool,
            principles,
            validation,
            soft_cfg,
            target_dir,
            resume=resume,
        )
        click.echo(
            f"run finished: {history.stop_reason.kind}"
            + (f" (round {history.stop_reason.round_index})" if history.stop_reason.round_index is not None else "")
            + f"; final model {history.final_model}; artifacts in {target_dir}"
        )
        if history.stop_reason.kind == STOP_VALIDATION_FAILED:
            raise SystemExit(EXIT_EARLY_STOP)
        return EXIT_OK

    _guarded(body)


@main.command()
@click.argument("config_path", type=click.Path(exists=False))
@click.option("--dataset", "dataset_path", type=click.Path(), default=None, help="Override data.dataset.")
@click.option("--out", "out_path", type=click.Path(), default=None, help="Scores file (JSONL).")
@click.option("--plan-out", "plan_path", type=click.Path(), default=None, help="Sorted plan file (JSON).")
def score(config_path, dataset_path, out_path, plan_path):
    """Score every prompt's self-generated response perplexity and write the
    ascending segment plan."""

    def body():
        spec = load_run_config(config_path)
        if dataset_path is not None:
            spec_data = dataclasses.replace(spec.data, dataset=Path(dataset_path))
            spec_local = dataclasses.replace(spec, data=spec_data)
        else:
            spec_local = spec
        dataset, pool, principles = _load_inputs(spec_local)
        if len(dataset) == 0:
            raise ConfigError("dataset is empty; nothing to score")
        backend, initial_model = build_backend(spec_local.backend)
        cfg = spec_local.soft
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
        out = Path(out_path) if out_path is not None else spec_local.run_dir / "scores.jsonl"
        out.parent.mkdir(parents=True, exist_ok=True)
        save_scores(scores, out)
        plan = plan_segments(dataset, cfg.T, mode=MODE_EASY_TO_HARD, scores=scores)
        plan_file = Path(plan_path) if plan_path is not None else out.with_suffix(".plan.json")
        save_plan(plan, plan_file)
        click.echo(f"wrote {len(scores)} scores to {out} and plan to {plan_file}")
        return EXIT_OK

    _guarded(body)


@main.command()
@click.argument("run_dir", type=click.Path(exists=False))
@click.option("--format", "fmt", type=click.Choice(["table", "json", "csv"]), default="table")
def report(run_dir, fmt):
    """Summarize a run directory's per-round probe trends."""

    def body():
        summary = build_summary(Path(run_dir))
        click.echo(render_summary(summary, fmt), nl=False)
        return EXIT_OK

    _guarded(body)


@main.command()
@click.argument("config_path", type=click.Path(exists=False))
@click.option("--model", "model_ref", required=True, help="Model reference to probe.")
@click.option("--run-dir", "probe_run_dir", type=click.Path(), default=None,
              help="Replay this run directory's fine-tunes so in-process backends can serve run-produced models.")
@click.option("--gen-items", "gen_items_path", type=click.Path(), default=None,
              help="Materialized generation validation file (with reference responses).")
@click.option("--previous", type=float, default=None,
              help="Previous round's average EOS probability for the generation gate.")
def probe(config_path, model_ref, probe_run_dir, gen_items_path, previous):
    """One-shot probe of a model against the validation sets."""

    def body():
        spec = load_run_config(config_path)
        backend, _ = build_backend(spec.backend)
        if probe_run_dir is not None:
            _replay_run_models(backend, Path(probe_run_dir), spec.soft.finetune)
        cfg = spec.soft.probe_thresholds
        choice = load_choice_items(spec.data.validation_choice)
        gen_items = ()
        if gen_items_path is not None:
            gen_items = load_gen_items(gen_items_path)
        elif spec.data.validation_gen is not None:
            first = _peek_first_object(spec.data.validation_gen)
            if first is not None and "reference_response" in first:
                gen_items = load_gen_items(spec.data.validation_gen)
        if "eos_gen" in cfg.enabled_gates and not gen_items:
            remaining = tuple(g for g in cfg.enabled_gates if g != "eos_gen")
            if not remaining:
                raise ConfigError(
                    "the generation gate needs materialized reference responses; "
                    "pass --gen-items (e.g. a run directory's validation_gen.jsonl)"
                )
            cfg = dataclasses.replace(cfg, enabled_gates=remaining)
            click.echo("no materialized generation references; probing with the choice gate only", err=True)
        state = ProbeState(previous_gen_avg=previous)
        report_obj = validate(backend, model_ref, choice, gen_items or None, state, cfg)
        click.echo(json.dumps(report_obj.to_json_dict(), sort_keys=True, indent=2))
        if not report_obj.verdict:
            raise SystemExit(EXIT_EARLY_STOP)
        return EXIT_OK

    _guarded(body)


def _replay_run_models(backend, run_dir: Path, finetune_params: dict) -> None:
    """Rebuild an in-process backend's model lineage from a run directory."""
    if backend.persistent_models:
        return
    from .pipeline import load_round_pairs

    t = 0
    while True:
        round_dir = run_dir / "rounds" / str(t)
        ref_path = round_dir / "model_ref.json"
        if not ref_path.exists():
            break
        info = json.loads(ref_path.read_text(encoding="utf-8"))
        replayed = backend.finetune(info["input_model"], load_round_pairs(round_dir), finetune_params)
        if replayed != info["output_model"]:
            raise ConfigError(
                f"replaying {run_dir} produced model {replayed!r} where round {t} recorded "
                f"{info['output_model']!r}; run directory and config do not match"
            )
        t += 1
    if t == 0:
        raise ConfigError(f"{run_dir} has no completed rounds to replay")


# ---------------------------------------------------------------------------
# reporting


def build_summary(run_dir: Path) -> dict:
    """Per-round probe trend rows plus the stop reason, straight off disk."""
    history_path = run_dir / "history.json"
    if not history_path.exists():
        raise DataFormatError(f"no history.json in {run_dir}; is this a finished run directory?")
    history = json.loads(history_path.read_text(encoding="utf-8"))
    rows = []
    for entry in history["rounds"]:
        t = entry["round"]
        probes_path = run_dir / "rounds" / str(t) / "probes.json"
        if not probes_path.exists():
            raise DataFormatError(f"missing round artifact: {probes_path}")
        try:
            probes = json.loads(probes_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"corrupt round artifact {probes_path}: {exc}") from None
        choice = probes.get("eos_choice")
        eos_choice_prob = None
        if choice and choice.get("items"):
            eos_choice_prob = sum(i["eos_prob"] for i in choice["items"]) / len(choice["items"])
        gen = probes.get("eos_gen")
        rows.append(
            {
                "round": t,
                "prompts_consumed": len(entry["segment_prompt_ids"]),
                "refusal_rate": probes.get("refusal_rate"),
                "avg_output_length": probes.get("avg_output_length"),
                "tail_mass": {int(k): v for k, v in (probes.get("tail_mass") or {}).items()},
                "eos_choice_prob": eos_choice_prob,
                "eos_gen_avg": gen["avg_eos_prob"] if gen else None,
                "verdict": probes["verdict"],
            }
        )
    return {"stop_reason": history["stop_reason"], "rounds": rows}


def _tail_keys(summary: dict) -> list[int]:
    keys: set[int] = set()
    for row in summary["rounds"]:
        keys.update(row["tail_mass"])
    return sorted(keys)


def render_summary(summary: dict, fmt: str) -> str:
    if fmt == "json":
        serializable = {
            "stop_reason": summary["stop_reason"],
            "rounds": [
                {**row, "tail_mass": {str(k): v for k, v in row["tail_mass"].items()}}
                for row in summary["rounds"]
            ],
        }
        return json.dumps(serializable, sort_keys=True, indent=2) + "\n"

    tail_keys = _tail_keys(summary)
    columns = (
        ["round", "prompts_consumed", "refusal_rate", "avg_output_length"]
        + [f"tail_mass_{k}" for k in tail_keys]
        + ["eos_choice_prob", "eos_gen_avg", "verdict"]
    )

    def row_values(row):
        values = [
            row["round"],
            row["prompts_consumed"],
            _fmt_num(row["refusal_rate"]),
            _fmt_num(row["avg_output_length"]),
        ]
        values += [_fmt_num(row["tail_mass"].get(k)) for k in tail_keys]
        values += [_fmt_num(row["eos_choice_prob"]), _fmt_num(row["eos_gen_avg"]), str(row["verdict"])]
        return [str(v) for v in values]

    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(columns)
        for row in summary["rounds"]:
            writer.writerow(row_values(row))
        writer.writerow([])
        stop = summary["stop_reason"]
        writer.writerow(["stop_reason", stop["kind"], "" if stop.get("round") is None else stop["round"]])
        return buf.getvalue()

    # table
    table_rows = [columns] + [row_values(row) for row in summary["rounds"]]
    widths = [max(len(r[i]) for r in table_rows) for i in range(len(columns))]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(r)).rstrip() for r in table_rows]
    stop = summary["stop_reason"]
    suffix = "" if stop.get("round") is None else f" (round {stop['round']})"
    lines.append(f"stop_reason: {stop['kind']}{suffix}")
    return "\n".join(lines) + "\n"


def _fmt_num(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


if __name__ == "__main__":
    sys.exit(main())
