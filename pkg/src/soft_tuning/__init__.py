"""Bootstrapping self-alignment: few-shot generation over a diverse
demonstration pool, iterative fine-tuning with strict no-prompt-reuse, a
perplexity-ordered curriculum, and collapse probes that stop the loop before
the model degrades."""

from .backends import (
    DEFAULT_FINETUNE_PARAMS,
    MockBackend,
    ModelBackend,
    NextTokenDistribution,
    NGramBackend,
    NGramModel,
    SamplingConfig,
)
from .curriculum import (
    MODE_EASY_TO_HARD,
    MODE_RANDOM,
    PerplexityScore,
    SegmentPlan,
    plan_segments,
    score_dataset,
    sentence_perplexity,
)
from .domain import (
    AssembledPrompt,
    GenerationRecord,
    IclExample,
    IclPool,
    PrincipleSet,
    Prompt,
    PromptDataset,
    RefusalPattern,
    TrainingPair,
    assemble_prompt,
    load_pool,
    load_principles,
    load_prompt_dataset,
    load_refusal_patterns,
    refusal_rate,
    sample_icl,
    save_pool,
)
from .errors import (
    BackendError,
    CapabilityError,
    ConfigError,
    DataFormatError,
    FinetuneError,
    GenerationError,
    MockScriptError,
    ProtocolError,
    SoftError,
)
from .pipeline import (
    RoundArtifact,
    RunHistory,
    SeedConfig,
    SoftConfig,
    StopReason,
    ValidationSets,
    bootstrap_round,
    load_history,
    run_soft,
)
from .probes import (
    ChoiceValidationItem,
    GenValidationItem,
    ProbeConfig,
    ProbeReport,
    ProbeState,
    avg_output_length,
    eos_choice_probe,
    eos_gen_probe,
    tail_mass,
    validate,
)
from .remote import FinetuneJob, RemoteBackend, RemoteConfig

__version__ = "0.1.0"
