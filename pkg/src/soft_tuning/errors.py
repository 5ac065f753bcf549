"""Exception types shared across the pipeline."""


class SoftError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(SoftError):
    """Invalid configuration value or unparseable config file."""


class DataFormatError(SoftError):
    """Malformed data file (pool, dataset, principles, validation set)."""


class BackendError(SoftError):
    """A model backend failed to service a request."""


class GenerationError(BackendError):
    """Generation failed; carries the offending prompt id when known."""

    def __init__(self, message: str, prompt_id: str | None = None):
        super().__init__(message if prompt_id is None else f"prompt {prompt_id!r}: {message}")
        self.prompt_id = prompt_id


class FinetuneError(BackendError):
    """Fine-tuning failed (bad pairs, failed job, poll timeout)."""


class ProtocolError(BackendError):
    """Remote response violates the wire contract (missing fields, bad shapes)."""


class CapabilityError(BackendError):
    """Backend cannot support the requested probe (e.g. top-k distribution lacks needed tokens)."""


class MockScriptError(BackendError):
    """Mock backend received a request with no scripted response left."""
