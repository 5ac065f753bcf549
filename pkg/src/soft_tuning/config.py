"""Run configuration: one structured file, flag overrides on top.

Top-level keys mirror SoftConfig field names one-to-one; the ``data`` section
points at the dataset, pool, principles and validation files (packaged
defaults fill the gaps); the ``backend`` section selects and parameterizes
the model backend.  Relative paths resolve against the config file location.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .backends import MockBackend, ModelBackend, NGramBackend, NGramModel
from .errors import ConfigError
from .pipeline import SoftConfig
from .remote import RemoteBackend, RemoteConfig

BACKEND_KINDS = ("ngram", "mock", "remote")


@dataclass(frozen=True)
class DataPaths:
    dataset: Path | None = None
    pool: Path | None = None
    principles: Path | None = None
    validation_choice: Path | None = None
    validation_gen: Path | None = None


@dataclass(frozen=True)
class BackendSpec:
    kind: str
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in BACKEND_KINDS:
            raise ConfigError(f"unknown backend kind {self.kind!r}; expected one of {BACKEND_KINDS}")


@dataclass(frozen=True)
class RunSpec:
    soft: SoftConfig
    data: DataPaths
    backend: BackendSpec
    run_dir: Path
    pool_strict: bool = True


def load_run_config(path: str | Path) -> RunSpec:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} does not parse: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a mapping")

    base = path.parent

    def resolve(p) -> Path | None:
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else base / p

    data_raw = raw.pop("data", {}) or {}
    backend_raw = raw.pop("backend", {}) or {}
    run_dir = raw.pop("run_dir", None)
    pool_strict = bool(raw.pop("pool_strict", True))
    if run_dir is None:
        raise ConfigError("config must set run_dir")

    try:
        soft = SoftConfig.from_json_dict(raw)
    except KeyError as exc:
        raise ConfigError(f"config missing required key {exc}") from None

    kind = backend_raw.pop("kind", None)
    if kind is None:
        raise ConfigError("config must set backend.kind (ngram, mock or remote)")
    for key in ("corpus", "snapshot", "script"):
        if key in backend_raw:
            backend_raw[key] = str(resolve(backend_raw[key]))

    return RunSpec(
        soft=soft,
        data=DataPaths(
            dataset=resolve(data_raw.get("dataset")),
            pool=resolve(data_raw.get("pool")),
            principles=resolve(data_raw.get("principles")),
            validation_choice=resolve(data_raw.get("validation_choice")),
            validation_gen=resolve(data_raw.get("validation_gen")),
        ),
        backend=BackendSpec(kind=kind, options=backend_raw),
        run_dir=resolve(run_dir),
        pool_strict=pool_strict,
    )


def build_backend(spec: BackendSpec) -> tuple[ModelBackend, str]:
    """Instantiate a backend and return it with its starting model reference."""
    opts = dict(spec.options)
    if spec.kind == "ngram":
        order = int(opts.get("order", 2))
        alpha = float(opts.get("alpha", 0.1))
        if "snapshot" in opts:
            model = NGramModel.load(opts["snapshot"])
        elif "corpus" in opts:
            corpus_path = Path(opts["corpus"])
            if not corpus_path.exists():
                raise ConfigError(f"ngram corpus file not found: {corpus_path}")
            lines = corpus_path.read_text(encoding="utf-8").splitlines()
            model = NGramModel.from_corpus(lines, order=order, alpha=alpha)
        else:
            raise ConfigError("ngram backend needs backend.corpus or backend.snapshot")
        ref = str(opts.get("initial_model", "m0"))
        return NGramBackend(model, initial_ref=ref), ref
    if spec.kind == "mock":
        if "script" not in opts:
            raise ConfigError("mock backend needs backend.script")
        script_path = Path(opts["script"])
        if not script_path.exists():
            raise ConfigError(f"mock script file not found: {script_path}")
        return MockBackend.from_script_file(script_path), str(opts.get("initial_model", "m0"))
    if spec.kind == "remote":
        model = opts.get("model")
        config = RemoteConfig.with_env_overrides(
            base_url=opts.get("base_url", ""),
            auth_token=opts.get("auth_token"),
            timeout=float(opts.get("timeout", 30.0)),
            max_attempts=int(opts.get("max_attempts", 3)),
            backoff_base=float(opts.get("backoff_base", 0.5)),
            poll_interval=float(opts.get("poll_interval", 2.0)),
            poll_timeout=float(opts.get("poll_timeout", 3600.0)),
        )
        if model is None:
            raise ConfigError("remote backend needs backend.model (the served base model id)")
        return RemoteBackend(config), str(model)
    raise ConfigError(f"unknown backend kind {spec.kind!r}")


def dump_json(obj, path: Path) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")
