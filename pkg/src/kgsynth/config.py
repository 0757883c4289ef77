"""Pipeline configuration: YAML schema, validation and hashing."""
from __future__ import annotations

import difflib
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml

from .assess import DEFAULT_EPSILON, DEFAULT_N
from .corpus import DEFAULT_MAX_CHUNK_TOKENS, DEFAULT_OVERLAP_TOKENS, INPUT_FORMATS
from .kg import DEFAULT_ENTITY_TYPES, DEFAULT_SUMMARY_THRESHOLD
from .llm import GenerationParams, RetryPolicy
from .qagen import DATASET_FORMATS
from .traverse import EDGE_SAMPLING, EXPAND_METHODS, ISOLATED_STRATEGIES, QA_FORMS, TraversalConfig

MODES = ("live", "record", "replay")


class ConfigError(Exception):
    def __init__(self, errors: List[str]):
        super().__init__("; ".join(errors))
        self.errors = list(errors)


@dataclass(frozen=True)
class InputConfig:
    paths: Tuple[str, ...] = ()
    format: str = "plain_text"
    chunk_tokens: int = DEFAULT_MAX_CHUNK_TOKENS
    chunk_overlap: int = DEFAULT_OVERLAP_TOKENS


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str = "http://localhost:8000/v1"
    model: str = "synthesizer"
    api_key_env: str = "SYNTHESIZER_API_KEY"
    concurrency: int = 8
    max_attempts: int = 5
    base_delay: float = 0.5
    backoff_factor: float = 2.0
    timeout: float = 120.0
    temperature: float = 0.0
    top_p: float = 0.95
    top_k: int = 50
    repetition_penalty: float = 1.05
    max_tokens: int = 10240

    def retry_policy(self) -> RetryPolicy:
        return RetryPolicy(self.max_attempts, self.base_delay, self.backoff_factor)

    def generation_params(self) -> GenerationParams:
        return GenerationParams(temperature=self.temperature, top_p=self.top_p, top_k=self.top_k,
                                repetition_penalty=self.repetition_penalty, max_tokens=self.max_tokens)


@dataclass(frozen=True)
class ExtractionConfig:
    entity_types: Tuple[str, ...] = DEFAULT_ENTITY_TYPES
    summary_threshold: int = DEFAULT_SUMMARY_THRESHOLD
    language: str = "English"


@dataclass(frozen=True)
class AssessmentConfig:
    n: int = DEFAULT_N
    epsilon: float = DEFAULT_EPSILON
    yes_tokens: Tuple[str, ...] = ("yes",)
    no_tokens: Tuple[str, ...] = ("no",)


@dataclass(frozen=True)
class OutputConfig:
    format: str = "alpaca"
    path: str = "output/qa.jsonl"
    external_scores: Optional[str] = None


@dataclass(frozen=True)
class PipelineConfig:
    input: InputConfig = field(default_factory=InputConfig)
    synthesizer: EndpointConfig = field(default_factory=EndpointConfig)
    trainee: EndpointConfig = field(default_factory=lambda: EndpointConfig(model="trainee", api_key_env="TRAINEE_API_KEY"))
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)
    assessment: AssessmentConfig = field(default_factory=AssessmentConfig)
    traversal: TraversalConfig = field(default_factory=TraversalConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    template_dir: Optional[str] = None
    cache_dir: str = ".kgsynth-cache"
    mode: str = "live"

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def config_hash(self) -> str:
        """Hash of every field that affects outputs (mode and cache_dir excluded)."""
        d = self.to_dict()
        d.pop("mode")
        d.pop("cache_dir")
        return stable_hash(d)


def stable_hash(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# -- validation ---------------------------------------------------------------

_ENUMS = {
    ("input", "format"): INPUT_FORMATS,
    ("output", "format"): DATASET_FORMATS,
    ("traversal", "qa_form"): QA_FORMS,
    ("traversal", "expand_method"): EXPAND_METHODS,
    ("traversal", "edge_sampling"): EDGE_SAMPLING,
    ("traversal", "isolated_node_strategy"): ISOLATED_STRATEGIES,
    ("mode",): MODES,
}
_POSITIVE_INT = {
    ("input", "chunk_tokens"), ("synthesizer", "concurrency"), ("synthesizer", "max_attempts"),
    ("trainee", "concurrency"), ("trainee", "max_attempts"), ("extraction", "summary_threshold"),
    ("synthesizer", "top_k"), ("synthesizer", "max_tokens"), ("trainee", "top_k"), ("trainee", "max_tokens"),
    ("assessment", "n"), ("traversal", "max_extra_edges"), ("traversal", "max_tokens"), ("traversal", "max_depth"),
}
_SECTIONS = {
    "input": InputConfig, "synthesizer": EndpointConfig, "trainee": EndpointConfig,
    "extraction": ExtractionConfig, "assessment": AssessmentConfig, "traversal": TraversalConfig,
    "output": OutputConfig,
}


def _suggest(word: str, options) -> str:
    close = difflib.get_close_matches(str(word), [str(o) for o in options], n=1, cutoff=0.5)
    return f" (did you mean {close[0]!r}?)" if close else ""


def _check_value(path: Tuple[str, ...], value: Any, default: Any, errors: List[str]) -> Any:
    dotted = ".".join(path)
    if path in _ENUMS:
        allowed = _ENUMS[path]
        if value not in allowed:
            errors.append(f"{dotted}: {value!r} is not one of {list(allowed)}{_suggest(value, allowed)}")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            errors.append(f"{dotted}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and path in _POSITIVE_INT:
        if isinstance(value, bool) or not isinstance(value, int):
            errors.append(f"{dotted}: expected an integer, got {value!r}")
        elif value <= 0:
            errors.append(f"{dotted}: must be a positive integer, got {value}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            errors.append(f"{dotted}: expected an integer, got {value!r}")
        elif value < 0:
            errors.append(f"{dotted}: must be >= 0, got {value}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errors.append(f"{dotted}: expected a number, got {value!r}")
            return value
        if value < 0:
            errors.append(f"{dotted}: must be >= 0, got {value}")
        return float(value)
    if isinstance(default, tuple):
        if isinstance(value, str):
            value = [value]
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            errors.append(f"{dotted}: expected a list of strings")
            return default
        return tuple(value)
    if default is None or isinstance(default, str):
        if value is not None and not isinstance(value, str):
            errors.append(f"{dotted}: expected a string, got {value!r}")
        return value
    return value


def _build_section(name: str, cls, raw: Any, errors: List[str]):
    default = cls() if name != "trainee" else PipelineConfig().trainee
    if raw is None:
        return default
    if not isinstance(raw, dict):
        errors.append(f"{name}: expected a mapping")
        return default
    known = {f.name for f in fields(cls)}
    values = {}
    for key, val in raw.items():
        if key not in known:
            errors.append(f"{name}.{key}: unknown key{_suggest(key, known)}")
            continue
        values[key] = _check_value((name, key), val, getattr(default, key), errors)
    if name == "input":
        tokens = values.get("chunk_tokens", default.chunk_tokens)
        overlap = values.get("chunk_overlap", default.chunk_overlap)
        if isinstance(tokens, int) and isinstance(overlap, int) and overlap >= tokens:
            errors.append("input.chunk_overlap: must be smaller than input.chunk_tokens")
    if name == "assessment" and isinstance(values.get("epsilon"), float):
        if not 0 < values["epsilon"] < 1:
            errors.append(f"assessment.epsilon: must be in (0, 1), got {values['epsilon']}")
    if name in ("synthesizer", "trainee"):
        top_p = values.get("top_p", default.top_p)
        if isinstance(top_p, float) and not 0 < top_p <= 1:
            errors.append(f"{name}.top_p: must be in (0, 1], got {top_p}")
        penalty = values.get("repetition_penalty", default.repetition_penalty)
        if isinstance(penalty, float) and penalty <= 0:
            errors.append(f"{name}.repetition_penalty: must be > 0, got {penalty}")
    try:
        return cls(**{**asdict(default), **values})
    except (TypeError, ValueError) as exc:
        if not errors:
            errors.append(f"{name}: {exc}")
        return default


def validate_config(raw_text: str, base_dir: Optional[str | Path] = None) -> PipelineConfig:
    """Parse and check a YAML config; raise ``ConfigError`` listing every violation.

    Relative paths are resolved against ``base_dir`` when given.
    """
    try:
        raw = yaml.safe_load(raw_text) if raw_text.strip() else {}
    except yaml.YAMLError as exc:
        raise ConfigError([f"config is not valid YAML: {exc}"]) from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(["config: top level must be a mapping"])
    errors: List[str] = []
    top_known = set(_SECTIONS) | {"template_dir", "cache_dir", "mode"}
    for key in raw:
        if key not in top_known:
            errors.append(f"{key}: unknown key{_suggest(key, top_known)}")
    sections = {name: _build_section(name, cls, raw.get(name), errors) for name, cls in _SECTIONS.items()}
    scalars = {}
    for key, default in (("template_dir", None), ("cache_dir", ".kgsynth-cache"), ("mode", "live")):
        if key in raw:
            scalars[key] = _check_value((key,), raw[key], default, errors)
    if errors:
        raise ConfigError(errors)
    cfg = PipelineConfig(**sections, **scalars)
    if base_dir is not None:
        cfg = resolve_paths(cfg, Path(base_dir))
    return cfg


def resolve_paths(cfg: PipelineConfig, base: Path) -> PipelineConfig:
    from dataclasses import replace

    def fix(p):
        return None if p is None else str(p if Path(p).is_absolute() else (base / p))

    return replace(
        cfg,
        input=replace(cfg.input, paths=tuple(fix(p) for p in cfg.input.paths)),
        output=replace(cfg.output, path=fix(cfg.output.path), external_scores=fix(cfg.output.external_scores)),
        template_dir=fix(cfg.template_dir),
        cache_dir=fix(cfg.cache_dir),
    )


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"cannot read config {path}: {exc}"]) from exc
    return validate_config(text, base_dir=path.parent)

