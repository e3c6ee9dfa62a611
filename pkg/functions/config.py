"""Flat `key = value` experiment configuration."""

import hashlib
import logging
import os
import typing
from dataclasses import dataclass, fields, replace
from pathlib import Path

from functions.corpus import CONTRACT_TEMPLATES, REFERENCE_CLASSES
from functions.cost import PRESETS
from functions.errors import ConfigError
from functions.unlearn import PROBLEM_POSITIONS, RETAIN_ROWS, SOLVERS, UV_POSITIONS

logger = logging.getLogger(__name__)

THREADS_ENV = "LUNAR_LAB_THREADS"
AUTO = "auto"

# Field kinds beyond the plain scalar annotations
OptionalInts = typing.Optional[typing.Tuple[int, ...]]
OptionalFloat = typing.Optional[float]
Ints = typing.Tuple[int, ...]


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 1
    # model
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_mlp: int = 256
    max_seq_len: int = 64
    # corpus
    n_entity_pairs: int = 8
    qa_per_pair: int = 8
    n_forget_pairs: int = 1
    n_refusal_pairs: int = 8
    n_reference_pairs: int = 4
    # training
    train_epochs: int = 400
    train_lr: float = 0.05
    train_batch: int = 16
    train_momentum: float = 0.9
    # unlearning
    layers: OptionalInts = None
    top_k: int = 1
    solver: str = "closed_form"
    lam: OptionalFloat = None
    unlearn_epochs: int = 200
    unlearn_lr: OptionalFloat = None
    unlearn_batch: int = 0
    uv_positions: str = "prompt_all"
    problem_positions: str = "all"
    reference_class: str = "unknown_entity"
    uv_scale: OptionalFloat = None
    retain_rows: str = "all"
    # evaluation
    top_m: int = 100
    max_new_tokens: int = 24
    # attacks
    attack_layer_skip: bool = True
    attack_reverse: bool = True
    attack_quant_bits: Ints = (4, 8)
    attack_paraphrase: bool = True
    attack_logit_lens: bool = True
    lens_k: int = 5
    # sequential / cost / run
    sequential_rounds: int = 2
    cost_preset: str = "llama2-7b"
    threads: int = 1
    output_dir: str = "runs/default"

    def __post_init__(self):
        for name in ("d_model", "n_layers", "n_heads", "d_mlp", "max_seq_len", "train_epochs",
                     "train_batch", "unlearn_epochs", "top_m", "max_new_tokens", "lens_k",
                     "sequential_rounds", "threads", "top_k", "n_entity_pairs", "n_forget_pairs",
                     "n_refusal_pairs", "n_reference_pairs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_forget_pairs >= self.n_entity_pairs:
            raise ConfigError(f"n_forget_pairs={self.n_forget_pairs} must be below "
                              f"n_entity_pairs={self.n_entity_pairs}")
        if not 4 <= self.qa_per_pair <= len(CONTRACT_TEMPLATES):
            raise ConfigError(f"qa_per_pair must be in [4, {len(CONTRACT_TEMPLATES)}], got {self.qa_per_pair}")
        if self.unlearn_batch < 0:
            raise ConfigError(f"unlearn_batch must be >= 0, got {self.unlearn_batch}")
        for bits in self.attack_quant_bits:
            if bits not in (4, 8):
                raise ConfigError(f"attack_quant_bits entries must be 4 or 8, got {bits}")
        for name, allowed in (("solver", SOLVERS), ("uv_positions", UV_POSITIONS),
                              ("problem_positions", PROBLEM_POSITIONS), ("retain_rows", RETAIN_ROWS),
                              ("reference_class", REFERENCE_CLASSES), ("cost_preset", tuple(PRESETS))):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {list(allowed)}, got {getattr(self, name)!r}")
        if self.lam is not None and self.lam < 0:
            raise ConfigError(f"lam must be >= 0 or auto, got {self.lam}")
        for name in ("uv_scale", "unlearn_lr"):
            if getattr(self, name) is not None and getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0 or auto, got {getattr(self, name)}")
        if self.layers and (min(self.layers) < 1 or max(self.layers) > self.n_layers):
            raise ConfigError(f"layers {list(self.layers)} must lie in [1, {self.n_layers}]")

    def canonical(self) -> str:
        return "".join(f"{name} = {_render(getattr(self, name))}\n"
                       for name in sorted(f.name for f in fields(self)))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _render(value) -> str:
    if value is None:
        return AUTO
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _coerce(key: str, raw: str):
    kind = _FIELDS[key].type
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() in ("true", "yes", "1"):
                return True
            if raw.lower() in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            if not raw:
                raise ValueError("empty")
            return raw
        if kind == OptionalFloat:
            return None if raw == AUTO else float(raw)
        if kind in (OptionalInts, Ints):
            if raw == AUTO and kind == OptionalInts:
                return None
            return tuple(int(part) for part in raw.split(",") if part.strip()) if raw else ()
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    raise ConfigError(f"no parser for key {key}")


def parse_lines(lines, source: str = "<config>") -> dict:
    values = {}
    for line_no, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{line_no}: expected `key = value`, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{line_no}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{line_no}: duplicate key {key!r}")
        try:
            values[key] = _coerce(key, raw)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{line_no}: {exc}") from None
    return values


def apply_overrides(config: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply `key=value` strings on top of config."""
    values = {}
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = (part.strip() for part in item.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r} in override")
        values[key] = _coerce(key, raw)
    return replace(config, **values)


def load_config(path=None, overrides=None, environ=None) -> ExperimentConfig:
    """File, then LUNAR_LAB_THREADS, then --set overrides."""
    environ = os.environ if environ is None else environ
    values = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from exc
        values = parse_lines(text.splitlines(), str(path))
    if environ.get(THREADS_ENV):
        try:
            values["threads"] = int(environ[THREADS_ENV])
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {environ[THREADS_ENV]!r}") from None
    config = apply_overrides(ExperimentConfig(**values), overrides)
    logger.debug("config %s: %s", config.config_hash[:12], config)
    return config
