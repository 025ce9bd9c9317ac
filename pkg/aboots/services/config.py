"""
This module contains the run configuration and its file format.

A config file is flat `key=value` text, one setting per line, with `#`
comments; it is read with python-dotenv's parser so quoting and comments
behave like a `.env` file. Unknown keys are rejected. Every field has a
default, so a file only lists what it overrides.

Besides the individual keys, `variant` accepts the model names
`aboots_{u,w}_{cat,uni,gau}` and sets the discrimination level and
sampling strategy from them.
"""

import dataclasses
import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Union

from dotenv import dotenv_values

from aboots.services.model import DiscriminationLevel
from aboots.services.objectives import (
    Hyperparams,
    ObjectiveConfig,
    SpecialCase,
    WordCoefficient,
    make_special_case_config,
)
from aboots.services.policy import PolicyConfig, Strategy
from aboots.services.utils import ConfigurationError

TRUE_WORDS = {"1", "true", "yes", "on"}
FALSE_WORDS = {"0", "false", "no", "off"}

VARIANT_LEVELS = {"u": DiscriminationLevel.UTTERANCE, "w": DiscriminationLevel.WORD}
VARIANT_STRATEGIES = {
    "cat": Strategy.CATEGORICAL,
    "uni": Strategy.UNIFORM,
    "gau": Strategy.GAUSSIAN,
}


@dataclass(frozen=True)
class TrainingConfig:
    """Every setting of a run. Defaults are the full-scale values."""

    hidden: int = 512
    layers: int = 3
    vocab_size: int = 50000
    alpha: float = 1.0
    beta: float = 1.0
    tau: float = 1.0
    top_k: int = 10
    batch_size: int = 64
    learning_rate: float = 0.5
    lr_decay: float = 0.99
    clip: float = 5.0
    max_epochs: int = 10
    max_steps: int = 0
    seed: int = 42
    strategy: Strategy = Strategy.CATEGORICAL
    level: DiscriminationLevel = DiscriminationLevel.WORD
    disc_bootstrap: bool = True
    special_case: SpecialCase = SpecialCase.NONE
    word_coefficient: WordCoefficient = WordCoefficient.ALPHA
    noise_scale: float = 1.0
    max_turn_len: int = 30
    max_turns: int = 3
    max_decode_len: int = 30
    holdout: bool = True
    validate_every: int = 0
    checkpoint_every: int = 1000

    def __post_init__(self):
        positive = (
            "hidden",
            "layers",
            "vocab_size",
            "top_k",
            "batch_size",
            "learning_rate",
            "clip",
            "max_epochs",
            "max_turn_len",
            "max_turns",
            "max_decode_len",
            "tau",
        )
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("max_steps", "validate_every", "checkpoint_every", "seed", "alpha", "noise_scale"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must not be negative, got {getattr(self, name)}")
        if not 0 < self.lr_decay < 1:
            raise ConfigurationError(f"lr_decay must be in (0, 1), got {self.lr_decay}")
        if not 0 <= self.beta <= 1:
            raise ConfigurationError(f"beta must be in [0, 1], got {self.beta}")
        if self.max_turn_len < 2:
            raise ConfigurationError("max_turn_len must leave room for a token and EOS")
        if self.top_k > self.vocab_size:
            raise ConfigurationError(
                f"top_k ({self.top_k}) cannot exceed vocab_size ({self.vocab_size})"
            )

    @property
    def hyperparams(self) -> Hyperparams:
        """alpha, beta, tau and the word-level coefficient."""
        return Hyperparams(self.alpha, self.beta, self.tau, self.word_coefficient)

    @property
    def policy(self) -> PolicyConfig:
        """Sampling settings for the policy term."""
        return PolicyConfig(self.strategy, self.top_k, self.noise_scale)

    @property
    def objective(self) -> ObjectiveConfig:
        """Which terms the generator and discriminator updates contain."""
        return make_special_case_config(self.special_case, self.beta)

    @property
    def max_lens(self):
        """(tokens per turn, turns per context)."""
        return self.max_turn_len, self.max_turns

    @property
    def variant(self) -> str:
        """Model name for the level/strategy pair, e.g. `aboots_w_cat`."""
        level = {value: key for key, value in VARIANT_LEVELS.items()}[self.level]
        strategy = {value: key for key, value in VARIANT_STRATEGIES.items()}[self.strategy]
        return f"aboots_{level}_{strategy}"

    def replace(self, **changes: Any) -> "TrainingConfig":
        """Returns a copy with `changes` applied and re-validated."""
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict[str, str]:
        """Every field as the string written to a config file."""
        result = {}
        for item in dataclasses.fields(self):
            value = getattr(self, item.name)
            if isinstance(value, enum.Enum):
                result[item.name] = value.value
            elif isinstance(value, bool):
                result[item.name] = "true" if value else "false"
            else:
                result[item.name] = repr(value)
        return result

    def save(self, path: Union[str, Path]):
        """Writes every field, so the file alone reproduces the run."""
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(f"# {self.variant}\n")
            for key, value in self.to_dict().items():
                handle.write(f"{key}={value}\n")


def parse_variant(name: str) -> Dict[str, Any]:
    """`aboots_w_cat` -> {"level": WORD, "strategy": CATEGORICAL}."""
    parts = name.lower().split("_")
    if len(parts) != 3 or parts[0] != "aboots" or parts[1] not in VARIANT_LEVELS or parts[2] not in VARIANT_STRATEGIES:
        raise ConfigurationError(
            f"Unknown variant '{name}' (expected aboots_{{u,w}}_{{cat,uni,gau}})"
        )
    return {"level": VARIANT_LEVELS[parts[1]], "strategy": VARIANT_STRATEGIES[parts[2]]}


def _coerce(field_type: Any, raw: str) -> Any:
    text = raw.strip()
    if field_type is bool:
        if text.lower() in TRUE_WORDS:
            return True
        if text.lower() in FALSE_WORDS:
            return False
        raise ValueError(f"'{raw}' is not a boolean")
    if isinstance(field_type, type) and issubclass(field_type, enum.Enum):
        return field_type(text.lower())
    return field_type(text)


def _offending_line(path: Path, key: str) -> str:
    with open(path, encoding="utf-8") as handle:
        for number, line in enumerate(handle, start=1):
            stripped = line.strip()
            if stripped.startswith("export "):
                stripped = stripped[len("export ") :].lstrip()
            if stripped.split("=", 1)[0].strip() == key:
                return f"{path}:{number}: {line.rstrip()}"
    return f"{path}: {key}"


def config_from_mapping(
    values: Dict[str, Optional[str]],
    base: Optional[TrainingConfig] = None,
    source: Optional[Path] = None,
) -> TrainingConfig:
    """
    Builds a config from raw strings on top of `base` (defaults if omitted).

    Raises:
        ConfigurationError: naming the offending line for unknown keys and
            values that do not parse
    """
    known = {item.name for item in dataclasses.fields(TrainingConfig)}
    defaults = base or TrainingConfig()
    changes: Dict[str, Any] = {}

    def where(key: str) -> str:
        return _offending_line(source, key) if source is not None else key

    variant = None
    for key, raw in values.items():
        if key == "variant":
            variant = raw
            continue
        if key not in known:
            raise ConfigurationError(f"Unknown config key: {where(key)}")
        if raw is None:
            raise ConfigurationError(f"Missing value: {where(key)}")
        try:
            changes[key] = _coerce(type(getattr(defaults, key)), raw)
        except ValueError as error:
            raise ConfigurationError(f"Bad value ({error}): {where(key)}") from error

    if variant is not None:
        for key, value in parse_variant(variant).items():
            if key in changes and changes[key] != value:
                raise ConfigurationError(
                    f"'{key}' conflicts with variant '{variant}': {where(key)}"
                )
            changes[key] = value
    return dataclasses.replace(defaults, **changes)


def load_config(
    path: Union[str, Path], base: Optional[TrainingConfig] = None
) -> TrainingConfig:
    """
    Reads a config file.

    Raises:
        ConfigurationError: for an unreadable file, unknown keys or bad values
    """
    source = Path(path)
    if not source.is_file():
        raise ConfigurationError(f"Config file {source} does not exist")
    values = dotenv_values(source, interpolate=False)
    return config_from_mapping(dict(values), base, source)
