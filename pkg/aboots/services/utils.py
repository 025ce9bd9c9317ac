"""This module contains the exceptions and small helpers used across the codebase."""

from typing import Any, Dict, Optional

import numpy as np

EXIT_USER_ERROR = 1
EXIT_INTERNAL_ERROR = 2


class AbootsError(Exception):
    """Base class for every error raised on purpose by this package."""

    exit_code = EXIT_INTERNAL_ERROR


class ShapeError(AbootsError):
    """Tensor extents do not agree with what an operation expects."""


class EmptyInputError(AbootsError):
    """A sequence, corpus or pair list that must be non-empty was empty."""

    exit_code = EXIT_USER_ERROR


class InvalidHyperparameterError(AbootsError):
    """A hyperparameter is outside its documented range."""

    exit_code = EXIT_USER_ERROR


class ContractError(AbootsError):
    """An operation was called in a way its contract forbids."""


class ConfigurationError(AbootsError):
    """A run setting, config file line or command flag is invalid."""

    exit_code = EXIT_USER_ERROR


class DegenerateDatasetError(AbootsError):
    """The dataset cannot provide what was asked (e.g. a distinct distractor)."""

    exit_code = EXIT_USER_ERROR


class DegenerateFeatureError(AbootsError):
    """A feature vector has zero norm where a direction is needed."""


class CheckpointError(AbootsError):
    """A checkpoint is unreadable or does not match the model it is loaded into."""


class NonFiniteLossError(AbootsError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """
    Returns a generator for one named stream of a seeded run.

    Streams with different `stream` keys are independent, and the same
    `(seed, *stream)` always gives the same draws, so a run can be resumed
    at any step without storing generator state.
    """
    return np.random.default_rng([seed, *stream])
