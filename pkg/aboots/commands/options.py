"""
This module contains the click options shared by several commands and the
decorator that loads a checkpoint for a command.
"""

import functools
import logging
from pathlib import Path
from typing import Any, Callable, Optional, TypeVar, cast

import click

from aboots.services import trainer
from aboots.services.config import TrainingConfig
from aboots.services.utils import CheckpointError

logger = logging.getLogger(__name__)

C = TypeVar("C", bound=Callable[..., Any])

data_option = click.option(
    "--data",
    "data_dir",
    type=click.Path(exists=True, file_okay=False, path_type=Path),
    required=True,
    help="Directory of corpus files (one conversation per line, turns split by TAB).",
)

seed_option = click.option(
    "--seed",
    type=int,
    default=None,
    help="Seed for the random streams; defaults to the config's seed. Checkpoint commands keep the training split.",
)

checkpoint_option = click.option(
    "--checkpoint",
    "checkpoint_path",
    type=click.Path(exists=True, file_okay=False, path_type=Path),
    required=True,
    help="Checkpoint directory written by `train`.",
)

split_option = click.option(
    "--split",
    type=click.Choice(["train", "validation", "test"]),
    default="test",
    show_default=True,
)

mode_option = click.option(
    "--mode",
    type=click.Choice(["greedy", "topk"]),
    default="greedy",
    show_default=True,
    help="Greedy decoding or top-k sampling with the configured strategy.",
)

k_option = click.option(
    "--k", type=int, default=None, help="top_k for --mode topk; defaults to the config's."
)


def seeded(config: TrainingConfig, seed: Optional[int]) -> TrainingConfig:
    """Applies a --seed override."""
    return config if seed is None else config.replace(seed=seed)


def for_checkpoint(command: C) -> C:
    """Loads the checkpoint from --checkpoint and passes it as `checkpoint`."""

    @functools.wraps(command)
    def wrapped_command(*args: Any, checkpoint_path: Path, **kwargs: Any):
        try:
            checkpoint = trainer.load_checkpoint(checkpoint_path)
        except CheckpointError as error:
            logger.exception(error)
            raise
        logger.info(
            "Loaded %s (%s, step %d)",
            checkpoint_path,
            checkpoint.config.variant,
            checkpoint.state.step,
        )
        return command(*args, checkpoint=checkpoint, **kwargs)

    return cast(C, wrapped_command)
