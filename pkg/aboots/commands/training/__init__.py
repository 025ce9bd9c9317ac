"""
This module contains the training commands: `train` runs the joint
generator/discriminator training and `search-topk` picks the sampling k on
validation data.
"""

import csv
import logging
from pathlib import Path
from typing import Optional

import click

from aboots.commands import options
from aboots.services import trainer
from aboots.services.config import TrainingConfig, load_config

logger = logging.getLogger(__name__)

bp = click.Group("training", help="Training and top-k search.")


@bp.command("train")
@click.option(
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    default=None,
    help="Run config (key=value lines); defaults apply without one.",
)
@options.data_option
@click.option(
    "--out",
    "out_dir",
    type=click.Path(file_okay=False, path_type=Path),
    required=True,
    help="Directory for metrics.csv and checkpoints/.",
)
@options.seed_option
@click.option(
    "--resume",
    type=click.Path(exists=True, file_okay=False, path_type=Path),
    default=None,
    help="Continue from this checkpoint directory.",
)
@click.option("--max-steps", type=int, default=None, help="Overrides max_steps.")
def train(
    config_path: Optional[Path],
    data_dir: Path,
    out_dir: Path,
    seed: Optional[int],
    resume: Optional[Path],
    max_steps: Optional[int],
):
    """Trains a generator and discriminator on the corpus in --data."""
    config = load_config(config_path) if config_path else TrainingConfig()
    config = options.seeded(config, seed)
    if max_steps is not None:
        config = config.replace(max_steps=max_steps)
    if resume is not None and seed is not None:
        logger.warning("--seed is ignored when resuming; the checkpoint's seed is used")

    result = trainer.run_training(config, data_dir, out_dir, resume=resume)
    click.echo(f"Trained {result.state.step} steps; final checkpoint: {result.checkpoint}")


@bp.command("search-topk")
@options.checkpoint_option
@options.for_checkpoint
@options.data_option
@click.option(
    "--split",
    type=click.Choice(["train", "validation", "test"]),
    default="validation",
    show_default=True,
)
@options.seed_option
@click.option("--k-max", type=int, default=20, show_default=True)
@click.option(
    "--out",
    "out_path",
    type=click.Path(dir_okay=False, path_type=Path),
    default=None,
    help="Writes the k,bleu2 curve here.",
)
def search_topk(
    checkpoint: trainer.Checkpoint,
    data_dir: Path,
    split: str,
    seed: Optional[int],
    k_max: int,
    out_path: Optional[Path],
):
    """Decodes the split for k = 1..k-max and reports the best k by BLEU-2."""
    config = checkpoint.config
    dataset = trainer.dataset_for(config, data_dir, checkpoint.vocab)
    search = trainer.search_top_k(
        checkpoint.model, checkpoint.vocab, dataset.split(split), config, (1, k_max), seed=seed
    )

    for k, score in search.curve.items():
        click.echo(f"k={k:<3d} BLEU-2 {score:.4f}")
    click.echo(f"best k: {search.best_k}")
    if out_path is not None:
        with open(out_path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["k", "bleu2"])
            writer.writerows([k, repr(score)] for k, score in search.curve.items())
