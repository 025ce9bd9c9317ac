"""
This module contains the corpus commands: `entropy` writes the positional
entropy curve and `build-vocab` writes the vocabulary a run would use.
"""

import logging
from pathlib import Path
from typing import Optional

import click

from aboots.commands import options
from aboots.services import corpus
from aboots.services.config import TrainingConfig

logger = logging.getLogger(__name__)

bp = click.Group("corpus", help="Corpus analysis and preparation.")


@bp.command("entropy")
@options.data_option
@click.option(
    "--out",
    "out_path",
    type=click.Path(dir_okay=False, path_type=Path),
    required=True,
    help="CSV with position,entropy_bits,support rows.",
)
@click.option(
    "--utterances",
    type=click.Choice(["responses", "all"]),
    default="responses",
    show_default=True,
)
@options.seed_option
def entropy(data_dir: Path, out_path: Path, utterances: str, seed: Optional[int]):
    """Per-position token entropy of the corpus responses. Uses no randomness."""
    rows = corpus.positional_entropy(corpus.load_conversations(data_dir), utterances)
    corpus.write_entropy_csv(rows, out_path)
    peak = max(rows, key=lambda row: row.entropy_bits)
    click.echo(
        f"{len(rows)} positions; peak {peak.entropy_bits:.3f} bits at position {peak.position}"
    )


@bp.command("build-vocab")
@options.data_option
@click.option("--size", type=int, default=50000, show_default=True, help="Vocabulary cap V.")
@click.option(
    "--out",
    "out_path",
    type=click.Path(dir_okay=False, path_type=Path),
    required=True,
)
@click.option(
    "--holdout/--no-holdout",
    default=True,
    show_default=True,
    help="Build from the training split only, as training does.",
)
@options.seed_option
def build_vocab(data_dir: Path, size: int, out_path: Path, holdout: bool, seed: Optional[int]):
    """Writes the vocabulary (token<TAB>count) built from the training split."""
    conversations = corpus.load_conversations(data_dir)
    if holdout:
        train, _, _ = corpus.split_dataset(
            conversations, options.seeded(TrainingConfig(), seed).seed
        )
    else:
        train = conversations
    vocab = corpus.build_vocabulary(corpus.conversation_utterances(train), size)
    vocab.save(out_path)
    click.echo(f"Wrote {len(vocab)} tokens to {out_path}")
