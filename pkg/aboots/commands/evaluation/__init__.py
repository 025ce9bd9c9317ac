"""
This module contains the evaluation commands: `eval` scores a split with
the automatic metrics and `generate` answers a single context.
"""

import csv
import logging
from pathlib import Path
from typing import Optional

import click

from aboots.commands import options
from aboots.services import metrics, trainer
from aboots.services.corpus import DialogueExample, tokenize, truncate
from aboots.services.utils import ConfigurationError

logger = logging.getLogger(__name__)

bp = click.Group("evaluation", help="Decoding and automatic metrics.")


@bp.command("eval")
@options.checkpoint_option
@options.for_checkpoint
@options.data_option
@options.split_option
@options.mode_option
@options.k_option
@options.seed_option
@click.option(
    "--out",
    "out_dir",
    type=click.Path(file_okay=False, path_type=Path),
    default=Path("."),
    show_default=True,
    help="Directory for eval-<split>.csv and responses-<split>.tsv.",
)
def evaluate(
    checkpoint: trainer.Checkpoint,
    data_dir: Path,
    split: str,
    mode: str,
    k: Optional[int],
    seed: Optional[int],
    out_dir: Path,
):
    """Decodes a split and reports BLEU-2, ROUGE-2, DIST-1/2 and NASL."""
    # the split always comes from the training seed; --seed only drives sampling
    config = checkpoint.config
    examples = trainer.dataset_for(config, data_dir, checkpoint.vocab).split(split)
    if not examples:
        raise ConfigurationError(f"Split '{split}' is empty")
    hypotheses = trainer.decode(
        checkpoint.model, examples, config, mode=mode, k=config.top_k if k is None else k, seed=seed
    )
    pairs = trainer.eval_pairs(checkpoint.vocab, hypotheses, examples)
    scores = metrics.evaluate(pairs)

    out_dir.mkdir(parents=True, exist_ok=True)
    metrics.write_report(scores, out_dir / f"eval-{split}.csv")
    with open(out_dir / f"responses-{split}.tsv", "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, delimiter="\t", lineterminator="\n")
        writer.writerow(["hypothesis", "reference"])
        writer.writerows([" ".join(pair.hypothesis), " ".join(pair.reference)] for pair in pairs)
    click.echo(metrics.format_table(scores, f"{split} ({len(pairs)} pairs, {mode})"))


@bp.command("generate")
@options.checkpoint_option
@options.for_checkpoint
@click.option(
    "--context",
    required=True,
    help='Context turns separated by TAB (or a literal "\\t").',
)
@options.mode_option
@options.k_option
@options.seed_option
def generate(
    checkpoint: trainer.Checkpoint,
    context: str,
    mode: str,
    k: Optional[int],
    seed: Optional[int],
):
    """Prints one response to --context."""
    config = checkpoint.config
    vocab = checkpoint.vocab
    turns = [tokenize(turn) for turn in context.replace("\\t", "\t").split("\t")]
    turns = [turn for turn in turns if turn]
    if not turns:
        raise ConfigurationError("--context has no tokens")
    if k is None:
        k = config.top_k
    if mode == "topk" and not 1 <= k <= len(vocab):
        raise ConfigurationError(f"--k must be between 1 and {len(vocab)}, got {k}")

    encoded = tuple(
        truncate(vocab.encode(turn), config.max_turn_len) for turn in turns[-config.max_turns :]
    )
    example = DialogueExample(encoded, target=(), distractor=())
    hypothesis = trainer.decode(checkpoint.model, [example], config, mode=mode, k=k, seed=seed)[0]
    click.echo(" ".join(vocab.decode(hypothesis)))
