"""
This module contains the joint training protocol.

Each step computes, per example and from one parameter snapshot, the
generator loss (teacher forcing plus the policy term) and the discriminator
loss (ground truth, teacher-forcing argmax and distractor, plus the soft
labelled policy sample when discriminator bootstrapping is on). Both
networks are then updated with clipped SGD. The encoder belongs to the
generator, so the discriminator update never touches it.

Randomness comes from `make_rng(seed, stream, ...)` keyed by step and row,
so a run resumed from a checkpoint replays the same draws.
"""

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from aboots.services import autodiff as ad
from aboots.services import metrics, settings
from aboots.services.autodiff import Graph, Tensor
from aboots.services.config import TrainingConfig, load_config
from aboots.services.corpus import (
    Batch,
    Dataset,
    DialogueExample,
    Ids,
    Vocabulary,
    load_conversations,
    make_batches,
    prepare_dataset,
)
from aboots.services.model import (
    DecodeMode,
    DiscriminationLevel,
    HredModel,
    cut_after_eos,
    teacher_forcing_argmax,
)
from aboots.services.objectives import (
    SampleKind,
    classify_sequence,
    classify_tokens,
    discriminator_bootstrap_target,
    discriminator_loss,
    discriminator_target,
    generator_loss,
    generator_target,
    generator_target_word,
    teacher_forcing_nll,
)
from aboots.services.parameters import (
    Group,
    clip_gradients,
    copy_into,
    load_parameters,
    save_parameters,
    sgd_step,
)
from aboots.services.policy import (
    Strategy,
    deterministic_policy_loss,
    gaussian_noise,
    make_sampler,
    reinforce_loss,
)
from aboots.services.utils import (
    CheckpointError,
    ConfigurationError,
    NonFiniteLossError,
    make_rng,
)

logger = logging.getLogger(__name__)

TRAIN_STREAM = 0
DECODE_STREAM = 1
EPOCH_STREAM = 2
INIT_STREAM = 3

METRICS_HEADER = ["step", "gen_loss", "disc_loss", "lr", "val_bleu2"]
PARAMETERS_FILE = "parameters.bin"
STATE_FILE = "state.json"
VOCAB_FILE = "vocab.txt"
CONFIG_FILE = "config.txt"


@dataclass
class RunState:
    """Where a run is; enough, with the parameters, to continue it exactly."""

    seed: int
    learning_rate: float
    step: int = 0
    epoch: int = 0
    batch_in_epoch: int = 0
    recent_losses: List[float] = field(default_factory=list)
    checkpoint: Optional[str] = None

    def save(self, path: Union[str, Path]):
        """Writes the state as JSON; floats keep their exact repr."""
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(asdict(self), handle, indent=2)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunState":
        """Reads a file written by `save`."""
        with open(path, encoding="utf-8") as handle:
            return cls(**json.load(handle))


@dataclass
class StepResult:
    """Batch-mean losses of one step and what happened inside it."""

    generator_loss: float
    discriminator_loss: float
    diagnostics: Dict[str, float]


@dataclass
class ExampleLosses:
    """Both losses of one example, recorded on one graph."""

    graph: Graph
    generator: Tensor
    discriminator: Optional[Tensor]
    diagnostics: Dict[str, float]


def lr_schedule(losses: Sequence[float], learning_rate: float, decay: float) -> float:
    """
    Decays the learning rate when the generator loss went up on each of the
    last two steps.

    Args:
        losses: recent generator losses, oldest first, current last
        learning_rate: the rate used for the current step
        decay: factor in (0, 1)
    """
    if not 0 < decay < 1:
        raise ConfigurationError(f"lr_decay must be in (0, 1), got {decay}")
    if len(losses) >= 3 and losses[-3] < losses[-2] < losses[-1]:
        return learning_rate * decay
    return learning_rate


def _policy_terms(
    model: HredModel,
    graph: Graph,
    encoded,
    example: DialogueExample,
    argmax: Ids,
    config: TrainingConfig,
    rng: np.random.Generator,
):
    """Returns (surrogate loss, sampled tokens, discriminator output for them)."""
    hp, policy, level = config.hyperparams, config.policy, config.level
    if policy.strategy == Strategy.GAUSSIAN:
        noise = gaussian_noise(model.hidden, rng, policy.noise_scale)
        result = deterministic_policy_loss(
            model, graph, encoded, noise, hp.alpha, level, hp.tau, config.max_decode_len
        )
        judgement = model.discriminate(graph, result.sequence.tokens, encoded.context_state, level)
        return result.surrogate, result.sequence.tokens, judgement

    sampler = make_sampler(policy.strategy, policy.top_k, rng)
    sampled = model.generate_sequence(
        graph,
        encoded,
        DecodeMode.SAMPLED,
        temperature=hp.tau,
        sampler=sampler,
        max_len=config.max_decode_len,
    )
    judgement = model.discriminate(graph, sampled.tokens, encoded.context_state, level)
    if level == DiscriminationLevel.UTTERANCE:
        kind = classify_sequence(sampled.tokens, example.target, argmax)
        rewards = generator_target(kind, judgement.mean_score, hp)
    else:
        kinds = classify_tokens(sampled.tokens, example.target, argmax)
        rewards = [
            generator_target_word(kind, float(score), hp)
            for kind, score in zip(kinds, judgement.scores.value)
        ]
    return reinforce_loss(sampled.token_log_probs, rewards), sampled.tokens, judgement


def example_losses(
    model: HredModel,
    example: DialogueExample,
    config: TrainingConfig,
    rng: np.random.Generator,
) -> ExampleLosses:
    """Builds both losses of one example on a fresh graph."""
    objective, hp, level = config.objective, config.hyperparams, config.level
    graph = model.new_graph()
    encoded = model.encode_context(graph, example.context)
    forced = model.generate_sequence(
        graph, encoded, DecodeMode.TEACHER_FORCING, target=example.target, temperature=hp.tau
    )
    argmax = teacher_forcing_argmax(forced)
    tf_log_probs = forced.token_log_probs
    terms = [(objective.ground_truth_weight, tf_log_probs)]
    if objective.argmax_weight > 0:
        argmax_log_probs = ad.stack(
            [
                ad.index(step.log_distribution, token)
                for step, token in zip(forced.steps, forced.argmax_tokens())
            ]
        )
        terms.append((objective.argmax_weight, argmax_log_probs))
    gen_loss = generator_loss([terms])

    diagnostics = {
        "tf_nll_sum": -float(np.sum(tf_log_probs.value)),
        "tf_tokens": float(len(example.target)),
        "disc_samples": 0.0,
    }
    if not objective.use_policy:
        return ExampleLosses(graph, gen_loss, None, diagnostics)

    surrogate, sample_tokens, judgement = _policy_terms(
        model, graph, encoded, example, argmax, config, rng
    )
    gen_loss = ad.add(gen_loss, surrogate)
    if not objective.train_discriminator:
        return ExampleLosses(graph, gen_loss, None, diagnostics)

    context_state = encoded.context_state
    truth = model.discriminate(graph, example.target, context_state, level)
    fake = model.discriminate(graph, argmax, context_state, level)
    distractor = model.discriminate(graph, example.distractor, context_state, level)
    samples = [
        (discriminator_target(SampleKind.GROUND_TRUTH, hp), truth.scores),
        (discriminator_target(SampleKind.TF_ARGMAX, hp), fake.scores),
        (discriminator_target(SampleKind.DISTRACTOR, hp), distractor.scores),
    ]
    if config.disc_bootstrap:
        soft_label = discriminator_bootstrap_target(
            judgement.features.value, truth.features.value
        )
        samples.append((soft_label, judgement.scores))
        diagnostics["soft_label"] = soft_label

    diagnostics.update(
        {
            "disc_samples": float(len(samples)),
            "q_truth": truth.mean_score,
            "q_argmax": fake.mean_score,
            "q_distractor": distractor.mean_score,
            "q_sample": judgement.mean_score,
            "sample_length": float(len(sample_tokens)),
        }
    )
    return ExampleLosses(graph, gen_loss, discriminator_loss([samples]), diagnostics)


def _accumulate(total: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], names, weight: float):
    for name in names:
        if name in total:
            total[name] = total[name] + grads[name] * weight
        else:
            total[name] = grads[name] * weight


def train_step(
    model: HredModel,
    batch: Batch,
    config: TrainingConfig,
    learning_rate: float,
    step: int,
) -> StepResult:
    """
    One simultaneous generator/discriminator update on `batch`.

    Gradients of every example are taken at the same parameter values and
    reduced in row order before either network moves.

    Raises:
        NonFiniteLossError: if either loss is NaN or infinite; parameters are
            left untouched
    """
    parameters = model.parameters
    generator_names = parameters.names_in(Group.GENERATOR)
    discriminator_names = parameters.names_in(Group.DISCRIMINATOR)
    examples = batch.examples()
    weight = 1.0 / len(examples)

    gen_grads: Dict[str, np.ndarray] = {}
    disc_grads: Dict[str, np.ndarray] = {}
    gen_total, disc_total = 0.0, 0.0
    summed: Dict[str, float] = {}
    for row, example in enumerate(examples):
        losses = example_losses(model, example, config, make_rng(config.seed, TRAIN_STREAM, step, row))
        gen_total += losses.generator.item() * weight
        _accumulate(gen_grads, losses.graph.backward(losses.generator), generator_names, weight)
        if losses.discriminator is not None:
            disc_total += losses.discriminator.item() * weight
            _accumulate(
                disc_grads,
                losses.graph.backward(losses.discriminator),
                discriminator_names,
                weight,
            )
        for key, value in losses.diagnostics.items():
            summed[key] = summed.get(key, 0.0) + value

    diagnostics = _summarize(summed, len(examples))
    if not (math.isfinite(gen_total) and math.isfinite(disc_total)):
        diagnostics.update(step=float(step), gen_loss=gen_total, disc_loss=disc_total)
        raise NonFiniteLossError(f"Non-finite loss at step {step}", diagnostics)

    sgd_step(parameters, clip_gradients(gen_grads, config.clip), learning_rate)
    if disc_grads:
        sgd_step(parameters, clip_gradients(disc_grads, config.clip), learning_rate)
    return StepResult(gen_total, disc_total, diagnostics)


def _summarize(summed: Dict[str, float], count: int) -> Dict[str, float]:
    tokens = summed.pop("tf_tokens", 0.0)
    nll = summed.pop("tf_nll_sum", 0.0)
    diagnostics = {key: value / count for key, value in summed.items()}
    diagnostics["tf_nll_per_token"] = nll / tokens if tokens else 0.0
    return diagnostics


def decode(
    model: HredModel,
    examples: Sequence[DialogueExample],
    config: TrainingConfig,
    mode: str = "greedy",
    k: int = 1,
    seed: Optional[int] = None,
) -> List[Ids]:
    """
    Decodes a response for every example.

    `mode` is `greedy` or `topk`; top-k uses the configured strategy
    (categorical for Gaussian-trained models) with one stream per example.
    """
    seed = config.seed if seed is None else seed
    hypotheses = []
    for position, example in enumerate(examples):
        graph = model.new_graph()
        encoded = model.encode_context(graph, example.context)
        if mode == "greedy":
            sequence = model.generate_sequence(
                graph, encoded, DecodeMode.GREEDY, temperature=config.tau, max_len=config.max_decode_len
            )
        elif mode == "topk":
            sampler = make_sampler(config.strategy, k, make_rng(seed, DECODE_STREAM, k, position))
            sequence = model.generate_sequence(
                graph,
                encoded,
                DecodeMode.SAMPLED,
                temperature=config.tau,
                sampler=sampler,
                max_len=config.max_decode_len,
            )
        else:
            raise ConfigurationError(f"Unknown decode mode '{mode}'")
        hypotheses.append(cut_after_eos(sequence.tokens))
    return hypotheses


def eval_pairs(
    vocab: Vocabulary, hypotheses: Sequence[Ids], examples: Sequence[DialogueExample]
) -> List[metrics.EvalPair]:
    """Turns decoded ids and references into EOS-stripped token pairs."""
    return [
        metrics.EvalPair(tuple(vocab.decode(hypothesis)), tuple(vocab.decode(example.target)))
        for hypothesis, example in zip(hypotheses, examples)
    ]


def greedy_bleu(model: HredModel, vocab: Vocabulary, examples, config: TrainingConfig) -> float:
    """BLEU-2 of greedy decodes against the references."""
    return metrics.bleu2(eval_pairs(vocab, decode(model, examples, config), examples))


def training_nll(model: HredModel, examples: Sequence[DialogueExample], config: TrainingConfig) -> float:
    """Teacher-forcing NLL per token over `examples`."""
    log_probs = []
    for example in examples:
        graph = model.new_graph()
        encoded = model.encode_context(graph, example.context)
        forced = model.generate_sequence(
            graph, encoded, DecodeMode.TEACHER_FORCING, target=example.target, temperature=config.tau
        )
        log_probs.append(forced.token_log_probs)
    return teacher_forcing_nll(log_probs)


def discriminator_margin(
    model: HredModel, examples: Sequence[DialogueExample], config: TrainingConfig
) -> float:
    """Mean Q of the references minus mean Q of the distractors."""
    truth, distractor = [], []
    for example in examples:
        graph = model.new_graph()
        context_state = model.encode_context(graph, example.context).context_state
        truth.append(model.discriminate(graph, example.target, context_state, config.level).mean_score)
        distractor.append(
            model.discriminate(graph, example.distractor, context_state, config.level).mean_score
        )
    return float(np.mean(truth) - np.mean(distractor))


@dataclass
class TopKSearch:
    """Best k and the whole k -> BLEU-2 curve."""

    best_k: int
    curve: Dict[int, float]


def search_top_k(
    model: HredModel,
    vocab: Vocabulary,
    examples: Sequence[DialogueExample],
    config: TrainingConfig,
    k_range: Tuple[int, int] = (1, 20),
    seed: Optional[int] = None,
) -> TopKSearch:
    """
    Decodes the validation set with every k in `k_range` (inclusive, capped
    at V) and keeps the k with the highest BLEU-2; ties go to the smaller k.

    Raises:
        ConfigurationError: for an empty validation set or an empty range
    """
    if not examples:
        raise ConfigurationError("search_top_k needs a non-empty validation set")
    low, high = k_range[0], min(k_range[1], model.vocab_size)
    if not 1 <= low <= high:
        raise ConfigurationError(f"Invalid top_k range {k_range}")
    if config.strategy == Strategy.GAUSSIAN:
        logger.warning("Gaussian policy has no top-k set; searching with categorical top-k")

    curve: Dict[int, float] = {}
    for k in range(low, high + 1):
        hypotheses = decode(model, examples, config, mode="topk", k=k, seed=seed)
        curve[k] = metrics.bleu2(eval_pairs(vocab, hypotheses, examples))
        logger.debug("top_k=%d BLEU-2=%.4f", k, curve[k])
    best_k = max(curve, key=lambda k: (curve[k], -k))
    logger.info("Best top_k=%d (BLEU-2 %.4f)", best_k, curve[best_k])
    return TopKSearch(best_k, curve)


@dataclass
class Checkpoint:
    """Everything needed to decode with, or continue, a run."""

    model: HredModel
    vocab: Vocabulary
    config: TrainingConfig
    state: RunState


def save_checkpoint(
    directory: Union[str, Path],
    model: HredModel,
    vocab: Vocabulary,
    config: TrainingConfig,
    state: RunState,
) -> Path:
    """Writes parameters, run state, vocabulary and config into `directory`."""
    path = Path(directory)
    path.mkdir(parents=True, exist_ok=True)
    save_parameters(model.parameters, path / PARAMETERS_FILE)
    vocab.save(path / VOCAB_FILE)
    config.save(path / CONFIG_FILE)
    state.checkpoint = str(path)
    state.save(path / STATE_FILE)
    logger.info("Saved checkpoint at step %d to %s", state.step, path)
    return path


def load_checkpoint(directory: Union[str, Path]) -> Checkpoint:
    """
    Reads a checkpoint directory.

    Raises:
        CheckpointError: if a file is missing or the parameters do not fit
            the model the saved config describes
    """
    path = Path(directory)
    for name in (PARAMETERS_FILE, VOCAB_FILE, CONFIG_FILE, STATE_FILE):
        if not (path / name).is_file():
            raise CheckpointError(f"Checkpoint {path} is missing {name}")
    config = load_config(path / CONFIG_FILE)
    vocab = Vocabulary.load(path / VOCAB_FILE)
    model = HredModel.initialize(
        len(vocab), config.hidden, config.layers, make_rng(config.seed, INIT_STREAM)
    )
    copy_into(model.parameters, load_parameters(path / PARAMETERS_FILE))
    try:
        state = RunState.load(path / STATE_FILE)
    except (OSError, ValueError, TypeError) as error:
        raise CheckpointError(f"Unreadable run state in {path}: {error}") from error
    return Checkpoint(model, vocab, config, state)


def dataset_for(checkpoint_config: TrainingConfig, data_dir, vocab: Optional[Vocabulary] = None) -> Dataset:
    """Rebuilds the splits a run with this config sees."""
    return prepare_dataset(
        load_conversations(data_dir),
        checkpoint_config.seed,
        vocab_size=checkpoint_config.vocab_size,
        max_turn_len=checkpoint_config.max_turn_len,
        max_turns=checkpoint_config.max_turns,
        holdout=checkpoint_config.holdout,
        vocab=vocab,
    )


@dataclass
class TrainingResult:
    """Final checkpoint, final state and the rows of the metrics log."""

    checkpoint: Path
    state: RunState
    rows: List[List[str]]
    last_step: Optional[StepResult] = None


def _read_metrics(path: Path, up_to_step: int) -> List[List[str]]:
    if not path.is_file():
        return []
    with open(path, newline="", encoding="utf-8") as handle:
        rows = list(csv.reader(handle))
    return [row for row in rows[1:] if row and int(row[0]) <= up_to_step]


def _write_metrics(path: Path, rows: Sequence[Sequence[str]]):
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(METRICS_HEADER)
        writer.writerows(rows)


def run_training(
    config: TrainingConfig,
    data_dir: Union[str, Path],
    out_dir: Union[str, Path],
    resume: Optional[Union[str, Path]] = None,
) -> TrainingResult:
    """
    Trains until `max_epochs` (or `max_steps`, when non-zero) and writes
    `metrics.csv` plus checkpoints under `out_dir/checkpoints`.

    With `resume`, parameters, vocabulary and run state come from that
    checkpoint; the step budget comes from `config`, and everything else from
    the checkpoint's own config.

    Raises:
        NonFiniteLossError: after writing `diagnostics.json` to `out_dir`
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"

    if resume is not None:
        restored = load_checkpoint(resume)
        model, vocab, state = restored.model, restored.vocab, restored.state
        config = restored.config.replace(max_epochs=config.max_epochs, max_steps=config.max_steps)
        rows = _read_metrics(metrics_path, state.step)
        logger.info("Resuming from %s at step %d", resume, state.step)
    else:
        vocab = None
        state = RunState(seed=config.seed, learning_rate=config.learning_rate)
        rows = []

    dataset = dataset_for(config, data_dir, vocab)
    vocab = dataset.vocab
    if resume is None:
        model = HredModel.initialize(
            len(vocab), config.hidden, config.layers, make_rng(config.seed, INIT_STREAM)
        )
    logger.info(
        "Training %s: %d train / %d valid examples, V=%d, h=%d, layers=%d",
        config.variant,
        len(dataset.train),
        len(dataset.valid),
        len(vocab),
        config.hidden,
        config.layers,
    )

    checkpoints = out / "checkpoints"
    last_saved = -1
    last_result: Optional[StepResult] = None
    try:
        while state.epoch < config.max_epochs and not _budget_spent(config, state):
            batches = list(
                make_batches(
                    dataset.train,
                    config.batch_size,
                    config.max_lens,
                    make_rng(config.seed, EPOCH_STREAM, state.epoch),
                )
            )
            while state.batch_in_epoch < len(batches) and not _budget_spent(config, state):
                batch = batches[state.batch_in_epoch]
                rate = state.learning_rate
                last_result = train_step(model, batch, config, rate, state.step)
                state.step += 1
                state.batch_in_epoch += 1
                epoch_done = state.batch_in_epoch == len(batches)

                history = state.recent_losses + [last_result.generator_loss]
                state.learning_rate = lr_schedule(history, rate, config.lr_decay)
                state.recent_losses = history[-2:]

                bleu = ""
                if _validation_due(config, state.step, epoch_done):
                    score = greedy_bleu(model, vocab, dataset.valid, config)
                    bleu = repr(score)
                    logger.info(
                        "step %d: gen %.4f disc %.4f lr %.5f nll/token %.4f val BLEU-2 %.4f",
                        state.step,
                        last_result.generator_loss,
                        last_result.discriminator_loss,
                        rate,
                        last_result.diagnostics["tf_nll_per_token"],
                        score,
                    )
                rows.append(
                    [
                        str(state.step),
                        repr(last_result.generator_loss),
                        repr(last_result.discriminator_loss),
                        repr(rate),
                        bleu,
                    ]
                )
                if epoch_done:
                    state.epoch += 1
                    state.batch_in_epoch = 0
                if config.checkpoint_every and state.step % config.checkpoint_every == 0:
                    _write_metrics(metrics_path, rows)
                    save_checkpoint(_checkpoint_dir(checkpoints, state.step), model, vocab, config, state)
                    last_saved = state.step
    except NonFiniteLossError as error:
        _write_metrics(metrics_path, rows)
        with open(out / "diagnostics.json", "w", encoding="utf-8") as handle:
            json.dump(error.diagnostics, handle, indent=2)
        logger.error("Aborting: %s (diagnostics in %s)", error, out / "diagnostics.json")
        raise

    _write_metrics(metrics_path, rows)
    final = _checkpoint_dir(checkpoints, state.step)
    if last_saved != state.step:
        save_checkpoint(final, model, vocab, config, state)
    return TrainingResult(final, state, rows, last_result)


def _budget_spent(config: TrainingConfig, state: RunState) -> bool:
    return bool(config.max_steps) and state.step >= config.max_steps


def _validation_due(config: TrainingConfig, step: int, epoch_done: bool) -> bool:
    if config.validate_every:
        return step % config.validate_every == 0
    return epoch_done


def _checkpoint_dir(root: Path, step: int) -> Path:
    return root / f"{settings.CHECKPOINT_PREFIX}{step:06d}"
