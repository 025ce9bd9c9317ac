"""
This module contains target construction and the two losses.

Generator:     L_G = -sum_samples t_G(y) log p(y | x)     (per token at word level)
Discriminator: L_D = -sum_samples [t_D log Q + (1 - t_D) log(1 - Q)]

Both are averaged over the batch. Targets are plain floats: nothing flows
back through them.
"""

import enum
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np

from aboots.services import autodiff as ad
from aboots.services.autodiff import Tensor
from aboots.services.utils import (
    ContractError,
    DegenerateFeatureError,
    EmptyInputError,
    InvalidHyperparameterError,
)

SCORE_FLOOR = 1e-7

Weights = Union[float, Sequence[float], np.ndarray]


class SampleKind(str, enum.Enum):
    """What a scored response is."""

    GROUND_TRUTH = "ground-truth"
    TF_ARGMAX = "tf-argmax"
    DISTRACTOR = "distractor"
    POLICY_SAMPLE = "policy-sample"


class WordCoefficient(str, enum.Enum):
    """Multiplier of d_j for word-level policy tokens."""

    ALPHA = "alpha"
    ONE_MINUS_BETA = "one-minus-beta"


class SpecialCase(str, enum.Enum):
    """Objective variants that collapse the adversarial terms."""

    NONE = "none"
    MLE = "mle"
    HARD = "hard"


@dataclass(frozen=True)
class Hyperparams:
    """alpha scales discriminator credit, beta the ground truth, tau the softmax."""

    alpha: float = 1.0
    beta: float = 1.0
    tau: float = 1.0
    word_coefficient: WordCoefficient = WordCoefficient.ALPHA

    def __post_init__(self):
        if self.alpha < 0:
            raise InvalidHyperparameterError(f"alpha must be >= 0, got {self.alpha}")
        if not 0 <= self.beta <= 1:
            raise InvalidHyperparameterError(f"beta must be in [0, 1], got {self.beta}")
        if not self.tau > 0:
            raise InvalidHyperparameterError(f"tau must be > 0, got {self.tau}")


def generator_target(kind: SampleKind, q_value: float, hp: Hyperparams) -> float:
    """
    t_G for a whole response: beta for the ground truth, 0 for the
    teacher-forcing argmax, alpha * Q for anything else.

    Raises:
        ContractError: if Q is outside [0, 1] for a policy sample
    """
    kind = SampleKind(kind)
    if kind == SampleKind.GROUND_TRUTH:
        return hp.beta
    if kind in (SampleKind.TF_ARGMAX, SampleKind.DISTRACTOR):
        return 0.0
    if not 0.0 <= q_value <= 1.0:
        raise ContractError(f"Q must lie in [0, 1], got {q_value}")
    return hp.alpha * q_value


def generator_target_word(kind: SampleKind, score: float, hp: Hyperparams) -> float:
    """t_G for one token of a response, using the per-token score d_j."""
    kind = SampleKind(kind)
    if kind == SampleKind.GROUND_TRUTH:
        return hp.beta
    if kind in (SampleKind.TF_ARGMAX, SampleKind.DISTRACTOR):
        return 0.0
    if hp.word_coefficient == WordCoefficient.ONE_MINUS_BETA:
        return (1.0 - hp.beta) * score
    return hp.alpha * score


def classify_tokens(
    sample: Sequence[int], truth: Sequence[int], argmax: Sequence[int]
) -> List[SampleKind]:
    """
    Labels each sampled token: ground truth where it matches the reference at
    that position, tf-argmax where it is the step's most probable token,
    a policy sample otherwise.
    """
    kinds = []
    for position, token in enumerate(sample):
        if position < len(truth) and token == truth[position]:
            kinds.append(SampleKind.GROUND_TRUTH)
        elif position < len(argmax) and token == argmax[position]:
            kinds.append(SampleKind.TF_ARGMAX)
        else:
            kinds.append(SampleKind.POLICY_SAMPLE)
    return kinds


def classify_sequence(
    sample: Sequence[int], truth: Sequence[int], argmax: Sequence[int]
) -> SampleKind:
    """Labels a whole sampled response the same way."""
    if tuple(sample) == tuple(truth):
        return SampleKind.GROUND_TRUTH
    if tuple(sample) == tuple(argmax):
        return SampleKind.TF_ARGMAX
    return SampleKind.POLICY_SAMPLE


def weighted_log_likelihood(weights: Weights, log_probs: Tensor) -> Tensor:
    """sum_j t_j log p_j; a scalar weight applies to every token."""
    values = np.broadcast_to(np.asarray(weights, dtype=np.float64), log_probs.shape)
    return ad.total(ad.mul(log_probs, np.array(values)))


def generator_loss(batch: Sequence[Sequence[Tuple[Weights, Tensor]]]) -> Tensor:
    """
    Mean over examples of -sum over samples of sum_j t_j log p_j.

    Args:
        batch: per example, (targets, per-token log-probs) for each sample;
            targets are one float per sequence or one per token. Log-prob
            vectors hold only real tokens, so padding never contributes.
    Returns:
        scalar loss; exactly 0 when every target is 0
    """
    if not batch:
        raise EmptyInputError("generator_loss needs at least one example")
    per_example = []
    for terms in batch:
        if not terms:
            raise EmptyInputError("Every example needs at least one scored sample")
        parts = [weighted_log_likelihood(weights, log_probs) for weights, log_probs in terms]
        per_example.append(ad.scale(_sum(parts), -1.0))
    return ad.mean(ad.stack(per_example))


def _sum(parts: Sequence[Tensor]) -> Tensor:
    result = parts[0]
    for part in parts[1:]:
        result = ad.add(result, part)
    return result


def teacher_forcing_nll(log_probs: Sequence[Tensor]) -> float:
    """Mean negative log-likelihood per token over teacher-forced sequences."""
    tokens = sum(int(item.value.size) for item in log_probs)
    if tokens == 0:
        raise EmptyInputError("No tokens to score")
    return -float(sum(np.sum(item.value) for item in log_probs)) / tokens


def binary_cross_entropy(labels: Weights, scores: Tensor) -> Tensor:
    """
    Mean over entries of -[t log Q + (1 - t) log(1 - Q)].

    Q is clamped to [1e-7, 1 - 1e-7] before the logs.
    """
    targets = np.array(np.broadcast_to(np.asarray(labels, dtype=np.float64), scores.shape))
    if np.any(targets < 0) or np.any(targets > 1):
        raise ContractError("Discriminator labels must lie in [0, 1]")
    clamped = ad.clip(scores, SCORE_FLOOR, 1.0 - SCORE_FLOOR)
    positive = ad.mul(ad.log(clamped), targets)
    negative = ad.mul(ad.log(ad.sub(1.0, clamped)), 1.0 - targets)
    return ad.scale(ad.mean(ad.add(positive, negative)), -1.0)


def discriminator_loss(batch: Sequence[Sequence[Tuple[Weights, Tensor]]]) -> Tensor:
    """
    Mean over examples of the mean over samples of the cross-entropy between
    labels t_D and scores Q (averaged over tokens at word level).
    """
    if not batch:
        raise EmptyInputError("discriminator_loss needs at least one example")
    per_example = []
    for samples in batch:
        if not samples:
            raise EmptyInputError("Every example needs at least one discriminator sample")
        losses = [binary_cross_entropy(labels, scores) for labels, scores in samples]
        per_example.append(ad.mean(ad.stack(losses)))
    return ad.mean(ad.stack(per_example))


def discriminator_target(kind: SampleKind, hp: Hyperparams) -> float:
    """t_D: beta for the ground truth, 0 for the tf-argmax and the distractor."""
    kind = SampleKind(kind)
    if kind == SampleKind.GROUND_TRUTH:
        return hp.beta
    if kind in (SampleKind.TF_ARGMAX, SampleKind.DISTRACTOR):
        return 0.0
    raise ContractError(f"No hard discriminator label for {kind.value}")


def discriminator_bootstrap_target(
    sample_features: np.ndarray, truth_features: np.ndarray
) -> float:
    """
    Soft label max(0, cos(h_D(y), h_D(x))), in [0, 1].

    Raises:
        DegenerateFeatureError: if either vector has zero norm
    """
    sample = np.asarray(sample_features, dtype=np.float64).ravel()
    truth = np.asarray(truth_features, dtype=np.float64).ravel()
    sample_sq, truth_sq = float(np.dot(sample, sample)), float(np.dot(truth, truth))
    if sample_sq == 0.0 or truth_sq == 0.0:
        raise DegenerateFeatureError("Cannot compare a zero-norm feature vector")
    cosine = float(np.dot(sample, truth)) / float(np.sqrt(sample_sq * truth_sq))
    return min(1.0, max(0.0, cosine))


@dataclass(frozen=True)
class ObjectiveConfig:
    """
    Weights for the generator's sample kinds and which parts of a step run.

    `argmax_weight` multiplies the log-likelihood of the teacher-forcing
    argmax tokens; `use_policy` adds the discriminator-weighted sample and
    `train_discriminator` enables the discriminator update.
    """

    ground_truth_weight: float
    argmax_weight: float
    use_policy: bool
    train_discriminator: bool


def make_special_case_config(kind: SpecialCase, beta: float = 1.0) -> ObjectiveConfig:
    """
    mle: ground truth weighted 1, nothing else.
    hard: ground truth beta, model argmax 1 - beta, nothing else.
    none: the full adversarial objective.
    """
    kind = SpecialCase(kind)
    if kind == SpecialCase.MLE:
        return ObjectiveConfig(1.0, 0.0, use_policy=False, train_discriminator=False)
    if kind == SpecialCase.HARD:
        if not 0 <= beta <= 1:
            raise InvalidHyperparameterError(f"beta must be in [0, 1], got {beta}")
        return ObjectiveConfig(beta, 1.0 - beta, use_policy=False, train_discriminator=False)
    return ObjectiveConfig(beta, 0.0, use_policy=True, train_discriminator=True)
