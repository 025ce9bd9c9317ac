"""
This module contains credit assignment for the discriminator-weighted
generator target: top-k samplers, the REINFORCE surrogate and the
deterministic (Gaussian noise) surrogate.
"""

import enum
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from aboots.services import autodiff as ad
from aboots.services.autodiff import Graph, Tensor
from aboots.services.model import (
    DecodeMode,
    DiscriminationLevel,
    DiscriminatorOutput,
    EncoderOutput,
    GeneratedSequence,
    HredModel,
    Sampler,
)
from aboots.services.objectives import Weights
from aboots.services.utils import ConfigurationError

logger = logging.getLogger(__name__)


class Strategy(str, enum.Enum):
    """How the policy sample is drawn."""

    CATEGORICAL = "categorical"
    UNIFORM = "uniform"
    GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class PolicyConfig:
    """Sampling strategy, top-k size and the Gaussian noise scale."""

    strategy: Strategy = Strategy.CATEGORICAL
    top_k: int = 10
    noise_scale: float = 1.0


def top_k_ids(distribution: np.ndarray, k: int) -> np.ndarray:
    """
    Ids of the k most probable entries, most probable first; ties go to
    the lower id.

    Raises:
        ConfigurationError: unless 1 <= k <= V
    """
    size = len(distribution)
    if not 1 <= k <= size:
        raise ConfigurationError(f"top_k must be between 1 and {size}, got {k}")
    return np.argsort(-np.asarray(distribution), kind="stable")[:k]


def sample_top_k_categorical(
    distribution: np.ndarray, k: int, rng: np.random.Generator
) -> int:
    """Samples from the top-k entries, renormalized."""
    ids = top_k_ids(distribution, k)
    if k == 1:
        return int(ids[0])
    mass = np.asarray(distribution, dtype=np.float64)[ids]
    cumulative = np.cumsum(mass)
    choice = int(np.searchsorted(cumulative, rng.random() * cumulative[-1], side="right"))
    return int(ids[min(choice, k - 1)])


def sample_top_k_uniform(
    distribution: np.ndarray, k: int, rng: np.random.Generator
) -> int:
    """Samples uniformly among the top-k entries."""
    ids = top_k_ids(distribution, k)
    if k == 1:
        return int(ids[0])
    return int(ids[int(rng.integers(k))])


def make_sampler(strategy: Strategy, k: int, rng: np.random.Generator) -> Sampler:
    """
    Binds a top-k sampler to a generator.

    The Gaussian strategy never samples tokens; asking it for a sampler gives
    the categorical one, which is what decoding with a Gaussian-trained model
    uses.
    """
    strategy = Strategy(strategy)
    if strategy == Strategy.UNIFORM:
        return lambda distribution: sample_top_k_uniform(distribution, k, rng)
    return lambda distribution: sample_top_k_categorical(distribution, k, rng)


def reinforce_loss(log_probs: Tensor, rewards: Weights) -> Tensor:
    """
    Surrogate -sum_j r_j log p(y_j | .), whose gradient is the
    score-function estimate.

    `rewards` is alpha * Q for a whole response (a float) or the per-token
    targets at word level. Rewards are constants.
    """
    values = np.broadcast_to(np.asarray(rewards, dtype=np.float64), log_probs.shape)
    return ad.scale(ad.total(ad.mul(log_probs, np.array(values))), -1.0)


@dataclass
class DeterministicPolicyResult:
    """The surrogate, the reported argmax response and its relaxed score."""

    surrogate: Tensor
    sequence: GeneratedSequence
    judgement: DiscriminatorOutput


def gaussian_noise(
    size: int, rng: np.random.Generator, scale: float = 1.0
) -> np.ndarray:
    """z ~ N(0, scale^2 I)."""
    return rng.standard_normal(size) * scale


def deterministic_policy_loss(
    model: HredModel,
    graph: Graph,
    encoded: EncoderOutput,
    noise: Optional[np.ndarray],
    alpha: float = 1.0,
    level: DiscriminationLevel = DiscriminationLevel.UTTERANCE,
    temperature: float = 1.0,
    max_len: int = 30,
) -> DeterministicPolicyResult:
    """
    Greedy decode from the noised context state, then score the
    expected-embedding relaxation of that decode so Q is differentiable in
    the generator's logits.

    Surrogate: -alpha * Q (mean of d_j at word level). Gradients reach the
    generator through Q; the discriminator's own parameters also receive
    gradients here, which the trainer drops by group.
    """
    sequence = model.generate_sequence(
        graph,
        encoded,
        DecodeMode.GREEDY,
        temperature=temperature,
        max_len=max_len,
        noise=noise,
    )
    relaxed = model.relaxed_inputs(graph, [step.distribution for step in sequence.steps])
    judgement = model.discriminate_inputs(graph, relaxed, encoded.context_state, level)
    surrogate = ad.scale(ad.mean(judgement.scores), -alpha)
    return DeterministicPolicyResult(surrogate, sequence, judgement)
