"""
This module contains the hierarchical encoder, the attention decoder
(generator) and the word/utterance discriminator.

All three share one `ParameterSet`. The embedding matrix E (h_dim x V) is a
single entry used for encoder input, decoder input, the tied output
projection (logits = E^T g + b_g) and discriminator input.

Every RNN is a stack of GRU layers; layer l's output is layer l+1's input.
Bidirectional RNNs run one stack per direction and project the concatenated
states back to h_dim, so every downstream vector has h_dim entries.
"""

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from aboots.services import autodiff as ad
from aboots.services.autodiff import Graph, Tensor
from aboots.services.corpus import EOS, SOS, Ids
from aboots.services.parameters import Group, ParameterSet, xavier_uniform_init
from aboots.services.utils import ContractError, EmptyInputError

logger = logging.getLogger(__name__)

EMBEDDING = "embedding"
OUTPUT_BIAS = "output_bias"

Sampler = Callable[[np.ndarray], int]


class DecodeMode(str, enum.Enum):
    """Where the decoder's previous token comes from."""

    TEACHER_FORCING = "teacher-forcing"
    GREEDY = "greedy"
    SAMPLED = "sampled"


class DiscriminationLevel(str, enum.Enum):
    """Whether the discriminator scores whole responses or each token."""

    UTTERANCE = "utterance"
    WORD = "word"


@dataclass
class AttentionMemory:
    """Encoder states of the last context turn, stacked, with their projected keys."""

    values: Tensor
    keys: Tensor

    def __len__(self) -> int:
        return int(self.values.shape[0])


@dataclass
class TurnEncoding:
    """Per-token states of one turn and their L2 pool."""

    states: List[Tensor]
    summary: Tensor


@dataclass
class EncoderOutput:
    """What the generator and discriminator both read for one example."""

    memory: List[Tensor]
    attention_memory: AttentionMemory
    summary: Tensor
    context_state: Tensor
    context_layers: List[Tensor]


@dataclass
class GeneratorStepOutput:
    """One decoder step."""

    state: Tensor
    attention_weights: Tensor
    logits: Tensor
    distribution: Tensor
    log_distribution: Tensor
    token: int
    log_prob: Tensor


@dataclass
class GeneratedSequence:
    """A decoded (or teacher-forced) response and its log-probabilities."""

    tokens: Ids
    steps: List[GeneratorStepOutput] = field(default_factory=list)

    @property
    def token_log_probs(self) -> Tensor:
        """log p(y_j | y_<j, context) for each step, as a vector."""
        return ad.stack([step.log_prob for step in self.steps])

    @property
    def sequence_log_prob(self) -> Tensor:
        """Sum of the per-step log-probabilities."""
        return ad.total(self.token_log_probs)

    def argmax_tokens(self) -> Ids:
        """Most probable token at each step."""
        return tuple(int(np.argmax(step.distribution.value)) for step in self.steps)


@dataclass
class DiscriminatorOutput:
    """
    Scores strictly inside (0, 1) plus the pre-projection features h_D.

    `scores` is a scalar for utterance-level and one entry per token for
    word-level discrimination.
    """

    scores: Tensor
    features: Tensor
    level: DiscriminationLevel

    @property
    def mean_score(self) -> float:
        """Q for utterances, the mean of d_j for words."""
        return float(np.mean(self.scores.value))


class HredModel:
    """Generator and discriminator over one shared parameter set."""

    def __init__(self, parameters: ParameterSet, vocab_size: int, hidden: int, layers: int):
        self.parameters = parameters
        self.vocab_size = vocab_size
        self.hidden = hidden
        self.layers = layers

    @classmethod
    def initialize(
        cls, vocab_size: int, hidden: int, layers: int, rng: np.random.Generator
    ) -> "HredModel":
        """Builds every parameter: Xavier uniform matrices, zero biases."""
        parameters = ParameterSet()
        model = cls(parameters, vocab_size, hidden, layers)
        for name, shape, group in model.parameter_layout():
            if len(shape) >= 2:
                value = xavier_uniform_init(shape, rng)
            elif name.endswith(".score") or name.endswith("out.w"):
                value = xavier_uniform_init((shape[0], 1), rng).ravel()
            else:
                value = np.zeros(shape)
            parameters.add(name, value, group)
        return model

    def parameter_layout(self):
        """(name, shape, group) for every parameter, in registration order."""
        h, generator, discriminator = self.hidden, Group.GENERATOR, Group.DISCRIMINATOR
        layout = [(EMBEDDING, (h, self.vocab_size), generator), (OUTPUT_BIAS, (self.vocab_size,), generator)]
        layout += self._gru_layout("encoder.fwd", h, generator)
        layout += self._gru_layout("encoder.bwd", h, generator)
        layout += [("encoder.merge.w", (2 * h, h), generator), ("encoder.merge.b", (h,), generator)]
        layout += self._gru_layout("context", h, generator)
        layout += self._gru_layout("decoder", 3 * h, generator)
        layout += [
            ("attention.query", (h, h), generator),
            ("attention.key", (h, h), generator),
            ("attention.score", (h,), generator),
        ]
        layout += self._gru_layout("discriminator.fwd", h, discriminator)
        layout += self._gru_layout("discriminator.bwd", h, discriminator)
        layout += [
            ("discriminator.merge.w", (2 * h, h), discriminator),
            ("discriminator.merge.b", (h,), discriminator),
            ("discriminator.out.w", (h,), discriminator),
            ("discriminator.out.b", (), discriminator),
        ]
        return layout

    def _gru_layout(self, prefix: str, first_input: int, group: Group):
        h = self.hidden
        layout = []
        for layer in range(self.layers):
            n_in = first_input if layer == 0 else h
            layout += [
                (f"{prefix}.{layer}.w", (n_in, 3 * h), group),
                (f"{prefix}.{layer}.u", (h, 3 * h), group),
                (f"{prefix}.{layer}.b", (3 * h,), group),
            ]
        return layout

    def new_graph(self) -> Graph:
        """A fresh tape bound to this model's parameters."""
        return Graph(self.parameters)

    # Building blocks

    def embed(self, graph: Graph, token_id: int) -> Tensor:
        """Column `token_id` of the shared embedding matrix."""
        return ad.column(graph.param(EMBEDDING), int(token_id))

    def _stack_step(
        self, graph: Graph, prefix: str, x: Tensor, states: Sequence[Tensor]
    ) -> List[Tensor]:
        new_states = []
        layer_input = x
        for layer, state in enumerate(states):
            layer_input = ad.gru_cell(
                layer_input,
                state,
                graph.param(f"{prefix}.{layer}.w"),
                graph.param(f"{prefix}.{layer}.u"),
                graph.param(f"{prefix}.{layer}.b"),
            )
            new_states.append(layer_input)
        return new_states

    def _run(
        self, graph: Graph, prefix: str, inputs: Sequence[Tensor], initial: Tensor
    ) -> List[Tensor]:
        states: List[Tensor] = [initial] * self.layers
        outputs = []
        for x in inputs:
            states = self._stack_step(graph, prefix, x, states)
            outputs.append(states[-1])
        return outputs

    def _bidirectional(
        self, graph: Graph, prefix: str, inputs: Sequence[Tensor], initial: Tensor
    ) -> List[Tensor]:
        forward = self._run(graph, f"{prefix}.fwd", inputs, initial)
        backward = self._run(graph, f"{prefix}.bwd", list(reversed(inputs)), initial)[::-1]
        merge_w, merge_b = graph.param(f"{prefix}.merge.w"), graph.param(f"{prefix}.merge.b")
        return [
            ad.add(ad.matmul(ad.concat([fwd, bwd]), merge_w), merge_b)
            for fwd, bwd in zip(forward, backward)
        ]

    def zeros(self, graph: Graph) -> Tensor:
        """A constant zero state."""
        return graph.constant(np.zeros(self.hidden))

    # Encoder

    def encode_turn(
        self, graph: Graph, turn: Ids, initial: Optional[Tensor] = None
    ) -> TurnEncoding:
        """
        Bidirectional encoder pass over one turn.

        Raises:
            EmptyInputError: for an empty turn
        """
        if not turn:
            raise EmptyInputError("Cannot encode an empty turn")
        inputs = [self.embed(graph, token_id) for token_id in turn]
        start = initial if initial is not None else self.zeros(graph)
        states = self._bidirectional(graph, "encoder", inputs, start)
        return TurnEncoding(states, ad.l2_pooling(states))

    def update_context(
        self, graph: Graph, summary: Tensor, previous: Optional[Sequence[Tensor]] = None
    ) -> List[Tensor]:
        """
        One step of the context RNN; returns the new state of every layer.

        The first turn starts from zeros; the top layer is h_i.
        """
        states = list(previous) if previous is not None else [self.zeros(graph)] * self.layers
        return self._stack_step(graph, "context", summary, states)

    def encode_context(self, graph: Graph, context: Sequence[Ids]) -> EncoderOutput:
        """Runs the turn encoder and context RNN over every context turn."""
        if not context:
            raise EmptyInputError("Context needs at least one turn")
        layers: Optional[List[Tensor]] = None
        encoding: Optional[TurnEncoding] = None
        for turn in context:
            encoding = self.encode_turn(graph, turn)
            layers = self.update_context(graph, encoding.summary, layers)
        assert encoding is not None and layers is not None
        values = ad.stack(encoding.states)
        keys = ad.matmul(values, graph.param("attention.key"))
        return EncoderOutput(
            memory=encoding.states,
            attention_memory=AttentionMemory(values, keys),
            summary=encoding.summary,
            context_state=layers[-1],
            context_layers=layers,
        )

    # Generator

    def attention(self, graph: Graph, state: Tensor, memory: AttentionMemory):
        """
        Additive attention: score_j = v . tanh(W_q s + W_k m_j).

        Returns:
            (weights over memory, weighted sum of memory)
        """
        if len(memory) == 0:
            raise EmptyInputError("Attention memory is empty")
        query = ad.matmul(state, graph.param("attention.query"))
        energies = ad.tanh(ad.add(memory.keys, query))
        scores = ad.matmul(energies, graph.param("attention.score"))
        weights = ad.softmax_with_temperature(scores, 1.0)
        return weights, ad.matmul(weights, memory.values)

    def generate_sequence(
        self,
        graph: Graph,
        encoded: EncoderOutput,
        mode: DecodeMode,
        target: Optional[Ids] = None,
        temperature: float = 1.0,
        sampler: Optional[Sampler] = None,
        max_len: int = 30,
        noise: Optional[np.ndarray] = None,
    ) -> GeneratedSequence:
        """
        Runs the decoder from the context state.

        Teacher forcing feeds `target` and scores it; the other modes feed
        back their own outputs and stop after EOS or `max_len` tokens.

        Args:
            graph: tape to record on
            encoded: output of `encode_context`
            mode: where previous tokens come from
            target: ground truth, required for teacher forcing
            temperature: softmax temperature
            sampler: picks a token from a probability vector in sampled mode
            max_len: longest autoregressive output
            noise: added to the decoder initial state (deterministic policy)
        Raises:
            ContractError: on a missing target or sampler
        """
        mode = DecodeMode(mode)
        if mode == DecodeMode.TEACHER_FORCING and not target:
            raise ContractError("Teacher forcing needs the ground-truth response")
        if mode == DecodeMode.SAMPLED and sampler is None:
            raise ContractError("Sampled decoding needs a sampler")

        initial = encoded.context_state
        if noise is not None:
            initial = ad.add(initial, graph.constant(noise))
        states: List[Tensor] = [initial] * self.layers
        embedding, bias = graph.param(EMBEDDING), graph.param(OUTPUT_BIAS)
        steps = len(target) if mode == DecodeMode.TEACHER_FORCING and target else max_len

        result = GeneratedSequence(tokens=())
        tokens: List[int] = []
        previous = SOS
        for position in range(steps):
            weights, attended = self.attention(graph, states[-1], encoded.attention_memory)
            x = ad.concat([self.embed(graph, previous), attended, encoded.context_state])
            states = self._stack_step(graph, "decoder", x, states)
            logits = ad.add(ad.matmul(states[-1], embedding), bias)
            distribution = ad.softmax_with_temperature(logits, temperature)
            log_distribution = ad.log_softmax_with_temperature(logits, temperature)

            if mode == DecodeMode.TEACHER_FORCING:
                token = int(target[position])  # type: ignore[index]
            elif mode == DecodeMode.GREEDY:
                token = int(np.argmax(distribution.value))
            else:
                token = int(sampler(distribution.value))  # type: ignore[misc]

            result.steps.append(
                GeneratorStepOutput(
                    state=states[-1],
                    attention_weights=weights,
                    logits=logits,
                    distribution=distribution,
                    log_distribution=log_distribution,
                    token=token,
                    log_prob=ad.index(log_distribution, token),
                )
            )
            tokens.append(token)
            previous = token
            if mode != DecodeMode.TEACHER_FORCING and token == EOS:
                break

        result.tokens = tuple(tokens)
        return result

    # Discriminator

    def relaxed_inputs(self, graph: Graph, distributions: Sequence[Tensor]) -> List[Tensor]:
        """Expected embeddings E p_j; a one-hot p_j gives exactly column j."""
        embedding = graph.param(EMBEDDING)
        return [ad.matmul(embedding, probabilities) for probabilities in distributions]

    def discriminate_inputs(
        self,
        graph: Graph,
        inputs: Sequence[Tensor],
        context_state: Tensor,
        level: DiscriminationLevel,
    ) -> DiscriminatorOutput:
        """Scores a response given as input vectors (embeddings or relaxed)."""
        if not inputs:
            raise EmptyInputError("Cannot discriminate an empty response")
        out_w, out_b = graph.param("discriminator.out.w"), graph.param("discriminator.out.b")
        if DiscriminationLevel(level) == DiscriminationLevel.UTTERANCE:
            last = self._run(graph, "discriminator.fwd", inputs, context_state)[-1]
            score = ad.sigmoid(ad.add(ad.matmul(last, out_w), out_b))
            return DiscriminatorOutput(score, last, DiscriminationLevel.UTTERANCE)

        states = self._bidirectional(graph, "discriminator", inputs, context_state)
        scores = ad.sigmoid(ad.add(ad.matmul(ad.stack(states), out_w), out_b))
        return DiscriminatorOutput(scores, ad.l2_pooling(states), DiscriminationLevel.WORD)

    def discriminate_utterance(
        self, graph: Graph, response: Ids, context_state: Tensor
    ) -> DiscriminatorOutput:
        """Q from the last state of a unidirectional dRNN started at h_i."""
        inputs = [self.embed(graph, token_id) for token_id in response]
        return self.discriminate_inputs(
            graph, inputs, context_state, DiscriminationLevel.UTTERANCE
        )

    def discriminate_words(
        self, graph: Graph, response: Ids, context_state: Tensor
    ) -> DiscriminatorOutput:
        """Per-token d_j from a bidirectional dRNN started at h_i."""
        inputs = [self.embed(graph, token_id) for token_id in response]
        return self.discriminate_inputs(graph, inputs, context_state, DiscriminationLevel.WORD)

    def discriminate(
        self, graph: Graph, response: Ids, context_state: Tensor, level: DiscriminationLevel
    ) -> DiscriminatorOutput:
        """Dispatches on the discrimination level."""
        if DiscriminationLevel(level) == DiscriminationLevel.UTTERANCE:
            return self.discriminate_utterance(graph, response, context_state)
        return self.discriminate_words(graph, response, context_state)


def cut_after_eos(tokens: Sequence[int]) -> Ids:
    """Keeps tokens up to and including the first EOS."""
    kept: List[int] = []
    for token in tokens:
        kept.append(int(token))
        if token == EOS:
            break
    return tuple(kept)


def teacher_forcing_argmax(sequence: GeneratedSequence) -> Ids:
    """The generator's deterministic teacher-forcing output, cut after EOS."""
    return cut_after_eos(sequence.argmax_tokens())
