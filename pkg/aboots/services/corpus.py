"""
This module contains corpus ingestion, the vocabulary, batching,
distractor sampling and the positional entropy analysis.

Corpus files are UTF-8 text with one conversation per line. Turns are
separated by a single TAB and tokens by spaces. The final turn of a line is
the response; every earlier turn is context.
"""

import csv
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from aboots.services import settings
from aboots.services.utils import (
    ConfigurationError,
    DegenerateDatasetError,
    EmptyInputError,
    make_rng,
)

logger = logging.getLogger(__name__)

PAD, UNK, SOS, EOS = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<unk>", "<s>", "</s>")
MIN_SPLIT_EXAMPLES = 20

Turn = Tuple[str, ...]
Conversation = Tuple[Turn, ...]
Ids = Tuple[int, ...]


def tokenize(text: str) -> Turn:
    """Lowercases and splits on whitespace; that is all the preprocessing there is."""
    return tuple(text.lower().split())


def parse_conversation(line: str) -> Conversation:
    """Splits one corpus line into tokenized turns."""
    return tuple(tokenize(turn) for turn in line.rstrip("\r\n").split("\t"))


def load_conversations(data_dir: Union[str, Path]) -> List[Conversation]:
    """
    Reads every corpus file in `data_dir` (name order).

    Lines with fewer than two non-empty turns are skipped.

    Raises:
        ConfigurationError: if the directory is missing or holds no corpus file
        EmptyInputError: if no usable conversation was found
    """
    directory = Path(data_dir)
    if not directory.is_dir():
        raise ConfigurationError(f"Data directory {directory} does not exist")
    paths = sorted(directory.glob(settings.CORPUS_GLOB))
    if not paths:
        raise ConfigurationError(
            f"No files matching '{settings.CORPUS_GLOB}' in {directory}"
        )

    conversations: List[Conversation] = []
    for path in paths:
        with open(path, encoding="utf-8") as handle:
            for number, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                conversation = parse_conversation(line)
                if len(conversation) < 2 or not all(conversation):
                    logger.warning("Skipping %s:%d (needs two non-empty turns)", path, number)
                    continue
                conversations.append(conversation)

    if not conversations:
        raise EmptyInputError(f"No conversations found in {directory}")
    logger.info("Loaded %d conversations from %d file(s)", len(conversations), len(paths))
    return conversations


@dataclass(frozen=True)
class Vocabulary:
    """Token <-> id mapping with the four reserved ids first."""

    tokens: Tuple[str, ...]
    counts: Dict[str, int] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(
            self, "_index", {token: position for position, token in enumerate(self.tokens)}
        )

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: object) -> bool:
        return token in self._index  # type: ignore[attr-defined]

    def token_id(self, token: str) -> int:
        """Id of `token`, or UNK."""
        return self._index.get(token, UNK)  # type: ignore[attr-defined]

    def encode(self, tokens: Sequence[str]) -> List[int]:
        """Maps tokens to ids; unknown tokens become UNK."""
        return [self.token_id(token) for token in tokens]

    def decode(self, ids: Sequence[int], strip: bool = True) -> List[str]:
        """
        Maps ids back to tokens.

        With `strip`, decoding stops at EOS and drops PAD/SOS. Ids outside the
        vocabulary decode as UNK.
        """
        words = []
        for token_id in ids:
            token_id = int(token_id)
            if strip and token_id == EOS:
                break
            if strip and token_id in (PAD, SOS):
                continue
            if 0 <= token_id < len(self.tokens):
                words.append(self.tokens[token_id])
            else:
                words.append(RESERVED_TOKENS[UNK])
        return words

    def save(self, path: Union[str, Path]):
        """Writes one `token<TAB>count` line per entry."""
        with open(path, "w", encoding="utf-8") as handle:
            for token in self.tokens:
                handle.write(f"{token}\t{self.counts.get(token, 0)}\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocabulary":
        """Reads a file written by `save`."""
        tokens: List[str] = []
        counts: Dict[str, int] = {}
        with open(path, encoding="utf-8") as handle:
            for line in handle:
                token, _, count = line.rstrip("\n").partition("\t")
                tokens.append(token)
                counts[token] = int(count or 0)
        if tuple(tokens[: len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise ConfigurationError(f"{path} does not start with the reserved tokens")
        return cls(tuple(tokens), counts)


def build_vocabulary(
    corpus: Sequence[Sequence[str]], capacity: int = 50000
) -> Vocabulary:
    """
    Keeps the `capacity - 4` most frequent tokens.

    Ties are broken by earliest first occurrence.

    Args:
        corpus: tokenized utterances
        capacity: total vocabulary size V including the reserved ids
    Raises:
        EmptyInputError: if the corpus has no tokens
    """
    if capacity <= len(RESERVED_TOKENS):
        raise ConfigurationError(f"Vocabulary capacity must exceed 4, got {capacity}")
    counts: Counter = Counter()
    first_seen: Dict[str, int] = {}
    for utterance in corpus:
        for token in utterance:
            if token not in first_seen:
                first_seen[token] = len(first_seen)
            counts[token] += 1
    if not counts:
        raise EmptyInputError("Cannot build a vocabulary from an empty corpus")

    ranked = sorted(counts, key=lambda token: (-counts[token], first_seen[token]))
    kept = ranked[: capacity - len(RESERVED_TOKENS)]
    return Vocabulary(RESERVED_TOKENS + tuple(kept), {token: counts[token] for token in kept})


def conversation_utterances(conversations: Sequence[Conversation]) -> List[Turn]:
    """Every turn of every conversation, in order."""
    return [turn for conversation in conversations for turn in conversation]


@dataclass(frozen=True)
class DialogueExample:
    """Context turns, the ground-truth response and a sampled distractor, as ids."""

    context: Tuple[Ids, ...]
    target: Ids
    distractor: Ids


def truncate(ids: Sequence[int], max_len: int) -> Ids:
    """Cuts to `max_len - 1` tokens and terminates with EOS."""
    body = [token_id for token_id in ids if token_id != EOS][: max_len - 1]
    return tuple(body) + (EOS,)


def sample_distractor(
    targets: Sequence[Ids], rng: np.random.Generator, exclude: Ids
) -> Ids:
    """
    Draws a training-set response uniformly among those different from `exclude`.

    Raises:
        DegenerateDatasetError: if every target equals `exclude`
    """
    eligible = [target for target in targets if target != exclude]
    if not eligible:
        raise DegenerateDatasetError(
            "Cannot sample a distractor: every response in the pool is identical"
        )
    return eligible[int(rng.integers(len(eligible)))]


def encode_pairs(
    conversations: Sequence[Conversation],
    vocab: Vocabulary,
    max_turn_len: int = 30,
    max_turns: int = 3,
) -> List[Tuple[Tuple[Ids, ...], Ids]]:
    """
    Encodes conversations into (context, target) id pairs.

    Context keeps the last `max_turns` turns; every sequence is truncated to
    `max_turn_len` and ends with EOS.
    """
    pairs = []
    for conversation in conversations:
        context = tuple(
            truncate(vocab.encode(turn), max_turn_len) for turn in conversation[:-1]
        )[-max_turns:]
        pairs.append((context, truncate(vocab.encode(conversation[-1]), max_turn_len)))
    return pairs


def attach_distractors(
    pairs: Sequence[Tuple[Tuple[Ids, ...], Ids]],
    pool: Sequence[Ids],
    rng: np.random.Generator,
) -> List[DialogueExample]:
    """Builds examples, drawing each distractor from the `pool` of training targets."""
    return [
        DialogueExample(context, target, sample_distractor(pool, rng, target))
        for context, target in pairs
    ]


def split_dataset(
    examples: Sequence, seed: int
) -> Tuple[List, List, List]:
    """
    Shuffles under `seed` and splits 90% / 5% / remainder.

    Raises:
        ConfigurationError: with fewer than 20 examples
    """
    count = len(examples)
    if count < MIN_SPLIT_EXAMPLES:
        raise ConfigurationError(
            f"Need at least {MIN_SPLIT_EXAMPLES} examples to split, got {count}"
        )
    order = make_rng(seed).permutation(count)
    train_end = (9 * count) // 10
    valid_end = train_end + count // 20
    shuffled = [examples[position] for position in order]
    return shuffled[:train_end], shuffled[train_end:valid_end], shuffled[valid_end:]


@dataclass
class Batch:
    """
    Padded id matrices for one minibatch.

    `contexts` is (B, turns, max_turn_len); `turn_counts` says how many turns
    each row uses. PAD only ever follows EOS.
    """

    contexts: np.ndarray
    context_lengths: np.ndarray
    turn_counts: np.ndarray
    targets: np.ndarray
    target_lengths: np.ndarray
    distractors: np.ndarray
    distractor_lengths: np.ndarray

    @property
    def size(self) -> int:
        """Number of rows B."""
        return int(self.targets.shape[0])

    def example(self, row: int) -> DialogueExample:
        """Rebuilds row `row` without padding."""
        context = tuple(
            tuple(int(t) for t in self.contexts[row, turn, : self.context_lengths[row, turn]])
            for turn in range(int(self.turn_counts[row]))
        )
        target = tuple(int(t) for t in self.targets[row, : self.target_lengths[row]])
        distractor = tuple(
            int(t) for t in self.distractors[row, : self.distractor_lengths[row]]
        )
        return DialogueExample(context, target, distractor)

    def examples(self) -> List[DialogueExample]:
        """Every row, in order."""
        return [self.example(row) for row in range(self.size)]


def _pad(sequences: Sequence[Ids], width: int) -> Tuple[np.ndarray, np.ndarray]:
    matrix = np.full((len(sequences), width), PAD, dtype=np.int64)
    lengths = np.zeros(len(sequences), dtype=np.int64)
    for row, sequence in enumerate(sequences):
        matrix[row, : len(sequence)] = sequence
        lengths[row] = len(sequence)
    return matrix, lengths


def collate(
    examples: Sequence[DialogueExample], max_turn_len: int = 30, max_turns: int = 3
) -> Batch:
    """Truncates and pads examples into a `Batch`."""
    size = len(examples)
    contexts = np.full((size, max_turns, max_turn_len), PAD, dtype=np.int64)
    context_lengths = np.zeros((size, max_turns), dtype=np.int64)
    turn_counts = np.zeros(size, dtype=np.int64)
    for row, example in enumerate(examples):
        turns = [truncate(turn, max_turn_len) for turn in example.context[-max_turns:]]
        turn_counts[row] = len(turns)
        for position, turn in enumerate(turns):
            contexts[row, position, : len(turn)] = turn
            context_lengths[row, position] = len(turn)
    targets, target_lengths = _pad(
        [truncate(example.target, max_turn_len) for example in examples], max_turn_len
    )
    distractors, distractor_lengths = _pad(
        [truncate(example.distractor, max_turn_len) for example in examples],
        max_turn_len,
    )
    return Batch(
        contexts,
        context_lengths,
        turn_counts,
        targets,
        target_lengths,
        distractors,
        distractor_lengths,
    )


def make_batches(
    examples: Sequence[DialogueExample],
    batch_size: int,
    max_lens: Tuple[int, int],
    rng: np.random.Generator,
) -> Iterator[Batch]:
    """
    Yields one epoch of shuffled batches.

    Every example appears exactly once; the last batch may be short.

    Args:
        examples: the dataset
        batch_size: B
        max_lens: (max tokens per turn, max context turns)
        rng: generator that decides the epoch's order
    """
    if batch_size < 1:
        raise ConfigurationError(f"Batch size must be positive, got {batch_size}")
    max_turn_len, max_turns = max_lens
    order = rng.permutation(len(examples))
    for start in range(0, len(examples), batch_size):
        chunk = [examples[position] for position in order[start : start + batch_size]]
        yield collate(chunk, max_turn_len, max_turns)


@dataclass(frozen=True)
class PositionEntropy:
    """Entropy of the token distribution at one response position."""

    position: int
    entropy_bits: float
    support: int


def positional_entropy(
    corpus: Sequence[Conversation], utterances: str = "responses"
) -> List[PositionEntropy]:
    """
    H(p) = -sum_w P(w at p) log2 P(w at p), for p = 1 .. longest utterance.

    `support` is the number of utterances long enough to reach position p.

    Args:
        corpus: tokenized conversations
        utterances: `responses` (final turns only) or `all` (every turn)
    Raises:
        EmptyInputError: if there is nothing to measure
    """
    if utterances == "responses":
        sequences = [conversation[-1] for conversation in corpus]
    elif utterances == "all":
        sequences = conversation_utterances(corpus)
    else:
        raise ConfigurationError(f"Unknown utterance selection '{utterances}'")
    sequences = [sequence for sequence in sequences if sequence]
    if not sequences:
        raise EmptyInputError("Positional entropy needs at least one utterance")

    result = []
    for position in range(max(len(sequence) for sequence in sequences)):
        counts = Counter(
            sequence[position] for sequence in sequences if len(sequence) > position
        )
        support = sum(counts.values())
        entropy = 0.0
        for count in counts.values():
            probability = count / support
            entropy -= probability * math.log2(probability)
        result.append(PositionEntropy(position + 1, max(entropy, 0.0), support))
    return result


def write_entropy_csv(rows: Sequence[PositionEntropy], path: Union[str, Path]):
    """Writes `position,entropy_bits,support` rows."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["position", "entropy_bits", "support"])
        for row in rows:
            writer.writerow([row.position, repr(row.entropy_bits), row.support])


@dataclass
class Dataset:
    """The three splits of one corpus, sharing a vocabulary."""

    vocab: Vocabulary
    train: List[DialogueExample]
    valid: List[DialogueExample]
    test: List[DialogueExample]

    def split(self, name: str) -> List[DialogueExample]:
        """Looks up `train`, `validation`/`valid` or `test`."""
        lookup = {"train": self.train, "valid": self.valid, "validation": self.valid, "test": self.test}
        if name not in lookup:
            raise ConfigurationError(f"Unknown split '{name}'")
        return lookup[name]


def prepare_dataset(
    conversations: Sequence[Conversation],
    seed: int,
    vocab_size: int = 50000,
    max_turn_len: int = 30,
    max_turns: int = 3,
    holdout: bool = True,
    vocab: Optional[Vocabulary] = None,
) -> Dataset:
    """
    Splits conversations, builds (or reuses) the vocabulary on the training
    split and attaches distractors drawn from training targets.

    With `holdout` off every split is the whole corpus, which is how tiny
    memorization corpora are trained and evaluated.
    """
    if holdout:
        train, valid, test = split_dataset(conversations, seed)
    else:
        train, valid, test = list(conversations), list(conversations), list(conversations)
    if vocab is None:
        vocab = build_vocabulary(conversation_utterances(train), vocab_size)

    encoded = [encode_pairs(part, vocab, max_turn_len, max_turns) for part in (train, valid, test)]
    pool = [target for _, target in encoded[0]]
    splits = [
        attach_distractors(pairs, pool, make_rng(seed, stream))
        for stream, pairs in enumerate(encoded)
    ]
    return Dataset(vocab, *splits)
