"""
This module contains the automatic evaluation suite: BLEU-2, ROUGE-2,
DIST-1/2 and NASL over EOS-stripped token sequences.
"""

import csv
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

from nltk.translate.bleu_score import brevity_penalty
from nltk.util import ngrams

from aboots.services.utils import ContractError, EmptyInputError

METRIC_NAMES = ("bleu2", "rouge2", "dist1", "dist2", "nasl")


@dataclass(frozen=True)
class EvalPair:
    """A decoded response and its reference, as tokens."""

    hypothesis: Tuple[str, ...]
    reference: Tuple[str, ...]


def _require_pairs(pairs: Sequence[EvalPair]):
    if not pairs:
        raise EmptyInputError("Evaluation needs at least one pair")


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(ngrams(tokens, n))


def bleu2(pairs: Sequence[EvalPair]) -> float:
    """
    Corpus-level BLEU with weights (1/2, 1/2), unsmoothed.

    Clipped n-gram matches and hypothesis n-gram totals are summed over the
    corpus before dividing; the score is 0 when either precision is 0.
    """
    _require_pairs(pairs)
    matches, totals = [0, 0], [0, 0]
    for pair in pairs:
        for order in (1, 2):
            hypothesis = _ngram_counts(pair.hypothesis, order)
            reference = _ngram_counts(pair.reference, order)
            matches[order - 1] += sum((hypothesis & reference).values())
            totals[order - 1] += sum(hypothesis.values())
    if 0 in totals or 0 in matches:
        return 0.0
    log_precision = sum(0.5 * math.log(m / t) for m, t in zip(matches, totals))
    hyp_len = sum(len(pair.hypothesis) for pair in pairs)
    ref_len = sum(len(pair.reference) for pair in pairs)
    return brevity_penalty(ref_len, hyp_len) * math.exp(log_precision)


def rouge2(pairs: Sequence[EvalPair]) -> float:
    """Mean over pairs of bigram F1; a side without bigrams scores 0."""
    _require_pairs(pairs)
    total = 0.0
    for pair in pairs:
        hypothesis = _ngram_counts(pair.hypothesis, 2)
        reference = _ngram_counts(pair.reference, 2)
        overlap = sum((hypothesis & reference).values())
        if not hypothesis or not reference or overlap == 0:
            continue
        precision = overlap / sum(hypothesis.values())
        recall = overlap / sum(reference.values())
        total += 2 * precision * recall / (precision + recall)
    return total / len(pairs)


def distinct_n(hypotheses: Sequence[Sequence[str]], n: int) -> float:
    """
    Distinct n-grams over all n-grams, pooled across hypotheses.

    Returns 0 when there are no n-grams at all.
    """
    if n not in (1, 2):
        raise ContractError(f"distinct_n supports n = 1 or 2, got {n}")
    pooled: Counter = Counter()
    for hypothesis in hypotheses:
        pooled.update(ngrams(hypothesis, n))
    count = sum(pooled.values())
    return len(pooled) / count if count else 0.0


def nasl(pairs: Sequence[EvalPair]) -> float:
    """
    Mean of len(hypothesis) / len(reference).

    Raises:
        ContractError: if a reference is empty
    """
    _require_pairs(pairs)
    ratios = []
    for pair in pairs:
        if not pair.reference:
            raise ContractError("NASL is undefined for an empty reference")
        ratios.append(len(pair.hypothesis) / len(pair.reference))
    return sum(ratios) / len(ratios)


def evaluate(pairs: Sequence[EvalPair]) -> Dict[str, float]:
    """All five numbers, in report order."""
    hypotheses = [pair.hypothesis for pair in pairs]
    return {
        "bleu2": bleu2(pairs),
        "rouge2": rouge2(pairs),
        "dist1": distinct_n(hypotheses, 1),
        "dist2": distinct_n(hypotheses, 2),
        "nasl": nasl(pairs),
    }


def write_report(scores: Dict[str, float], path: Union[str, Path]):
    """Writes `metric,value` rows."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["metric", "value"])
        for name in METRIC_NAMES:
            writer.writerow([name, repr(scores[name])])


def format_table(scores: Dict[str, float], title: str = "") -> str:
    """A small aligned table for the terminal."""
    lines: List[str] = [title] if title else []
    width = max(len(name) for name in METRIC_NAMES)
    lines += [f"{name.upper():<{width}}  {scores[name]:.4f}" for name in METRIC_NAMES]
    return "\n".join(lines)
