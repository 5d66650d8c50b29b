"""Translation metrics and coverage analysis.

BLEU here is the unsmoothed corpus-level BLEU-4: geometric mean of modified
1..4-gram precisions times a brevity penalty, scaled to [0, 100], and exactly
0 when any precision is 0. Scores are case-sensitive over whatever tokens the
caller supplies.
"""

from __future__ import annotations

import math
from collections import Counter

from .corpus import StopWordList, TokenizerConfig, tokenize
from .dictionary import WordImageDictionary


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu4(hypotheses: list[list[str]], references: list[list[str]]) -> float:
    """Corpus-level BLEU-4 in [0, 100] against single references."""
    if len(hypotheses) != len(references):
        raise ValueError(
            f"got {len(hypotheses)} hypotheses for {len(references)} references"
        )
    if not references:
        raise ValueError("references must be non-empty")

    matched = [0] * 4
    total = [0] * 4
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, 5):
            hyp_counts = _ngrams(hyp, n)
            ref_counts = _ngrams(ref, n)
            total[n - 1] += sum(hyp_counts.values())
            matched[n - 1] += sum(
                min(c, ref_counts[g]) for g, c in hyp_counts.items()
            )

    if any(t == 0 or m == 0 for m, t in zip(matched, total)):
        return 0.0
    log_prec = sum(math.log(m / t) for m, t in zip(matched, total)) / 4.0
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_prec)


def coverage(
    d: WordImageDictionary,
    texts: list[str],
    cfg: TokenizerConfig,
    stoplist: StopWordList,
) -> float:
    """Fraction of token occurrences with a non-empty dictionary entry."""
    total = 0
    covered = 0
    for text in texts:
        for token in tokenize(text, cfg, stoplist):
            total += 1
            if d.entries.get(token):
                covered += 1
    if total == 0:
        return 0.0
    return covered / total


def sign_test(scores_a: list[float], scores_b: list[float]) -> float:
    """Two-sided exact sign test p-value over paired per-sentence scores.

    Ties are dropped; with k wins for ``a`` among N non-ties, the p-value is
    the two-sided binomial tail at rate 1/2, capped at 1. All ties give 1.0.
    """
    if len(scores_a) != len(scores_b):
        raise ValueError("score sequences must have equal length")
    if not scores_a:
        raise ValueError("score sequences must be non-empty")
    wins = sum(1 for a, b in zip(scores_a, scores_b) if a > b)
    losses = sum(1 for a, b in zip(scores_a, scores_b) if a < b)
    n = wins + losses
    if n == 0:
        return 1.0
    k = min(wins, losses)
    tail = sum(math.comb(n, i) for i in range(k + 1)) / 2.0**n
    return min(1.0, 2.0 * tail)


def ambiguous_token_accuracy(
    translations: list[list[str]],
    gold: list[list[str]],
    ambiguous_positions: list[int],
) -> float:
    """Fraction of ambiguous positions whose translated token matches gold.

    A translation too short to reach its ambiguous position counts as wrong.
    """
    if not (len(translations) == len(gold) == len(ambiguous_positions)):
        raise ValueError(
            "translations, gold, and positions must be aligned: "
            f"{len(translations)}/{len(gold)}/{len(ambiguous_positions)}"
        )
    if not translations:
        return 0.0
    correct = 0
    for hyp, ref, pos in zip(translations, gold, ambiguous_positions):
        if pos < 0 or pos >= len(ref):
            raise ValueError(f"ambiguous position {pos} outside gold sentence")
        if pos < len(hyp) and hyp[pos] == ref[pos]:
            correct += 1
    return correct / len(translations)
