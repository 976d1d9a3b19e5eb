"""
Sequence-level scores: GLEU (per-sentence reward) and corpus BLEU.

GLEU pools all 1..4-gram counts of the two sequences and returns
min(recall, precision); matches are clipped multiset intersections, which
keeps the score in [0, 1] and makes it symmetric in its arguments. BLEU is
the usual corpus-level geometric mean of clipped n-gram precisions times the
brevity penalty, with a single reference per hypothesis and no smoothing.
"""

import math
from collections import Counter

from .errors import UsageError

MAX_ORDER = 4


def ngram_counts(seq, max_order: int = MAX_ORDER) -> Counter:
    """Multiset of all 1..max_order-grams of seq, as a Counter of tuples."""
    counts = Counter()
    n_tokens = len(seq)
    for n in range(1, min(max_order, n_tokens) + 1):
        for start in range(n_tokens - n + 1):
            counts[tuple(seq[start : start + n])] += 1
    return counts


def gleu(output, target) -> float:
    """min(n-gram recall, n-gram precision) over orders 1..4, in [0, 1].

    An empty output or target scores 0.
    """
    if len(output) == 0 or len(target) == 0:
        return 0.0
    out_counts = ngram_counts(output)
    tgt_counts = ngram_counts(target)
    matches = sum(min(c, tgt_counts[ng]) for ng, c in out_counts.items())
    recall = matches / sum(tgt_counts.values())
    precision = matches / sum(out_counts.values())
    return min(recall, precision)


def corpus_bleu(hypotheses, references) -> float:
    """Corpus BLEU with one reference per hypothesis, in [0, 1].

    Geometric mean of the corpus-pooled clipped 1..4-gram precisions times
    exp(min(0, 1 - ref_len/hyp_len)). Any order with zero matches sends the
    score to 0 (no smoothing).
    """
    if len(hypotheses) != len(references):
        raise UsageError(
            f"hypothesis/reference count mismatch: {len(hypotheses)} vs {len(references)}"
        )
    if len(hypotheses) == 0:
        raise UsageError("corpus_bleu needs at least one sentence pair")

    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        ref_counts = ngram_counts(ref)
        for n in range(1, MAX_ORDER + 1):
            if len(hyp) < n:
                continue
            hyp_counts = Counter(tuple(hyp[s : s + n]) for s in range(len(hyp) - n + 1))
            totals[n - 1] += sum(hyp_counts.values())
            matches[n - 1] += sum(min(c, ref_counts[ng]) for ng, c in hyp_counts.items())

    if hyp_len == 0:
        return 0.0
    if any(t == 0 or m == 0 for m, t in zip(matches, totals)):
        return 0.0
    log_precision = sum(math.log(m / t) for m, t in zip(matches, totals)) / MAX_ORDER
    brevity = min(0.0, 1.0 - ref_len / hyp_len)
    return math.exp(log_precision + brevity)
