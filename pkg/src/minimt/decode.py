"""
Beam-search decoding with length normalization and a coverage penalty.

Finished hypotheses are ranked by

    score(Y, X) = log P(Y|X) / lp(Y) + cp(X; Y)
    lp(Y)       = (5 + |Y|)^alpha / (5 + 1)^alpha
    cp(X; Y)    = beta * sum_i log(min(total attention mass on source i, 1))

Two prunes run during search: per step, candidate tokens whose local
log-probability is more than prune_margin below the step's best token are
dropped; and once some hypothesis has finished, live hypotheses whose
accumulated log-probability is more than prune_margin below the best
normalized score are abandoned. The margin is in natural-log units. With
alpha = beta = 0 and pruning disabled the search reduces to plain
best-probability beam search, and width 1 is greedy decoding.

Any model exposing open_session(source_ids) -> session with start_state /
step / source_len can be decoded, which covers both the float and the
quantized paths.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .segmentation import BOS_ID, EOS_ID, is_word_unk_symbol

# stands in for log(0) coverage terms so comparisons stay total; softmax
# attention cannot actually produce a zero mass
LOG_ZERO = -1e30


@dataclass
class ScoreParams:
    lp_alpha: float = 0.2
    cp_beta: float = 0.2
    beam_width: int = 8
    prune_margin: float | None = 3.0  # None disables both prunes
    max_len_factor: float = 2.0

    def validate(self):
        if not 0.0 <= self.lp_alpha <= 1.0:
            raise UsageError("lp_alpha must lie in [0, 1]")
        if self.cp_beta < 0.0:
            raise UsageError("cp_beta must be non-negative")
        if self.beam_width < 1:
            raise UsageError("beam_width must be at least 1")
        if self.prune_margin is not None and self.prune_margin <= 0:
            raise UsageError("prune_margin must be positive (or None to disable)")
        if self.max_len_factor <= 0:
            raise UsageError("max_len_factor must be positive")
        return self


@dataclass
class Hypothesis:
    """A (partial) translation: emitted tokens, accumulated log-probability,
    and per-source-position attention mass for the coverage term."""

    tokens: list
    log_prob: float
    attention_mass: np.ndarray
    state_row: int = 0  # row of this hypothesis in the batched decoder state
    finished: bool = False


def length_penalty(length: int, lp_alpha: float) -> float:
    """(5 + length)^alpha / 6^alpha; 1.0 at length 1 or alpha 0."""
    if length < 1:
        raise UsageError("length penalty needs length >= 1")
    return ((5.0 + length) / 6.0) ** lp_alpha


def coverage_penalty(attention_mass, cp_beta: float) -> float:
    """beta * sum_i log(min(mass_i, 1)); 0 when every mass reaches 1."""
    mass = np.asarray(attention_mass, dtype=np.float64)
    if np.any(mass < 0):
        raise UsageError("attention masses must be non-negative")
    capped = np.minimum(mass, 1.0)
    with np.errstate(divide="ignore"):
        terms = np.log(capped)
    terms = np.maximum(terms, LOG_ZERO)
    return cp_beta * float(terms.sum())


def score(hyp: Hypothesis, params: ScoreParams) -> float:
    """Full normalized score of a finished hypothesis."""
    if not hyp.finished:
        raise UsageError("only finished hypotheses have a normalized score")
    return _score_of(hyp.log_prob, len(hyp.tokens), hyp.attention_mass, params)


def _score_of(log_prob, length, attention_mass, params):
    return log_prob / length_penalty(max(length, 1), params.lp_alpha) + coverage_penalty(
        attention_mass, params.cp_beta
    )


# -----------------------------------------------------------------------------
# Beam search
# -----------------------------------------------------------------------------


class _BeamRunner:
    """Beam search over one source sentence, advanced one step at a time so
    several sentences can share a lockstep loop in batch_decode."""

    def __init__(self, session, params: ScoreParams):
        self.session = session
        self.params = params.validate()
        self.max_len = max(1, math.ceil(session.source_len * params.max_len_factor))
        self.live = [Hypothesis([], 0.0, np.zeros(session.source_len), state_row=0)]
        self.state = session.start_state(1)
        self.prev_tokens = np.array([BOS_ID], dtype=np.intp)
        self.finished: list[tuple[float, Hypothesis]] = []
        self.best_score = -math.inf
        self.steps = 0
        self.done = False

    def advance(self):
        if self.done:
            return
        params = self.params
        self.state, logp, attn = self.session.step(self.state, self.prev_tokens)
        self.steps += 1

        margin = params.prune_margin
        if margin is not None:
            allowed = logp >= logp.max() - margin  # against the step's best token
        else:
            allowed = np.ones_like(logp, dtype=bool)

        candidates = []  # (total_logp, token, parent_index)
        for row, hyp in enumerate(self.live):
            token_ids = np.nonzero(allowed[row])[0]
            totals = hyp.log_prob + logp[row, token_ids]
            for token, total in zip(token_ids, totals):
                candidates.append((float(total), int(token), row))
        # deterministic: best log-prob first, ties to the smaller token then row
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))

        survivors = []
        for total, token, row in candidates:
            parent = self.live[row]
            mass = parent.attention_mass + attn[row]
            if token == EOS_ID:
                hyp = Hypothesis(parent.tokens + [token], total, mass, finished=True)
                s = score(hyp, params)
                self.finished.append((s, hyp))
                if s > self.best_score:
                    self.best_score = s
            elif len(survivors) < params.beam_width:
                survivors.append(Hypothesis(parent.tokens + [token], total, mass, state_row=row))

        if margin is not None and self.finished:
            survivors = [h for h in survivors if h.log_prob >= self.best_score - margin]

        if not survivors or self.steps >= self.max_len:
            if not self.finished:
                # nothing produced EOS within the length cap: keep the capped
                # paths as results so decoding always returns something
                for hyp in survivors or self.live:
                    capped = Hypothesis(list(hyp.tokens), hyp.log_prob, hyp.attention_mass, finished=True)
                    if not capped.tokens:
                        capped.tokens = [EOS_ID]
                    self.finished.append((score(capped, params), capped))
            self.done = True
            return

        self.state = self.state.gather([h.state_row for h in survivors])
        for row, hyp in enumerate(survivors):
            hyp.state_row = row
        self.prev_tokens = np.array([h.tokens[-1] for h in survivors], dtype=np.intp)
        self.live = survivors

    def result(self):
        ranked = sorted(
            self.finished, key=lambda sh: (-sh[0], len(sh[1].tokens), tuple(sh[1].tokens))
        )
        return [h for _, h in ranked]


def beam_search(source_ids, model, params: ScoreParams = ScoreParams()):
    """Decode one sentence; returns (best Hypothesis, ranked n-best list)."""
    runner = _BeamRunner(model.open_session(source_ids), params)
    while not runner.done:
        runner.advance()
    n_best = runner.result()
    return n_best[0], n_best


def greedy_decode(source_ids, model, max_len_factor: float = 2.0):
    """Always-argmax decoding; returns emitted tokens (EOS included when reached)."""
    session = model.open_session(source_ids)
    state = session.start_state(1)
    prev = np.array([BOS_ID], dtype=np.intp)
    tokens = []
    max_len = max(1, math.ceil(session.source_len * max_len_factor))
    for _ in range(max_len):
        state, logp, _ = session.step(state, prev)
        token = int(np.argmax(logp[0]))
        tokens.append(token)
        if token == EOS_ID:
            break
        prev = np.array([token], dtype=np.intp)
    return tokens


LENGTH_BUCKETS = (8, 16, 32, 64)


def _bucket(length: int) -> int:
    for i, bound in enumerate(LENGTH_BUCKETS):
        if length <= bound:
            return i
    return len(LENGTH_BUCKETS)


def batch_decode(sentences, model, params: ScoreParams = ScoreParams(), batch_cap: int = 35):
    """Beam-decode many sentences, grouped into similar-length batches.

    Sentences in a batch advance in lockstep and the batch only retires when
    every member is out of beam; per-sentence results are identical to
    beam_search on that sentence alone. Results keep the input order.
    """
    if batch_cap < 1:
        raise UsageError("batch_cap must be at least 1")
    buckets: dict[int, list[int]] = {}
    for i, sentence in enumerate(sentences):
        buckets.setdefault(_bucket(len(sentence)), []).append(i)
    results = [None] * len(sentences)
    for _, members in sorted(buckets.items()):
        for start in range(0, len(members), batch_cap):
            chunk = members[start : start + batch_cap]
            runners = [(i, _BeamRunner(model.open_session(sentences[i]), params)) for i in chunk]
            while any(not r.done for _, r in runners):
                for _, runner in runners:
                    if not runner.done:
                        runner.advance()
            for i, runner in runners:
                results[i] = runner.result()[0]
    return results


# -----------------------------------------------------------------------------
# UNK replacement for the word model
# -----------------------------------------------------------------------------


def unk_replace(target_tokens, attentions, source_words):
    """Swap each UNK symbol for the source word its step attended to most.

    target_tokens are word-model symbols, attentions one distribution per
    output step; ties resolve to the lowest source index (np.argmax).
    """
    if len(target_tokens) > len(attentions):
        raise UsageError("need one attention distribution per output token")
    out = []
    for token, attn in zip(target_tokens, attentions):
        if is_word_unk_symbol(token):
            out.append(source_words[int(np.argmax(attn))])
        else:
            out.append(token)
    return out
