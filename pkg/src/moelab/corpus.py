"""Synthetic token corpus with two interleaved span families.

Sequences alternate NATURAL spans (an order-1 Markov chain over the lower
vocabulary, seeded random transition matrix, softmax temperature controls
its entropy) and STRUCTURED spans (deterministic periodic patterns over a
reserved upper-vocabulary pool). Each pattern owns a disjoint token set, so
a model can identify the pattern from its first token and predict the rest
of the span exactly; natural spans stay irreducibly stochastic. Every token
carries a span tag, and the entropy of the generating distribution at each
step is recorded alongside the tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.special
import scipy.stats

from .errors import ConfigError

TAG_NATURAL = 0
TAG_STRUCTURED = 1
TAG_NAMES = ("natural", "structured")


@dataclass
class CorpusSpec:
    vocab_size: int = 64
    num_sequences: int = 768
    seq_len: int = 64
    natural_span: int = 12
    structured_span: int = 20
    num_patterns: int = 4
    structured_pool: int = 16
    natural_temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.seq_len < 1 or self.num_sequences < 1:
            raise ConfigError("num_sequences and seq_len must be positive")
        if self.natural_span < 1 or self.structured_span < 1:
            raise ConfigError("span lengths must be positive")
        if self.seq_len < self.natural_span:
            raise ConfigError(
                f"seq_len {self.seq_len} is shorter than one natural span "
                f"({self.natural_span})"
            )
        if self.structured_pool >= self.vocab_size:
            raise ConfigError("structured pool must leave room for natural tokens")
        if self.num_patterns < 1:
            raise ConfigError("need at least one pattern")
        # patterns own disjoint token sets; the longest period is 4
        if self.num_patterns * 4 > self.structured_pool:
            raise ConfigError(
                f"{self.num_patterns} patterns need up to "
                f"{self.num_patterns * 4} pool tokens, have {self.structured_pool}"
            )
        if self.natural_temperature <= 0:
            raise ConfigError("natural_temperature must be positive")

    @property
    def natural_vocab(self):
        return self.vocab_size - self.structured_pool

    def span_layout(self):
        """(tag, length) pieces covering exactly seq_len tokens."""
        layout = []
        remaining = self.seq_len
        natural = True
        while remaining > 0:
            length = self.natural_span if natural else self.structured_span
            length = min(length, remaining)
            layout.append((TAG_NATURAL if natural else TAG_STRUCTURED, length))
            remaining -= length
            natural = not natural
        return layout

    def position_tags(self):
        """Per-position span tag; the layout is fixed across sequences."""
        return np.concatenate([
            np.full(length, tag, dtype=np.int8)
            for tag, length in self.span_layout()
        ])


@dataclass
class Corpus:
    spec: CorpusSpec
    tokens: np.ndarray  # [num_sequences, seq_len] int64
    tags: np.ndarray  # [num_sequences, seq_len] int8
    gen_entropy: np.ndarray  # [num_sequences, seq_len] nats of the generator
    patterns: list  # token tuples of the pattern bank
    transition: np.ndarray  # [natural_vocab, natural_vocab] Markov matrix

    def split(self, train_fraction=0.9):
        """Deterministic (train, heldout) split by leading index."""
        n_train = int(round(self.spec.num_sequences * train_fraction))
        n_train = min(max(n_train, 1), self.spec.num_sequences - 1)
        return (
            (self.tokens[:n_train], self.tags[:n_train]),
            (self.tokens[n_train:], self.tags[n_train:]),
        )

    def unigram_cross_entropy(self, train_fraction=0.9):
        """Held-out CE of the add-one-smoothed unigram model fit on train."""
        (train_tokens, _), (held_tokens, _) = self.split(train_fraction)
        counts = np.bincount(train_tokens.ravel(), minlength=self.spec.vocab_size)
        probs = (counts + 1.0) / (counts.sum() + self.spec.vocab_size)
        return float(-np.mean(np.log(probs[held_tokens.ravel()])))

    def tag_unigram_entropy(self, tag):
        """Empirical unigram entropy (nats) of the tokens under one tag."""
        toks = self.tokens[self.tags == tag]
        counts = np.bincount(toks, minlength=self.spec.vocab_size)
        return float(scipy.stats.entropy(counts))


def generate_corpus(spec: CorpusSpec) -> Corpus:
    rng = np.random.default_rng(np.random.PCG64(spec.seed))
    nv = spec.natural_vocab

    # Markov transition rows: softmax of Gaussian logits at the requested
    # temperature; hotter rows mean flatter, higher-entropy spans
    logits = rng.normal(size=(nv, nv)) / spec.natural_temperature
    transition = scipy.special.softmax(logits, axis=1)
    row_entropy = scipy.stats.entropy(transition, axis=1)

    pool = np.arange(spec.vocab_size - spec.structured_pool, spec.vocab_size)
    pool = rng.permutation(pool)
    patterns = []
    offset = 0
    for j in range(spec.num_patterns):
        period = 2 + (j % 3)
        patterns.append(tuple(int(t) for t in pool[offset : offset + period]))
        offset += period

    layout = spec.span_layout()
    tokens = np.zeros((spec.num_sequences, spec.seq_len), dtype=np.int64)
    tags = np.zeros((spec.num_sequences, spec.seq_len), dtype=np.int8)
    entropy = np.zeros((spec.num_sequences, spec.seq_len))
    pattern_entropy = float(np.log(spec.num_patterns))

    for s in range(spec.num_sequences):
        pos = 0
        prev = None
        for tag, length in layout:
            if tag == TAG_NATURAL:
                for i in range(length):
                    if prev is None:
                        tok = int(rng.integers(0, nv))
                        entropy[s, pos] = np.log(nv)
                    else:
                        row = transition[prev]
                        tok = int(rng.choice(nv, p=row))
                        entropy[s, pos] = row_entropy[prev]
                    tokens[s, pos] = tok
                    tags[s, pos] = TAG_NATURAL
                    prev = tok
                    pos += 1
            else:
                pattern = patterns[int(rng.integers(0, spec.num_patterns))]
                for i in range(length):
                    tokens[s, pos] = pattern[i % len(pattern)]
                    tags[s, pos] = TAG_STRUCTURED
                    entropy[s, pos] = pattern_entropy if i == 0 else 0.0
                    pos += 1
                # the chain resumes fresh after a structured span
                prev = None
    return Corpus(
        spec=spec,
        tokens=tokens,
        tags=tags,
        gen_entropy=entropy,
        patterns=patterns,
        transition=transition,
    )
