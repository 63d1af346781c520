"""Pure per-sample text statistics.

Every function is a pure function of (text, params, assets): no locale,
no global state, safe under any parallel execution. Ratios lie in [0, 1];
counts are non-negative integers.
"""

from __future__ import annotations

import math
import unicodedata
from typing import Callable

Tokenizer = Callable[[str], list[str]]


def _normalize(text: str) -> str:
    # NFC + lowercase keeps n-gram stats deterministic and locale-free
    return unicodedata.normalize("NFC", text).lower()


def whitespace_tokens(text: str) -> list[str]:
    return text.split()


def alphanumeric_ratio(text: str) -> float:
    """Share of Unicode scalars that are alphanumeric; empty text -> 0."""
    if not text:
        return 0.0
    return sum(1 for ch in text if ch.isalnum()) / len(text)


def special_char_ratio(text: str) -> float:
    """Share of scalars that are neither alphanumeric nor whitespace."""
    if not text:
        return 0.0
    special = sum(1 for ch in text if not ch.isalnum() and not ch.isspace())
    return special / len(text)


def _repetition(grams: list) -> float:
    if not grams:
        return 0.0
    return 1.0 - len(set(grams)) / len(grams)


def char_ngram_repetition(text: str, n: int) -> float:
    """1 - distinct/total over the sliding char n-grams of the normalized text."""
    if n < 1:
        raise ValueError("n must be >= 1")
    normalized = _normalize(text)
    grams = [normalized[i : i + n] for i in range(len(normalized) - n + 1)]
    return _repetition(grams)


def word_ngram_repetition(text: str, n: int) -> float:
    """Same formula as the char variant, over whitespace-token n-grams."""
    if n < 1:
        raise ValueError("n must be >= 1")
    tokens = whitespace_tokens(_normalize(text))
    grams = [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]
    return _repetition(grams)


def text_counts(text: str, tokenizer: Tokenizer | None = None) -> dict[str, int]:
    """Scalar count, whitespace-word count and pluggable token count.

    The default tokenizer is whitespace splitting, so token_number equals
    word_number unless a model tokenizer is plugged in.
    """
    words = whitespace_tokens(text)
    tokens = words if tokenizer is None else tokenizer(text)
    return {
        "text_length": len(text),
        "word_number": len(words),
        "token_number": len(tokens),
    }


def lexicon_ratio(text: str, terms: frozenset[str]) -> float:
    """Share of whitespace tokens whose lowercase form is in the lexicon."""
    tokens = whitespace_tokens(text)
    if not tokens:
        return 0.0
    hits = sum(1 for tok in tokens if tok.lower() in terms)
    return hits / len(tokens)


def lexicon_count(text: str, terms: frozenset[str]) -> int:
    """Occurrences (not distinct words) of lexicon terms among tokens."""
    return sum(1 for tok in whitespace_tokens(text) if tok.lower() in terms)


def perplexity(text: str, model, tokenizer: Tokenizer | None = None) -> float:
    """exp of the mean negative log-likelihood under a bigram model.

    The first token is conditioned on the model's start sentinel; unknown
    words map to its unknown sentinel. Raises on zero-token text, where
    perplexity is undefined.
    """
    tokens = whitespace_tokens(_normalize(text)) if tokenizer is None else tokenizer(text)
    if not tokens:
        raise ValueError("perplexity is undefined for zero-token text")
    prev = model.BOS
    log_prob = 0.0
    for token in tokens:
        word = token if token in model.vocab else model.UNK
        log_prob += math.log(model.prob(prev, word))
        prev = word
    return math.exp(-log_prob / len(tokens))
