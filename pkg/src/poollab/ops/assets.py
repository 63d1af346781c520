"""Loadable operator assets: term lexicons and the bigram language model."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

from ..errors import DatasetIOError


@dataclass(frozen=True)
class LexiconAsset:
    """A set of lowercase terms (stopwords, flagged words, verbs, ...)."""

    terms: frozenset[str]
    source: str | None = None

    def __post_init__(self):
        if not self.terms:
            raise ValueError("lexicon must not be empty")
        for term in self.terms:
            if any(ch.isspace() for ch in term):
                raise ValueError(f"lexicon term contains whitespace: {term!r}")

    @classmethod
    def from_terms(cls, terms) -> "LexiconAsset":
        return cls(terms=frozenset(t.lower() for t in terms))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "LexiconAsset":
        """One term per line; blank lines and '#' comment lines ignored."""
        path = Path(path)
        try:
            raw = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise DatasetIOError(f"cannot read lexicon {path}: {exc}") from exc
        terms = set()
        for line in raw.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            terms.add(line.lower())
        if not terms:
            raise DatasetIOError(f"lexicon {path} contains no terms")
        return cls(terms=frozenset(terms), source=str(path))


class BigramLanguageModel:
    """Add-one-smoothed bigram estimator loaded from a counts file.

    p(w | v) = (count(v, w) + 1) / (count(v) + V) where count(v) is the
    total bigram count with prefix v and V the vocabulary size including
    the start and unknown sentinels.
    """

    BOS = "<s>"
    UNK = "<unk>"

    def __init__(self, bigram_counts: dict[tuple[str, str], int], vocab=None):
        self.bigram_counts = dict(bigram_counts)
        for pair, count in self.bigram_counts.items():
            if count < 0:
                raise ValueError(f"negative count for bigram {pair}")
        if vocab is None:
            vocab = {w for pair in bigram_counts for w in pair}
            vocab.update({self.BOS, self.UNK})
        self.vocab = frozenset(vocab)
        if len(self.vocab) < 2:
            raise ValueError("vocabulary must contain at least 2 tokens")
        self._context_totals: dict[str, int] = {}
        for (prev, _), count in self.bigram_counts.items():
            self._context_totals[prev] = self._context_totals.get(prev, 0) + count

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def prob(self, prev: str, word: str) -> float:
        count = self.bigram_counts.get((prev, word), 0)
        total = self._context_totals.get(prev, 0)
        return (count + 1) / (total + self.vocab_size)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "BigramLanguageModel":
        """Counts file: UTF-8 lines ``prev<TAB>word<TAB>count``."""
        path = Path(path)
        try:
            raw = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise DatasetIOError(f"cannot read bigram counts {path}: {exc}") from exc
        counts: dict[tuple[str, str], int] = {}
        for lineno, line in enumerate(raw.splitlines()):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DatasetIOError(f"{path}:{lineno + 1}: expected prev<TAB>word<TAB>count")
            prev, word, count = parts
            try:
                counts[(prev, word)] = counts.get((prev, word), 0) + int(count)
            except ValueError as exc:
                raise DatasetIOError(f"{path}:{lineno + 1}: bad count {count!r}") from exc
        if not counts:
            raise DatasetIOError(f"bigram counts file {path} is empty")
        return cls(counts)
