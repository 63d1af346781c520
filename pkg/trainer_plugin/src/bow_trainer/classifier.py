"""Multi-class bag-of-words perceptron, deterministic per seed."""

from __future__ import annotations

import random
from collections import defaultdict


def tokenize(text: str) -> list[str]:
    return text.lower().split()


class BowPerceptron:
    """Averaged-free perceptron over sparse token counts.

    Training order is a seeded shuffle per epoch, so identical inputs and
    seed reproduce identical weights and metrics.
    """

    def __init__(self, classes: list[str], seed: int, epochs: int = 5):
        if len(classes) < 2:
            raise ValueError("need at least 2 classes")
        self.classes = sorted(classes)
        self.seed = seed
        self.epochs = epochs
        self.weights: dict[str, defaultdict] = {
            label: defaultdict(float) for label in self.classes
        }
        self.bias: dict[str, float] = {label: 0.0 for label in self.classes}

    def _score(self, label: str, counts: dict[str, int]) -> float:
        weights = self.weights[label]
        return self.bias[label] + sum(weights[tok] * cnt for tok, cnt in counts.items())

    def predict(self, tokens: list[str]) -> str:
        counts: dict[str, int] = {}
        for tok in tokens:
            counts[tok] = counts.get(tok, 0) + 1
        # ties resolve to the alphabetically first class
        return max(self.classes, key=lambda label: (self._score(label, counts), ))

    def train(self, examples: list[tuple[list[str], str]]) -> None:
        rng = random.Random(self.seed)
        order = list(range(len(examples)))
        for _ in range(self.epochs):
            rng.shuffle(order)
            for index in order:
                tokens, gold = examples[index]
                counts: dict[str, int] = {}
                for tok in tokens:
                    counts[tok] = counts.get(tok, 0) + 1
                predicted = max(
                    self.classes, key=lambda label: (self._score(label, counts), )
                )
                if predicted == gold:
                    continue
                for tok, cnt in counts.items():
                    self.weights[gold][tok] += cnt
                    self.weights[predicted][tok] -= cnt
                self.bias[gold] += 1.0
                self.bias[predicted] -= 1.0


def accuracy(gold: list[str], predicted: list[str]) -> float:
    if not gold:
        raise ValueError("no evaluation examples")
    hits = sum(1 for g, p in zip(gold, predicted) if g == p)
    return hits / len(gold)


def macro_f1(gold: list[str], predicted: list[str], classes: list[str]) -> float:
    scores = []
    for label in classes:
        tp = sum(1 for g, p in zip(gold, predicted) if g == label and p == label)
        fp = sum(1 for g, p in zip(gold, predicted) if g != label and p == label)
        fn = sum(1 for g, p in zip(gold, predicted) if g == label and p != label)
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return sum(scores) / len(scores)
