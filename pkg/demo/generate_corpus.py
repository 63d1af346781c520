#!/usr/bin/env python3
"""Generate a small mixed-quality text corpus for the demo workflow.

Roughly a third of the samples are clean prose, a third carry heavy
character repetition, and a third are littered with special characters,
so the built-in text statistics spread out enough to split on.
"""

import json
import random
import sys
from pathlib import Path

CLEAN_PHRASES = [
    "the quick brown fox jumps over the lazy dog",
    "a gentle rain settled over the quiet harbor",
    "crowds gathered early for the market on the square",
    "the committee reviewed the findings in detail",
    "two engineers traced the fault to a loose cable",
    "fresh bread and coffee started the long day",
]

NOISE_TOKENS = ["@@##", "$$%^", "!!??", "~~~~", "<<>>", "0xZZ"]


def make_text(rng: random.Random) -> str:
    style = rng.random()
    words = rng.choice(CLEAN_PHRASES).split()
    if style < 0.33:
        return " ".join(words)
    if style < 0.66:
        stutter = rng.choice(words)
        return " ".join(words + [stutter] * rng.randint(3, 8))
    salted = [w if rng.random() > 0.4 else rng.choice(NOISE_TOKENS) for w in words]
    return " ".join(salted)


def main() -> None:
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).parent / "corpus.jsonl"
    count = int(sys.argv[2]) if len(sys.argv) > 2 else 2000
    rng = random.Random(20240601)
    with out.open("w", encoding="utf-8") as handle:
        for i in range(count):
            record = {"id": f"doc{i:05d}", "text": make_text(rng)}
            handle.write(json.dumps(record) + "\n")
    print(f"wrote {count} samples to {out}")


if __name__ == "__main__":
    main()
