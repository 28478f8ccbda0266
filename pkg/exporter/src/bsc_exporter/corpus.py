"""Deterministic synthetic text corpus.

Template-grammar sentences over a small vocabulary: enough structure for a
byte-level model to learn quickly, fully reproducible from a seed, and free of
any licensing baggage.
"""

from __future__ import annotations

import numpy as np

SUBJECTS = [
    "the pilot", "a gardener", "the librarian", "our neighbor", "the engineer",
    "a young fox", "the old sailor", "every student", "the night clerk",
    "a quiet painter", "the tall baker", "my sister",
]
VERBS = [
    "waters", "repairs", "studies", "paints", "measures", "ignores",
    "collects", "follows", "sharpens", "observes", "borrows", "builds",
]
OBJECTS = [
    "the engine", "a wooden boat", "the garden wall", "an old map",
    "the copper kettle", "a stack of books", "the broken clock",
    "a row of lanterns", "the river bridge", "a bag of seeds",
    "the glass lantern", "an iron gate",
]
TAILS = [
    "before sunrise", "after the storm", "every morning", "without a sound",
    "near the harbor", "in early spring", "under the bright moon",
    "beside the mill", "during the long winter", "with great care",
]


def build_corpus(seed: int, size_chars: int) -> str:
    """At least *size_chars* characters of grammar-generated sentences."""
    rng = np.random.default_rng(seed)
    pieces: list[str] = []
    total = 0
    while total < size_chars:
        s = SUBJECTS[int(rng.integers(len(SUBJECTS)))]
        v = VERBS[int(rng.integers(len(VERBS)))]
        o = OBJECTS[int(rng.integers(len(OBJECTS)))]
        t = TAILS[int(rng.integers(len(TAILS)))]
        if rng.random() < 0.15:
            sentence = f"{s} {v} {o} {t}, and then {s} {v} {o} again. "
        else:
            sentence = f"{s} {v} {o} {t}. "
        pieces.append(sentence)
        total += len(sentence)
    return "".join(pieces)
