import os

import numpy as np
import pytest


def synthesize_corpus(size: int, seed: int) -> bytes:
    """Deterministic English-like filler text: templated sentences over a
    small vocabulary, so the byte stream has natural unigram statistics but
    strongly learnable local structure."""
    rng = np.random.default_rng(seed)
    subjects = ["the river", "a traveler", "the old mill", "our garden",
                "the harbor", "a quiet road", "the mountain", "her workshop",
                "the library", "a small boat"]
    verbs = ["carries", "follows", "remembers", "shelters", "crosses",
             "gathers", "reaches", "holds", "watches", "becomes"]
    objects = ["the morning light", "a hundred stories", "the winter rain",
               "every passing year", "the open water", "a line of birch trees",
               "the distant bells", "its own reflection", "the first snow",
               "a patient silence"]
    tails = ["before dawn", "after the storm", "without a sound",
             "in early spring", "by the north wall", "under a pale sky",
             "near the old bridge", "through the long night",
             "again and again", "as it always has"]
    parts: list[str] = []
    total = 0
    while total < size:
        sentence = (f"{rng.choice(subjects)} {rng.choice(verbs)} "
                    f"{rng.choice(objects)} {rng.choice(tails)}. ")
        if rng.random() < 0.1:
            sentence = sentence[:-1] + "\n"
        parts.append(sentence)
        total += len(sentence)
    return "".join(parts)[:size].encode()


def unigram_entropy_nats(data: bytes) -> float:
    counts = np.bincount(np.frombuffer(data, dtype=np.uint8), minlength=256)
    p = counts[counts > 0] / len(data)
    return float(-(p * np.log(p)).sum())


@pytest.fixture(scope="session")
def corpus_file(tmp_path_factory) -> str:
    path = tmp_path_factory.mktemp("corpus") / "corpus.txt"
    path.write_bytes(synthesize_corpus(300_000, seed=7))
    return str(path)
