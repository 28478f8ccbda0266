from __future__ import annotations

import numpy as np
import pytest

from bsc.calibration import calibrate_model
from bsc.runtime import TinyGptModel
from bsc.synthetic import gen_synthetic_model, gen_tokens

TOY_LAYERS = 4
TOY_HIDDEN = 64
TOY_VOCAB = 128
TOY_SEED = 7


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), np.finfo(np.float64).tiny)


@pytest.fixture(scope="session")
def toy_container():
    return gen_synthetic_model(
        layers=TOY_LAYERS, hidden=TOY_HIDDEN, vocab=TOY_VOCAB, seed=TOY_SEED
    )


@pytest.fixture(scope="session")
def toy_model(toy_container):
    return TinyGptModel.from_container(toy_container)


@pytest.fixture(scope="session")
def toy_tokens():
    return gen_tokens(16384, TOY_VOCAB, seed=11)


@pytest.fixture(scope="session")
def toy_recorder(toy_model, toy_tokens):
    return calibrate_model(toy_model, toy_tokens, samples=32, seq_len=128)


@pytest.fixture(scope="session")
def toy_grams(toy_recorder):
    return toy_recorder.grams
