import random

import pytest

from pivotsteer.meta_eval import JudgmentItem
from pivotsteer.metrics import PromptTemplate, RegressionHead
from pivotsteer.toy_model import ModelConfig, build_model

DECODER_CFG = ModelConfig(n_layers=4, d_model=32, n_heads=4, d_ff=64, max_seq=256, seed=2024)
ENCODER_CFG = ModelConfig(n_layers=3, d_model=32, n_heads=4, d_ff=64, max_seq=256, seed=77,
                          kind="encoder")


@pytest.fixture(scope="session")
def decoder():
    return build_model(DECODER_CFG)


@pytest.fixture(scope="session")
def encoder():
    return build_model(ENCODER_CFG)


@pytest.fixture(scope="session")
def head():
    return RegressionHead(ENCODER_CFG.d_model, seed=3)


@pytest.fixture(scope="session")
def template():
    return PromptTemplate(
        "coherence", "en",
        "Document: {document}\nSummary: {summary}\nRate coherence 1-5: ",
    )


def make_items(n=20, seed=0, lang="es", dimension="coherence"):
    rng = random.Random(seed)
    letters = "abcdefghijklmnopqrstuvwxyz "
    items = []
    for i in range(n):
        doc = "".join(rng.choice(letters) for _ in range(40))
        summ = "".join(rng.choice(letters) for _ in range(12))
        ref = "".join(rng.choice(letters) for _ in range(12))
        scores = [float(rng.randint(1, 4)) for _ in range(3)]
        items.append(JudgmentItem(f"{lang}-{i}", lang, dimension, doc, summ, scores,
                                  reference=ref))
    return items


@pytest.fixture
def items():
    return make_items()
