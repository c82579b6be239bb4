import sys
from pathlib import Path

import numpy as np
import pytest

from aspectlfm import atm, corpus

DATA = Path(__file__).parent / "data"
sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def data_dir():
    return DATA


@pytest.fixture(scope="session")
def fixture30():
    """6 users x 5 items, every pair rated once, with short topical texts."""
    with open(DATA / "fixture30.json", "rb") as fh:
        raw, skipped = corpus.parse_reviews(fh, "amazon_json")
    assert skipped == 0
    return corpus.build_corpus(raw, corpus.TokenizerConfig.default(), min_term_count=2)


@pytest.fixture(scope="session")
def fixture30_split(fixture30):
    return corpus.split_per_user(fixture30, seed=0)


@pytest.fixture(scope="session")
def synthetic():
    hyper = atm.AtmHyperparams(K=4, A=3, alpha_u=0.5, alpha_i=0.5, beta=0.1, sweeps=60, burn_in=40)
    c, truth = atm.generate_corpus(hyper, M=12, N=10, reviews_per_user=6, sentences_per_review=3,
                                   words_per_sentence=5, V=40, seed=3)
    return hyper, c, truth


@pytest.fixture(scope="session")
def fitted(synthetic):
    hyper, c, _ = synthetic
    return atm.fit(c, hyper).posterior


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
