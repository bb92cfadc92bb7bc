import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from synthdata import make_corpus, split_all_train, split_three_way  # noqa: E402

from fsdlre.encoders import ToyEncoderProvider  # noqa: E402


@pytest.fixture(autouse=True)
def _default_dtype():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


@pytest.fixture()
def tiny_corpus():
    return make_corpus(n_docs=6, n_relations=3, seed=7, sentence_repeats=1)


@pytest.fixture()
def train_split(tiny_corpus):
    return split_all_train(tiny_corpus)


@pytest.fixture()
def wide_corpus():
    return make_corpus(n_docs=12, n_relations=6, seed=11, sentence_repeats=1)


@pytest.fixture()
def wide_split(wide_corpus):
    return split_three_way(wide_corpus, n_dev=1, n_test=1)


@pytest.fixture()
def small_provider():
    return ToyEncoderProvider(hidden_size=16, n_layers=1, n_heads=2, max_window=96, seed=5)
