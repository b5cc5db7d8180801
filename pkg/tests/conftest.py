import numpy as np
import pytest
import torch

from editlm.corpus import build_corpus
from editlm.grammar import GrammarConfig
from editlm.model import ModelConfig, SongEditLM
from editlm.tokenizer import TokenizerConfig, train_tokenizer

# short songs keep every fixture cheap on one core
SHORT = dict(min_song_seconds=4.0, max_song_seconds=8.0, lyric_seconds=(2.0, 3.0))


@pytest.fixture(scope="session")
def tiny_grammar():
    return GrammarConfig(**SHORT)


@pytest.fixture(scope="session")
def tiny_corpus(tiny_grammar):
    return build_corpus(6, 123, tiny_grammar)


@pytest.fixture(scope="session")
def tiny_tokenizer(tiny_corpus):
    return train_tokenizer(tiny_corpus, TokenizerConfig(), steps=60, seed=3).tokenizer


@pytest.fixture(scope="session")
def tiny_model_config():
    return ModelConfig(layers=2, model_dim=64, ff_dim=128, heads=2, seed=0)


@pytest.fixture()
def tiny_model(tiny_model_config):
    torch.manual_seed(0)
    return SongEditLM(tiny_model_config)


@pytest.fixture()
def rng():
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([42])))
