from __future__ import annotations

import numpy as np
import pytest

from longsim.model import InterleavedModel, ModelConfig
from longsim.scenario import CorpusConfig, generate_synthetic_corpus
from longsim.tokenizer import build_motion_vocabulary, tokenize_scenario


TINY_CONFIG = dict(
    d_model=32, n_heads=4, head_dim=8, motion_blocks=2, scene_blocks=1,
    map_blocks=1, ffn_hidden=64, freq_bands=16, vocab_motion=64, map_cap=256,
)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic_corpus(CorpusConfig(count=6, min_agents=6, max_agents=9), seed=42)


@pytest.fixture(scope="session")
def small_vocab(small_corpus):
    return build_motion_vocabulary(small_corpus, size=64, k=32, seed=0)


@pytest.fixture(scope="session")
def tiny_model():
    return InterleavedModel(ModelConfig(**TINY_CONFIG), seed=0)


@pytest.fixture(scope="session")
def tokenized_first(small_corpus, small_vocab):
    return tokenize_scenario(small_corpus[0], small_vocab, map_cap=256)
