from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

import wordexperts as wx
from wordexperts.model import Model, ModelConfig

DATA_DIR = Path(__file__).resolve().parent.parent / "src" / "wordexperts" / "data"
GOLDEN_DIR = Path(__file__).resolve().parent / "golden"

TINY_CORPUS = [
    "alan turing studied computation theory",
    "marie curie studied radiation physics",
    "turing proved theorems about computation",
    "curie measured radiation in paris france",
    "alan turing lived in london england",
    "the theorems of turing are famous",
    "students in paris read about radiation",
    "books about computation fill the library",
    "the library of london keeps old maps",
    "maps of france show the road to paris",
] * 2

TINY_NAMES = [
    "Alan Turing",
    "Marie Curie",
    "computation theory",
    "radiation physics",
    "Paris France",
    "London England",
    "library",
    "theorems",
]


@pytest.fixture(scope="session")
def tiny_vocab() -> wx.SubwordVocab:
    return wx.learn_vocab(TINY_CORPUS, target_size=120, reserved=16, max_piece_len=4)


@pytest.fixture(scope="session")
def tiny_routing(tiny_vocab):
    rv = wx.build_routing_vocab(TINY_NAMES, TINY_CORPUS, top_k=64)
    rv = wx.extend_with_default(rv, tiny_vocab)
    table = wx.build_hash_table(rv, tiny_vocab)
    return rv, table


@pytest.fixture(scope="session")
def tiny_plan(tiny_vocab, tiny_routing):
    rv, table = tiny_routing
    ft = wx.count_frequencies(table, TINY_CORPUS, tiny_vocab, rv.size)
    bounds = wx.split_buckets(ft, k=4, bypass_top_n=4)
    return wx.make_plan(bounds, wx.desk_default_shapes(), ft=ft, batch_tokens=128)


@pytest.fixture(scope="session")
def tiny_model_cfg(tiny_vocab, tiny_routing) -> ModelConfig:
    rv, _ = tiny_routing
    return ModelConfig(
        d_model=16,
        num_heads=2,
        num_enc_blocks=2,
        num_dec_blocks=2,
        ffn_hidden=24,
        mowe_positions_enc=[1],
        mowe_positions_dec=[1],
        default_vocab_size=tiny_vocab.size,
        routing_vocab_size=rv.size,
        max_seq_len=48,
    )


@pytest.fixture()
def tiny_model_f64(tiny_model_cfg, tiny_plan, tiny_routing) -> Model:
    _, table = tiny_routing
    return Model(tiny_model_cfg, tiny_plan, table, seed=0, dtype=np.float64)


@pytest.fixture()
def tiny_batch(tiny_vocab, tiny_routing):
    _, table = tiny_routing
    batcher = wx.PretrainBatcher(
        TINY_CORPUS, tiny_vocab, table, batch_size=4, max_enc=32, max_dec=20, seed=3
    )
    return batcher.next_batch()
