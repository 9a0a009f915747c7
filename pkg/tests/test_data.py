from __future__ import annotations

import hashlib
import json

import numpy as np
import pytest

from conftest import GOLDEN_DIR, TINY_CORPUS
from wordexperts.data import (
    IGNORE_TARGET,
    DataError,
    PretrainBatcher,
    assemble_batch,
    corrupt_ids,
    make_span_batch,
    qa_batch,
)
from wordexperts.expert_layer import BYPASS_ID
from wordexperts.subword import EOS_ID, PAD_ID, encode


def sentinels_of(vocab):
    return [vocab.sentinel_id(i) for i in range(vocab.num_sentinels)]


def reconstruct(inp, tgt, sentinel_set):
    """Splice target spans back into the input at their sentinels."""
    spans: dict[int, list[int]] = {}
    cur = None
    for t in tgt[:-1]:
        if t in sentinel_set:
            cur = t
            spans[cur] = []
        else:
            spans[cur].append(t)
    out: list[int] = []
    for t in inp:
        if t in sentinel_set:
            out.extend(spans[t])
        else:
            out.append(t)
    return out


def test_zero_corruption_keeps_input_and_emits_terminal_sentinel(tiny_vocab):
    ids = encode(tiny_vocab, TINY_CORPUS[0])
    rng = np.random.default_rng(0)
    inp, tgt = corrupt_ids(rng, ids, 0.0, 3.0, sentinels_of(tiny_vocab))
    assert inp == ids
    assert tgt == [tiny_vocab.sentinel_id(0)]


def test_full_corruption_masks_whole_sequence(tiny_vocab):
    ids = encode(tiny_vocab, TINY_CORPUS[0])
    rng = np.random.default_rng(0)
    inp, tgt = corrupt_ids(rng, ids, 1.0, 3.0, sentinels_of(tiny_vocab))
    assert inp == [tiny_vocab.sentinel_id(0)]
    assert tgt == [tiny_vocab.sentinel_id(0), *ids, tiny_vocab.sentinel_id(1)]


def test_targets_reconstruct_masked_spans_in_order(tiny_vocab):
    rng = np.random.default_rng(123)
    sent = sentinels_of(tiny_vocab)
    sset = set(sent)
    for line in TINY_CORPUS:
        ids = encode(tiny_vocab, line)
        for rate in (0.1, 0.25, 0.5, 0.9):
            inp, tgt = corrupt_ids(rng, ids, rate, 2.5, sent)
            assert reconstruct(inp, tgt, sset) == ids
            assert tgt[-1] in sset
            used = [t for t in inp if t in sset]
            assert used == sent[: len(used)]  # sentinels appear in order


def test_spans_are_separated_by_kept_tokens(tiny_vocab):
    rng = np.random.default_rng(9)
    sent = sentinels_of(tiny_vocab)
    sset = set(sent)
    for _ in range(50):
        ids = encode(tiny_vocab, TINY_CORPUS[int(rng.integers(len(TINY_CORPUS)))])
        inp, _ = corrupt_ids(rng, ids, 0.4, 1.5, sent)
        for a, b in zip(inp, inp[1:]):
            assert not (a in sset and b in sset)


def test_make_span_batch_is_deterministic_and_matches_golden(tiny_vocab, tiny_routing):
    _, table = tiny_routing
    scb1 = make_span_batch(7, TINY_CORPUS, 0.15, 3.0, tiny_vocab, table)
    scb2 = make_span_batch(7, TINY_CORPUS, 0.15, 3.0, tiny_vocab, table)
    payload = json.dumps(
        [scb1.input_ids, scb1.input_routing_ids, scb1.target_ids], sort_keys=True
    )
    assert scb1.input_ids == scb2.input_ids
    assert scb1.target_ids == scb2.target_ids
    assert scb1.input_routing_ids == scb2.input_routing_ids
    digest = hashlib.sha256(payload.encode()).hexdigest()
    golden = (GOLDEN_DIR / "span_batch.sha256").read_text().strip()
    assert digest == golden


def test_span_batch_routing_ids_align(tiny_vocab, tiny_routing):
    _, table = tiny_routing
    scb = make_span_batch(3, TINY_CORPUS[:5], 0.2, 2.0, tiny_vocab, table)
    for inp, rids in zip(scb.input_ids, scb.input_routing_ids):
        assert len(inp) == len(rids)


def test_assemble_batch_shapes_and_padding(tiny_vocab, tiny_routing):
    _, table = tiny_routing
    enc_rows = [encode(tiny_vocab, line) for line in TINY_CORPUS[:3]]
    tgt_rows = [encode(tiny_vocab, "paris"), encode(tiny_vocab, "london england"),
                encode(tiny_vocab, "france")]
    batch = assemble_batch(enc_rows, tgt_rows, table, max_enc=32, max_dec=16)
    assert batch.enc_ids.shape[0] == 3
    assert batch.dec_in_ids[:, 0].tolist() == [PAD_ID] * 3
    for i, row in enumerate(tgt_rows):
        assert batch.dec_in_ids[i, 1 : len(row)].tolist() == row[:-1]
        assert batch.targets[i, : len(row)].tolist() == row
        assert (batch.targets[i, len(row):] == IGNORE_TARGET).all()
        assert (batch.enc_rids[i, batch.enc_len[i]:] == BYPASS_ID).all()


def test_qa_batch_appends_eos(tiny_vocab, tiny_routing):
    _, table = tiny_routing
    batch = qa_batch([("where is paris", "france")], tiny_vocab, table, 16, 8)
    n = int(batch.enc_len[0])
    assert batch.enc_ids[0, n - 1] == EOS_ID
    tgt = batch.targets[0][batch.targets[0] != IGNORE_TARGET].tolist()
    assert tgt[-1] == EOS_ID


def test_assemble_empty_batch_rejected(tiny_routing):
    _, table = tiny_routing
    with pytest.raises(DataError):
        assemble_batch([], [], table, 8, 8)


def test_pretrain_batcher_deterministic(tiny_vocab, tiny_routing):
    _, table = tiny_routing
    def stream():
        b = PretrainBatcher(TINY_CORPUS, tiny_vocab, table, batch_size=4,
                            max_enc=32, max_dec=20, seed=5)
        return [b.next_batch() for _ in range(3)]
    s1, s2 = stream(), stream()
    for a, b in zip(s1, s2):
        assert np.array_equal(a.enc_ids, b.enc_ids)
        assert np.array_equal(a.targets, b.targets)
        assert np.array_equal(a.enc_rids, b.enc_rids)


def test_pretrain_batcher_rejects_empty_corpus(tiny_vocab, tiny_routing):
    _, table = tiny_routing
    with pytest.raises(DataError):
        PretrainBatcher([""], tiny_vocab, table, 4, 16, 8)
