"""Span-corruption pretraining batches and padded model batch assembly."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .expert_layer import BYPASS_ID
from .routing import RoutingHashTable, assign_routing_ids
from .subword import EOS_ID, PAD_ID, SubwordVocab, encode

IGNORE_TARGET = -1  # target padding value excluded from the loss


class DataError(ValueError):
    """Raised for batches that cannot be assembled."""


@dataclass
class SpanCorruptionBatch:
    """Corrupted inputs with routing ids and span-reconstruction targets.

    Masked spans are replaced in the input by one sentinel each, in order;
    the target replays sentinel i followed by span i's tokens and ends with a
    terminal sentinel.
    """

    input_ids: list[list[int]]
    input_routing_ids: list[list[int]]
    target_ids: list[list[int]]


def _compose(rng: np.random.Generator, total: int, parts: int, minimum: int) -> list[int]:
    """Random composition of ``total`` into ``parts`` values, each >= minimum."""
    slack = total - parts * minimum
    if slack < 0:
        raise DataError(f"cannot split {total} into {parts} parts of at least {minimum}")
    if parts == 1:
        return [total]
    cuts = np.sort(rng.integers(0, slack + 1, size=parts - 1))
    sizes = np.diff(np.concatenate(([0], cuts, [slack])))
    return [int(s) + minimum for s in sizes]


def corrupt_ids(
    rng: np.random.Generator,
    ids: list[int],
    corruption_rate: float,
    mean_span_len: float,
    sentinel_ids: list[int],
) -> tuple[list[int], list[int]]:
    """Mask random contiguous spans of one tokenized line.

    Returns (corrupted input, target). The number of masked tokens is
    round(len * rate); spans have mean length ``mean_span_len`` and are
    separated by at least one kept token. The target is the masked spans in
    order, each introduced by its sentinel, closed by a terminal sentinel.
    """
    n = len(ids)
    num_noise = min(n, max(0, int(round(n * corruption_rate))))
    if num_noise == 0:
        return list(ids), [sentinel_ids[0]]
    if num_noise == n:
        return [sentinel_ids[0]], [sentinel_ids[0], *ids, sentinel_ids[1]]
    num_spans = int(round(num_noise / max(mean_span_len, 1e-9)))
    num_spans = max(1, min(num_spans, num_noise, n - num_noise + 1, len(sentinel_ids) - 1))
    span_lens = _compose(rng, num_noise, num_spans, 1)
    # gaps: first and last may be empty, interior gaps keep spans separated
    interior = num_spans - 1
    gap_budget = n - num_noise - interior
    gaps = _compose(rng, gap_budget, num_spans + 1, 0)
    for i in range(1, num_spans):
        gaps[i] += 1

    inp: list[int] = []
    tgt: list[int] = []
    pos = 0
    for s in range(num_spans):
        inp.extend(ids[pos : pos + gaps[s]])
        pos += gaps[s]
        inp.append(sentinel_ids[s])
        tgt.append(sentinel_ids[s])
        tgt.extend(ids[pos : pos + span_lens[s]])
        pos += span_lens[s]
    inp.extend(ids[pos:])
    tgt.append(sentinel_ids[num_spans])
    return inp, tgt


def make_span_batch(
    rng_seed: int,
    corpus_lines: list[str],
    corruption_rate: float,
    mean_span_len: float,
    dv: SubwordVocab,
    table: RoutingHashTable,
) -> SpanCorruptionBatch:
    """Tokenize and span-corrupt a list of lines, deterministically per seed."""
    rng = np.random.default_rng(rng_seed)
    sentinels = [dv.sentinel_id(i) for i in range(dv.num_sentinels)]
    inputs: list[list[int]] = []
    input_rids: list[list[int]] = []
    targets: list[list[int]] = []
    for line in corpus_lines:
        ids = encode(dv, line)
        if not ids:
            continue
        inp, tgt = corrupt_ids(rng, ids, corruption_rate, mean_span_len, sentinels)
        inputs.append(inp)
        input_rids.append(assign_routing_ids(table, inp).routing_ids)
        targets.append(tgt)
    return SpanCorruptionBatch(input_ids=inputs, input_routing_ids=input_rids, target_ids=targets)


@dataclass
class ModelBatch:
    """Padded arrays for one training or evaluation step."""

    enc_ids: np.ndarray  # (B, Te) int64, PAD_ID padded
    enc_rids: np.ndarray  # (B, Te) int64, BYPASS_ID at padding
    enc_len: np.ndarray  # (B,)
    dec_in_ids: np.ndarray  # (B, Td) int64, starts with PAD_ID
    dec_rids: np.ndarray  # (B, Td)
    dec_len: np.ndarray  # (B,)
    targets: np.ndarray  # (B, Td) int64, IGNORE_TARGET at padding

    @property
    def batch_size(self) -> int:
        return self.enc_ids.shape[0]

    @property
    def num_target_tokens(self) -> int:
        return int((self.targets != IGNORE_TARGET).sum())


def _pad(rows: list[list[int]], width: int, fill: int) -> np.ndarray:
    out = np.full((len(rows), width), fill, dtype=np.int64)
    for i, row in enumerate(rows):
        out[i, : len(row)] = row[:width]
    return out


def assemble_batch(
    enc_rows: list[list[int]],
    tgt_rows: list[list[int]],
    table: RoutingHashTable,
    max_enc: int,
    max_dec: int,
    enc_rid_rows: list[list[int]] | None = None,
) -> ModelBatch:
    """Pad sequences and derive decoder inputs and routing ids.

    The decoder input is the target shifted right with a leading PAD_ID
    acting as the start token; its routing ids are assigned online over the
    shifted sequence. Padding positions get BYPASS_ID so they never consume
    expert capacity.
    """
    if not enc_rows:
        raise DataError("cannot assemble an empty batch")
    enc_rows = [row[:max_enc] for row in enc_rows]
    tgt_rows = [row[:max_dec] for row in tgt_rows]
    if enc_rid_rows is None:
        enc_rid_rows = [assign_routing_ids(table, row).routing_ids for row in enc_rows]
    else:
        enc_rid_rows = [row[:max_enc] for row in enc_rid_rows]

    dec_in_rows = [[PAD_ID] + row[:-1] if row else [PAD_ID] for row in tgt_rows]
    dec_rid_rows = [assign_routing_ids(table, row).routing_ids for row in dec_in_rows]

    te = max(len(r) for r in enc_rows)
    td = max(len(r) for r in dec_in_rows)
    return ModelBatch(
        enc_ids=_pad(enc_rows, te, PAD_ID),
        enc_rids=_pad(enc_rid_rows, te, BYPASS_ID),
        enc_len=np.array([len(r) for r in enc_rows], dtype=np.int64),
        dec_in_ids=_pad(dec_in_rows, td, PAD_ID),
        dec_rids=_pad(dec_rid_rows, td, BYPASS_ID),
        dec_len=np.array([len(r) for r in dec_in_rows], dtype=np.int64),
        targets=_pad(tgt_rows, td, IGNORE_TARGET),
    )


def span_batch_to_model_batch(
    scb: SpanCorruptionBatch, table: RoutingHashTable, max_enc: int, max_dec: int
) -> ModelBatch:
    return assemble_batch(
        scb.input_ids,
        scb.target_ids,
        table,
        max_enc,
        max_dec,
        enc_rid_rows=scb.input_routing_ids,
    )


def qa_batch(
    pairs: list[tuple[str, str]],
    dv: SubwordVocab,
    table: RoutingHashTable,
    max_enc: int,
    max_dec: int,
) -> ModelBatch:
    """Question/answer pairs as encoder input and EOS-terminated targets."""
    enc_rows = [encode(dv, q) + [EOS_ID] for q, _ in pairs]
    tgt_rows = [encode(dv, a) + [EOS_ID] for _, a in pairs]
    return assemble_batch(enc_rows, tgt_rows, table, max_enc, max_dec)


class PretrainBatcher:
    """Deterministic stream of span-corruption batches over cached line encodings."""

    def __init__(
        self,
        corpus_lines: list[str],
        dv: SubwordVocab,
        table: RoutingHashTable,
        batch_size: int,
        max_enc: int,
        max_dec: int,
        corruption_rate: float = 0.15,
        mean_span_len: float = 3.0,
        seed: int = 0,
    ):
        self.encoded = [encode(dv, line) for line in corpus_lines if line.strip()]
        if not self.encoded:
            raise DataError("pretraining corpus has no non-empty lines")
        self.dv = dv
        self.table = table
        self.batch_size = batch_size
        self.max_enc = max_enc
        self.max_dec = max_dec
        self.rate = corruption_rate
        self.mean_span = mean_span_len
        self.rng = np.random.default_rng(seed)
        self.sentinels = [dv.sentinel_id(i) for i in range(dv.num_sentinels)]

    def next_batch(self) -> ModelBatch:
        picks = self.rng.integers(0, len(self.encoded), size=self.batch_size)
        enc_rows: list[list[int]] = []
        tgt_rows: list[list[int]] = []
        for idx in picks:
            ids = self.encoded[int(idx)][: self.max_enc]
            inp, tgt = corrupt_ids(self.rng, ids, self.rate, self.mean_span, self.sentinels)
            enc_rows.append(inp)
            tgt_rows.append(tgt)
        return assemble_batch(enc_rows, tgt_rows, self.table, self.max_enc, self.max_dec)
