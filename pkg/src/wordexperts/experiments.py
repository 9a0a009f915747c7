"""Desk-scale experiment harness: fact recall, deactivation probe, ablation sweeps.

The benchmark is a synthetic closed-book recall task. Pretraining text states
facts about made-up entities; finetuning sees question/answer pairs for a
subset of entities; evaluation asks about held-out entities, so a correct
answer can only come from knowledge stored during pretraining. Entity words
are long enough that the subword tokenizer always fragments them, while the
routing vocabulary keeps each one as a single routing id with its own expert.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .bucketing import (
    BucketPlan,
    FrequencyTable,
    ShapeSpec,
    count_frequencies,
    desk_default_shapes,
    make_plan,
    split_buckets,
)
from .data import PretrainBatcher, qa_batch
from .expert_layer import clear_deactivation, set_deactivation
from .model import (
    AdamConfig,
    Model,
    ModelConfig,
    generate,
    match_dense_config,
    take_batches,
    train,
)
from .routing import (
    RoutingHashTable,
    RoutingVocab,
    build_hash_table,
    build_routing_vocab,
    extend_with_default,
)
from .subword import EOS_ID, SubwordVocab, decode, encode, learn_vocab


class ExperimentError(ValueError):
    """Raised for invalid experiment settings."""


ENTITY_SYLLABLES = [
    "bra", "dol", "fen", "gri", "hul", "jor", "kel", "lum",
    "mor", "nir", "pra", "quel", "rud", "sil", "tav", "vok",
    "wim", "yer", "zan", "bex", "cor", "dun", "fli", "gos",
]
VALUE_SYLLABLES = [
    "ald", "eth", "ion", "oss", "urn", "ank", "elm", "ist",
    "ore", "und", "ard", "ell",
]
TEMPLATES = [
    "{e} is located in {v}",
    "the town of {e} lies in {v}",
    "people travel to {e} across the region of {v}",
    "the old market of {e} belongs to {v}",
    "{e} was founded near the hills of {v}",
    "maps place {e} inside {v}",
    "traders from {e} bring goods back to {v}",
    "the famous library of {e} stands in {v}",
]
QUESTION = "where is {e}"
FILLER_LINES = [
    "the roads between small towns are quiet in winter",
    "every region keeps its own maps and records",
    "markets open early and close when the light fades",
    "travellers ask for directions at the old library",
    "goods move along the river when the hills are steep",
    "founders of a town often name the streets",
    "people remember where famous places stand",
    "a good archive lists every town and its region",
]


@dataclass
class FactCorpus:
    """Synthetic entities, their attribute values, templated text and QA pairs."""

    entities: list[str]
    values: list[str]
    facts: dict[str, str]
    pretrain_lines: list[str]
    qa_pairs: list[tuple[str, str]]
    qa_train: list[tuple[str, str]]
    qa_eval: list[tuple[str, str]]

    def name_list(self) -> list[str]:
        return self.entities + self.values


def _make_words(rng: np.random.Generator, bank: list[str], syllables: int, count: int) -> list[str]:
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < count:
        w = "".join(rng.choice(bank) for _ in range(syllables))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def gen_fact_corpus(
    rng_seed: int,
    num_entities: int,
    num_templates: int = 8,
    occurrences: int = 24,
    num_values: int | None = None,
    eval_fraction: float = 0.25,
) -> FactCorpus:
    """Deterministically generate the fact-recall corpus.

    Every entity appears in exactly ``occurrences`` pretraining lines, each a
    template stating its value, so every answer occurs verbatim in the
    pretraining text. QA pairs for a held-out fraction of entities form the
    evaluation set; their facts never appear in the finetuning data.
    """
    if num_templates < 1 or num_templates > len(TEMPLATES):
        raise ExperimentError(f"num_templates must be in [1, {len(TEMPLATES)}]")
    rng = np.random.default_rng(rng_seed)
    if num_entities == 0:
        return FactCorpus([], [], {}, [], [], [], [])
    if num_values is None:
        num_values = max(4, num_entities // 5)
    entities = _make_words(rng, ENTITY_SYLLABLES, 4, num_entities)
    values = _make_words(rng, VALUE_SYLLABLES, 3, num_values)
    facts = {e: values[int(rng.integers(num_values))] for e in entities}

    lines: list[str] = []
    for e in entities:
        v = facts[e]
        for _ in range(occurrences):
            t = TEMPLATES[int(rng.integers(num_templates))]
            lines.append(t.format(e=e, v=v))
    lines.extend(FILLER_LINES * 2)
    order = rng.permutation(len(lines))
    lines = [lines[i] for i in order]

    qa_pairs = [(QUESTION.format(e=e), facts[e]) for e in entities]
    n_eval = max(1, int(round(eval_fraction * num_entities))) if num_entities > 1 else 0
    holdout = set(rng.permutation(num_entities)[:n_eval].tolist())
    qa_eval = [qa_pairs[i] for i in range(num_entities) if i in holdout]
    qa_train = [qa_pairs[i] for i in range(num_entities) if i not in holdout]
    return FactCorpus(
        entities=entities,
        values=values,
        facts=facts,
        pretrain_lines=lines,
        qa_pairs=qa_pairs,
        qa_train=qa_train,
        qa_eval=qa_eval,
    )


# ----------------------------------------------------------------- pipeline


@dataclass
class Pipeline:
    """Everything derived from a corpus: vocabularies, routing, plan, model config."""

    dv: SubwordVocab
    rv: RoutingVocab
    table: RoutingHashTable
    ft: FrequencyTable
    plan: BucketPlan
    cfg: ModelConfig
    max_enc: int
    max_dec: int
    batch_size: int


def truncate_routing_vocab(rv: RoutingVocab, size: int) -> RoutingVocab:
    """Keep only the lowest ``size`` routing ids (defaults plus top-frequency words)."""
    if size < rv.knowledge_threshold:
        raise ExperimentError(
            f"cannot truncate below the default range ({rv.knowledge_threshold})"
        )
    entries = [w for w in rv.entries if rv.routing_id[w] < size]
    routing_id = {w: rv.routing_id[w] for w in entries}
    freq = {routing_id[w]: rv.freq.get(routing_id[w], 0) for w in entries}
    return RoutingVocab(
        entries=entries,
        routing_id=routing_id,
        freq=freq,
        knowledge_threshold=rv.knowledge_threshold,
    )


def build_pipeline(
    corpus_lines: list[str],
    names: list[str],
    vocab_size: int = 192,
    max_piece_len: int | None = 5,
    top_k: int = 4096,
    k_buckets: int = 4,
    bypass_top_n: int = 16,
    shapes: list[ShapeSpec] | None = None,
    routing_truncate: int | None = None,
    batch_size: int = 32,
    max_enc: int = 32,
    max_dec: int = 16,
    model_cfg: ModelConfig | None = None,
) -> Pipeline:
    """Build vocabularies, routing table, frequency buckets and the model config."""
    dv = learn_vocab(corpus_lines, target_size=vocab_size, max_piece_len=max_piece_len)
    rv = extend_with_default(build_routing_vocab(names, corpus_lines, top_k=top_k), dv)
    if routing_truncate is not None:
        rv = truncate_routing_vocab(rv, routing_truncate)
    table = build_hash_table(rv, dv)
    ft = count_frequencies(table, corpus_lines, dv, rv.size)
    bounds = split_buckets(ft, k=k_buckets, bypass_top_n=bypass_top_n)
    plan = make_plan(
        bounds,
        shapes or desk_default_shapes(),
        ft=ft,
        batch_tokens=batch_size * max_enc,
    )
    base = model_cfg or ModelConfig()
    cfg = replace(
        base,
        default_vocab_size=dv.size,
        routing_vocab_size=rv.size,
        max_seq_len=max(max_enc, max_dec) + 2,
    )
    return Pipeline(
        dv=dv, rv=rv, table=table, ft=ft, plan=plan, cfg=cfg,
        max_enc=max_enc, max_dec=max_dec, batch_size=batch_size,
    )


# --------------------------------------------------------------- evaluation


def eval_recall(
    model: Model, qa_pairs: list[tuple[str, str]], dv: SubwordVocab, max_answer_len: int = 8
) -> float:
    """Exact-match fraction under greedy decoding."""
    if not qa_pairs:
        raise ExperimentError("no QA pairs to evaluate")
    hits = 0
    for q, a in qa_pairs:
        out = generate(model, encode(dv, q) + [EOS_ID], max_answer_len)
        if decode(dv, out) == a:
            hits += 1
    return hits / len(qa_pairs)


def answers(model: Model, qa_pairs, dv: SubwordVocab, max_answer_len: int = 8) -> list[str]:
    return [
        decode(dv, generate(model, encode(dv, q) + [EOS_ID], max_answer_len))
        for q, _ in qa_pairs
    ]


@dataclass
class ProbeFlip:
    question: str
    expected: str
    answer_active: str
    answer_deactivated: str

    @property
    def flipped(self) -> bool:
        return self.answer_active != self.answer_deactivated


@dataclass
class ProbeResult:
    recall_active: float
    recall_deactivated: float
    flips: list[ProbeFlip]

    def flips_csv(self) -> str:
        lines = ["question,expected,answer_active,answer_deactivated,flipped"]
        for f in self.flips:
            lines.append(
                f"{f.question},{f.expected},{f.answer_active},{f.answer_deactivated},{int(f.flipped)}"
            )
        return "\n".join(lines) + "\n"


def run_deactivation_probe(
    model: Model, threshold: int, qa_pairs: list[tuple[str, str]], dv: SubwordVocab
) -> ProbeResult:
    """Recall with all experts active versus experts of ids >= threshold silenced."""
    for pool in model.pools.values():
        clear_deactivation(pool)
    ans_on = answers(model, qa_pairs, dv)
    for pool in model.pools.values():
        set_deactivation(pool, lambda rid: rid >= threshold)
    ans_off = answers(model, qa_pairs, dv)
    for pool in model.pools.values():
        clear_deactivation(pool)
    expected = [a for _, a in qa_pairs]
    flips = [
        ProbeFlip(question=q, expected=a, answer_active=on, answer_deactivated=off)
        for (q, a), on, off in zip(qa_pairs, ans_on, ans_off)
    ]
    n = len(qa_pairs)
    return ProbeResult(
        recall_active=sum(on == a for on, a in zip(ans_on, expected)) / n,
        recall_deactivated=sum(off == a for off, a in zip(ans_off, expected)) / n,
        flips=flips,
    )


# ----------------------------------------------------------------- training


@dataclass
class Budget:
    pretrain_steps: int = 2000
    finetune_steps: int = 500
    pretrain_lr: float = 1e-3
    finetune_lr: float = 1e-4
    corruption_rate: float = 0.15
    mean_span_len: float = 3.0


class QABatcher:
    """Deterministic finetuning batches sampled from the QA training pairs."""

    def __init__(self, pairs, dv, table, batch_size, max_enc, max_dec, seed=0):
        if not pairs:
            raise ExperimentError("no QA pairs to train on")
        self.pairs = pairs
        self.dv = dv
        self.table = table
        self.batch_size = batch_size
        self.max_enc = max_enc
        self.max_dec = max_dec
        self.rng = np.random.default_rng(seed)

    def next_batch(self):
        picks = self.rng.integers(0, len(self.pairs), size=self.batch_size)
        chosen = [self.pairs[int(i)] for i in picks]
        return qa_batch(chosen, self.dv, self.table, self.max_enc, self.max_dec)


def pretrain_model(pipe: Pipeline, model: Model, fc_lines: list[str], budget: Budget, seed: int):
    batcher = PretrainBatcher(
        fc_lines, pipe.dv, pipe.table, pipe.batch_size, pipe.max_enc, pipe.max_dec,
        corruption_rate=budget.corruption_rate, mean_span_len=budget.mean_span_len,
        seed=seed,
    )
    return train(
        model, take_batches(batcher, budget.pretrain_steps), AdamConfig(lr=budget.pretrain_lr)
    )


def finetune_model(pipe: Pipeline, model: Model, pairs, budget: Budget, seed: int,
                   freeze_experts: bool):
    batcher = QABatcher(
        pairs, pipe.dv, pipe.table, pipe.batch_size, pipe.max_enc, pipe.max_dec, seed=seed
    )
    return train(
        model, take_batches(batcher, budget.finetune_steps),
        AdamConfig(lr=budget.finetune_lr), freeze_experts=freeze_experts,
    )


def train_fact_model(
    fc: FactCorpus,
    pipe: Pipeline,
    kind: str,
    seed: int,
    budget: Budget | None = None,
    freeze_experts: bool | None = None,
) -> tuple[Model, float]:
    """Pretrain, finetune and evaluate one model on the fact corpus.

    ``kind`` is "mowe" for the word-expert model or "dense" for the
    FLOP-matched dense twin. Word experts are frozen during finetuning unless
    overridden.
    """
    budget = budget or Budget()
    if kind == "mowe":
        cfg = pipe.cfg
        freeze = True if freeze_experts is None else freeze_experts
    elif kind == "dense":
        cfg = match_dense_config(pipe.cfg, pipe.plan, pipe.max_enc, pipe.max_dec)
        freeze = False
    else:
        raise ExperimentError(f"unknown model kind {kind!r}")
    model = Model(cfg, pipe.plan if kind == "mowe" else None, pipe.table, seed=seed)
    pretrain_model(pipe, model, fc.pretrain_lines, budget, seed=seed + 1)
    finetune_model(pipe, model, fc.qa_train, budget, seed=seed + 2, freeze_experts=freeze)
    recall = eval_recall(model, fc.qa_eval, pipe.dv)
    return model, recall


# ------------------------------------------------------------------- sweeps

SWEEP_AXES = ("routing_vocab_size", "num_experts", "mowe_layers", "expert_dims", "freeze")


@dataclass
class SweepResult:
    axis: str
    values: list[str]
    seeds: list[int]
    rows: list[tuple[str, int, float]]

    def to_csv(self) -> str:
        lines = ["axis_value,seed,metric"]
        for value, seed, metric in self.rows:
            lines.append(f"{value},{seed},{metric:.6f}")
        return "\n".join(lines) + "\n"


def _scaled_shapes(expert_scale: int = 1, dim_scale: int = 1) -> list[ShapeSpec]:
    shapes = desk_default_shapes()
    return [
        ShapeSpec(
            num_blocks=s.num_blocks,
            experts_per_block=s.experts_per_block * expert_scale,
            expert_hidden_dim=s.expert_hidden_dim * dim_scale,
        )
        for s in shapes
    ]


def _spread_positions(num_blocks: int, count: int) -> list[int]:
    """Place ``count`` expert layers toward the middle of a ``num_blocks`` stack."""
    if count == 0:
        return []
    if count > num_blocks:
        raise ExperimentError(f"cannot place {count} expert layers in {num_blocks} blocks")
    positions = sorted({(i + 1) * num_blocks // (count + 1) for i in range(count)})
    i = 0
    while len(positions) < count:  # resolve collisions from integer division
        if i not in positions:
            positions.append(i)
            positions.sort()
        i += 1
    return positions


def _parse_layers(value: str, cfg: ModelConfig) -> tuple[list[int], list[int]]:
    enc_n, _, dec_n = value.partition("+")
    try:
        return (
            _spread_positions(cfg.num_enc_blocks, int(enc_n)),
            _spread_positions(cfg.num_dec_blocks, int(dec_n)),
        )
    except ValueError as exc:
        raise ExperimentError(f"mowe_layers value {value!r} must be E+D counts") from exc


def run_sweep(
    axis: str,
    values: list[str],
    seeds: list[int],
    corpus_seed: int = 7,
    num_entities: int = 48,
    budget: Budget | None = None,
    pipeline_kwargs: dict | None = None,
) -> SweepResult:
    """Train one word-expert model per (axis value, seed) and record eval recall.

    Axes: routing_vocab_size (0 means default-vocab-only), num_experts
    (experts-per-block multiplier), mowe_layers ("E+D" placement counts),
    expert_dims (hidden width multiplier), freeze (0/1 during finetuning).
    """
    if axis not in SWEEP_AXES:
        raise ExperimentError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    budget = budget or Budget()
    kwargs = dict(pipeline_kwargs or {})
    fc = gen_fact_corpus(corpus_seed, num_entities=num_entities)
    rows: list[tuple[str, int, float]] = []
    for value in values:
        cell_kwargs = dict(kwargs)
        freeze: bool | None = None
        if axis == "routing_vocab_size":
            # 0 means default-vocab-only; the learned vocab has exactly the target size
            size = int(value)
            cell_kwargs["routing_truncate"] = (
                cell_kwargs.get("vocab_size", 192) if size == 0 else size
            )
        elif axis == "num_experts":
            cell_kwargs["shapes"] = _scaled_shapes(expert_scale=int(value))
        elif axis == "expert_dims":
            cell_kwargs["shapes"] = _scaled_shapes(dim_scale=int(value))
        elif axis == "mowe_layers":
            base = cell_kwargs.pop("model_cfg", None) or ModelConfig()
            enc_pos, dec_pos = _parse_layers(str(value), base)
            cell_kwargs["model_cfg"] = replace(
                base, mowe_positions_enc=enc_pos, mowe_positions_dec=dec_pos
            )
        elif axis == "freeze":
            freeze = bool(int(value))
        pipe = build_pipeline(fc.pretrain_lines, fc.name_list(), **cell_kwargs)
        for seed in seeds:
            _, recall = train_fact_model(
                fc, pipe, "mowe", seed=seed, budget=budget, freeze_experts=freeze
            )
            rows.append((str(value), seed, recall))
    return SweepResult(axis=axis, values=[str(v) for v in values], seeds=list(seeds), rows=rows)
