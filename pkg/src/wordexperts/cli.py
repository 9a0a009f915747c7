"""Single command-line entry point wiring vocabularies, planning, training and probes.

Exit codes: 0 success, 1 usage or validation error (missing files, bad keys),
2 runtime failure. Every value can come from a ``[run]`` section of a config
file; any flag given on the command line overrides the config key of the same
name. All randomness derives from ``--seed`` (default 0).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .bucketing import (
    BucketPlan,
    FrequencyTable,
    PlanError,
    ShapeSpec,
    count_frequencies,
    desk_default_shapes,
    make_plan,
    split_buckets,
)
from .checkpoint import CheckpointError, load_model, save_model
from .configio import ConfigError, read_kv
from .data import DataError, PretrainBatcher, qa_batch
from .experiments import (
    Budget,
    ExperimentError,
    QABatcher,
    eval_recall,
    answers,
    run_deactivation_probe,
    run_sweep,
)
from .expert_layer import comm_cost, route
from .model import (
    AdamConfig,
    Model,
    ModelConfig,
    ModelError,
    TrainingDiverged,
    match_dense_config,
    take_batches,
    trace_to_csv,
    train,
)
from .routing import (
    RoutingError,
    RoutingHashTable,
    RoutingVocab,
    assign_routing_ids,
    build_hash_table,
    build_routing_vocab,
    extend_with_default,
)
from .subword import SubwordVocab, VocabError, encode, learn_vocab

USAGE_ERRORS = (
    ConfigError,
    VocabError,
    RoutingError,
    PlanError,
    ModelError,
    DataError,
    ExperimentError,
    CheckpointError,
    FileNotFoundError,
)

# config keys accepted in the [run] section; flags of the same name override
KNOWN_KEYS = {
    "corpus", "names", "default_vocab", "routing_vocab", "hash_table", "plan",
    "checkpoint_in", "checkpoint_out", "trace_out", "qa", "out", "freq",
    "shapes", "size", "reserved", "max_piece_len", "top_k", "k", "bypass",
    "batch_tokens", "capacity_factor", "d_model", "num_heads",
    "num_enc_blocks", "num_dec_blocks", "ffn_hidden", "mowe_enc", "mowe_dec",
    "share_experts", "max_seq_len", "steps", "batch_size", "lr",
    "corruption_rate", "mean_span_len", "max_enc", "max_dec", "freeze",
    "seed", "threshold", "axis", "values", "seeds", "entities", "templates",
    "occurrences", "pretrain_steps", "finetune_steps", "dense",
}


class UsageError(ValueError):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage problems exit 1, not argparse's 2
        raise UsageError(message)


class Resolver:
    """Flag value if present, else config key, else default."""

    def __init__(self, args: argparse.Namespace, config: dict[str, str]):
        self.args = vars(args)
        self.config = config

    def get(self, key: str, default=None, cast=str):
        flag = self.args.get(key)
        if flag is not None:
            return flag
        if key in self.config:
            raw = self.config[key]
            if cast is bool:
                return raw.lower() in ("1", "true", "yes")
            return cast(raw)
        return default

    def require_path(self, key: str) -> Path:
        value = self.get(key)
        if not value:
            raise UsageError(f"missing required path for key '{key}'")
        p = Path(value)
        if not p.exists():
            raise UsageError(f"{key}: file not found: {p}")
        return p

    def out_path(self, key: str) -> Path:
        value = self.get(key)
        if not value:
            raise UsageError(f"missing required output path for key '{key}'")
        p = Path(value)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p


def load_config(path: str | None) -> dict[str, str]:
    if not path:
        return {}
    sections = read_kv(path)
    run = sections.get("run", {})
    unknown = set(run) - KNOWN_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return run


def _read_lines(path: Path) -> list[str]:
    return [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]


def _read_qa(path: Path) -> list[tuple[str, str]]:
    pairs = []
    for ln in _read_lines(path):
        if "\t" not in ln:
            raise UsageError(f"{path}: QA lines must be 'question<TAB>answer', got {ln!r}")
        q, _, a = ln.partition("\t")
        pairs.append((q, a))
    return pairs


def _ints(csv: str) -> list[int]:
    return [int(x) for x in csv.split(",") if x != ""]


def _load_bundle(r: Resolver) -> tuple[SubwordVocab, RoutingVocab, RoutingHashTable, BucketPlan]:
    dv = SubwordVocab.load(r.require_path("default_vocab"))
    rv = RoutingVocab.load(r.require_path("routing_vocab"))
    table = RoutingHashTable.load(r.require_path("hash_table"))
    plan = BucketPlan.load(r.require_path("plan"))
    return dv, rv, table, plan


def _model_config(r: Resolver, dv: SubwordVocab, rv: RoutingVocab) -> ModelConfig:
    return ModelConfig(
        d_model=r.get("d_model", 64, int),
        num_heads=r.get("num_heads", 4, int),
        num_enc_blocks=r.get("num_enc_blocks", 6, int),
        num_dec_blocks=r.get("num_dec_blocks", 6, int),
        ffn_hidden=r.get("ffn_hidden", 256, int),
        mowe_positions_enc=_ints(r.get("mowe_enc", "2,4")),
        mowe_positions_dec=_ints(r.get("mowe_dec", "2,4")),
        share_experts=r.get("share_experts", True, bool),
        default_vocab_size=dv.size,
        routing_vocab_size=rv.size,
        max_seq_len=r.get("max_seq_len", 40, int),
    )


# ---------------------------------------------------------------- commands


def cmd_build_default_vocab(r: Resolver) -> int:
    corpus = _read_lines(r.require_path("corpus"))
    mpl = r.get("max_piece_len", 0, int)
    vocab = learn_vocab(
        corpus,
        target_size=r.get("size", 192, int),
        reserved=r.get("reserved", 16, int),
        max_piece_len=mpl if mpl > 0 else None,
    )
    out = r.out_path("out")
    vocab.save(out)
    print(f"wrote {out} ({vocab.size} pieces, {vocab.reserved} reserved)")
    return 0


def cmd_build_routing_vocab(r: Resolver) -> int:
    names = _read_lines(r.require_path("names"))
    corpus = _read_lines(r.require_path("corpus"))
    dv = SubwordVocab.load(r.require_path("default_vocab"))
    rv = build_routing_vocab(names, corpus, top_k=r.get("top_k", 4096, int))
    rv = extend_with_default(rv, dv)
    table = build_hash_table(rv, dv)
    out_dir = Path(r.get("out") or "")
    if not str(out_dir):
        raise UsageError("missing required output path for key 'out'")
    out_dir.mkdir(parents=True, exist_ok=True)
    rv.save(out_dir / "routing_vocab.tsv")
    table.save(out_dir / "hash_table.tsv")
    print(
        f"wrote {out_dir}/routing_vocab.tsv ({rv.size} ids, threshold {rv.knowledge_threshold}) "
        f"and hash_table.tsv ({len(table.map)} keys, {table.num_dropped_too_long} too long, "
        f"{table.num_collisions} collisions)"
    )
    return 0


def _read_freq(path: Path) -> FrequencyTable:
    rows = [ln.split("\t") for ln in _read_lines(path)]
    counts = np.zeros(len(rows), dtype=np.int64)
    for rid_s, count_s in rows:
        counts[int(rid_s)] = int(count_s)
    return FrequencyTable(counts=counts)


def _read_shapes(path: Path) -> list[ShapeSpec]:
    kv = read_kv(path).get("shapes", {})
    specs: list[ShapeSpec] = []
    for b in range(len({k.split(".")[0] for k in kv})):
        cap = kv.get(f"bucket{b}.capacity_per_expert")
        specs.append(
            ShapeSpec(
                num_blocks=int(kv[f"bucket{b}.num_blocks"]),
                experts_per_block=int(kv[f"bucket{b}.experts_per_block"]),
                expert_hidden_dim=int(kv[f"bucket{b}.expert_hidden_dim"]),
                capacity_per_expert=int(cap) if cap is not None else None,
            )
        )
    return specs


def cmd_plan_buckets(r: Resolver) -> int:
    ft = _read_freq(r.require_path("freq"))
    shapes = _read_shapes(r.require_path("shapes")) if r.get("shapes") else desk_default_shapes()
    bounds = split_buckets(ft, k=r.get("k", 4, int), bypass_top_n=r.get("bypass", 16, int))
    plan = make_plan(
        bounds,
        shapes,
        ft=ft,
        batch_tokens=r.get("batch_tokens", 1024, int),
        capacity_factor=r.get("capacity_factor", 1.25, float),
    )
    out = r.out_path("out")
    plan.save(out)
    sizes = ",".join(str(s) for s in
                     [plan.cutoffs[b + 1] - plan.cutoffs[b] for b in range(plan.k)])
    print(f"wrote {out} (k={plan.k}, bucket sizes {sizes}, bypass {plan.bypass_top_n})")
    return 0


def cmd_stats(r: Resolver) -> int:
    dv = SubwordVocab.load(r.require_path("default_vocab"))
    table = RoutingHashTable.load(r.require_path("hash_table"))
    corpus = _read_lines(r.require_path("corpus"))
    rv = RoutingVocab.load(r.require_path("routing_vocab"))
    ft = count_frequencies(table, corpus, dv, rv.size)
    freq_out = r.get("freq")
    if freq_out:
        p = Path(freq_out)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(
            "".join(f"{rid}\t{int(c)}\n" for rid, c in enumerate(ft.counts)), encoding="utf-8"
        )
        print(f"wrote {p} ({ft.total} tokens)")
    if r.args.get("dispatch"):
        plan = BucketPlan.load(r.require_path("plan"))
        rids: list[int] = []
        for line in corpus:
            rids.extend(assign_routing_ids(table, encode(dv, line)).routing_ids)
        dp = route(plan, rids)
        report = comm_cost(dp, r.get("d_model", 64, int))
        out = r.out_path("out")
        lines = ["bucket,block,tokens_sent"]
        for (bucket, block), n in sorted(report.tokens_sent_per_block.items()):
            lines.append(f"{bucket},{block},{n}")
        out.write_text("\n".join(lines) + "\n", encoding="utf-8")
        print(
            f"wrote {out}: payload {report.total_all2all_payload}, "
            f"blocks {report.num_blocks_touched}, dropped {report.drop_count}, "
            f"bypassed {report.bypass_count}"
        )
    return 0


def cmd_pretrain(r: Resolver) -> int:
    dv, rv, table, plan = _load_bundle(r)
    corpus = _read_lines(r.require_path("corpus"))
    cfg = _model_config(r, dv, rv)
    seed = r.get("seed", 0, int)
    if r.get("dense", False, bool):
        cfg = match_dense_config(cfg, plan, r.get("max_enc", 32, int), r.get("max_dec", 16, int))
        plan_for_model = None
    else:
        plan_for_model = plan
    model = Model(cfg, plan_for_model, table, seed=seed)
    batcher = PretrainBatcher(
        corpus, dv, table,
        batch_size=r.get("batch_size", 32, int),
        max_enc=r.get("max_enc", 32, int),
        max_dec=r.get("max_dec", 16, int),
        corruption_rate=r.get("corruption_rate", 0.15, float),
        mean_span_len=r.get("mean_span_len", 3.0, float),
        seed=seed + 1,
    )
    steps = r.get("steps", 2000, int)
    trace = train(model, take_batches(batcher, steps), AdamConfig(lr=r.get("lr", 1e-3, float)))
    ckpt = r.out_path("checkpoint_out")
    save_model(ckpt, model, dv, rv)
    trace_out = r.get("trace_out")
    if trace_out:
        Path(trace_out).parent.mkdir(parents=True, exist_ok=True)
        Path(trace_out).write_text(trace_to_csv(trace), encoding="utf-8")
    print(f"wrote {ckpt} after {steps} steps, final loss {trace[-1].loss:.4f}")
    return 0


def cmd_finetune(r: Resolver) -> int:
    dv, rv, table, _ = _load_bundle(r)
    model = load_model(r.require_path("checkpoint_in"), dv, rv, table)
    pairs = _read_qa(r.require_path("qa"))
    seed = r.get("seed", 0, int)
    batcher = QABatcher(
        pairs, dv, table,
        batch_size=r.get("batch_size", 32, int),
        max_enc=r.get("max_enc", 32, int),
        max_dec=r.get("max_dec", 16, int),
        seed=seed + 1,
    )
    steps = r.get("steps", 500, int)
    trace = train(
        model, take_batches(batcher, steps), AdamConfig(lr=r.get("lr", 1e-4, float)),
        freeze_experts=r.get("freeze", True, bool),
    )
    ckpt = r.out_path("checkpoint_out")
    save_model(ckpt, model, dv, rv)
    trace_out = r.get("trace_out")
    if trace_out:
        Path(trace_out).parent.mkdir(parents=True, exist_ok=True)
        Path(trace_out).write_text(trace_to_csv(trace), encoding="utf-8")
    print(f"wrote {ckpt} after {steps} finetune steps, final loss {trace[-1].loss:.4f}")
    return 0


def cmd_eval(r: Resolver) -> int:
    dv, rv, table, _ = _load_bundle(r)
    model = load_model(r.require_path("checkpoint_in"), dv, rv, table)
    pairs = _read_qa(r.require_path("qa"))
    got = answers(model, pairs, dv)
    recall = sum(g == a for g, (_, a) in zip(got, pairs)) / len(pairs)
    out = r.get("out")
    if out:
        p = Path(out)
        p.parent.mkdir(parents=True, exist_ok=True)
        lines = ["question,expected,answer,correct"]
        for (q, a), g in zip(pairs, got):
            lines.append(f"{q},{a},{g},{int(g == a)}")
        p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"exact_match {recall:.6f} ({len(pairs)} questions)")
    return 0


def cmd_probe_deactivation(r: Resolver) -> int:
    dv, rv, table, _ = _load_bundle(r)
    model = load_model(r.require_path("checkpoint_in"), dv, rv, table)
    pairs = _read_qa(r.require_path("qa"))
    threshold = r.get("threshold", rv.knowledge_threshold, int)
    result = run_deactivation_probe(model, threshold, pairs, dv)
    out = r.get("out")
    if out:
        p = Path(out)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(result.flips_csv(), encoding="utf-8")
    n_flip = sum(f.flipped for f in result.flips)
    print(
        f"recall_active {result.recall_active:.6f} recall_deactivated "
        f"{result.recall_deactivated:.6f} flips {n_flip}/{len(result.flips)} "
        f"(threshold {threshold})"
    )
    return 0


def cmd_ablate(r: Resolver) -> int:
    axis = r.get("axis")
    if not axis:
        raise UsageError("missing required key 'axis'")
    values = [v for v in (r.get("values") or "").split(",") if v != ""]
    if not values:
        raise UsageError("missing required key 'values'")
    seeds = _ints(r.get("seeds") or "0")
    budget = Budget(
        pretrain_steps=r.get("pretrain_steps", 2000, int),
        finetune_steps=r.get("finetune_steps", 500, int),
    )
    result = run_sweep(
        axis, values, seeds,
        corpus_seed=r.get("seed", 7, int),
        num_entities=r.get("entities", 48, int),
        budget=budget,
    )
    out = r.out_path("out")
    out.write_text(result.to_csv(), encoding="utf-8")
    print(f"wrote {out} ({len(result.rows)} cells)")
    return 0


COMMANDS = {
    "build-default-vocab": cmd_build_default_vocab,
    "build-routing-vocab": cmd_build_routing_vocab,
    "plan-buckets": cmd_plan_buckets,
    "stats": cmd_stats,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "probe-deactivation": cmd_probe_deactivation,
    "ablate": cmd_ablate,
}


def build_parser() -> Parser:
    parser = Parser(prog="wordexperts", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, *keys: str, flags: list[str] | None = None) -> None:
        p = sub.add_parser(name, parents=[], add_help=True)
        p.add_argument("--config", default=None, help="config file with a [run] section")
        for key in keys:
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None)
        for flag in flags or []:
            p.add_argument(f"--{flag.replace('_', '-')}", dest=flag, action="store_true",
                           default=None)

    add("build-default-vocab", "corpus", "size", "reserved", "max_piece_len", "out")
    add("build-routing-vocab", "names", "corpus", "top_k", "default_vocab", "out")
    add("plan-buckets", "freq", "k", "bypass", "shapes", "batch_tokens", "capacity_factor", "out")
    add("stats", "corpus", "default_vocab", "routing_vocab", "hash_table", "plan",
        "d_model", "freq", "out", flags=["dispatch"])
    add("pretrain", "corpus", "default_vocab", "routing_vocab", "hash_table", "plan",
        "checkpoint_out", "trace_out", "steps", "batch_size", "lr", "seed",
        "corruption_rate", "mean_span_len", "max_enc", "max_dec", "d_model", "num_heads",
        "num_enc_blocks", "num_dec_blocks", "ffn_hidden", "mowe_enc", "mowe_dec",
        "max_seq_len", flags=["dense"])
    add("finetune", "default_vocab", "routing_vocab", "hash_table", "plan", "checkpoint_in",
        "checkpoint_out", "trace_out", "qa", "steps", "batch_size", "lr", "seed",
        "max_enc", "max_dec", "freeze")
    add("eval", "default_vocab", "routing_vocab", "hash_table", "plan", "checkpoint_in",
        "qa", "out")
    add("probe-deactivation", "default_vocab", "routing_vocab", "hash_table", "plan",
        "checkpoint_in", "qa", "threshold", "out")
    add("ablate", "axis", "values", "seeds", "entities", "pretrain_steps",
        "finetune_steps", "seed", "out")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = load_config(args.config)
        r = Resolver(args, config)
        for key in ("steps", "seed", "size", "reserved", "top_k", "k", "bypass", "batch_size",
                    "threshold", "entities", "pretrain_steps", "finetune_steps", "max_enc",
                    "max_dec", "d_model", "num_heads", "num_enc_blocks", "num_dec_blocks",
                    "ffn_hidden", "max_seq_len", "batch_tokens", "max_piece_len"):
            if r.args.get(key) is not None:
                r.args[key] = int(r.args[key])
        for key in ("lr", "corruption_rate", "mean_span_len", "capacity_factor"):
            if r.args.get(key) is not None:
                r.args[key] = float(r.args[key])
        if r.args.get("freeze") is not None:
            r.args["freeze"] = str(r.args["freeze"]).lower() in ("1", "true", "yes")
        return COMMANDS[args.command](r)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - defensive
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
