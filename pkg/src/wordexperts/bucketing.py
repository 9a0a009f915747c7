"""Frequency bucketing of routing ids and per-bucket expert shape planning.

Routing ids are ranked by corpus frequency, the most frequent few are
bypassed entirely, and the rest are split into k buckets of approximately
equal frequency mass. Each bucket gets its own expert block grid, expert
width and per-expert capacity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .routing import RoutingAssignment, RoutingHashTable, assign_routing_ids
from .subword import SubwordVocab, encode

DEFAULT_BYPASS_TOP_N = 16
DEFAULT_CAPACITY_FACTOR = 1.25


class PlanError(ValueError):
    """Raised for invalid bucket plans or shape specifications."""


@dataclass
class FrequencyTable:
    """Routing-id occurrence counts over a corpus sample."""

    counts: np.ndarray  # int64, indexed by routing id

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def num_ids(self) -> int:
        return len(self.counts)


def count_frequencies(
    table: RoutingHashTable, corpus: list[str], dv: SubwordVocab, num_routing_ids: int
) -> FrequencyTable:
    """Encode each line, assign routing ids, and accumulate per-id counts."""
    counts = np.zeros(num_routing_ids, dtype=np.int64)
    for line in corpus:
        assignment = assign_routing_ids(table, encode(dv, line))
        for rid in assignment.routing_ids:
            counts[rid] += 1
    return FrequencyTable(counts=counts)


@dataclass
class BucketBoundaries:
    """Partition of the frequency-ranked id space into bypass range plus k buckets.

    ``ranked_ids[r]`` is the routing id at frequency rank r (descending count,
    ties by ascending id). ``cutoffs`` has k+1 entries; bucket b covers ranks
    [cutoffs[b], cutoffs[b+1]) and cutoffs[0] equals the bypass count.
    """

    cutoffs: list[int]
    ranked_ids: np.ndarray
    bypass_top_n: int

    @property
    def k(self) -> int:
        return len(self.cutoffs) - 1

    def bucket_sizes(self) -> list[int]:
        return [self.cutoffs[b + 1] - self.cutoffs[b] for b in range(self.k)]


def split_buckets(
    ft: FrequencyTable, k: int, bypass_top_n: int, by_count: bool = False
) -> BucketBoundaries:
    """Split routing ids into k buckets of approximately equal frequency mass.

    Ids are ranked by descending count; the top ``bypass_top_n`` are excluded
    from every bucket. The greedy rule closes a bucket once its mass reaches
    (remaining mass) / (remaining buckets), which is deterministic and keeps
    buckets contiguous in rank space. ``by_count=True`` splits by id count
    instead of mass.
    """
    if k < 1:
        raise PlanError(f"bucket count must be >= 1, got {k}")
    if bypass_top_n < 0:
        raise PlanError("bypass_top_n must be non-negative")
    n = ft.num_ids
    if n - bypass_top_n < k:
        raise PlanError(f"{n - bypass_top_n} bucketable ids cannot fill {k} buckets")

    order = np.lexsort((np.arange(n), -ft.counts))
    ranked_ids = order.astype(np.int64)
    masses = ft.counts[ranked_ids].astype(np.float64)

    cutoffs = [bypass_top_n]
    start = bypass_top_n
    remaining_mass = float(masses[start:].sum())
    if by_count or remaining_mass == 0.0:
        # degenerate zero-mass samples fall back to an equal-count split
        per = (n - bypass_top_n) // k
        extra = (n - bypass_top_n) % k
        for b in range(k):
            start += per + (1 if b < extra else 0)
            cutoffs.append(start)
        return BucketBoundaries(cutoffs=cutoffs, ranked_ids=ranked_ids, bypass_top_n=bypass_top_n)

    for b in range(k - 1):
        buckets_left = k - b
        target = remaining_mass / buckets_left
        mass = 0.0
        end = start
        max_end = n - (buckets_left - 1)  # leave at least one id per later bucket
        while end < max_end:
            mass += float(masses[end])
            end += 1
            if mass >= target:
                break
        if end == start:
            end = start + 1
            mass = float(masses[start])
        cutoffs.append(end)
        remaining_mass -= mass
        start = end
    cutoffs.append(n)
    return BucketBoundaries(cutoffs=cutoffs, ranked_ids=ranked_ids, bypass_top_n=bypass_top_n)


@dataclass
class BucketShape:
    """Block/expert grid and expert width for one frequency bucket."""

    num_blocks: int
    experts_per_block: int
    expert_hidden_dim: int
    capacity_per_expert: int

    @property
    def total_experts(self) -> int:
        return self.num_blocks * self.experts_per_block


@dataclass
class BucketPlan:
    """Full dispatch plan: rank permutation, bucket cutoffs and per-bucket shapes."""

    cutoffs: list[int]
    ranked_ids: np.ndarray
    bypass_top_n: int
    shapes: list[BucketShape]
    mass_fractions: list[float]  # per-bucket share of total routing-id mass
    bypass_mass_fraction: float
    id_rank: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if len(self.shapes) != self.k:
            raise PlanError(f"{len(self.shapes)} shapes for {self.k} buckets")
        for b, s in enumerate(self.shapes):
            if s.num_blocks < 1 or s.experts_per_block < 1:
                raise PlanError(f"bucket {b} needs at least one block and one expert per block")
            if s.expert_hidden_dim < 1 or s.capacity_per_expert < 1:
                raise PlanError(f"bucket {b} needs positive hidden dim and capacity")
        self.id_rank = np.empty(len(self.ranked_ids), dtype=np.int64)
        self.id_rank[self.ranked_ids] = np.arange(len(self.ranked_ids))

    @property
    def k(self) -> int:
        return len(self.cutoffs) - 1

    @property
    def num_routing_ids(self) -> int:
        return len(self.ranked_ids)

    def bucket_of_rank(self, rank: int) -> int:
        for b in range(self.k):
            if self.cutoffs[b] <= rank < self.cutoffs[b + 1]:
                return b
        raise PlanError(f"rank {rank} outside bucket range")

    def expert_of_id(self, rid: int) -> tuple[int, int, int] | None:
        """Resolve routing id to (bucket, block, expert-index-in-bucket); None if bypassed.

        The block is ``rank_within_bucket mod num_blocks`` so block assignment,
        and hence all-to-all traffic, is independent of experts_per_block; the
        expert within the block walks ``rank_within_bucket div num_blocks``.
        """
        rank = int(self.id_rank[rid])
        if rank < self.bypass_top_n:
            return None
        b = self.bucket_of_rank(rank)
        s = self.shapes[b]
        within = rank - self.cutoffs[b]
        block = within % s.num_blocks
        expert_in_block = (within // s.num_blocks) % s.experts_per_block
        return b, block, block * s.experts_per_block + expert_in_block

    def to_kv(self) -> dict[str, str]:
        kv = {
            "k": str(self.k),
            "bypass_top_n": str(self.bypass_top_n),
            "cutoffs": ",".join(str(c) for c in self.cutoffs),
            "ranked_ids": ",".join(str(i) for i in self.ranked_ids.tolist()),
            "mass_fractions": ",".join(repr(m) for m in self.mass_fractions),
            "bypass_mass_fraction": repr(self.bypass_mass_fraction),
        }
        for b, s in enumerate(self.shapes):
            kv[f"bucket{b}.num_blocks"] = str(s.num_blocks)
            kv[f"bucket{b}.experts_per_block"] = str(s.experts_per_block)
            kv[f"bucket{b}.expert_hidden_dim"] = str(s.expert_hidden_dim)
            kv[f"bucket{b}.capacity_per_expert"] = str(s.capacity_per_expert)
        return kv

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "BucketPlan":
        k = int(kv["k"])
        shapes = [
            BucketShape(
                num_blocks=int(kv[f"bucket{b}.num_blocks"]),
                experts_per_block=int(kv[f"bucket{b}.experts_per_block"]),
                expert_hidden_dim=int(kv[f"bucket{b}.expert_hidden_dim"]),
                capacity_per_expert=int(kv[f"bucket{b}.capacity_per_expert"]),
            )
            for b in range(k)
        ]
        return cls(
            cutoffs=[int(c) for c in kv["cutoffs"].split(",")],
            ranked_ids=np.array([int(i) for i in kv["ranked_ids"].split(",")], dtype=np.int64),
            bypass_top_n=int(kv["bypass_top_n"]),
            shapes=shapes,
            mass_fractions=[float(m) for m in kv["mass_fractions"].split(",")],
            bypass_mass_fraction=float(kv["bypass_mass_fraction"]),
        )

    def save(self, path: str | Path) -> None:
        from .configio import write_kv

        write_kv(path, {"plan": self.to_kv()})

    @classmethod
    def load(cls, path: str | Path) -> "BucketPlan":
        from .configio import read_kv

        return cls.from_kv(read_kv(path)["plan"])


@dataclass
class ShapeSpec:
    """Per-bucket shape request; capacity may be left to derive from frequencies."""

    num_blocks: int
    experts_per_block: int
    expert_hidden_dim: int
    capacity_per_expert: int | None = None


def _derive_capacity(
    bounds: BucketBoundaries,
    bucket: int,
    shape: ShapeSpec,
    ft: FrequencyTable,
    batch_tokens: int,
    factor: float,
) -> int:
    """Capacity = ceil(factor * expected tokens per batch routed to the busiest expert)."""
    start, end = bounds.cutoffs[bucket], bounds.cutoffs[bucket + 1]
    total_experts = shape.num_blocks * shape.experts_per_block
    masses = ft.counts[bounds.ranked_ids[start:end]].astype(np.float64)
    per_expert = np.zeros(total_experts)
    for within, m in enumerate(masses):
        block = within % shape.num_blocks
        expert_in_block = (within // shape.num_blocks) % shape.experts_per_block
        per_expert[block * shape.experts_per_block + expert_in_block] += m
    total = float(ft.counts.sum())
    if total == 0.0:
        return 1
    expected = per_expert.max() / total * batch_tokens
    return max(1, math.ceil(factor * expected))


def make_plan(
    bounds: BucketBoundaries,
    shape_spec: list[ShapeSpec],
    ft: FrequencyTable | None = None,
    batch_tokens: int = 1024,
    capacity_factor: float = DEFAULT_CAPACITY_FACTOR,
) -> BucketPlan:
    """Validate shapes against boundaries and assemble the bucket plan.

    Capacities left unset in the spec are derived from the frequency table as
    ceil(capacity_factor * expected tokens per batch for the busiest expert of
    the bucket), floored at 1.
    """
    if len(shape_spec) != bounds.k:
        raise PlanError(f"{len(shape_spec)} shapes for {bounds.k} buckets")
    shapes: list[BucketShape] = []
    for b, spec in enumerate(shape_spec):
        if spec.num_blocks < 1 or spec.experts_per_block < 1:
            raise PlanError(f"bucket {b}: blocks and experts per block must be positive")
        cap = spec.capacity_per_expert
        if cap is None:
            if ft is None:
                raise PlanError(f"bucket {b}: capacity unset and no frequency table given")
            cap = _derive_capacity(bounds, b, spec, ft, batch_tokens, capacity_factor)
        shapes.append(
            BucketShape(
                num_blocks=spec.num_blocks,
                experts_per_block=spec.experts_per_block,
                expert_hidden_dim=spec.expert_hidden_dim,
                capacity_per_expert=cap,
            )
        )
    if ft is not None and ft.total > 0:
        masses = ft.counts[bounds.ranked_ids].astype(np.float64)
        total = float(masses.sum())
        mass_fractions = [
            float(masses[bounds.cutoffs[b] : bounds.cutoffs[b + 1]].sum() / total)
            for b in range(bounds.k)
        ]
        bypass_mass = float(masses[: bounds.bypass_top_n].sum() / total)
    else:
        mass_fractions = [0.0] * bounds.k
        bypass_mass = 0.0
    return BucketPlan(
        cutoffs=list(bounds.cutoffs),
        ranked_ids=bounds.ranked_ids.copy(),
        bypass_top_n=bounds.bypass_top_n,
        shapes=shapes,
        mass_fractions=mass_fractions,
        bypass_mass_fraction=bypass_mass,
    )


def desk_default_shapes(scale: int = 1) -> list[ShapeSpec]:
    """Four-bucket desk configuration: {4,4,4,4} blocks, {1,1,2,8} experts per
    block, hidden dims {32,32,16,8}, mirroring the wide-to-narrow progression
    of the full-scale bucket tables."""
    return [
        ShapeSpec(num_blocks=4, experts_per_block=1, expert_hidden_dim=32 * scale),
        ShapeSpec(num_blocks=4, experts_per_block=1, expert_hidden_dim=32 * scale),
        ShapeSpec(num_blocks=4, experts_per_block=2, expert_hidden_dim=16 * scale),
        ShapeSpec(num_blocks=4, experts_per_block=8, expert_hidden_dim=8 * scale),
    ]
