"""Sparse word-expert layer: parameter pool, hierarchical dispatch and gradients.

Routing is fixed: a token's routing id fully determines its bucket, block and
expert, so dispatch is a pure function of the plan and the id sequence. Each
assigned token is processed by exactly one small two-matrix FFN; bypassed,
dropped and deactivated tokens produce zero output and ride the transformer's
residual path. Expert outputs are never rescaled by a router confidence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .bucketing import BucketPlan

BYPASS_ID = -1  # routing id that forces bypass (used for padding positions)

STATUS_ASSIGNED = 0
STATUS_BYPASSED = 1
STATUS_DROPPED = 2

_GELU_C0 = float(np.sqrt(2.0 / np.pi))
_GELU_C1 = 0.044715


def gelu(x: np.ndarray) -> np.ndarray:
    """Tanh-form GELU."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C0 * (x + _GELU_C1 * x * x * x)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C0 * (x + _GELU_C1 * x * x * x))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * x * x)


def act_forward(z: np.ndarray, kind: str) -> tuple[np.ndarray, np.ndarray | None]:
    """Activation value plus the cached tanh term reused by :func:`act_backward`."""
    if kind == "linear":
        return z, None
    t = np.tanh(_GELU_C0 * (z + _GELU_C1 * z * z * z))
    return 0.5 * z * (1.0 + t), t


def act_backward(dh: np.ndarray, z: np.ndarray, t: np.ndarray | None, kind: str) -> np.ndarray:
    if kind == "linear":
        return dh
    return dh * (0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * z * z))


class ExpertPool:
    """Shared storage of all expert parameters, addressed by (bucket, block, expert).

    Each expert is a two-matrix FFN: ``y = act(x @ w_in) @ w_out`` with
    per-bucket hidden widths from the plan. ``activation`` is "gelu" for
    training; "linear" exists solely for identity-style tests. The
    deactivation mask zeroes the layer output for selected routing ids.
    """

    def __init__(
        self,
        plan: BucketPlan,
        d_model: int,
        rng: np.random.Generator,
        dtype: np.dtype = np.float32,
        activation: str = "gelu",
        prefix: str = "experts",
    ):
        if activation not in ("gelu", "linear"):
            raise ValueError(f"unknown activation {activation!r}")
        self.plan = plan
        self.d_model = d_model
        self.dtype = np.dtype(dtype)
        self.activation = activation
        self.prefix = prefix
        self.frozen = False
        self.deactivation_mask = np.zeros(plan.num_routing_ids, dtype=bool)
        self.w_in: list[np.ndarray] = []
        self.w_out: list[np.ndarray] = []
        for shape in plan.shapes:
            e, h = shape.total_experts, shape.expert_hidden_dim
            scale_in = 1.0 / np.sqrt(d_model)
            scale_out = 1.0 / np.sqrt(h)
            self.w_in.append((rng.standard_normal((e, d_model, h)) * scale_in).astype(self.dtype))
            self.w_out.append((rng.standard_normal((e, h, d_model)) * scale_out).astype(self.dtype))

    def named_params(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for b in range(len(self.w_in)):
            out[f"{self.prefix}.b{b}.w_in"] = self.w_in[b]
            out[f"{self.prefix}.b{b}.w_out"] = self.w_out[b]
        return out

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        for b in range(len(self.w_in)):
            self.w_in[b] = params[f"{self.prefix}.b{b}.w_in"]
            self.w_out[b] = params[f"{self.prefix}.b{b}.w_out"]


def set_deactivation(pool: ExpertPool, predicate: Callable[[int], bool]) -> None:
    """Update the mask so ids satisfying the predicate produce zero output."""
    pool.deactivation_mask = np.fromiter(
        (bool(predicate(rid)) for rid in range(pool.plan.num_routing_ids)),
        dtype=bool,
        count=pool.plan.num_routing_ids,
    )


def clear_deactivation(pool: ExpertPool) -> None:
    pool.deactivation_mask = np.zeros(pool.plan.num_routing_ids, dtype=bool)


@dataclass
class DispatchPlan:
    """Per-position dispatch outcome plus per-expert slot occupancy.

    ``status`` is assigned/bypassed/dropped per position; assigned positions
    carry (bucket, block, expert, slot). ``groups`` lists the assigned
    positions per occupied expert in deterministic (bucket, expert, slot)
    order for vectorized processing.
    """

    routing_ids: np.ndarray
    status: np.ndarray
    bucket: np.ndarray
    block: np.ndarray
    expert: np.ndarray
    slot: np.ndarray
    occupancy: list[np.ndarray]
    groups: list[tuple[int, int, np.ndarray]] = field(repr=False)

    @property
    def num_tokens(self) -> int:
        return len(self.routing_ids)

    @property
    def assigned_count(self) -> int:
        return int((self.status == STATUS_ASSIGNED).sum())

    @property
    def bypass_count(self) -> int:
        return int((self.status == STATUS_BYPASSED).sum())

    @property
    def drop_count(self) -> int:
        return int((self.status == STATUS_DROPPED).sum())


def route(plan: BucketPlan, routing_ids: np.ndarray | list[int]) -> DispatchPlan:
    """Resolve each token to its expert and capacity slot.

    Hierarchy: routing id -> frequency bucket -> block -> expert, all fixed by
    the plan; slots fill first-come in sequence order and overflow tokens are
    dropped (recorded, not an error). Ids below the bypass rank and the
    ``BYPASS_ID`` marker are bypassed.
    """
    rids = np.asarray(routing_ids, dtype=np.int64)
    n = len(rids)
    status = np.full(n, STATUS_ASSIGNED, dtype=np.int8)
    bucket = np.full(n, -1, dtype=np.int32)
    block = np.full(n, -1, dtype=np.int32)
    expert = np.full(n, -1, dtype=np.int32)
    slot = np.full(n, -1, dtype=np.int32)
    occupancy = [np.zeros(s.total_experts, dtype=np.int64) for s in plan.shapes]
    grouped: dict[tuple[int, int], list[int]] = {}

    for pos in range(n):
        rid = int(rids[pos])
        if rid == BYPASS_ID:
            status[pos] = STATUS_BYPASSED
            continue
        resolved = plan.expert_of_id(rid)
        if resolved is None:
            status[pos] = STATUS_BYPASSED
            continue
        b, blk, e = resolved
        cap = plan.shapes[b].capacity_per_expert
        occ = occupancy[b]
        if occ[e] >= cap:
            status[pos] = STATUS_DROPPED
            bucket[pos], block[pos], expert[pos] = b, blk, e
            continue
        bucket[pos], block[pos], expert[pos] = b, blk, e
        slot[pos] = occ[e]
        occ[e] += 1
        grouped.setdefault((b, e), []).append(pos)

    groups = [
        (b, e, np.asarray(positions, dtype=np.int64))
        for (b, e), positions in sorted(grouped.items())
    ]
    return DispatchPlan(
        routing_ids=rids,
        status=status,
        bucket=bucket,
        block=block,
        expert=expert,
        slot=slot,
        occupancy=occupancy,
        groups=groups,
    )


def forward(
    pool: ExpertPool, dp: DispatchPlan, x: np.ndarray
) -> tuple[np.ndarray, list[tuple]]:
    """Apply each assigned token's expert; everyone else gets exact zeros.

    Returns the layer output and a per-expert cache for the backward pass.
    Groups are processed in a fixed order so results are bit-reproducible.
    """
    if x.shape[0] != dp.num_tokens:
        raise ValueError(f"{x.shape[0]} representations for {dp.num_tokens} dispatched tokens")
    if x.shape[1] != pool.d_model:
        raise ValueError(f"representation width {x.shape[1]} != d_model {pool.d_model}")
    y = np.zeros_like(x)
    cache: list[tuple] = []
    mask = pool.deactivation_mask
    for b, e, positions in dp.groups:
        keep = positions[~mask[dp.routing_ids[positions]]]
        if len(keep) == 0:
            continue
        xs = x[keep]
        z = xs @ pool.w_in[b][e]
        h, t = act_forward(z, pool.activation)
        y[keep] = h @ pool.w_out[b][e]
        cache.append((b, e, keep, xs, z, t, h))
    return y, cache


def backward(
    pool: ExpertPool,
    dp: DispatchPlan,
    cache: list[tuple],
    dy: np.ndarray,
) -> tuple[np.ndarray, dict[str, np.ndarray] | None]:
    """Exact gradients of :func:`forward`.

    Returns the gradient w.r.t. the inputs and, unless the pool is frozen,
    per-bucket parameter gradients (accumulated across experts).
    """
    dx = np.zeros_like(dy)
    grads: dict[str, np.ndarray] | None = None
    if not pool.frozen:
        grads = {
            name: np.zeros_like(arr) for name, arr in pool.named_params().items()
        }
    for b, e, keep, xs, z, t, h in cache:
        g = dy[keep]
        dh = g @ pool.w_out[b][e].T
        dz = act_backward(dh, z, t, pool.activation)
        dx[keep] = dz @ pool.w_in[b][e].T
        if grads is not None:
            grads[f"{pool.prefix}.b{b}.w_out"][e] += h.T @ g
            grads[f"{pool.prefix}.b{b}.w_in"][e] += xs.T @ dz
    return dx, grads


@dataclass
class CommReport:
    """All-to-all accounting: traffic is counted between blocks, not experts."""

    num_blocks_touched: int
    tokens_sent_per_block: dict[tuple[int, int], int]
    total_all2all_payload: int  # assigned tokens times d_model
    drop_count: int
    bypass_count: int


def comm_cost(dp: DispatchPlan, d_model: int) -> CommReport:
    """Count dispatch traffic; only tokens holding an assigned slot are payload."""
    per_block: dict[tuple[int, int], int] = {}
    assigned = dp.status == STATUS_ASSIGNED
    for b, blk in zip(dp.bucket[assigned], dp.block[assigned]):
        key = (int(b), int(blk))
        per_block[key] = per_block.get(key, 0) + 1
    return CommReport(
        num_blocks_touched=len(per_block),
        tokens_sent_per_block=per_block,
        total_all2all_payload=int(assigned.sum()) * d_model,
        drop_count=dp.drop_count,
        bypass_count=dp.bypass_count,
    )
