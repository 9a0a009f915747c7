"""Binary checkpoint format: structured-text header plus little-endian f32 payload.

The header carries the model config, the bucket plan, sha256 hashes of both
vocabularies and one descriptor line per tensor (dtype, shape, byte offset).
Serialization is canonical, so save -> load -> save is byte-identical, and a
vocabulary hash mismatch on load is an error.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bucketing import BucketPlan
from .configio import format_kv, parse_kv
from .model import Model, ModelConfig
from .routing import RoutingVocab
from .subword import SubwordVocab

MAGIC = "wordexperts-checkpoint-v1"
PAYLOAD_MARKER = b"\n[payload]\n"


class CheckpointError(ValueError):
    """Raised for malformed checkpoints or vocabulary mismatches."""


def vocab_sha(dv: SubwordVocab) -> str:
    payload = "\n".join([str(dv.reserved)] + dv.pieces).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()


def routing_sha(rv: RoutingVocab) -> str:
    rows = [str(rv.knowledge_threshold)] + [
        f"{w}\t{rv.freq.get(rv.routing_id[w], 0)}\t{rv.routing_id[w]}" for w in rv.entries
    ]
    return hashlib.sha256("\n".join(rows).encode("utf-8")).hexdigest()


def save_checkpoint(
    path: str | Path,
    params: dict[str, np.ndarray],
    cfg: ModelConfig,
    plan: BucketPlan | None,
    vocab_hashes: dict[str, str],
) -> None:
    tensors: dict[str, str] = {}
    blobs: list[bytes] = []
    offset = 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        shape = ",".join(str(s) for s in arr.shape)
        tensors[name] = f"f4 {shape} {offset}"
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    sections: dict[str, dict[str, str]] = {
        "checkpoint": {"magic": MAGIC},
        "config": cfg.to_kv(),
        "vocab": dict(vocab_hashes),
        "tensors": tensors,
    }
    if plan is not None:
        sections["plan"] = plan.to_kv()
    header = format_kv(sections).encode("utf-8")
    Path(path).write_bytes(header + PAYLOAD_MARKER + b"".join(blobs))


@dataclass
class LoadedCheckpoint:
    params: dict[str, np.ndarray]
    cfg: ModelConfig
    plan: BucketPlan | None
    vocab_hashes: dict[str, str]


def load_checkpoint(path: str | Path) -> LoadedCheckpoint:
    raw = Path(path).read_bytes()
    sep = raw.find(PAYLOAD_MARKER)
    if sep < 0:
        raise CheckpointError(f"{path}: missing payload marker")
    sections = parse_kv(raw[:sep].decode("utf-8"))
    if sections.get("checkpoint", {}).get("magic") != MAGIC:
        raise CheckpointError(f"{path}: bad or missing magic")
    payload = raw[sep + len(PAYLOAD_MARKER) :]
    params: dict[str, np.ndarray] = {}
    for name, desc in sections["tensors"].items():
        dtype_s, shape_s, offset_s = desc.split(" ")
        if dtype_s != "f4":
            raise CheckpointError(f"{path}: unsupported dtype {dtype_s} for {name}")
        shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
        count = int(np.prod(shape)) if shape else 1
        offset = int(offset_s)
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape)
        params[name] = arr.copy()
    cfg = ModelConfig.from_kv(sections["config"])
    plan = BucketPlan.from_kv(sections["plan"]) if "plan" in sections else None
    return LoadedCheckpoint(
        params=params, cfg=cfg, plan=plan, vocab_hashes=dict(sections["vocab"])
    )


def save_model(path: str | Path, model: Model, dv: SubwordVocab, rv: RoutingVocab) -> None:
    save_checkpoint(
        path,
        model.params,
        model.cfg,
        model.plan,
        {"default_sha256": vocab_sha(dv), "routing_sha256": routing_sha(rv)},
    )


def load_model(
    path: str | Path,
    dv: SubwordVocab,
    rv: RoutingVocab,
    table=None,
    dtype: np.dtype = np.float32,
) -> Model:
    """Rebuild a model from a checkpoint, verifying it matches the given vocabularies."""
    loaded = load_checkpoint(path)
    if loaded.vocab_hashes.get("default_sha256") != vocab_sha(dv):
        raise CheckpointError(f"{path}: default vocabulary hash mismatch")
    if loaded.vocab_hashes.get("routing_sha256") != routing_sha(rv):
        raise CheckpointError(f"{path}: routing vocabulary hash mismatch")
    model = Model(loaded.cfg, loaded.plan, table, seed=0, dtype=dtype)
    missing = set(model.params) - set(loaded.params)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    try:
        model.load_params(loaded.params)
    except Exception as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return model
