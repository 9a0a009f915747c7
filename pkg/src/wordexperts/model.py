"""Toy encoder-decoder transformer with word-expert layers and manual gradients.

Pre-norm blocks, RMS normalization, sinusoidal positions, GELU feed-forwards.
Selected blocks replace their FFN with the sparse word-expert layer; expert
parameters are shared across all those positions by default so the layer acts
like one memory visited at several depths. Everything is plain numpy with
hand-written backward passes, which keeps training bit-reproducible and lets
tests compare every gradient against finite differences.

Parameters live as named views into one flat buffer; gradients mirror that
layout, so the optimizer runs a handful of large vectorized updates per step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import expert_layer as xl
from .bucketing import BucketPlan
from .data import IGNORE_TARGET, ModelBatch
from .expert_layer import ExpertPool, act_backward, act_forward, route
from .routing import RoutingHashTable, assign_routing_ids
from .subword import EOS_ID, PAD_ID

NEG_INF = -1e9  # additive attention mask value, safe in float32


class ModelError(ValueError):
    """Raised for invalid model configuration or inputs."""


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes non-finite."""


@dataclass
class ModelConfig:
    d_model: int = 64
    num_heads: int = 4
    num_enc_blocks: int = 6
    num_dec_blocks: int = 6
    ffn_hidden: int = 256
    mowe_positions_enc: list[int] = field(default_factory=lambda: [2, 4])
    mowe_positions_dec: list[int] = field(default_factory=lambda: [2, 4])
    share_experts: bool = True
    default_vocab_size: int = 512
    routing_vocab_size: int = 0
    max_seq_len: int = 64

    def validate(self) -> None:
        if self.d_model % self.num_heads != 0:
            raise ModelError(f"d_model {self.d_model} not divisible by {self.num_heads} heads")
        if any(p < 0 or p >= self.num_enc_blocks for p in self.mowe_positions_enc):
            raise ModelError("encoder expert positions out of range")
        if any(p < 0 or p >= self.num_dec_blocks for p in self.mowe_positions_dec):
            raise ModelError("decoder expert positions out of range")
        if len(set(self.mowe_positions_enc)) != len(self.mowe_positions_enc):
            raise ModelError("duplicate encoder expert positions")
        if len(set(self.mowe_positions_dec)) != len(self.mowe_positions_dec):
            raise ModelError("duplicate decoder expert positions")
        if self.d_model < 1 or self.ffn_hidden < 1 or self.max_seq_len < 1:
            raise ModelError("dimensions must be positive")
        if self.default_vocab_size < 1:
            raise ModelError("default_vocab_size must be positive")

    def to_kv(self) -> dict[str, str]:
        return {
            "d_model": str(self.d_model),
            "num_heads": str(self.num_heads),
            "num_enc_blocks": str(self.num_enc_blocks),
            "num_dec_blocks": str(self.num_dec_blocks),
            "ffn_hidden": str(self.ffn_hidden),
            "mowe_positions_enc": ",".join(str(p) for p in self.mowe_positions_enc),
            "mowe_positions_dec": ",".join(str(p) for p in self.mowe_positions_dec),
            "share_experts": str(self.share_experts),
            "default_vocab_size": str(self.default_vocab_size),
            "routing_vocab_size": str(self.routing_vocab_size),
            "max_seq_len": str(self.max_seq_len),
        }

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "ModelConfig":
        def ints(s: str) -> list[int]:
            return [int(x) for x in s.split(",")] if s else []

        return cls(
            d_model=int(kv["d_model"]),
            num_heads=int(kv["num_heads"]),
            num_enc_blocks=int(kv["num_enc_blocks"]),
            num_dec_blocks=int(kv["num_dec_blocks"]),
            ffn_hidden=int(kv["ffn_hidden"]),
            mowe_positions_enc=ints(kv["mowe_positions_enc"]),
            mowe_positions_dec=ints(kv["mowe_positions_dec"]),
            share_experts=kv["share_experts"] == "True",
            default_vocab_size=int(kv["default_vocab_size"]),
            routing_vocab_size=int(kv["routing_vocab_size"]),
            max_seq_len=int(kv["max_seq_len"]),
        )


def sinusoid_table(max_len: int, d_model: int, dtype: np.dtype) -> np.ndarray:
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    dim = np.arange(d_model, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2.0 * (dim // 2)) / d_model)
    table = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(dtype)


# ------------------------------------------------------------ layer kernels


def _rmsnorm_f(x: np.ndarray, g: np.ndarray, eps: float = 1e-6):
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * inv * g, (x, inv)


def _rmsnorm_b(dy: np.ndarray, cache, g: np.ndarray):
    x, inv = cache
    d = x.shape[-1]
    proj = np.sum(dy * g * x, axis=-1, keepdims=True)
    dx = dy * g * inv - x * (inv**3) * (proj / d)
    dg = np.sum((dy * x * inv).reshape(-1, d), axis=0)
    return dx, dg


def _softmax(s: np.ndarray) -> np.ndarray:
    m = s.max(axis=-1, keepdims=True)
    e = np.exp(s - m)
    e /= e.sum(axis=-1, keepdims=True)
    return e


def _split_heads(x: np.ndarray, b: int, t: int, num_heads: int) -> np.ndarray:
    return x.reshape(b, t, num_heads, -1).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, dh = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(b, t, h * dh)


def _mha_f(q_in, kv_in, wq, wk, wv, wo, mask, num_heads, self_attn: bool):
    b, tq, d = q_in.shape
    tk = kv_in.shape[1]
    scale = 1.0 / math.sqrt(d // num_heads)
    if self_attn:
        w_qkv = np.concatenate((wq, wk, wv), axis=1)
        qkv = q_in.reshape(-1, d) @ w_qkv
        q = _split_heads(qkv[:, :d], b, tq, num_heads)
        k = _split_heads(qkv[:, d : 2 * d], b, tk, num_heads)
        v = _split_heads(qkv[:, 2 * d :], b, tk, num_heads)
    else:
        q = _split_heads(q_in.reshape(-1, d) @ wq, b, tq, num_heads)
        w_kv = np.concatenate((wk, wv), axis=1)
        kv = kv_in.reshape(-1, d) @ w_kv
        k = _split_heads(kv[:, :d], b, tk, num_heads)
        v = _split_heads(kv[:, d:], b, tk, num_heads)
    s = (q @ k.transpose(0, 1, 3, 2)) * scale
    s += mask
    p = _softmax(s)
    om = _merge_heads(p @ v)
    out = (om.reshape(-1, d) @ wo).reshape(b, tq, d)
    return out, (q_in, kv_in, q, k, v, p, om, scale)


def _mha_b(dout, cache, wq, wk, wv, wo, num_heads, self_attn: bool):
    q_in, kv_in, q, k, v, p, om, scale = cache
    b, tq, d = q_in.shape
    tk = kv_in.shape[1]
    dout2 = dout.reshape(-1, d)
    dwo = om.reshape(-1, d).T @ dout2
    do = _split_heads(dout2 @ wo.T, b, tq, num_heads)
    dp = do @ v.transpose(0, 1, 3, 2)
    dv = p.transpose(0, 1, 3, 2) @ do
    ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True))
    ds *= scale
    dq = _merge_heads(ds @ k).reshape(-1, d)
    dk = _merge_heads(ds.transpose(0, 1, 3, 2) @ q).reshape(-1, d)
    dvm = _merge_heads(dv).reshape(-1, d)
    if self_attn:
        d_qkv = np.concatenate((dq, dk, dvm), axis=1)
        w_qkv = np.concatenate((wq, wk, wv), axis=1)
        dw = q_in.reshape(-1, d).T @ d_qkv
        dwq, dwk, dwv = dw[:, :d], dw[:, d : 2 * d], dw[:, 2 * d :]
        dq_in = (d_qkv @ w_qkv.T).reshape(b, tq, d)
        dkv_in = np.zeros_like(kv_in)
    else:
        dwq = q_in.reshape(-1, d).T @ dq
        dq_in = (dq @ wq.T).reshape(b, tq, d)
        d_kv = np.concatenate((dk, dvm), axis=1)
        w_kv = np.concatenate((wk, wv), axis=1)
        dw = kv_in.reshape(-1, d).T @ d_kv
        dwk, dwv = dw[:, :d], dw[:, d:]
        dkv_in = (d_kv @ w_kv.T).reshape(b, tk, d)
    return dq_in, dkv_in, dwq, dwk, dwv, dwo


def _ffn_f(x, w1, w2, activation: str):
    b, t, d = x.shape
    z = x.reshape(-1, d) @ w1
    h, tcache = act_forward(z, activation)
    return (h @ w2).reshape(b, t, d), (x, z, tcache, h)


def _ffn_b(dy, cache, w1, w2, activation: str):
    x, z, tcache, h = cache
    b, t, d = x.shape
    dy2 = dy.reshape(-1, d)
    dw2 = h.T @ dy2
    dh = dy2 @ w2.T
    dz = act_backward(dh, z, tcache, activation)
    dw1 = x.reshape(-1, d).T @ dz
    return (dz @ w1.T).reshape(b, t, d), dw1, dw2


def _embed_grad(d_embed: np.ndarray, ids: np.ndarray, dx: np.ndarray) -> None:
    """Accumulate embedding gradients via a one-hot matmul (much faster than add.at)."""
    v = d_embed.shape[0]
    flat_ids = ids.reshape(-1)
    dx2 = dx.reshape(len(flat_ids), -1)
    onehot = np.zeros((len(flat_ids), v), dtype=dx2.dtype)
    onehot[np.arange(len(flat_ids)), flat_ids] = 1.0
    d_embed += onehot.T @ dx2


@dataclass
class StepStats:
    tokens_dropped: int
    bypass_fraction: float
    num_target_tokens: int


class Grads:
    """Named gradient views over one flat buffer (mirrors the parameter layout)."""

    def __init__(self, flat: np.ndarray, views: dict[str, np.ndarray]):
        self.flat = flat
        self.views = views

    def __getitem__(self, name: str) -> np.ndarray:
        return self.views[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if value is not self.views[name]:  # in-place += hands back the same view
            self.views[name][...] = value

    def __contains__(self, name: str) -> bool:
        return name in self.views

    def __iter__(self):
        return iter(self.views)

    def keys(self):
        return self.views.keys()

    def items(self):
        return self.views.items()

    def drop(self, names) -> None:
        for name in names:
            self.views.pop(name, None)


class Model:
    """Encoder-decoder transformer whose designated blocks use word experts."""

    def __init__(
        self,
        cfg: ModelConfig,
        plan: BucketPlan | None,
        table: RoutingHashTable | None,
        seed: int = 0,
        dtype: np.dtype = np.float32,
        activation: str = "gelu",
    ):
        cfg.validate()
        if (cfg.mowe_positions_enc or cfg.mowe_positions_dec) and plan is None:
            raise ModelError("expert positions configured but no bucket plan given")
        self.cfg = cfg
        self.plan = plan
        self.table = table
        self.dtype = np.dtype(dtype)
        self.activation = activation
        rng = np.random.default_rng(seed)
        d, h, v = cfg.d_model, cfg.ffn_hidden, cfg.default_vocab_size
        sd = 1.0 / math.sqrt(d)
        sh = 1.0 / math.sqrt(h)

        def mat(rows, cols, scale):
            return (rng.standard_normal((rows, cols)) * scale).astype(self.dtype)

        p: dict[str, np.ndarray] = {}
        p["embed"] = rng.standard_normal((v, d)).astype(self.dtype)
        for i in range(cfg.num_enc_blocks):
            p[f"enc.{i}.att.norm"] = np.ones(d, dtype=self.dtype)
            for w in ("wq", "wk", "wv", "wo"):
                p[f"enc.{i}.att.{w}"] = mat(d, d, sd)
            p[f"enc.{i}.ffn.norm"] = np.ones(d, dtype=self.dtype)
            if i not in cfg.mowe_positions_enc:
                p[f"enc.{i}.ffn.w1"] = mat(d, h, sd)
                p[f"enc.{i}.ffn.w2"] = mat(h, d, sh)
        for i in range(cfg.num_dec_blocks):
            p[f"dec.{i}.sa.norm"] = np.ones(d, dtype=self.dtype)
            for w in ("wq", "wk", "wv", "wo"):
                p[f"dec.{i}.sa.{w}"] = mat(d, d, sd)
            p[f"dec.{i}.ca.norm"] = np.ones(d, dtype=self.dtype)
            for w in ("wq", "wk", "wv", "wo"):
                p[f"dec.{i}.ca.{w}"] = mat(d, d, sd)
            p[f"dec.{i}.ffn.norm"] = np.ones(d, dtype=self.dtype)
            if i not in cfg.mowe_positions_dec:
                p[f"dec.{i}.ffn.w1"] = mat(d, h, sd)
                p[f"dec.{i}.ffn.w2"] = mat(h, d, sh)
        p["enc.norm"] = np.ones(d, dtype=self.dtype)
        p["dec.norm"] = np.ones(d, dtype=self.dtype)
        p["lm_head"] = mat(d, v, sd)

        self.pools: dict[str, ExpertPool] = {}
        self._pool_of: dict[str, ExpertPool] = {}
        tags = [f"enc.{i}" for i in cfg.mowe_positions_enc] + [
            f"dec.{i}" for i in cfg.mowe_positions_dec
        ]
        if tags:
            if cfg.share_experts:
                pool = ExpertPool(plan, d, rng, dtype=self.dtype, activation=activation)
                self.pools["experts"] = pool
                for tag in tags:
                    self._pool_of[tag] = pool
            else:
                for tag in tags:
                    prefix = "experts." + tag.replace(".", "")
                    pool = ExpertPool(
                        plan, d, rng, dtype=self.dtype, activation=activation, prefix=prefix
                    )
                    self.pools[prefix] = pool
                    self._pool_of[tag] = pool
            for pool in self.pools.values():
                p.update(pool.named_params())

        # repack every parameter as a view into one flat buffer
        self._layout: dict[str, tuple[int, int, tuple[int, ...]]] = {}
        offset = 0
        for name, arr in p.items():
            self._layout[name] = (offset, offset + arr.size, arr.shape)
            offset += arr.size
        self.flat_params = np.empty(offset, dtype=self.dtype)
        self.params: dict[str, np.ndarray] = {}
        for name, arr in p.items():
            start, end, shape = self._layout[name]
            view = self.flat_params[start:end].reshape(shape)
            view[...] = arr
            self.params[name] = view
        for pool in self.pools.values():
            pool.set_params(self.params)

        self.pos_table = sinusoid_table(cfg.max_seq_len, d, self.dtype)
        self._causal_masks: dict[int, np.ndarray] = {}

    # ---------------------------------------------------------------- admin

    @property
    def expert_param_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("experts")]

    def expert_mask(self) -> np.ndarray:
        """Flat 0/1 mask that is zero exactly on expert parameters."""
        mask = np.ones_like(self.flat_params)
        for name in self.expert_param_names:
            start, end, _ = self._layout[name]
            mask[start:end] = 0.0
        return mask

    def set_frozen(self, frozen: bool) -> None:
        for pool in self.pools.values():
            pool.frozen = frozen

    def grad_buffer(self) -> Grads:
        flat = np.zeros_like(self.flat_params)
        views = {
            name: flat[start:end].reshape(shape)
            for name, (start, end, shape) in self._layout.items()
        }
        return Grads(flat, views)

    def load_params(self, arrays: dict[str, np.ndarray]) -> None:
        """Copy arrays into the flat buffer views; shapes must match exactly."""
        for name, arr in arrays.items():
            if name not in self.params:
                raise ModelError(f"unexpected tensor {name}")
            if self.params[name].shape != tuple(arr.shape):
                raise ModelError(
                    f"tensor {name}: shape {arr.shape} != {self.params[name].shape}"
                )
            np.copyto(self.params[name], arr.astype(self.dtype))

    def _causal(self, td: int) -> np.ndarray:
        if td not in self._causal_masks:
            self._causal_masks[td] = np.triu(
                np.full((td, td), NEG_INF, dtype=self.dtype), k=1
            )[None, None, :, :]
        return self._causal_masks[td]

    # -------------------------------------------------------------- forward

    def _masks(self, batch: ModelBatch):
        te = batch.enc_ids.shape[1]
        td = batch.dec_in_ids.shape[1]
        enc_valid = np.arange(te)[None, :] < batch.enc_len[:, None]
        dec_valid = np.arange(td)[None, :] < batch.dec_len[:, None]
        enc_mask = np.where(enc_valid, 0.0, NEG_INF).astype(self.dtype)[:, None, None, :]
        dec_key = np.where(dec_valid, 0.0, NEG_INF).astype(self.dtype)[:, None, None, :]
        return enc_mask, dec_key + self._causal(td)

    def _block_f(self, stream: str, i: int, x, mask, dp, enc_out=None, enc_mask=None):
        p = self.params
        cache: dict = {}
        if stream == "enc":
            n1, cache["n1"] = _rmsnorm_f(x, p[f"enc.{i}.att.norm"])
            att, cache["att"] = _mha_f(
                n1, n1, *(p[f"enc.{i}.att.{w}"] for w in ("wq", "wk", "wv", "wo")),
                mask, self.cfg.num_heads, True,
            )
            x = x + att
        else:
            n1, cache["n1"] = _rmsnorm_f(x, p[f"dec.{i}.sa.norm"])
            att, cache["sa"] = _mha_f(
                n1, n1, *(p[f"dec.{i}.sa.{w}"] for w in ("wq", "wk", "wv", "wo")),
                mask, self.cfg.num_heads, True,
            )
            x = x + att
            n2, cache["n2"] = _rmsnorm_f(x, p[f"dec.{i}.ca.norm"])
            catt, cache["ca"] = _mha_f(
                n2, enc_out, *(p[f"dec.{i}.ca.{w}"] for w in ("wq", "wk", "wv", "wo")),
                enc_mask, self.cfg.num_heads, False,
            )
            x = x + catt
        nf, cache["nf"] = _rmsnorm_f(x, p[f"{stream}.{i}.ffn.norm"])
        tag = f"{stream}.{i}"
        if tag in self._pool_of:
            b, t, d = nf.shape
            y_flat, cache["mowe"] = xl.forward(self._pool_of[tag], dp, nf.reshape(b * t, d))
            f = y_flat.reshape(b, t, d)
        else:
            f, cache["ffn"] = _ffn_f(
                nf, p[f"{stream}.{i}.ffn.w1"], p[f"{stream}.{i}.ffn.w2"], self.activation
            )
        return x + f, cache

    def _embed(self, ids: np.ndarray) -> np.ndarray:
        t = ids.shape[1]
        if t > self.cfg.max_seq_len:
            raise ModelError(f"sequence length {t} exceeds max_seq_len {self.cfg.max_seq_len}")
        return self.params["embed"][ids] + self.pos_table[:t]

    def forward(self, batch: ModelBatch):
        """Full forward pass; returns (loss, logits, cache) with loss as float."""
        enc_mask, dec_mask = self._masks(batch)
        dp_enc = dp_dec = None
        if self.cfg.mowe_positions_enc:
            dp_enc = route(self.plan, batch.enc_rids.reshape(-1))
        if self.cfg.mowe_positions_dec:
            dp_dec = route(self.plan, batch.dec_rids.reshape(-1))

        cache: dict = {"batch": batch, "enc_mask": enc_mask, "dec_mask": dec_mask,
                       "dp_enc": dp_enc, "dp_dec": dp_dec, "enc_blocks": [], "dec_blocks": []}
        x = self._embed(batch.enc_ids)
        for i in range(self.cfg.num_enc_blocks):
            x, c = self._block_f("enc", i, x, enc_mask, dp_enc)
            cache["enc_blocks"].append(c)
        enc_out, cache["enc_norm"] = _rmsnorm_f(x, self.params["enc.norm"])
        cache["enc_out"] = enc_out

        y = self._embed(batch.dec_in_ids)
        for i in range(self.cfg.num_dec_blocks):
            y, c = self._block_f("dec", i, y, dec_mask, dp_dec, enc_out, enc_mask)
            cache["dec_blocks"].append(c)
        yn, cache["dec_norm"] = _rmsnorm_f(y, self.params["dec.norm"])
        cache["dec_final"] = yn
        b, td, d = yn.shape
        logits = (yn.reshape(-1, d) @ self.params["lm_head"]).reshape(b, td, -1)

        loss, dlogits = _cross_entropy(logits, batch.targets)
        cache["logits"] = logits
        cache["dlogits"] = dlogits
        return loss, logits, cache

    # ------------------------------------------------------------- backward

    def _block_b(self, stream: str, i: int, dx, cache, grads, expert_grad_positions):
        p = self.params
        tag = f"{stream}.{i}"
        d_enc_out = None
        if tag in self._pool_of:
            b, t, dm = dx.shape
            pool = self._pool_of[tag]
            dflat, pgrads = xl.backward(pool, None, cache["mowe"], dx.reshape(b * t, dm))
            if pgrads is not None and (
                expert_grad_positions is None or tag in expert_grad_positions
            ):
                for name, g in pgrads.items():
                    grads[name] += g
            df = dflat.reshape(b, t, dm)
        else:
            df, dw1, dw2 = _ffn_b(
                dx, cache["ffn"], p[f"{tag}.ffn.w1"], p[f"{tag}.ffn.w2"], self.activation
            )
            grads[f"{tag}.ffn.w1"] += dw1
            grads[f"{tag}.ffn.w2"] += dw2
        dn, dg = _rmsnorm_b(df, cache["nf"], p[f"{tag}.ffn.norm"])
        grads[f"{tag}.ffn.norm"] += dg
        dx = dx + dn

        if stream == "dec":
            dq, dkv, dwq, dwk, dwv, dwo = _mha_b(
                dx, cache["ca"], *(p[f"{tag}.ca.{w}"] for w in ("wq", "wk", "wv", "wo")),
                self.cfg.num_heads, False,
            )
            for w, g in zip(("wq", "wk", "wv", "wo"), (dwq, dwk, dwv, dwo)):
                grads[f"{tag}.ca.{w}"] += g
            d_enc_out = dkv
            dn, dg = _rmsnorm_b(dq, cache["n2"], p[f"{tag}.ca.norm"])
            grads[f"{tag}.ca.norm"] += dg
            dx = dx + dn
            att_key, norm_key = "sa", f"{tag}.sa"
        else:
            att_key, norm_key = "att", f"{tag}.att"
        dq, _, dwq, dwk, dwv, dwo = _mha_b(
            dx, cache[att_key], *(p[f"{norm_key}.{w}"] for w in ("wq", "wk", "wv", "wo")),
            self.cfg.num_heads, True,
        )
        for w, g in zip(("wq", "wk", "wv", "wo"), (dwq, dwk, dwv, dwo)):
            grads[f"{norm_key}.{w}"] += g
        dn, dg = _rmsnorm_b(dq, cache["n1"], p[f"{norm_key}.norm"])
        grads[f"{norm_key}.norm"] += dg
        return dx + dn, d_enc_out

    def loss_and_grads(self, batch: ModelBatch, expert_grad_positions: set[str] | None = None):
        """Loss, gradient set and step statistics for one batch.

        ``expert_grad_positions`` restricts which expert-layer applications
        contribute to the (shared) expert parameter gradients; activations are
        untouched, so summing over singleton sets reproduces the full expert
        gradient exactly.
        """
        loss, logits, cache = self.forward(batch)
        p = self.params
        grads = self.grad_buffer()
        frozen = {
            name for pool in self.pools.values() if pool.frozen for name in pool.named_params()
        }
        batch_ = cache["batch"]
        d = self.cfg.d_model

        dl2 = cache["dlogits"].reshape(-1, self.cfg.default_vocab_size)
        grads["lm_head"] += cache["dec_final"].reshape(-1, d).T @ dl2
        dyn = (dl2 @ p["lm_head"].T).reshape(cache["dec_final"].shape)
        dy, dg = _rmsnorm_b(dyn, cache["dec_norm"], p["dec.norm"])
        grads["dec.norm"] += dg

        d_enc_total = np.zeros_like(cache["enc_out"])
        for i in reversed(range(self.cfg.num_dec_blocks)):
            dy, d_enc = self._block_b(
                "dec", i, dy, cache["dec_blocks"][i], grads, expert_grad_positions
            )
            d_enc_total += d_enc
        _embed_grad(grads["embed"], batch_.dec_in_ids, dy)

        dxn, dg = _rmsnorm_b(d_enc_total, cache["enc_norm"], p["enc.norm"])
        grads["enc.norm"] += dg
        dx = dxn
        for i in reversed(range(self.cfg.num_enc_blocks)):
            dx, _ = self._block_b("enc", i, dx, cache["enc_blocks"][i], grads, expert_grad_positions)
        _embed_grad(grads["embed"], batch_.enc_ids, dx)

        grads.drop(frozen)
        stats = _dispatch_stats(cache, self.cfg, batch)
        return loss, grads, stats

    # ------------------------------------------------------------ inference

    def encode_stream(self, enc_ids: np.ndarray, enc_rids: np.ndarray, enc_len: np.ndarray):
        te = enc_ids.shape[1]
        enc_valid = np.arange(te)[None, :] < enc_len[:, None]
        enc_mask = np.where(enc_valid, 0.0, NEG_INF).astype(self.dtype)[:, None, None, :]
        dp_enc = None
        if self.cfg.mowe_positions_enc:
            dp_enc = route(self.plan, enc_rids.reshape(-1))
        x = self._embed(enc_ids)
        for i in range(self.cfg.num_enc_blocks):
            x, _ = self._block_f("enc", i, x, enc_mask, dp_enc)
        enc_out, _ = _rmsnorm_f(x, self.params["enc.norm"])
        return enc_out, enc_mask

    def decode_logits(self, dec_ids: np.ndarray, dec_rids: np.ndarray, enc_out, enc_mask):
        td = dec_ids.shape[1]
        dp_dec = None
        if self.cfg.mowe_positions_dec:
            dp_dec = route(self.plan, dec_rids.reshape(-1))
        y = self._embed(dec_ids)
        for i in range(self.cfg.num_dec_blocks):
            y, _ = self._block_f("dec", i, y, self._causal(td), dp_dec, enc_out, enc_mask)
        yn, _ = _rmsnorm_f(y, self.params["dec.norm"])
        b, t, d = yn.shape
        return (yn.reshape(-1, d) @ self.params["lm_head"]).reshape(b, t, -1)


def _cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean token cross-entropy over non-ignored targets, with gradient."""
    valid = targets != IGNORE_TARGET
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ModelError("batch has no target tokens")
    lg = logits.astype(np.float64)
    m = lg.max(axis=-1, keepdims=True)
    e = np.exp(lg - m)
    se = e.sum(axis=-1, keepdims=True)
    logp = lg - m - np.log(se)
    safe_targets = np.where(valid, targets, 0)
    picked = np.take_along_axis(logp, safe_targets[..., None], axis=-1)[..., 0]
    loss = -float((picked * valid).sum() / n_valid)
    dlogits = e / se
    np.put_along_axis(
        dlogits, safe_targets[..., None],
        np.take_along_axis(dlogits, safe_targets[..., None], axis=-1) - 1.0, axis=-1,
    )
    dlogits *= valid[..., None] / n_valid
    return loss, dlogits.astype(logits.dtype)


def _dispatch_stats(cache: dict, cfg: ModelConfig, batch: ModelBatch) -> StepStats:
    dropped = 0
    bypassed = 0
    considered = 0
    for dp, n_layers in ((cache["dp_enc"], len(cfg.mowe_positions_enc)),
                         (cache["dp_dec"], len(cfg.mowe_positions_dec))):
        if dp is None or n_layers == 0:
            continue
        dropped += dp.drop_count * n_layers
        bypassed += dp.bypass_count * n_layers
        considered += dp.num_tokens * n_layers
    frac = bypassed / considered if considered else 0.0
    return StepStats(
        tokens_dropped=dropped,
        bypass_fraction=frac,
        num_target_tokens=batch.num_target_tokens,
    )


# -------------------------------------------------------------------- train


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    """Adam over the flat parameter buffer with an optional update mask.

    Masked entries (frozen experts) receive an exactly-zero update, so their
    parameter bytes never change.
    """

    def __init__(self, cfg: AdamConfig):
        self.cfg = cfg
        self.t = 0
        self.m: np.ndarray | None = None
        self.v: np.ndarray | None = None
        self._tmp: np.ndarray | None = None

    def step(self, flat_params: np.ndarray, flat_grads: np.ndarray,
             mask: np.ndarray | None = None) -> None:
        c = self.cfg
        if self.m is None:
            self.m = np.zeros_like(flat_params)
            self.v = np.zeros_like(flat_params)
            self._tmp = np.empty_like(flat_params)
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        m, v, tmp = self.m, self.v, self._tmp
        m *= c.beta1
        m += (1.0 - c.beta1) * flat_grads
        v *= c.beta2
        np.multiply(flat_grads, flat_grads, out=tmp)
        tmp *= 1.0 - c.beta2
        v += tmp
        np.multiply(v, 1.0 / bc2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += c.eps
        np.divide(m, tmp, out=tmp)
        tmp *= c.lr / bc1
        if mask is not None:
            tmp *= mask
        flat_params -= tmp


@dataclass
class TraceRow:
    step: int
    loss: float
    tokens_dropped: int
    bypass_fraction: float


def trace_to_csv(rows: list[TraceRow]) -> str:
    lines = ["step,loss,tokens_dropped,bypass_fraction"]
    for r in rows:
        lines.append(f"{r.step},{r.loss:.6f},{r.tokens_dropped},{r.bypass_fraction:.6f}")
    return "\n".join(lines) + "\n"


def train(
    model: Model,
    batches,
    optimizer_cfg: AdamConfig,
    freeze_experts: bool = False,
    optimizer: Adam | None = None,
) -> list[TraceRow]:
    """Cross-entropy training over an iterable of batches; returns the loss trace.

    With ``freeze_experts`` the expert arrays are untouched: their gradients
    are suppressed and the optimizer applies an exact zero update to them. A
    non-finite loss aborts with diagnostics.
    """
    opt = optimizer or Adam(optimizer_cfg)
    mask = model.expert_mask() if freeze_experts else None
    model.set_frozen(freeze_experts)
    trace: list[TraceRow] = []
    try:
        for step, batch in enumerate(batches, start=1):
            loss, grads, stats = model.loss_and_grads(batch)
            if not math.isfinite(loss):
                tail = ", ".join(f"{r.step}:{r.loss:.4f}" for r in trace[-5:])
                raise TrainingDiverged(
                    f"non-finite loss {loss} at step {step}; recent steps: {tail or 'none'}"
                )
            opt.step(model.flat_params, grads.flat, mask=mask)
            trace.append(
                TraceRow(step=step, loss=loss, tokens_dropped=stats.tokens_dropped,
                         bypass_fraction=stats.bypass_fraction)
            )
    finally:
        model.set_frozen(False)
    return trace


def take_batches(batcher, steps: int):
    for _ in range(steps):
        yield batcher.next_batch()


# ----------------------------------------------------------------- generate


def generate(model: Model, input_ids: list[int], max_len: int) -> list[int]:
    """Greedy decoding of one sequence; stops at EOS, which is not returned."""
    if model.table is None:
        raise ModelError("model has no routing table bound; cannot assign routing ids")
    enc_ids = np.asarray([input_ids], dtype=np.int64)
    enc_rids = np.asarray([assign_routing_ids(model.table, input_ids).routing_ids], dtype=np.int64)
    enc_len = np.array([len(input_ids)], dtype=np.int64)
    enc_out, enc_mask = model.encode_stream(enc_ids, enc_rids, enc_len)
    out: list[int] = []
    for _ in range(max_len):
        dec_in = [PAD_ID] + out
        dec_rids = assign_routing_ids(model.table, dec_in).routing_ids
        logits = model.decode_logits(
            np.asarray([dec_in], dtype=np.int64), np.asarray([dec_rids], dtype=np.int64),
            enc_out, enc_mask,
        )
        nxt = int(np.argmax(logits[0, -1]))
        if nxt == EOS_ID:
            break
        out.append(nxt)
    return out


# -------------------------------------------------------------- flop counts


def count_flops(cfg: ModelConfig, plan: BucketPlan | None,
                enc_len: int | None = None, dec_len: int | None = None) -> float:
    """Analytic forward FLOPs for one encoder plus one decoder token.

    Multiply-accumulates count as two operations. Expert positions charge
    only the assigned expert, frequency-weighted over buckets; bypassed mass
    costs nothing. With no expert positions this is the standard transformer
    count.
    """
    d = cfg.d_model
    te = enc_len if enc_len is not None else cfg.max_seq_len
    td = dec_len if dec_len is not None else cfg.max_seq_len

    def attn(t_kv: int) -> float:
        return 4 * 2 * d * d + 2 * 2 * t_kv * d

    def dense_ffn() -> float:
        return 2 * 2 * d * cfg.ffn_hidden

    def expert_ffn() -> float:
        if plan is None:
            raise ModelError("expert positions configured but no plan for FLOP counting")
        expected_hidden = sum(
            frac * shape.expert_hidden_dim
            for frac, shape in zip(plan.mass_fractions, plan.shapes)
        )
        return 2 * 2 * d * expected_hidden

    total = 0.0
    for i in range(cfg.num_enc_blocks):
        total += attn(te)
        total += expert_ffn() if i in cfg.mowe_positions_enc else dense_ffn()
    for i in range(cfg.num_dec_blocks):
        total += attn(td) + attn(te)
        total += expert_ffn() if i in cfg.mowe_positions_dec else dense_ffn()
    total += 2 * d * cfg.default_vocab_size
    return total


def match_dense_config(cfg: ModelConfig, plan: BucketPlan,
                       enc_len: int | None = None, dec_len: int | None = None,
                       tolerance: float = 0.05) -> ModelConfig:
    """FLOP-matched dense twin: same backbone, no expert positions, ffn solved.

    The dense hidden width is chosen so the analytic counts agree within the
    tolerance; raises if rounding cannot achieve that.
    """
    target = count_flops(cfg, plan, enc_len, dec_len)
    dense = replace(cfg, mowe_positions_enc=[], mowe_positions_dec=[], ffn_hidden=1)
    base = count_flops(dense, None, enc_len, dec_len)
    n_blocks = cfg.num_enc_blocks + cfg.num_dec_blocks
    per_hidden = 2 * 2 * cfg.d_model * n_blocks
    hidden = max(1, round((target - (base - per_hidden * 1)) / per_hidden))
    dense = replace(dense, ffn_hidden=hidden)
    got = count_flops(dense, None, enc_len, dec_len)
    rel = abs(got - target) / target
    if rel > tolerance:
        raise ModelError(f"could not FLOP-match dense baseline: relative gap {rel:.4f}")
    return dense


# --------------------------------------------------- shared-gradient check


def shared_gradient_check(model: Model, batch: ModelBatch) -> dict[str, float]:
    """Verify shared expert gradients equal the sum of per-position contributions.

    Each expert-layer application is isolated in turn (only its contribution
    to the expert parameter gradients is kept); the sum over applications must
    reproduce the jointly accumulated gradient.
    """
    if not model.cfg.share_experts or not model._pool_of:
        raise ModelError("shared gradient check needs shared expert positions")
    tags = sorted(model._pool_of)
    _, full, _ = model.loss_and_grads(batch)
    names = model.expert_param_names
    summed = {name: np.zeros_like(full[name]) for name in names}
    for tag in tags:
        _, part, _ = model.loss_and_grads(batch, expert_grad_positions={tag})
        for name in names:
            summed[name] += part[name]
    report: dict[str, float] = {}
    for name in names:
        report[name] = float(np.max(np.abs(full[name] - summed[name])))
    report["max_abs_diff"] = max(report.values()) if report else 0.0
    return report
