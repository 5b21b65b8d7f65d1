"""Toy fused vision-language transformer with last-token pooling."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .. import numerics as nx
from ..numerics import Tensor
from .tokens import PAD, VOCAB_SIZE, TokenSequence

Parameters = dict[str, Tensor]

BUCKET = 16
LN_EPS = 1e-5
ROPE_BASE = 10000.0
ADAPTED = ("wq", "wk", "wv", "wo", "fc1", "fc2")


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 64
    layers: int = 4
    heads: int = 4
    vocab_size: int = VOCAB_SIZE
    max_seq: int = 128
    patch_size: int = 4
    image_channels: int = 1
    lora_rank: int = 0
    lora_alpha: float = 16.0
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.hidden_dim < 1 or self.heads < 1 or self.hidden_dim % self.heads:
            raise ValueError("hidden_dim must be a positive multiple of heads")
        if (self.hidden_dim // self.heads) % 2:
            raise ValueError("head dimension must be even for rotary positions")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.max_seq < 2:
            raise ValueError("max_seq must be >= 2")
        if not 0 <= self.lora_rank < self.hidden_dim:
            raise ValueError("lora_rank must satisfy 0 <= r < hidden_dim")
        if self.lora_alpha <= 0:
            raise ValueError("lora_alpha must be positive")
        if self.vocab_size != VOCAB_SIZE:
            raise ValueError(f"vocab_size is fixed at {VOCAB_SIZE}")

    @property
    def patch_dim(self) -> int:
        return self.image_channels * self.patch_size**2

    @property
    def lora_scale(self) -> float:
        return self.lora_alpha / self.lora_rank

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


def _weight_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, m = cfg.hidden_dim, cfg.hidden_dim * cfg.mlp_ratio
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, d),
        "patch.w": (d, cfg.patch_dim),
        "patch.b": (d,),
    }
    for i in range(cfg.layers):
        p = f"layers.{i}."
        shapes.update({
            p + "ln1.gamma": (d,), p + "ln1.beta": (d,),
            p + "wq": (d, d), p + "bq": (d,),
            p + "wk": (d, d), p + "bk": (d,),
            p + "wv": (d, d), p + "bv": (d,),
            p + "wo": (d, d), p + "bo": (d,),
            p + "ln2.gamma": (d,), p + "ln2.beta": (d,),
            p + "fc1": (m, d), p + "b1": (m,),
            p + "fc2": (d, m), p + "b2": (d,),
        })
    shapes["final.gamma"] = (d,)
    shapes["final.beta"] = (d,)
    return shapes


def adapted_weights(cfg: ModelConfig) -> list[str]:
    """Names of weight matrices that carry LoRA pairs when lora_rank >= 1."""
    names = ["patch.w"]
    for i in range(cfg.layers):
        names.extend(f"layers.{i}.{w}" for w in ADAPTED)
    return names


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Parameters:
    """Fresh parameters.

    Projections draw from N(0, 0.02), biases and LoRA B start at zero, LoRA A
    draws from N(0, 1/sqrt(r)), norms start at identity. Token embeddings are
    N(0, 1) so that at init every pooled vector is dominated by the shared EOS
    embedding and in-batch scores start near uniform. The patch projection is
    He-scaled so image content reaches the residual stream at token scale;
    otherwise a frozen base barely separates images.
    """
    rng = np.random.default_rng(seed)
    params: Parameters = {}
    for name, shape in _weight_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "tok_emb":
            arr = rng.standard_normal(shape)
        elif name == "patch.w":
            arr = rng.normal(0.0, math.sqrt(2.0 / shape[1]), shape)
        elif leaf == "gamma":
            arr = np.ones(shape)
        elif leaf == "beta" or len(shape) == 1:
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, 0.02, shape)
        params[name] = Tensor(arr, dtype=dtype)
    if cfg.lora_rank:
        r = cfg.lora_rank
        for name in adapted_weights(cfg):
            out_dim, in_dim = params[name].shape
            params[name + ".lora_A"] = Tensor(rng.normal(0.0, 1.0 / math.sqrt(r), (r, in_dim)), dtype=dtype)
            params[name + ".lora_B"] = Tensor(np.zeros((out_dim, r)), dtype=dtype)
    return params


def trainable_names(params: Parameters, cfg: ModelConfig) -> list[str]:
    """Full fine-tuning trains everything; LoRA mode trains only adapter factors."""
    if cfg.lora_rank:
        return [n for n in params if ".lora_" in n]
    return list(params)


def check_params(params: Parameters, cfg: ModelConfig) -> None:
    expected = dict(_weight_shapes(cfg))
    if cfg.lora_rank:
        for name in adapted_weights(cfg):
            out_dim, in_dim = expected[name]
            expected[name + ".lora_A"] = (cfg.lora_rank, in_dim)
            expected[name + ".lora_B"] = (out_dim, cfg.lora_rank)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ValueError(f"parameter/config mismatch (missing={missing[:3]}, extra={extra[:3]})")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ValueError(f"parameter {name!r} has shape {params[name].shape}, config expects {shape}")


# ---------------------------------------------------------------------------
# LoRA
# ---------------------------------------------------------------------------

def lora_forward(x: Tensor, w_base: Tensor, a: Tensor, b: Tensor, alpha: float, r: int) -> Tensor:
    """``x (W + (alpha/r) B A)^T`` as the base product plus a low-rank correction."""
    if r < 1:
        raise ValueError("lora_forward needs r >= 1; bypass the adapter for full fine-tuning")
    if a.shape[0] != r or b.shape[1] != r:
        raise ValueError(f"adapter factors {a.shape}, {b.shape} do not have rank {r}")
    base = nx.matmul(x, nx.transpose(w_base), kernel="blas")
    low = nx.matmul(nx.matmul(x, nx.transpose(a), kernel="blas"), nx.transpose(b), kernel="blas")
    return base + low * (alpha / r)


def merge_lora(params: Parameters, cfg: ModelConfig) -> Parameters:
    """Fold adapters into base weights and drop the factors.

    The merged parameters pair with ``replace(cfg, lora_rank=0)``.
    """
    if cfg.lora_rank < 1:
        raise ValueError("merge_lora needs a LoRA configuration")
    if not any(".lora_" in n for n in params):
        raise ValueError("parameters carry no LoRA factors (already merged?)")
    scale = cfg.lora_scale
    merged: Parameters = {}
    for name, t in params.items():
        if ".lora_" in name:
            continue
        a = params.get(name + ".lora_A")
        if a is None:
            merged[name] = t
            continue
        b = params[name + ".lora_B"]
        merged[name] = Tensor.wrap(t.data + scale * (b.data @ a.data))
    return merged


def merged_config(cfg: ModelConfig) -> ModelConfig:
    return replace(cfg, lora_rank=0)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def _linear(x: Tensor, params: Parameters, cfg: ModelConfig, w: str, b: str | None) -> Tensor:
    a = params.get(w + ".lora_A")
    if a is not None:
        y = lora_forward(x, params[w], a, params[w + ".lora_B"], cfg.lora_alpha, cfg.lora_rank)
    else:
        y = nx.matmul(x, nx.transpose(params[w]), kernel="blas")
    return y + params[b] if b else y


def _bucket_len(n: int, cfg: ModelConfig) -> int:
    return min(cfg.max_seq, -(-n // BUCKET) * BUCKET)


def _embed_inputs(seqs: list[TokenSequence], T: int, params: Parameters, cfg: ModelConfig) -> Tensor:
    n, d = len(seqs), cfg.hidden_dim
    ids = np.full((n, T), PAD, dtype=np.intp)
    src = np.arange(n * T, dtype=np.intp)
    patch_rows = []
    offset = n * T
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s.ids
        if s.patches is not None and len(s.patch_slots):
            k = len(s.patch_slots)
            src[i * T + s.patch_slots] = offset + np.arange(k)
            patch_rows.append(s.patches)
            offset += k
    rows = nx.embedding(params["tok_emb"], ids.reshape(-1))
    if patch_rows:
        dtype = params["patch.w"].dtype
        patches = Tensor.wrap(np.concatenate(patch_rows).astype(dtype, copy=False))
        proj = _linear(patches, params, cfg, "patch.w", "patch.b")
        rows = nx.take(nx.concat([rows, proj], axis=0), src, axis=0)
    return nx.reshape(rows, (n, T, d))


def _rope_tables(T: int, dh: int, dtype) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """cos, signed sin and the rotate-half permutation for positions 0..T-1."""
    half = dh // 2
    inv = ROPE_BASE ** (-np.arange(half) / half)
    ang = np.arange(T)[:, None] * inv[None, :]
    cos = np.concatenate([np.cos(ang), np.cos(ang)], axis=1).astype(dtype)
    sin = np.concatenate([-np.sin(ang), np.sin(ang)], axis=1).astype(dtype)
    perm = np.concatenate([np.arange(half, dh), np.arange(half)])
    return cos, sin, perm


def _rotate(t: Tensor, tables) -> Tensor:
    cos, sin, perm = tables
    return t * cos + nx.take(t, perm, axis=-1) * sin


def _block(x: Tensor, i: int, mask: np.ndarray, params: Parameters, cfg: ModelConfig) -> Tensor:
    n, T, d = x.shape
    H = cfg.heads
    dh = d // H
    p = f"layers.{i}."
    h = nx.layer_norm(x, params[p + "ln1.gamma"], params[p + "ln1.beta"], LN_EPS)

    def heads(t: Tensor) -> Tensor:
        return nx.transpose(nx.reshape(t, (n, T, H, dh)), (0, 2, 1, 3))

    # positions enter only through the rotation of queries and keys
    rope = _rope_tables(T, dh, x.dtype)
    q = _rotate(heads(_linear(h, params, cfg, p + "wq", p + "bq")), rope)
    k = _rotate(heads(_linear(h, params, cfg, p + "wk", p + "bk")), rope)
    v = heads(_linear(h, params, cfg, p + "wv", p + "bv"))
    scores = nx.matmul(q, nx.transpose(k, (0, 1, 3, 2)), kernel="blas") * (1.0 / math.sqrt(dh))
    attn = nx.softmax(scores, axis=-1, mask=mask)
    ctx = nx.matmul(attn, v, kernel="blas")
    ctx = nx.reshape(nx.transpose(ctx, (0, 2, 1, 3)), (n, T, d))
    x = x + _linear(ctx, params, cfg, p + "wo", p + "bo")
    h = nx.layer_norm(x, params[p + "ln2.gamma"], params[p + "ln2.beta"], LN_EPS)
    h = nx.gelu(_linear(h, params, cfg, p + "fc1", p + "b1"))
    return x + _linear(h, params, cfg, p + "fc2", p + "b2")


def _forward_group(seqs: list[TokenSequence], T: int, params: Parameters, cfg: ModelConfig) -> Tensor:
    n = len(seqs)
    valid = np.zeros((n, T), dtype=bool)
    last = np.empty(n, dtype=np.intp)
    for i, s in enumerate(seqs):
        valid[i, : len(s)] = s.mask
        last[i] = i * T + s.last_position
    causal = np.tril(np.ones((T, T), dtype=bool))
    mask = causal[None, None] & valid[:, None, None, :]
    # keep every row admissible: a masked query position still sees itself
    mask |= np.eye(T, dtype=bool)[None, None]
    x = _embed_inputs(seqs, T, params, cfg)
    for i in range(cfg.layers):
        x = _block(x, i, mask, params, cfg)
    x = nx.layer_norm(x, params["final.gamma"], params["final.beta"], LN_EPS)
    return nx.take(nx.reshape(x, (n * T, cfg.hidden_dim)), last, axis=0)


def encode_batch(seqs: list[TokenSequence], params: Parameters, cfg: ModelConfig,
                 normalize: bool = True) -> Tensor:
    """Embed sequences into an ``n x d`` tensor (differentiable).

    Sequences are padded to a length bucket that depends only on their own
    length, so each row is bitwise independent of what else shares the call.
    """
    if not seqs:
        raise ValueError("encode_batch needs at least one sequence")
    check_params(params, cfg)
    groups: dict[int, list[int]] = {}
    for i, s in enumerate(seqs):
        if len(s) > cfg.max_seq:
            raise ValueError(f"sequence {i} has length {len(s)} > max_seq={cfg.max_seq}")
        groups.setdefault(_bucket_len(len(s), cfg), []).append(i)
    outs, order = [], []
    for T in sorted(groups):
        idx = groups[T]
        outs.append(_forward_group([seqs[i] for i in idx], T, params, cfg))
        order.extend(idx)
    out = outs[0] if len(outs) == 1 else nx.concat(outs, axis=0)
    if order != list(range(len(seqs))):
        inverse = np.empty(len(order), dtype=np.intp)
        inverse[np.asarray(order)] = np.arange(len(order))
        out = nx.take(out, inverse, axis=0)
    if normalize:
        out = nx.l2_normalize(out, axis=-1)
    return out


@dataclass(frozen=True)
class EmbeddingVector:
    values: np.ndarray
    normalized: bool


def encode(seq: TokenSequence, params: Parameters, cfg: ModelConfig, normalize: bool = True) -> EmbeddingVector:
    out = encode_batch([seq], params, cfg, normalize=normalize)
    return EmbeddingVector(values=out.data[0], normalized=normalize)
