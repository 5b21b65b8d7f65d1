"""Two-phase contrastive training step with cached representation gradients.

Phase one embeds every sub-batch without a tape, evaluates the loss on the
cached embeddings and keeps ``u = dL/d embedding``. Phase two re-embeds each
sub-batch under a fresh tape and back-propagates ``u`` into the parameters,
summing contributions in partition order. Only one sub-batch worth of
activations is ever tracked.

Targets (and hard negatives) go through the same two phases as queries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .contrastive import LossValue, TrainBatch, info_nce
from .encoder import ModelConfig, Parameters, TokenSequence, encode_batch, trainable_names
from .numerics import GradTape, Tensor


@dataclass(frozen=True)
class SubBatchPartition:
    ranges: tuple[tuple[int, int], ...]
    sub_batch_size: int

    def __iter__(self):
        return iter(self.ranges)

    def __len__(self) -> int:
        return len(self.ranges)

    @property
    def size(self) -> int:
        return self.ranges[-1][1] if self.ranges else 0


def partition(batch_size: int, sub_batch_size: int) -> SubBatchPartition:
    """Contiguous ranges of at most ``sub_batch_size``; the last holds the remainder."""
    if batch_size < 1 or sub_batch_size < 1:
        raise ValueError("batch_size and sub_batch_size must be >= 1")
    ranges = tuple((i, min(i + sub_batch_size, batch_size)) for i in range(0, batch_size, sub_batch_size))
    return SubBatchPartition(ranges=ranges, sub_batch_size=sub_batch_size)


@dataclass(frozen=True)
class SequenceBatch:
    """Token sequences for one training batch, in batch order."""

    queries: list[TokenSequence]
    positives: list[TokenSequence]
    hard_negatives: list[list[TokenSequence]] | None = None

    def __post_init__(self):
        if len(self.queries) != len(self.positives):
            raise ValueError("queries and positives differ in length")
        if self.hard_negatives is not None:
            if len(self.hard_negatives) != len(self.queries):
                raise ValueError("need one hard-negative list per query")
            if len({len(h) for h in self.hard_negatives}) > 1:
                raise ValueError("every query needs the same number of hard negatives")

    def __len__(self) -> int:
        return len(self.queries)

    @property
    def num_hard(self) -> int:
        return len(self.hard_negatives[0]) if self.hard_negatives else 0

    def roles(self) -> list[tuple[str, list[TokenSequence]]]:
        out = [("queries", self.queries), ("positives", self.positives)]
        if self.num_hard:
            out.append(("hard_negatives", [s for row in self.hard_negatives for s in row]))
        return out


@dataclass(frozen=True)
class RepresentationCache:
    queries: np.ndarray
    positives: np.ndarray
    hard_negatives: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.queries) + len(self.positives) + (0 if self.hard_negatives is None else self.hard_negatives.shape[0] * self.hard_negatives.shape[1])


@dataclass(frozen=True)
class GradientCache:
    queries: np.ndarray
    positives: np.ndarray
    hard_negatives: np.ndarray | None = None

    def role(self, name: str) -> np.ndarray:
        arr = getattr(self, name)
        return arr.reshape(-1, arr.shape[-1])


def _role_partition(n: int, part: SubBatchPartition) -> SubBatchPartition:
    return part if part.size == n else partition(n, part.sub_batch_size)


def _embed(seqs: Sequence[TokenSequence], params: Parameters, cfg: ModelConfig, role: str, offset: int) -> Tensor:
    for i, s in enumerate(seqs):
        if len(s) > cfg.max_seq:
            raise ValueError(f"{role} item {offset + i}: length {len(s)} exceeds max_seq={cfg.max_seq}")
    try:
        return encode_batch(list(seqs), params, cfg, normalize=True)
    except ValueError as exc:
        raise ValueError(f"{role} items {offset}..{offset + len(seqs) - 1}: {exc}") from exc


def forward_cache(params: Parameters, cfg: ModelConfig, batch: SequenceBatch,
                  part: SubBatchPartition) -> RepresentationCache:
    """Embed every sequence, sub-batch by sub-batch, without tracking."""
    out = {}
    for role, seqs in batch.roles():
        chunks = [_embed(seqs[a:b], params, cfg, role, a).data for a, b in _role_partition(len(seqs), part)]
        out[role] = np.concatenate(chunks, axis=0)
    hard = out.get("hard_negatives")
    if hard is not None:
        hard = hard.reshape(len(batch), batch.num_hard, -1)
    return RepresentationCache(queries=out["queries"], positives=out["positives"], hard_negatives=hard)


def loss_and_rep_grads(cache: RepresentationCache, tau: float) -> tuple[LossValue, GradientCache]:
    """InfoNCE on cached embeddings treated as leaves, plus dL/d embedding."""
    leaves = {"queries": Tensor.wrap(cache.queries), "positives": Tensor.wrap(cache.positives)}
    if cache.hard_negatives is not None:
        leaves["hard_negatives"] = Tensor.wrap(cache.hard_negatives)
    with GradTape() as tape:
        tape.watch(leaves)
        lv = info_nce(TrainBatch(leaves["queries"], leaves["positives"], leaves.get("hard_negatives"), tau))
    grads = nx.grad(lv.loss, tape, leaves)
    return lv, GradientCache(**grads)


def accumulate_param_grads(params: Parameters, cfg: ModelConfig, batch: SequenceBatch,
                           part: SubBatchPartition, grad_cache: GradientCache,
                           names: Sequence[str] | None = None,
                           order: Sequence[int] | None = None) -> dict[str, np.ndarray]:
    """Sum over sub-batches of ``u_i * d f(x_i) / d theta``.

    Sub-batches run one at a time, queries first, then positives, then hard
    negatives. ``order`` permutes the processing order over that flat list of
    sub-batches; contributions are still summed in canonical order.
    """
    names = list(trainable_names(params, cfg) if names is None else names)
    jobs = []
    for role, seqs in batch.roles():
        u = grad_cache.role(role)
        if len(u) != len(seqs):
            raise ValueError(f"gradient cache holds {len(u)} {role} rows, batch has {len(seqs)}")
        for a, b in _role_partition(len(seqs), part):
            jobs.append((role, seqs, a, b, u))
    run_order = list(range(len(jobs))) if order is None else list(order)
    if sorted(run_order) != list(range(len(jobs))):
        raise ValueError("order must be a permutation of the sub-batch indices")

    wrt = {n: params[n] for n in names}
    pieces: dict[int, dict[str, np.ndarray]] = {}
    total = {n: np.zeros(params[n].shape, dtype=params[n].dtype) for n in names}
    for j in run_order:
        role, seqs, a, b, u = jobs[j]
        with GradTape() as tape:
            tape.watch(wrt)
            emb = _embed(seqs[a:b], params, cfg, role, a)
        g = tape.backward(emb, u[a:b], wrt)
        if order is None:
            for n in names:
                total[n] += g[n]
        else:
            pieces[j] = g
    for j in sorted(pieces):
        for n in names:
            total[n] += pieces[j][n]
    for n in names:
        nx.check_finite(total[n], f"gradient of {n!r}")
    return total


def direct_param_grads(params: Parameters, cfg: ModelConfig, batch: SequenceBatch, tau: float,
                       names: Sequence[str] | None = None) -> tuple[LossValue, dict[str, np.ndarray]]:
    """Plain back-propagation through the full batch under one tape."""
    names = list(trainable_names(params, cfg) if names is None else names)
    wrt = {n: params[n] for n in names}
    with GradTape() as tape:
        tape.watch(wrt)
        embs = {role: _embed(seqs, params, cfg, role, 0) for role, seqs in batch.roles()}
        hard = embs.get("hard_negatives")
        if hard is not None:
            hard = nx.reshape(hard, (len(batch), batch.num_hard, cfg.hidden_dim))
        lv = info_nce(TrainBatch(embs["queries"], embs["positives"], hard, tau))
    return lv, nx.grad(lv.loss, tape, wrt)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_fraction: float = 0.05


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def learning_rate(step: int, total_steps: int, peak: float, warmup_fraction: float = 0.05) -> float:
    """Linear warmup over the first ``warmup_fraction`` of steps, then constant."""
    warm = max(1, math.ceil(warmup_fraction * total_steps))
    return peak * min(1.0, (step + 1) / warm)


def adamw_update(params: Parameters, grads: dict[str, np.ndarray], state: OptimizerState, lr: float,
                 hp: AdamWConfig = AdamWConfig()) -> tuple[Parameters, OptimizerState]:
    """Decoupled-weight-decay Adam; decay applies to matrices only."""
    t = state.step + 1
    new_params = dict(params)
    m_new, v_new = dict(state.m), dict(state.v)
    c1 = 1.0 - hp.beta1**t
    c2 = 1.0 - hp.beta2**t
    for n, g in grads.items():
        p = params[n].data
        m = state.m.get(n)
        v = state.v.get(n)
        m = (1.0 - hp.beta1) * g if m is None else hp.beta1 * m + (1.0 - hp.beta1) * g
        v = (1.0 - hp.beta2) * g * g if v is None else hp.beta2 * v + (1.0 - hp.beta2) * g * g
        step = (m / c1) / (np.sqrt(v / c2) + hp.eps)
        if p.ndim >= 2:
            step = step + hp.weight_decay * p
        new_params[n] = Tensor.wrap((p - (lr * step).astype(p.dtype)).astype(p.dtype, copy=False))
        m_new[n] = m.astype(p.dtype, copy=False)
        v_new[n] = v.astype(p.dtype, copy=False)
    return new_params, OptimizerState(step=t, m=m_new, v=v_new)


def train_step(params: Parameters, cfg: ModelConfig, batch: SequenceBatch, part: SubBatchPartition,
               state: OptimizerState, lr: float, tau: float,
               hp: AdamWConfig = AdamWConfig()) -> tuple[Parameters, LossValue, OptimizerState]:
    """One cached-gradient step. On any error the inputs are left untouched."""
    cache = forward_cache(params, cfg, batch, part)
    lv, gc = loss_and_rep_grads(cache, tau)
    grads = accumulate_param_grads(params, cfg, batch, part, gc)
    new_params, new_state = adamw_update(params, grads, state, lr, hp)
    return new_params, lv, new_state


def plain_train_step(params: Parameters, cfg: ModelConfig, batch: SequenceBatch, state: OptimizerState,
                     lr: float, tau: float,
                     hp: AdamWConfig = AdamWConfig()) -> tuple[Parameters, LossValue, OptimizerState]:
    """Reference step using direct back-propagation."""
    lv, grads = direct_param_grads(params, cfg, batch, tau)
    new_params, new_state = adamw_update(params, grads, state, lr, hp)
    return new_params, lv, new_state
