"""Temperature-scaled cosine scores and the InfoNCE objective.

Scores stay in log space (cos / tau); exponentials only appear inside
log-sum-exp.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor


@dataclass(frozen=True)
class TrainBatch:
    """Query, positive and optional hard-negative embeddings for one loss call.

    ``queries`` and ``targets`` are ``B x d``; ``hard_negatives`` is ``B x k x d``.
    """

    queries: Tensor
    targets: Tensor
    hard_negatives: Tensor | None = None
    temperature: float = 0.02

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.queries.ndim != 2 or self.queries.shape != self.targets.shape:
            raise ValueError(f"queries {self.queries.shape} and targets {self.targets.shape} must both be B x d")
        if self.hard_negatives is not None:
            B, d = self.queries.shape
            if self.hard_negatives.ndim != 3 or self.hard_negatives.shape[0] != B or self.hard_negatives.shape[2] != d:
                raise ValueError(f"hard negatives must be {B} x k x {d}, got {self.hard_negatives.shape}")


@dataclass(frozen=True)
class LossValue:
    loss: Tensor
    scores: np.ndarray

    @property
    def value(self) -> float:
        return self.loss.item()


def _unit(v) -> np.ndarray:
    v = np.asarray(v.values if hasattr(v, "values") else v, dtype=np.float64)
    n = float(np.sqrt(v @ v))
    if n == 0.0:
        raise ValueError("similarity of a zero vector is undefined")
    return v / n


def log_similarity(h_q, h_t, tau: float) -> float:
    """``cos(h_q, h_t) / tau``, the log of the matching score."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    return float(_unit(h_q) @ _unit(h_t)) / tau


def similarity(h_q, h_t, tau: float) -> float:
    """The matching score ``exp(cos(h_q, h_t) / tau)``."""
    return math.exp(log_similarity(h_q, h_t, tau))


def build_score_matrix(queries: Tensor, targets: Tensor, hard_negatives: Tensor | None, tau: float) -> Tensor:
    """``B x (B + k)`` matrix of cos/tau; row i's positive sits in column i."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if queries.shape[-1] != targets.shape[-1]:
        raise ValueError(f"embedding sizes differ: {queries.shape} vs {targets.shape}")
    q = nx.l2_normalize(queries, axis=-1)
    t = nx.l2_normalize(targets, axis=-1)
    scores = nx.matmul(q, nx.transpose(t), kernel="blas") * (1.0 / tau)
    if hard_negatives is not None and hard_negatives.shape[1]:
        B, k, d = hard_negatives.shape
        if B != queries.shape[0] or d != queries.shape[-1]:
            raise ValueError(f"hard negatives {hard_negatives.shape} do not match queries {queries.shape}")
        h = nx.l2_normalize(hard_negatives, axis=-1)
        hs = nx.sum(nx.reshape(q, (B, 1, d)) * h, axis=-1) * (1.0 / tau)
        scores = nx.concat([scores, hs], axis=1)
    return scores


def info_nce_scores(scores: Tensor) -> Tensor:
    """Mean over rows of ``logsumexp(row) - row[i]``."""
    B, n = scores.shape
    if n == 1:
        warnings.warn("InfoNCE with an empty negative set is identically zero", RuntimeWarning, stacklevel=3)
    diag = np.zeros((B, n), dtype=scores.dtype)
    diag[np.arange(B), np.arange(B)] = 1.0
    positive = nx.sum(scores * diag, axis=1)
    return nx.mean(nx.logsumexp(scores, axis=1) - positive)


def info_nce(batch: TrainBatch) -> LossValue:
    """InfoNCE over in-batch negatives plus each query's own hard negatives."""
    scores = build_score_matrix(batch.queries, batch.targets, batch.hard_negatives, batch.temperature)
    loss = info_nce_scores(scores)
    nx.check_finite(loss.data, "InfoNCE loss")
    return LossValue(loss=loss, scores=scores.data)
