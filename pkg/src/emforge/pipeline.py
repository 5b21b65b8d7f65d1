"""Glue between records, templates, the encoder, training and evaluation."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import BatchSampler, Dataset, ExampleRecord
from .encoder import ModelConfig, Parameters, TokenSequence, init_params
from .eval import DatasetScore, EvalReport, aggregate, embed_corpus, precision_at_1, score_pool, to_sequence
from .gradcache import OptimizerState, SequenceBatch, learning_rate, partition, train_step
from .instruction import FormattedInput, format_query, format_target
from .numerics import NonFiniteError, check_finite

log = logging.getLogger(__name__)


def query_input(rec: ExampleRecord, dataset: Dataset, with_instruction: bool = True) -> FormattedInput:
    return format_query(dataset.tasks[rec.task_id], rec.query.text, rec.query.image, with_instruction)


def target_input(side, task_id: str, dataset: Dataset) -> FormattedInput:
    return format_target(dataset.tasks[task_id], side.text, side.image)


class SequenceBuilder:
    """Turns records into token sequences, memoizing by rendered input."""

    def __init__(self, dataset: Dataset, cfg: ModelConfig, with_instructions: bool = True):
        self.dataset = dataset
        self.cfg = cfg
        self.with_instructions = with_instructions
        self._cache: dict[tuple[str, str | None], TokenSequence] = {}

    def sequence(self, fi: FormattedInput) -> TokenSequence:
        key = (fi.text, fi.image)
        seq = self._cache.get(key)
        if seq is None:
            seq = self._cache[key] = to_sequence(fi, self.dataset.image, self.cfg)
        return seq

    def batch(self, records: list[ExampleRecord]) -> SequenceBatch:
        queries = [self.sequence(query_input(r, self.dataset, self.with_instructions)) for r in records]
        positives = [self.sequence(target_input(r.positive, r.task_id, self.dataset)) for r in records]
        k = {len(r.hard_negatives) for r in records}
        hard = None
        if len(k) == 1 and k != {0}:
            hard = [[self.sequence(target_input(s, r.task_id, self.dataset)) for s in r.hard_negatives]
                    for r in records]
        return SequenceBatch(queries, positives, hard)


@dataclass(frozen=True)
class TrainSettings:
    batch_size: int = 64
    sub_batch_size: int = 8
    steps: int = 500
    lr: float = 1e-3
    temperature: float = 0.02
    seed: int = 0
    with_instructions: bool = True
    dtype: str = "float32"


StepLogger = Callable[[dict], None]


def train(dataset: Dataset, cfg: ModelConfig, ts: TrainSettings, params: Parameters | None = None,
          on_step: StepLogger | None = None, check_numerics: bool = True) -> tuple[Parameters, list[float]]:
    """Run ``ts.steps`` cached-gradient steps; returns final parameters and losses."""
    if params is None:
        params = init_params(cfg, seed=ts.seed, dtype=np.dtype(ts.dtype))
    train_split = dataset.split("train")
    sampler = BatchSampler(train_split, ts.batch_size, seed=ts.seed)
    builder = SequenceBuilder(train_split, cfg, ts.with_instructions)
    part = partition(ts.batch_size, ts.sub_batch_size)
    state = OptimizerState()
    losses = []
    for step in range(ts.steps):
        t0 = time.perf_counter()
        batch = builder.batch(sampler.batch(step))
        lr = learning_rate(step, ts.steps, ts.lr)
        params, lv, state = train_step(params, cfg, batch, part, state, lr, ts.temperature)
        loss = lv.value
        if check_numerics:
            for name, t in params.items():
                try:
                    check_finite(t.data, name)
                except NonFiniteError as exc:
                    raise NonFiniteError(f"step {step}: parameter {exc}") from exc
        losses.append(loss)
        if on_step is not None:
            on_step({"step": step, "loss": loss, "lr": lr, "seconds": time.perf_counter() - t0})
    return params, losses


def evaluate(params: Parameters, cfg: ModelConfig, dataset: Dataset, with_instructions: bool = True,
             dedup: bool = True) -> EvalReport:
    """Precision@1 per task over the eval split, aggregated into a report."""
    scores = []
    for task_id, recs in sorted(dataset.split("eval").by_task().items()):
        task = dataset.tasks[task_id]
        queries = [query_input(r, dataset, with_instructions) for r in recs]
        q = embed_corpus(params, cfg, queries, dataset.image, dedup=dedup, ids=[r.id for r in recs])
        cand_inputs, offsets = [], [0]
        for r in recs:
            cand_inputs.extend(target_input(c, task_id, dataset) for c in r.candidates)
            offsets.append(len(cand_inputs))
        c = embed_corpus(params, cfg, cand_inputs, dataset.image, dedup=dedup)
        pools = [score_pool(r.id, q[i], c[offsets[i]:offsets[i + 1]], r.label_index) for i, r in enumerate(recs)]
        scores.append(DatasetScore(task_id, task.meta_task, task.ood, precision_at_1(pools), len(pools)))
    return aggregate(scores)
