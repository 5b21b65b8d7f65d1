"""Candidate-pool ranking, Precision@1 and report aggregation."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .encoder import ModelConfig, Parameters, TokenSequence, build_sequence, encode_batch
from .instruction import META_TASKS, FormattedInput

EMBED_CHUNK = 64


@dataclass(frozen=True)
class ScoredPool:
    query_id: str
    scores: np.ndarray
    predicted: int
    label_index: int

    @property
    def correct(self) -> bool:
        return self.predicted == self.label_index


def rank(query_emb: np.ndarray, candidate_embs: np.ndarray) -> int:
    """Index of the highest dot product; ties go to the lowest index."""
    q = np.asarray(query_emb)
    c = np.asarray(candidate_embs)
    if c.ndim != 2 or len(c) < 1:
        raise ValueError("need at least one candidate")
    if q.shape != (c.shape[1],):
        raise ValueError(f"dimension mismatch: query {q.shape}, candidates {c.shape}")
    return int(np.argmax(c @ q))


def score_pool(query_id: str, query_emb: np.ndarray, candidate_embs: np.ndarray, label_index: int) -> ScoredPool:
    scores = np.asarray(candidate_embs) @ np.asarray(query_emb)
    return ScoredPool(query_id, scores, rank(query_emb, candidate_embs), label_index)


def precision_at_1(pools: Sequence[ScoredPool]) -> float:
    if not pools:
        raise ValueError("precision_at_1 of no pools")
    return sum(p.correct for p in pools) / len(pools)


# ---------------------------------------------------------------------------
# embedding
# ---------------------------------------------------------------------------

def input_key(fi: FormattedInput, image_bytes: Callable[[str], bytes]) -> str:
    h = hashlib.sha256(fi.text.encode("utf-8"))
    if fi.image is not None:
        h.update(b"\x00")
        h.update(image_bytes(fi.image))
    return h.hexdigest()


def embed_corpus(params: Parameters, cfg: ModelConfig, inputs: Sequence[FormattedInput],
                 load_image: Callable[[str], np.ndarray], dedup: bool = True,
                 ids: Sequence[str] | None = None) -> np.ndarray:
    """Row i is the normalized embedding of ``inputs[i]``.

    With ``dedup`` identical inputs (same text, same image bytes) are embedded
    once. Rows never depend on what else is in the corpus.
    """
    if not inputs:
        return np.zeros((0, cfg.hidden_dim))
    byte_cache: dict[str, bytes] = {}

    def image_bytes(ref: str) -> bytes:
        if ref not in byte_cache:
            byte_cache[ref] = np.ascontiguousarray(load_image(ref)).tobytes()
        return byte_cache[ref]

    if dedup:
        keys = [input_key(fi, image_bytes) for fi in inputs]
        first: dict[str, int] = {}
        for i, k in enumerate(keys):
            first.setdefault(k, i)
        unique = sorted(first.values())
        slot = {k: j for j, k in enumerate(keys[i] for i in unique)}
        rows = [slot[k] for k in keys]
    else:
        unique = list(range(len(inputs)))
        rows = unique

    seqs: list[TokenSequence] = []
    for i in unique:
        fi = inputs[i]
        try:
            seqs.append(to_sequence(fi, load_image, cfg))
        except ValueError as exc:
            name = ids[i] if ids is not None else str(i)
            raise ValueError(f"input {name}: {exc}") from exc
    out = np.concatenate([
        encode_batch(seqs[a:a + EMBED_CHUNK], params, cfg, normalize=True).data
        for a in range(0, len(seqs), EMBED_CHUNK)
    ])
    return out[rows]


def to_sequence(fi: FormattedInput, load_image: Callable[[str], np.ndarray], cfg: ModelConfig) -> TokenSequence:
    image = None
    if fi.image is not None:
        image = np.asarray(load_image(fi.image))
        if image.ndim == 2:
            image = image[None]
        if image.shape[0] != cfg.image_channels:
            raise ValueError(f"image has {image.shape[0]} channels, model expects {cfg.image_channels}")
    return build_sequence(fi.text, image, cfg.patch_size, cfg.max_seq)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetScore:
    name: str
    meta_task: str
    ood: bool
    p_at_1: float
    n: int = 0


@dataclass(frozen=True)
class EvalReport:
    datasets: list[DatasetScore]
    meta: dict[str, float]
    ind: float | None
    ood: float | None
    overall: float
    counts: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "datasets": [
                {"name": d.name, "meta_task": d.meta_task, "ood": d.ood, "p_at_1": d.p_at_1, "n": d.n}
                for d in self.datasets
            ],
            "meta": dict(self.meta),
            "ind": self.ind,
            "ood": self.ood,
            "overall": self.overall,
            "counts": dict(self.counts),
        }

    @classmethod
    def from_json(cls, d: dict) -> EvalReport:
        datasets = [DatasetScore(x["name"], x["meta_task"], bool(x["ood"]), float(x["p_at_1"]), int(x.get("n", 0)))
                    for x in d["datasets"]]
        return cls(datasets, {k: float(v) for k, v in d["meta"].items()}, d.get("ind"), d.get("ood"),
                   float(d["overall"]), {k: int(v) for k, v in d.get("counts", {}).items()})


REPORT_SCHEMA = {
    "type": "object",
    "required": ["datasets", "meta", "ind", "ood", "overall"],
    "properties": {
        "datasets": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["name", "meta_task", "ood", "p_at_1", "n"],
                "properties": {
                    "name": {"type": "string"},
                    "meta_task": {"enum": list(META_TASKS)},
                    "ood": {"type": "boolean"},
                    "p_at_1": {"type": "number", "minimum": 0, "maximum": 1},
                    "n": {"type": "integer", "minimum": 0},
                },
            },
        },
        "meta": {"type": "object", "additionalProperties": {"type": "number"}},
        "ind": {"type": ["number", "null"]},
        "ood": {"type": ["number", "null"]},
        "overall": {"type": "number"},
        "counts": {"type": "object", "additionalProperties": {"type": "integer"}},
    },
}


def _mean(xs: list[float]) -> float:
    return sum(xs) / len(xs)


def aggregate(per_dataset: Mapping[str, tuple] | Iterable[DatasetScore]) -> EvalReport:
    """Unweighted means per meta-task, over IND and OOD datasets, and overall.

    Accepts ``DatasetScore`` items or a mapping
    ``name -> (score, meta_task, ood[, n])``.
    """
    if isinstance(per_dataset, Mapping):
        items = [DatasetScore(name, v[1], bool(v[2]), float(v[0]), int(v[3]) if len(v) > 3 else 0)
                 for name, v in per_dataset.items()]
    else:
        items = list(per_dataset)
    if not items:
        raise ValueError("aggregate needs at least one dataset")
    items.sort(key=lambda d: d.name)
    for d in items:
        if d.meta_task not in META_TASKS:
            raise ValueError(f"dataset {d.name!r} has unknown meta_task {d.meta_task!r}")
    meta = {}
    counts = {}
    for m in META_TASKS:
        xs = [d.p_at_1 for d in items if d.meta_task == m]
        if xs:
            meta[m] = _mean(xs)
            counts[m] = len(xs)
    ind = [d.p_at_1 for d in items if not d.ood]
    ood = [d.p_at_1 for d in items if d.ood]
    counts.update(ind=len(ind), ood=len(ood), overall=len(items))
    return EvalReport(
        datasets=items,
        meta=meta,
        ind=_mean(ind) if ind else None,
        ood=_mean(ood) if ood else None,
        overall=_mean([d.p_at_1 for d in items]),
        counts=counts,
    )


def pct(x: float | None) -> str:
    """Fraction rendered as a percentage with one decimal."""
    return "" if x is None else f"{100.0 * x:.1f}"


CSV_FIELDS = ["kind", "name", "meta_task", "ood", "p_at_1", "score", "n"]


def _aggregate_rows(report: EvalReport) -> list[tuple[str, float | None, int]]:
    rows = [(m, v, report.counts.get(m, 0)) for m, v in report.meta.items()]
    rows += [("ind", report.ind, report.counts.get("ind", 0)),
             ("ood", report.ood, report.counts.get("ood", 0)),
             ("overall", report.overall, report.counts.get("overall", len(report.datasets)))]
    return rows


def render_report(report: EvalReport, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for d in report.datasets:
            w.writerow(["dataset", d.name, d.meta_task, int(d.ood), repr(d.p_at_1), pct(d.p_at_1), d.n])
        for name, v, n in _aggregate_rows(report):
            w.writerow(["aggregate", name, "", "", "" if v is None else repr(v), pct(v), n])
        return buf.getvalue()
    if fmt == "plotdata":
        lines = [f"{name}\t{pct(v)}" for name, v, _ in _aggregate_rows(report) if v is not None]
        return "\n".join(["group\tscore", *lines]) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")


def emit_report(report: EvalReport, fmt: str, path: str | os.PathLike) -> None:
    text = render_report(report, fmt)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def parse_report(text: str, fmt: str) -> EvalReport:
    if fmt == "json":
        return EvalReport.from_json(json.loads(text))
    if fmt == "csv":
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows or set(rows[0]) != set(CSV_FIELDS):
            raise ValueError("not a report CSV")
        datasets = [DatasetScore(r["name"], r["meta_task"], r["ood"] == "1", float(r["p_at_1"]), int(r["n"]))
                    for r in rows if r["kind"] == "dataset"]
        agg = {r["name"]: (None if r["p_at_1"] == "" else float(r["p_at_1"]), int(r["n"]))
               for r in rows if r["kind"] == "aggregate"}
        meta = {k: v for k, (v, _) in agg.items() if k in META_TASKS}
        counts = {k: n for k, (_, n) in agg.items()}
        return EvalReport(datasets, meta, agg["ind"][0], agg["ood"][0], agg["overall"][0], counts)
    raise ValueError(f"cannot parse report format {fmt!r}")


def load_report(path: str | os.PathLike, fmt: str | None = None) -> EvalReport:
    fmt = fmt or ("csv" if str(path).endswith(".csv") else "json")
    with open(path, encoding="utf-8") as fh:
        return parse_report(fh.read(), fmt)
