"""Example records, JSONL manifests and the in-memory dataset."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from ..instruction import TaskSpec, modality_of
from ..numerics import load_tensor, save_tensor

TRAIN_CAP = 50_000


class DataError(ValueError):
    """Malformed or inconsistent dataset content."""


@dataclass(frozen=True)
class Side:
    """One query or target: optional text plus an optional image reference."""

    text: str | None = None
    image: str | None = None

    @property
    def modality(self) -> str:
        return modality_of(self.text, self.image)

    def to_json(self) -> dict:
        return {"image": self.image, "text": self.text}

    @classmethod
    def from_json(cls, d) -> Side:
        if not isinstance(d, dict) or set(d) - {"text", "image"}:
            raise DataError(f"bad side object: {d!r}")
        return cls(text=d.get("text"), image=d.get("image"))


@dataclass(frozen=True)
class ExampleRecord:
    id: str
    task_id: str
    split: str
    query: Side
    positive: Side | None = None
    hard_negatives: tuple[Side, ...] = ()
    candidates: tuple[Side, ...] = ()
    label_index: int | None = None

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "task_id": self.task_id,
            "split": self.split,
            "query": self.query.to_json(),
            "positive": None if self.positive is None else self.positive.to_json(),
            "hard_negatives": [s.to_json() for s in self.hard_negatives],
            "candidates": [s.to_json() for s in self.candidates],
            "label_index": self.label_index,
        }

    @classmethod
    def from_json(cls, d: dict) -> ExampleRecord:
        known = {"id", "task_id", "split", "query", "positive", "hard_negatives", "candidates", "label_index"}
        if not isinstance(d, dict):
            raise DataError("record must be a JSON object")
        if set(d) - known:
            raise DataError(f"unknown record fields {sorted(set(d) - known)}")
        for key in ("id", "task_id", "split", "query"):
            if key not in d:
                raise DataError(f"record missing {key!r}")
        pos = d.get("positive")
        return cls(
            id=str(d["id"]),
            task_id=d["task_id"],
            split=d["split"],
            query=Side.from_json(d["query"]),
            positive=None if pos is None else Side.from_json(pos),
            hard_negatives=tuple(Side.from_json(s) for s in d.get("hard_negatives") or ()),
            candidates=tuple(Side.from_json(s) for s in d.get("candidates") or ()),
            label_index=d.get("label_index"),
        )

    def image_refs(self) -> list[str]:
        sides = [self.query, *([self.positive] if self.positive else []), *self.hard_negatives, *self.candidates]
        return [s.image for s in sides if s.image is not None]


def validate_record(rec: ExampleRecord, tasks: dict[str, TaskSpec]) -> None:
    task = tasks.get(rec.task_id)
    if task is None:
        raise DataError(f"record {rec.id!r}: unknown task_id {rec.task_id!r}")
    if rec.split not in ("train", "eval"):
        raise DataError(f"record {rec.id!r}: split must be 'train' or 'eval'")

    def want(side: Side, expected: str, what: str) -> None:
        try:
            got = side.modality
        except ValueError:
            got = "empty"
        if got != expected:
            raise DataError(f"record {rec.id!r}: {what} modality {got} does not match task ({expected})")

    want(rec.query, task.query_modality, "query")
    if rec.split == "train" and rec.positive is None:
        raise DataError(f"record {rec.id!r}: train record has no positive target")
    if rec.positive is not None:
        want(rec.positive, task.target_modality, "positive")
    for s in rec.hard_negatives:
        want(s, task.target_modality, "hard negative")
    if rec.split == "eval":
        if len(rec.candidates) < 2:
            raise DataError(f"record {rec.id!r}: eval record needs >= 2 candidates")
        if rec.label_index is None or not 0 <= rec.label_index < len(rec.candidates):
            raise DataError(f"record {rec.id!r}: label_index {rec.label_index!r} out of range")
        for s in rec.candidates:
            want(s, task.target_modality, "candidate")


@dataclass
class Dataset:
    """Records plus their task registry and image source.

    Images resolve against ``blobs`` first, then files under ``root``; loaded
    files are cached.
    """

    records: list[ExampleRecord]
    tasks: dict[str, TaskSpec]
    root: Path | None = None
    blobs: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def image(self, ref: str) -> np.ndarray:
        arr = self.blobs.get(ref)
        if arr is None:
            if self.root is None:
                raise DataError(f"image {ref!r} not found")
            path = self.root / ref
            if not path.is_file():
                raise DataError(f"image file {path} does not exist")
            arr = load_tensor(path)
            self.blobs[ref] = arr
        return arr

    def subset(self, records: Iterable[ExampleRecord]) -> Dataset:
        return Dataset(list(records), self.tasks, self.root, self.blobs)

    def split(self, name: str) -> Dataset:
        return self.subset(r for r in self.records if r.split == name)

    def by_task(self) -> dict[str, list[ExampleRecord]]:
        out: dict[str, list[ExampleRecord]] = {}
        for r in self.records:
            out.setdefault(r.task_id, []).append(r)
        return out

    def merge(self, other: Dataset) -> Dataset:
        if self.root != other.root and self.root is not None and other.root is not None:
            raise DataError("cannot merge datasets with different image roots")
        blobs = dict(self.blobs)
        blobs.update(other.blobs)
        return Dataset(self.records + other.records, {**self.tasks, **other.tasks}, self.root or other.root, blobs)


def record_line(rec: ExampleRecord) -> str:
    return json.dumps(rec.to_json(), sort_keys=True, ensure_ascii=False)


def write_manifest(path: str | os.PathLike, records: Iterable[ExampleRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(record_line(rec) + "\n")


def write_dataset(out_dir: str | os.PathLike, dataset: Dataset, manifest_name: str = "manifest.jsonl") -> Path:
    """Write the manifest plus every referenced in-memory image as an EMT1 blob."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for ref in sorted({ref for r in dataset.records for ref in r.image_refs()}):
        target = out / ref
        target.parent.mkdir(parents=True, exist_ok=True)
        save_tensor(target, dataset.image(ref))
    path = out / manifest_name
    write_manifest(path, dataset.records)
    return path


def _cap_per_task(records: list[ExampleRecord], cap: int, seed: int) -> list[ExampleRecord]:
    counts: dict[str, list[int]] = {}
    for i, r in enumerate(records):
        if r.split == "train":
            counts.setdefault(r.task_id, []).append(i)
    drop: set[int] = set()
    for task_id in sorted(counts):
        idx = counts[task_id]
        if len(idx) > cap:
            rng = np.random.default_rng([seed, len(idx)])
            keep = set(np.asarray(idx)[rng.choice(len(idx), size=cap, replace=False)].tolist())
            drop.update(i for i in idx if i not in keep)
    return [r for i, r in enumerate(records) if i not in drop]


def load_manifest(path: str | os.PathLike, tasks: dict[str, TaskSpec], *, split: str | None = None,
                  cap: int = TRAIN_CAP, seed: int = 0) -> Dataset:
    """Read and validate a JSONL manifest.

    Training records above ``cap`` per task are subsampled uniformly with
    ``seed``; kept records stay in file order. Image files are only checked
    when first read.
    """
    path = Path(path)
    records: list[ExampleRecord] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = ExampleRecord.from_json(json.loads(line))
                validate_record(rec, tasks)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            except (DataError, ValueError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            if split is None or rec.split == split:
                records.append(rec)
    records = _cap_per_task(records, cap, seed)
    return Dataset(records, dict(tasks), root=path.parent)
