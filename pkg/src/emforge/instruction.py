"""Task registry and instruction templates for queries and targets."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from importlib import resources

from .encoder.tokens import IMG_MARKER

META_TASKS = ("classification", "vqa", "retrieval", "grounding")
MODALITIES = ("T", "I", "I+T")


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    meta_task: str
    definition: str
    query_modality: str
    target_modality: str
    ood: bool = False
    target_instruction: str | None = None

    def __post_init__(self):
        if not self.task_id:
            raise ValueError("task_id must be non-empty")
        if not self.definition.strip():
            raise ValueError(f"task {self.task_id!r}: definition must be non-empty")
        if self.meta_task not in META_TASKS:
            raise ValueError(f"task {self.task_id!r}: unknown meta_task {self.meta_task!r}")
        for m in (self.query_modality, self.target_modality):
            if m not in MODALITIES:
                raise ValueError(f"task {self.task_id!r}: modality {m!r} not in {MODALITIES}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> TaskSpec:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown task fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class FormattedInput:
    """Rendered text (with at most one ``[IMG]`` marker) and the image it refers to."""

    text: str
    image: str | None = None

    def __post_init__(self):
        n = self.text.count(IMG_MARKER)
        if n != (1 if self.image is not None else 0):
            raise ValueError(f"rendered text has {n} image markers but image={self.image!r}")


def modality_of(text: str | None, image) -> str:
    has_text = bool(text)
    has_image = image is not None
    if has_text and has_image:
        return "I+T"
    if has_image:
        return "I"
    if has_text:
        return "T"
    raise ValueError("input carries neither text nor image")


def _check(expected: str, text, image, side: str, task: TaskSpec) -> None:
    got = modality_of(text, image)
    if got != expected:
        raise ValueError(f"task {task.task_id!r} expects {side} modality {expected}, got {got}")


def format_query(task: TaskSpec, query_text: str | None, query_image: str | None,
                 with_instruction: bool = True) -> FormattedInput:
    """Render ``[IMG] Instruct: {definition}\\nQuery: {text}``.

    Without the instruction only the raw query content remains.
    """
    _check(task.query_modality, query_text, query_image, "query", task)
    prefix = IMG_MARKER + " " if query_image is not None else ""
    if with_instruction:
        return FormattedInput(f"{prefix}Instruct: {task.definition}\nQuery: {query_text or ''}", query_image)
    if query_image is None:
        return FormattedInput(query_text, None)
    return FormattedInput(IMG_MARKER + (" " + query_text if query_text else ""), query_image)


def format_target(task: TaskSpec, target_text: str | None, target_image: str | None) -> FormattedInput:
    """Prepend the task's target instruction, if any, to the raw target."""
    _check(task.target_modality, target_text, target_image, "target", task)
    parts = []
    if target_image is not None:
        parts.append(IMG_MARKER)
    if task.target_instruction:
        parts.append(task.target_instruction)
    if target_text:
        parts.append(target_text)
    return FormattedInput(" ".join(parts), target_image)


# ---------------------------------------------------------------------------
# registry files
# ---------------------------------------------------------------------------

def load_registry(path: str | os.PathLike) -> dict[str, TaskSpec]:
    with open(path, encoding="utf-8") as fh:
        return parse_registry(json.load(fh))


def parse_registry(items) -> dict[str, TaskSpec]:
    if not isinstance(items, list):
        raise ValueError("task registry must be a JSON array")
    tasks: dict[str, TaskSpec] = {}
    for d in items:
        t = TaskSpec.from_json(d)
        if t.task_id in tasks:
            raise ValueError(f"duplicate task_id {t.task_id!r}")
        tasks[t.task_id] = t
    return tasks


def save_registry(path: str | os.PathLike, tasks) -> None:
    items = [t.to_json() for t in (tasks.values() if isinstance(tasks, dict) else tasks)]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(items, fh, indent=2, sort_keys=True)
        fh.write("\n")


def default_registry() -> dict[str, TaskSpec]:
    """The shipped registry: one task per synthetic meta-task family."""
    text = resources.files("emforge").joinpath("tasks.json").read_text(encoding="utf-8")
    return parse_registry(json.loads(text))
