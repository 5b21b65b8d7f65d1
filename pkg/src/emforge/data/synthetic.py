"""Deterministic synthetic datasets shaped like the four embedding meta-tasks.

Every generator is a pure function of its :class:`SyntheticSpec`. Each result
carries an oracle that decodes query content with the generator's own
ground-truth mapping and picks the matching candidate; on a well-formed
dataset it is always right.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from ..instruction import TaskSpec
from .records import DataError, Dataset, ExampleRecord, Side

_FAMILY_CODES = {"classification": 1, "vqa": 2, "retrieval": 3, "grounding": 4, "instruction_pair": 5}

# quadrant textures, written over (row, col) grids of side q.
# Names share one length so caption words sit at fixed offsets.
_TEXTURES = {
    False: {
        "dark": lambda r, c, q: np.zeros_like(r, dtype=float),
        "full": lambda r, c, q: np.ones_like(r, dtype=float),
        "rows": lambda r, c, q: (r % 2).astype(float),
        "cols": lambda r, c, q: (c % 2).astype(float),
        "dots": lambda r, c, q: ((r + c) % 2).astype(float),
        "ring": lambda r, c, q: ((r == 0) | (c == 0) | (r == q - 1) | (c == q - 1)).astype(float),
    },
    True: {
        "diag": lambda r, c, q: (r == c).astype(float),
        "left": lambda r, c, q: (c < q // 2).astype(float),
        "roof": lambda r, c, q: (r < q // 2).astype(float),
        "spot": lambda r, c, q: ((abs(2 * r - q + 1) <= 1) & (abs(2 * c - q + 1) <= 1)).astype(float),
        "bars": lambda r, c, q: ((c // 2) % 2).astype(float),
        "step": lambda r, c, q: ((r // 2) % 2).astype(float),
    },
}

_PALETTES = {
    False: ["black", "charcoal", "gray", "silver", "pale", "white"],
    True: ["onyx", "slate", "stone", "cloud", "ivory", "chalk"],
}

_SYLLABLES_IND = ["ba", "ko", "ri", "mu", "te", "sa", "ni", "lo", "pe", "du", "ga", "vi"]
_SYLLABLES_OOD = ["zu", "xe", "qo", "ja", "wy", "fi", "hu", "yo", "ce", "za", "ku", "ny"]


@dataclass(frozen=True)
class SyntheticSpec:
    """What to generate.

    ``n_classes`` is the family's vocabulary size: classes for
    classification, palette size for vqa, textures per region for retrieval
    and instruction_pair, named patterns for grounding.
    """

    meta_task: str
    n_train: int = 2000
    n_eval: int = 200
    n_candidates: int = 64
    n_classes: int | None = None
    image_size: int | None = None
    seed: int = 0
    direction: str = "t2i"
    ood: bool = False
    noise: float = 0.05

    def __post_init__(self):
        if self.meta_task not in _FAMILY_CODES:
            raise DataError(f"unsupported meta_task {self.meta_task!r}")
        if self.n_candidates < 2:
            raise DataError("n_candidates must be >= 2")
        if self.n_train < 0 or self.n_eval < 0:
            raise DataError("sizes must be non-negative")
        if self.direction not in ("t2i", "i2t"):
            raise DataError("direction must be 't2i' or 'i2t'")


@dataclass
class SyntheticResult:
    dataset: Dataset
    tasks: list[TaskSpec]
    oracle: Callable[[ExampleRecord], int] = field(repr=False)


def content_hash(rec: ExampleRecord, dataset: Dataset) -> str:
    """Hash of a record's query and positive contents (text and image bytes)."""
    h = hashlib.sha256()
    for side in (rec.query, rec.positive):
        if side is None:
            h.update(b"\x00")
            continue
        h.update((side.text or "").encode("utf-8") + b"\x01")
        if side.image is not None:
            h.update(np.ascontiguousarray(dataset.image(side.image)).tobytes())
        h.update(b"\x02")
    return h.hexdigest()


def _rng(spec: SyntheticSpec, *extra: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, _FAMILY_CODES[spec.meta_task], int(spec.ood), *extra])


def _noisy(rng: np.random.Generator, clean: np.ndarray, sigma: float) -> np.ndarray:
    return (clean + rng.normal(0.0, sigma, clean.shape))[None].astype(np.float32)


def _words(n: int, ood: bool, rng: np.random.Generator) -> list[str]:
    syl = _SYLLABLES_OOD if ood else _SYLLABLES_IND
    out: list[str] = []
    seen: set[str] = set()
    while len(out) < n:
        w = "".join(syl[i] for i in rng.integers(0, len(syl), 2 + int(rng.integers(0, 2))))
        if w not in seen:
            seen.add(w)
            out.append(w)
    return out


def _prototypes(n: int, size: int, rng: np.random.Generator, min_diff: int) -> np.ndarray:
    protos: list[np.ndarray] = []
    while len(protos) < n:
        p = (rng.random((size, size)) < 0.5).astype(float)
        if all(np.abs(p - q).sum() >= min_diff for q in protos):
            protos.append(p)
    return np.stack(protos)


def _nearest(x: np.ndarray, protos: np.ndarray) -> int:
    d = ((protos - x[None]) ** 2).reshape(len(protos), -1).sum(axis=1)
    return int(np.argmin(d))


class _Builder:
    def __init__(self, spec: SyntheticSpec, task: TaskSpec):
        self.spec = spec
        self.task = task
        self.records: list[ExampleRecord] = []
        self.blobs: dict[str, np.ndarray] = {}

    def image(self, name: str, arr: np.ndarray) -> str:
        ref = f"images/{self.task.task_id}/{name}.emt"
        self.blobs[ref] = arr
        return ref

    def dataset(self, tasks: list[TaskSpec]) -> Dataset:
        return Dataset(self.records, {t.task_id: t for t in tasks}, None, self.blobs)


def _check_disjoint(ds: Dataset) -> None:
    train = {content_hash(r, ds) for r in ds.records if r.split == "train"}
    for r in ds.records:
        if r.split == "eval" and content_hash(r, ds) in train:
            raise DataError(f"eval record {r.id} duplicates a training record")


def _splits(spec: SyntheticSpec):
    for i in range(spec.n_train):
        yield "train", i
    for i in range(spec.n_eval):
        yield "eval", i


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------

def _classification(spec: SyntheticSpec) -> SyntheticResult:
    n_classes = spec.n_classes or spec.n_candidates
    size = spec.image_size or 8
    if spec.n_candidates > n_classes:
        raise DataError("classification needs n_candidates <= n_classes")
    rng = _rng(spec, 0)
    protos = _prototypes(n_classes, size, rng, min_diff=max(4, size * size // 8))
    names = _words(n_classes, spec.ood, rng)
    task = TaskSpec(
        task_id="syn-classification" + ("-ood" if spec.ood else ""),
        meta_task="classification",
        definition="Identify the object shown in the image.",
        query_modality="I",
        target_modality="T",
        ood=spec.ood,
    )
    b = _Builder(spec, task)
    rng = _rng(spec, 1)
    for split, i in _splits(spec):
        rid = f"{task.task_id}-{split}-{i:05d}"
        cls = int(rng.integers(n_classes))
        q = Side(image=b.image(rid, _noisy(rng, protos[cls], spec.noise)))
        pos = Side(text=names[cls])
        if split == "train":
            b.records.append(ExampleRecord(rid, task.task_id, split, q, pos))
            continue
        if spec.n_candidates == n_classes:
            pool = list(rng.permutation(n_classes))
        else:
            others = [c for c in rng.permutation(n_classes) if c != cls][: spec.n_candidates - 1]
            pool = list(rng.permutation([cls, *others]))
        cands = tuple(Side(text=names[c]) for c in pool)
        b.records.append(ExampleRecord(rid, task.task_id, split, q, pos, (), cands, pool.index(cls)))

    ds = b.dataset([task])

    def oracle(rec: ExampleRecord) -> int:
        guess = names[_nearest(ds.image(rec.query.image)[0], protos)]
        return [c.text for c in rec.candidates].index(guess)

    return SyntheticResult(ds, [task], oracle)


# ---------------------------------------------------------------------------
# vqa
# ---------------------------------------------------------------------------

def _vqa(spec: SyntheticSpec) -> SyntheticResult:
    palette = _PALETTES[spec.ood]
    n_colors = spec.n_classes or 4
    if not 2 <= n_colors <= len(palette):
        raise DataError(f"vqa palette size must be in [2, {len(palette)}]")
    size = spec.image_size or 8
    grid = 4
    if size % grid:
        raise DataError("vqa image_size must be a multiple of 4")
    cell = size // grid
    offset = 0.1 if spec.ood else 0.0
    levels = offset + (1.0 - 2 * offset) * np.arange(n_colors) / (n_colors - 1)
    colors = palette[:n_colors]
    rng = _rng(spec, 0)
    fillers = [w for w in _words(spec.n_candidates + 8, spec.ood, rng) if w not in colors]
    if len(colors) + len(fillers) < spec.n_candidates:
        raise DataError("not enough distractor words")
    rows = "ABCD"
    task = TaskSpec(
        task_id="syn-vqa" + ("-ood" if spec.ood else ""),
        meta_task="vqa",
        definition="Answer the question about the image.",
        query_modality="I+T",
        target_modality="T",
        ood=spec.ood,
    )
    b = _Builder(spec, task)
    rng = _rng(spec, 1)
    for split, i in _splits(spec):
        rid = f"{task.task_id}-{split}-{i:05d}"
        cells = rng.integers(n_colors, size=(grid, grid))
        clean = np.kron(levels[cells], np.ones((cell, cell)))
        r, c = (int(v) for v in rng.integers(grid, size=2))
        q = Side(text=f"What color is cell {rows[r]}{c + 1}?", image=b.image(rid, _noisy(rng, clean, spec.noise)))
        answer = colors[cells[r, c]]
        pos = Side(text=answer)
        if split == "train":
            b.records.append(ExampleRecord(rid, task.task_id, split, q, pos))
            continue
        words = list(colors) + list(rng.permutation(fillers)[: max(0, spec.n_candidates - n_colors)])
        if spec.n_candidates < n_colors:
            words = [answer] + [w for w in rng.permutation(colors) if w != answer][: spec.n_candidates - 1]
        pool = list(rng.permutation(words))
        cands = tuple(Side(text=w) for w in pool)
        b.records.append(ExampleRecord(rid, task.task_id, split, q, pos, (), cands, pool.index(answer)))

    ds = b.dataset([task])

    def oracle(rec: ExampleRecord) -> int:
        img = ds.image(rec.query.image)[0]
        cellname = rec.query.text.rsplit(" ", 1)[1].rstrip("?")
        r, c = rows.index(cellname[0]), int(cellname[1:]) - 1
        value = img[r * cell:(r + 1) * cell, c * cell:(c + 1) * cell].mean()
        guess = colors[int(np.argmin(np.abs(levels - value)))]
        return [s.text for s in rec.candidates].index(guess)

    return SyntheticResult(ds, [task], oracle)


# ---------------------------------------------------------------------------
# quadrant textures (retrieval, instruction_pair)
# ---------------------------------------------------------------------------

class _QuadrantCodec:
    """Renders four-quadrant texture images and decodes them back."""

    def __init__(self, n_textures: int, size: int, ood: bool):
        table = _TEXTURES[ood]
        if not 2 <= n_textures <= len(table):
            raise DataError(f"texture vocabulary must have 2..{len(table)} entries")
        if size % 2 or size < 4:
            raise DataError("image_size must be even and >= 4")
        self.names = list(table)[:n_textures]
        q = size // 2
        r, c = np.mgrid[0:q, 0:q]
        self.tiles = np.stack([table[n](r, c, q) for n in self.names])
        self.q = q

    def render(self, combo) -> np.ndarray:
        t = self.tiles
        top = np.concatenate([t[combo[0]], t[combo[1]]], axis=1)
        bottom = np.concatenate([t[combo[2]], t[combo[3]]], axis=1)
        return np.concatenate([top, bottom], axis=0)

    def decode(self, img: np.ndarray) -> tuple[int, ...]:
        q = self.q
        quads = [img[:q, :q], img[:q, q:], img[q:, :q], img[q:, q:]]
        return tuple(_nearest(x, self.tiles) for x in quads)

    def caption(self, combo) -> str:
        return " ".join(self.names[i] for i in combo)


def _retrieval(spec: SyntheticSpec) -> SyntheticResult:
    codec = _QuadrantCodec(spec.n_classes or 4, spec.image_size or 8, spec.ood)
    t2i = spec.direction == "t2i"
    task = TaskSpec(
        task_id=f"syn-retrieval-{spec.direction}" + ("-ood" if spec.ood else ""),
        meta_task="retrieval",
        definition="Find an image that matches the given caption." if t2i else "Find a caption for the given image.",
        query_modality="T" if t2i else "I",
        target_modality="I" if t2i else "T",
        ood=spec.ood,
    )
    n_tex = len(codec.names)
    if n_tex**4 < spec.n_candidates:
        raise DataError("too few texture combinations for the candidate pool")
    b = _Builder(spec, task)
    rng = _rng(spec, 1)
    items: list[tuple[str, str, tuple[int, ...], Side, Side]] = []
    for split, i in _splits(spec):
        rid = f"{task.task_id}-{split}-{i:05d}"
        combo = tuple(int(v) for v in rng.integers(n_tex, size=4))
        text_side = Side(text=codec.caption(combo))
        img_side = Side(image=b.image(rid, _noisy(rng, codec.render(combo), spec.noise)))
        q, pos = (text_side, img_side) if t2i else (img_side, text_side)
        items.append((rid, split, combo, q, pos))

    eval_items = [it for it in items if it[1] == "eval"]
    for rid, split, combo, q, pos in items:
        if split == "train":
            b.records.append(ExampleRecord(rid, task.task_id, split, q, pos))
            continue
        pool = [pos]
        seen = {combo}
        for j in rng.permutation(len(eval_items)):
            if len(pool) == spec.n_candidates:
                break
            other = eval_items[j]
            if other[2] not in seen:
                seen.add(other[2])
                pool.append(other[4])
        if len(pool) < spec.n_candidates:
            raise DataError(f"eval split too small to fill {spec.n_candidates} distinct candidates; raise n_eval")
        perm = rng.permutation(len(pool))
        cands = tuple(pool[k] for k in perm)
        b.records.append(ExampleRecord(rid, task.task_id, split, q, pos, (), cands, int(np.flatnonzero(perm == 0)[0])))

    ds = b.dataset([task])

    def oracle(rec: ExampleRecord) -> int:
        if t2i:
            want = rec.query.text
            got = [codec.caption(codec.decode(ds.image(c.image)[0])) for c in rec.candidates]
        else:
            want = codec.caption(codec.decode(ds.image(rec.query.image)[0]))
            got = [c.text for c in rec.candidates]
        return got.index(want)

    return SyntheticResult(ds, [task], oracle)


def generate_instruction_pair(spec: SyntheticSpec) -> SyntheticResult:
    """Two tasks sharing query images; only the instruction says which half to name.

    Every eval pool holds all two-texture captions, so the answer for the
    other half is always among the distractors.
    """
    spec = replace(spec, meta_task="instruction_pair") if spec.meta_task != "instruction_pair" else spec
    codec = _QuadrantCodec(spec.n_classes or 4, spec.image_size or 8, spec.ood)
    n_tex = len(codec.names)
    pairs = [(a, c) for a in range(n_tex) for c in range(n_tex)]
    labels = [f"{codec.names[a]} {codec.names[c]}" for a, c in pairs]
    suffix = "-ood" if spec.ood else ""
    tasks = [
        TaskSpec(f"syn-pair-top{suffix}", "classification", "Name the textures in the top half of the image.",
                 "I", "T", ood=spec.ood),
        TaskSpec(f"syn-pair-bottom{suffix}", "classification", "Name the textures in the bottom half of the image.",
                 "I", "T", ood=spec.ood),
    ]
    halves = {tasks[0].task_id: (0, 1), tasks[1].task_id: (2, 3)}
    b = _Builder(spec, tasks[0])
    rng = _rng(spec, 1)
    for split, i in _splits(spec):
        combo = tuple(int(v) for v in rng.integers(n_tex, size=4))
        ref = b.image(f"pair{suffix}-{split}-{i:05d}", _noisy(rng, codec.render(combo), spec.noise))
        for t in tasks:
            rid = f"{t.task_id}-{split}-{i:05d}"
            a, c = halves[t.task_id]
            answer = f"{codec.names[combo[a]]} {codec.names[combo[c]]}"
            q, pos = Side(image=ref), Side(text=answer)
            if split == "train":
                b.records.append(ExampleRecord(rid, t.task_id, split, q, pos))
                continue
            perm = rng.permutation(len(labels))
            pool = [labels[k] for k in perm]
            cands = tuple(Side(text=w) for w in pool)
            b.records.append(ExampleRecord(rid, t.task_id, split, q, pos, (), cands, pool.index(answer)))

    ds = b.dataset(tasks)

    def oracle(rec: ExampleRecord) -> int:
        combo = codec.decode(ds.image(rec.query.image)[0])
        a, c = halves[rec.task_id]
        return [s.text for s in rec.candidates].index(f"{codec.names[combo[a]]} {codec.names[combo[c]]}")

    return SyntheticResult(ds, tasks, oracle)


# ---------------------------------------------------------------------------
# grounding
# ---------------------------------------------------------------------------

def _grounding(spec: SyntheticSpec) -> SyntheticResult:
    size = spec.image_size or 16
    if size % 2:
        raise DataError("grounding image_size must be even")
    half = size // 2
    n_patterns = spec.n_classes or max(2 * spec.n_candidates, 8)
    if n_patterns < spec.n_candidates or n_patterns < 4:
        raise DataError("grounding needs n_classes >= max(n_candidates, 4) so pool patterns stay distinct")
    rng = _rng(spec, 0)
    protos = _prototypes(n_patterns, half, rng, min_diff=max(4, half * half // 8))
    names = _words(n_patterns, spec.ood, rng)
    task = TaskSpec(
        task_id="syn-grounding" + ("-ood" if spec.ood else ""),
        meta_task="grounding",
        definition="Select the portion of the image that shows the named pattern.",
        query_modality="I+T",
        target_modality="I",
        ood=spec.ood,
        target_instruction="Represent the given cropped image of the object.",
    )
    b = _Builder(spec, task)
    rng = _rng(spec, 1)
    corners = [(0, 0), (0, half), (half, 0), (half, half)]
    items = []
    for split, i in _splits(spec):
        rid = f"{task.task_id}-{split}-{i:05d}"
        pats = [int(v) for v in rng.choice(n_patterns, size=4, replace=False)]
        clean = np.zeros((size, size))
        for (y, x), p in zip(corners, pats):
            clean[y:y + half, x:x + half] = protos[p]
        img = _noisy(rng, clean, spec.noise)
        crops = [Side(image=b.image(f"{rid}_crop{k}", img[:, y:y + half, x:x + half].copy()))
                 for k, (y, x) in enumerate(corners)]
        which = int(rng.integers(4))
        q = Side(text=names[pats[which]], image=b.image(rid, img))
        items.append((rid, split, pats, which, q, crops))

    eval_items = [it for it in items if it[1] == "eval"]
    for rid, split, pats, which, q, crops in items:
        pos = crops[which]
        if split == "train":
            b.records.append(ExampleRecord(rid, task.task_id, split, q, pos))
            continue
        hard = [k for k in range(4) if k != which][: spec.n_candidates - 1]
        pool = [pos] + [crops[k] for k in hard]
        seen = {pats[which], *(pats[k] for k in hard)}
        for j in rng.permutation(len(eval_items)):
            if len(pool) >= spec.n_candidates:
                break
            o = eval_items[j]
            if o[0] == rid:
                continue
            for k in rng.permutation(4):
                if o[2][k] not in seen and len(pool) < spec.n_candidates:
                    seen.add(o[2][k])
                    pool.append(o[5][k])
        if len(pool) < spec.n_candidates:
            raise DataError(f"eval split too small to fill {spec.n_candidates} distinct candidates; raise n_eval")
        perm = rng.permutation(len(pool))
        cands = tuple(pool[k] for k in perm)
        b.records.append(ExampleRecord(rid, task.task_id, split, q, pos, (), cands, int(np.flatnonzero(perm == 0)[0])))

    ds = b.dataset([task])

    def oracle(rec: ExampleRecord) -> int:
        proto = protos[names.index(rec.query.text)]
        d = [((ds.image(c.image)[0] - proto) ** 2).sum() for c in rec.candidates]
        return int(np.argmin(d))

    return SyntheticResult(ds, [task], oracle)


_GENERATORS = {
    "classification": _classification,
    "vqa": _vqa,
    "retrieval": _retrieval,
    "grounding": _grounding,
    "instruction_pair": generate_instruction_pair,
}


def generate_synthetic(spec: SyntheticSpec) -> SyntheticResult:
    """Build the dataset, its task registry entries, and the ground-truth oracle."""
    result = _GENERATORS[spec.meta_task](spec)
    _check_disjoint(result.dataset)
    return result
