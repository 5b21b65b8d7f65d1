"""Byte-level text tokens, image patches and fused token sequences."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

IMG = 256
PAD = 257
BOS = 258
EOS = 259
VOCAB_SIZE = 260
IMG_MARKER = "[IMG]"


def tokenize_text(text: str, max_tokens: int | None = None) -> list[int]:
    """Encode text as ``[BOS, bytes..., EOS]``.

    The literal ``[IMG]`` becomes the IMG special id; it is the only escape.
    With ``max_tokens`` set, the prefix is kept and EOS re-appended.
    """
    ids = [BOS]
    for i, chunk in enumerate(text.split(IMG_MARKER)):
        if i:
            ids.append(IMG)
        ids.extend(chunk.encode("utf-8"))
    ids.append(EOS)
    if max_tokens is not None and len(ids) > max_tokens:
        if max_tokens < 2:
            raise ValueError("token budget must admit BOS and EOS")
        ids = ids[: max_tokens - 1] + [EOS]
    return ids


def decode_tokens(ids) -> str:
    parts: list[str] = []
    buf = bytearray()
    for t in ids:
        t = int(t)
        if t < 256:
            buf.append(t)
        elif t == IMG:
            parts.append(buf.decode("utf-8", errors="replace"))
            buf = bytearray()
            parts.append(IMG_MARKER)
    parts.append(buf.decode("utf-8", errors="replace"))
    return "".join(parts)


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Split a ``c x h x w`` image into row-major patches of length ``c*p*p``."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3:
        raise ValueError(f"expected a c x h x w image, got shape {image.shape}")
    c, h, w = image.shape
    p = patch_size
    if p < 1 or h % p or w % p:
        raise ValueError(f"image extents {h}x{w} not divisible by patch size {p}")
    x = image.reshape(c, h // p, p, w // p, p)
    return x.transpose(1, 3, 0, 2, 4).reshape((h // p) * (w // p), c * p * p)


@dataclass(frozen=True)
class TokenSequence:
    """A fused sequence: ``ids`` holds text ids, with PAD at patch slots.

    ``patch_slots[i]`` is the position filled by ``patches[i]``. ``mask`` is
    True for real positions; pooling reads the last real one.
    """

    ids: np.ndarray
    patches: np.ndarray | None = None
    patch_slots: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.mask is None:
            object.__setattr__(self, "mask", np.ones(len(self.ids), dtype=bool))
        if not self.mask.any():
            raise ValueError("sequence has no real tokens")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def last_position(self) -> int:
        return int(np.flatnonzero(self.mask)[-1])

    def with_padding(self, n: int) -> TokenSequence:
        """Append ``n`` masked-out PAD tokens."""
        return TokenSequence(
            ids=np.concatenate([self.ids, np.full(n, PAD, dtype=self.ids.dtype)]),
            patches=self.patches,
            patch_slots=self.patch_slots,
            mask=np.concatenate([self.mask, np.zeros(n, dtype=bool)]),
        )


def build_sequence(text: str, image: np.ndarray | None, patch_size: int, max_seq: int) -> TokenSequence:
    """Fuse rendered text and an optional image into one sequence.

    Patches are inserted right after the IMG token. An image with no marker
    in the text gets one prepended.
    """
    patches = None
    n_patches = 0
    if image is not None:
        patches = patchify(image, patch_size)
        n_patches = len(patches)
        if IMG_MARKER not in text:
            text = IMG_MARKER + text
        if text.count(IMG_MARKER) != 1:
            raise ValueError("text must carry exactly one [IMG] marker")
    elif IMG_MARKER in text:
        raise ValueError("[IMG] marker present but no image supplied")
    budget = max_seq - n_patches
    if budget < 2:
        raise ValueError(f"{n_patches} patches leave no room for text within max_seq={max_seq}")
    ids = tokenize_text(text, max_tokens=budget)
    if patches is not None and IMG not in ids:
        raise ValueError("image marker was truncated away")
    if patches is None:
        return TokenSequence(ids=np.asarray(ids, dtype=np.intp))
    at = ids.index(IMG) + 1
    full = ids[:at] + [PAD] * n_patches + ids[at:]
    slots = np.arange(at, at + n_patches, dtype=np.intp)
    return TokenSequence(ids=np.asarray(full, dtype=np.intp), patches=patches, patch_slots=slots)
