"""Reverse-mode gradient tape.

Ops record a node on the innermost active tape whenever one of their inputs
is tracked by it. Backward replays nodes in exact reverse order and sums
incoming gradients left to right in the order they arrive, so two identical
programs produce bitwise-identical gradients.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .tensor import Tensor, check_finite

VJP = Callable[[np.ndarray], Sequence[np.ndarray | None]]

_local = threading.local()


def _stack() -> list[GradTape]:
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


def active_tape() -> GradTape | None:
    st = _stack()
    return st[-1] if st else None


@dataclass
class TapeStats:
    """Counts tracked activation elements held by open tapes."""

    live_elements: int = 0
    peak_elements: int = 0

    def reset(self) -> None:
        self.live_elements = 0
        self.peak_elements = 0


tape_stats = TapeStats()


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: int, inputs: tuple[int, ...], vjp: VJP):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class GradTape:
    """Context manager recording differentiable ops on watched tensors."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._tracked: set[int] = set()
        self._elements = 0
        self._used = False
        self._open = False

    def __enter__(self) -> GradTape:
        _stack().append(self)
        self._open = True
        return self

    def __exit__(self, *exc) -> None:
        st = _stack()
        if st and st[-1] is self:
            st.pop()
        self._open = False

    def watch(self, tensors: Tensor | Iterable[Tensor] | Mapping[str, Tensor]) -> None:
        if isinstance(tensors, Tensor):
            tensors = [tensors]
        elif isinstance(tensors, Mapping):
            tensors = tensors.values()
        for t in tensors:
            self._tracked.add(t.uid)

    def is_tracked(self, t: Tensor) -> bool:
        return t.uid in self._tracked

    @property
    def num_nodes(self) -> int:
        return len(self._nodes)

    @property
    def tracked_elements(self) -> int:
        return self._elements

    def record(self, out: Tensor, inputs: Sequence[Tensor], vjp: VJP) -> None:
        self._nodes.append(_Node(out.uid, tuple(t.uid for t in inputs), vjp))
        self._tracked.add(out.uid)
        self._elements += out.size
        tape_stats.live_elements += out.size
        if tape_stats.live_elements > tape_stats.peak_elements:
            tape_stats.peak_elements = tape_stats.live_elements

    def _release(self) -> None:
        tape_stats.live_elements -= self._elements
        self._elements = 0
        self._nodes = []

    def backward(self, output: Tensor, seed, wrt: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
        """Vector-Jacobian product of ``output`` seeded with ``seed``.

        Returns one gradient array per entry of ``wrt``; entries the output
        does not depend on get zeros (all of them, when the output never
        touched a watched tensor). A tape can be replayed only once.
        """
        if self._used:
            raise RuntimeError("gradient already computed on this tape; record a new one")
        seed = np.asarray(seed, dtype=output.dtype)
        if seed.shape != output.shape:
            raise ValueError(f"seed shape {seed.shape} does not match output shape {output.shape}")
        for name, t in wrt.items():
            if t.uid not in self._tracked:
                raise ValueError(f"parameter {name!r} is not tracked by this tape")
        self._used = True
        if output.uid not in self._tracked:
            # the output depends on nothing this tape watches
            self._release()
            return {name: np.zeros(t.shape, dtype=t.dtype) for name, t in wrt.items()}

        keep = {t.uid for t in wrt.values()}
        grads: dict[int, np.ndarray] = {output.uid: seed}
        for node in reversed(self._nodes):
            g = grads.get(node.out)
            if g is None:
                continue
            if node.out not in keep:
                del grads[node.out]
            in_grads = node.vjp(g)
            for uid, gi in zip(node.inputs, in_grads):
                if gi is None or uid not in self._tracked:
                    continue
                prev = grads.get(uid)
                grads[uid] = gi if prev is None else prev + gi
        self._release()

        out: dict[str, np.ndarray] = {}
        for name, t in wrt.items():
            g = grads.get(t.uid)
            out[name] = np.zeros(t.shape, dtype=t.dtype) if g is None else np.asarray(g, dtype=t.dtype)
        return out


def grad(loss: Tensor, tape: GradTape, wrt: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss with respect to each named tensor."""
    if loss.size != 1:
        raise ValueError(f"grad() needs a scalar loss, got shape {loss.shape}")
    grads = tape.backward(loss, np.ones(loss.shape, dtype=loss.dtype), wrt)
    for name, g in grads.items():
        check_finite(g, f"gradient of {name!r}")
    return grads


def record(out: np.ndarray, inputs: Sequence[Tensor], vjp: VJP) -> Tensor:
    """Wrap an op result and register it on the active tape if needed."""
    t = Tensor.wrap(out)
    tape = active_tape()
    if tape is not None and any(i.uid in tape._tracked for i in inputs):
        tape.record(t, inputs, vjp)
    return t
