"""Continuous stack of scalar cells driven by a (PUSH, POP, NoOP) distribution."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mathcore import DTYPE, logistic, softmax

PUSH, POP, NOOP = 0, 1, 2
EMPTY = 0.0


@dataclass
class StackState:
    """Index 0 is the top; reads past the last stored cell return ``EMPTY``."""

    cells: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=DTYPE))
    read_width: int = 3

    @property
    def depth(self) -> int:
        return len(self.cells)

    def copy(self) -> "StackState":
        return StackState(self.cells.copy(), self.read_width)

    def __getitem__(self, i: int) -> float:
        return float(self.cells[i]) if 0 <= i < len(self.cells) else EMPTY


def _check_shape(name, mat, shape):
    mat = np.asarray(mat, dtype=DTYPE)
    if mat.shape != shape:
        raise ValueError(f"{name} has shape {mat.shape}, expected {shape}")
    return mat


def action_dist(z, A, bias=None):
    z = np.asarray(z, dtype=DTYPE)
    A = _check_shape("A", A, (3, z.shape[0]))
    logits = A @ z
    if bias is not None:
        logits = logits + bias
    return softmax(logits)


def push_value(z, D, bias: float = 0.0) -> float:
    z = np.asarray(z, dtype=DTYPE)
    D = np.asarray(D, dtype=DTYPE).reshape(-1)
    if D.shape != z.shape:
        raise ValueError(f"D has {D.size} entries, expected {z.size}")
    return float(logistic(np.array([D @ z + bias]))[0])


def stack_step(prev: StackState, a, v: float, noop_identity: bool = True) -> StackState:
    """One blended update; the result is one cell deeper than ``prev``.

    With ``noop_identity`` the NoOP weight also keeps every deeper cell in
    place, so a pure NoOP leaves the whole stack unchanged.  Without it, only
    the top cell carries a NoOP term.
    """
    a = np.asarray(a, dtype=DTYPE)
    old = np.zeros(prev.depth + 2, dtype=DTYPE)
    old[: prev.depth] = prev.cells
    new = np.empty(prev.depth + 1, dtype=DTYPE)
    new[0] = a[PUSH] * v + a[POP] * old[1] + a[NOOP] * old[0]
    new[1:] = a[PUSH] * old[:-2] + a[POP] * old[2:]
    if noop_identity:
        new[1:] += a[NOOP] * old[1:-1]
    return StackState(new, prev.read_width)


def read_topk(state: StackState, k: int | None = None):
    k = state.read_width if k is None else k
    if k < 1:
        raise ValueError("read width must be positive")
    out = np.zeros(k, dtype=DTYPE)
    n = min(k, state.depth)
    out[:n] = state.cells[:n]
    return out


def action_argmax(a) -> int:
    # np.argmax picks the first maximum, i.e. ties go to the lower index (PUSH)
    return int(np.argmax(a))


def noop_counter_update(ct: int, a) -> int:
    if ct < 0:
        raise ValueError("counter must be non-negative")
    return ct + 1 if action_argmax(a) == NOOP else 0


class DiscreteStack:
    """Reference symbol stack used to cross-check one-hot continuous updates."""

    def __init__(self):
        self.items: list[float] = []

    def apply(self, action: int, value: float) -> None:
        if action == PUSH:
            self.items.insert(0, value)
        elif action == POP:
            if self.items:
                self.items.pop(0)

    def top(self, k: int = 3) -> list[float]:
        return (self.items + [EMPTY] * k)[:k]


def write_trace(path: Path, rows) -> None:
    """Per-step CSV: t, action probabilities, pushed value, top-3 reads."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "a_push", "a_pop", "a_noop", "v", "s0", "s1", "s2"])
        for row in rows:
            w.writerow([row[0]] + [f"{x:.17g}" for x in row[1:]])
