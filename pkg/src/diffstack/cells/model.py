"""Sequence-level model wrapper over the compiled kernels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..mathcore import DTYPE, NonFiniteError, RngStream, check_finite, gaussian
from . import kernels
from .params import ModelParams, get_family


@dataclass
class SequenceOutput:
    loss: float
    yhat: np.ndarray  # recognition score per step
    ce: np.ndarray  # next-token cross-entropy per step
    actions: np.ndarray  # (T, 3) PUSH/POP/NoOP probabilities
    pushes: np.ndarray
    tops: np.ndarray  # (T, k) stack top after each step
    grad: np.ndarray | None = None


def cfl_arrays(tokens, eos: int) -> tuple[np.ndarray, np.ndarray]:
    """Inputs are the symbols, targets the next symbol (EOS after the last)."""
    if len(tokens) == 0:
        raise ValueError("cannot run a model on an empty string")
    inputs = np.asarray(tokens, dtype=np.int64)
    targets = np.empty_like(inputs)
    targets[:-1] = inputs[1:]
    targets[-1] = eos
    return inputs, targets


def lm_arrays(sentence, eos: int) -> tuple[np.ndarray, np.ndarray]:
    """A sentence already ends in EOS; EOS also serves as its start symbol."""
    targets = np.asarray(sentence, dtype=np.int64)
    inputs = np.empty_like(targets)
    inputs[0] = eos
    inputs[1:] = targets[:-1]
    return inputs, targets


class Model:
    """A parameter set plus the structural switches that shape its forward pass."""

    def __init__(self, params: ModelParams, carry_forward: bool | None = None):
        self.params = params
        fam = get_family(params.family)
        self.carry_forward = fam.carry_forward if carry_forward is None else carry_forward
        self._off = kernels.slot_offsets(params)
        self._core = kernels.CORE_CODE[params.core]

    @property
    def family(self) -> str:
        return self.params.family

    def noise(self, T: int, rng: RngStream | None, mu: float, sigma2: float) -> np.ndarray:
        if rng is None or (sigma2 == 0 and mu == 0):
            return np.zeros((T, self.params.m), dtype=DTYPE)
        return gaussian(rng, mu, sigma2, T * self.params.m).reshape(T, self.params.m)

    def run(
        self,
        inputs: np.ndarray,
        targets: np.ndarray,
        label: float = -1.0,
        noise: np.ndarray | None = None,
        want_grad: bool = False,
        bptt: int = 0,
        ce_weight: float = 1.0,
        rec_weight: float = 1.0,
        grad: np.ndarray | None = None,
    ) -> SequenceOutput:
        p = self.params
        T = len(inputs)
        if noise is None:
            noise = np.zeros((T, p.m), dtype=DTYPE)
        if want_grad and grad is None:
            grad = np.zeros_like(p.flat)
        gbuf = grad if want_grad else np.zeros(1, dtype=DTYPE)
        out_y = np.zeros(T)
        out_ce = np.zeros(T)
        out_act = np.zeros((T, 3))
        out_v = np.zeros(T)
        out_top = np.zeros((T, p.k))
        loss = kernels.run_sequence(
            self._core, p.flat, self._off, p.d, p.m, p.k,
            p.stack, p.noop_identity, self.carry_forward, p.inject_all_gates,
            inputs, targets, float(label), ce_weight, rec_weight,
            noise, bptt, want_grad, gbuf,
            out_y, out_ce, out_act, out_v, out_top,
        )
        if not np.isfinite(loss):
            raise NonFiniteError("loss")
        if want_grad:
            for name, g in p.grad_view(grad).items():
                check_finite(name, g, "gradient")
        return SequenceOutput(loss, out_y, out_ce, out_act, out_v, out_top, grad if want_grad else None)

    def score(self, tokens, eos: int) -> float:
        """Recognition score at the final step (the step that predicts EOS)."""
        inputs, targets = cfl_arrays(tokens, eos)
        return float(self.run(inputs, targets).yhat[-1])
