"""Cell steps written on the gradient tape.

These are the readable definitions of every family.  The compiled kernels in
:mod:`.kernels` compute the same quantities and are tested against this
module (values and gradients).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import mathcore as mc
from ..mathcore import GradTape, Var
from ..stack import NOOP, POP, PUSH
from .params import ModelParams


@dataclass
class CellState:
    z: Var
    c: Var | None
    noop_ct: int = 0


@dataclass
class StepOutput:
    state: CellState
    stack: Var | None
    log_p: Var  # log next-token distribution
    yhat: Var
    action: np.ndarray | None = None
    push: float | None = None
    u: float = 1.0


def tape_params(params: ModelParams, tape: GradTape | None = None) -> dict[str, Var]:
    tape = GradTape() if tape is None else tape
    return {name: tape.param(name, arr.copy()) for name, arr in params.as_dict().items()}


def stack_read_inject(z: Var, stack: Var | None, W: dict, k: int, noise=None) -> Var:
    """z + P * top-k(stack) + noise; stack and noise are optional."""
    zh = z
    if stack is not None:
        zh = zh + mc.matvec(W["P"], mc.index(stack, slice(0, k)))
    if noise is not None:
        zh = zh + noise
    return zh


def step_carry_forward(candidate, zhat, noop_ct: int, enabled: bool = True):
    """Hold the state after more than one consecutive NoOP.

    Returns ``(z, u)`` with ``u = 0`` iff enabled and ``noop_ct > 1``; with
    ``u = 0`` the result is exactly ``zhat``.
    """
    u = 0.0 if enabled and noop_ct > 1 else 1.0
    return (candidate if u == 1.0 else zhat), u


def _affine(W, x: int, zin: Var, Ux: str, Rz: str, b: str) -> Var:
    return mc.column(W[Ux], x) + mc.matvec(W[Rz], zin) + W[b]


def core_rnn(W, x, zh, zr, c):
    return mc.tanh_scaled(_affine(W, x, zh, "U", "R", "b")), c


def _lstm_tail(W, x, gin, cand, c, names):
    i = mc.sigmoid(mc.column(W[names[0][0]], x) + mc.matvec(W[names[0][1]], gin) + W[names[0][2]])
    o = mc.sigmoid(mc.column(W[names[1][0]], x) + mc.matvec(W[names[1][1]], gin) + W[names[1][2]])
    f = mc.sigmoid(mc.column(W[names[2][0]], x) + mc.matvec(W[names[2][1]], gin) + W[names[2][2]])
    c_new = f * c + i * mc.tanh_scaled(cand)
    return mc.tanh_scaled(c_new) * o, c_new


def core_lstm(W, x, zh, zr, c, inject_all=True):
    cand = _affine(W, x, zh, "U", "R", "b")
    gin = zh if inject_all else zr
    names = (("U_i", "R_i", "b_i"), ("U_o", "R_o", "b_o"), ("U_f", "R_f", "b_f"))
    return _lstm_tail(W, x, gin, cand, c, names)


def core_gru(W, x, zh, zr, c):
    r = mc.sigmoid(_affine(W, x, zh, "U_r", "R_r", "b_r"))
    u = mc.sigmoid(_affine(W, x, zh, "U_u", "R_u", "b_u"))
    h = mc.tanh_scaled(_affine(W, x, r * zh, "U", "R", "b"))
    return (1.0 - u) * zh + u * h, c


def core_mrnn(W, x, zh, zr, c):
    m = mc.column(W["W_mx"], x) * mc.matvec(W["W_mz"], zh)
    return mc.tanh_scaled(mc.matvec(W["W_zm"], m) + mc.column(W["W_zx"], x) + W["b"]), c


def core_mlstm(W, x, zh, zr, c):
    m = mc.column(W["U_m"], x) * mc.matvec(W["R_m"], zh)
    cand = mc.column(W["U"], x) + mc.matvec(W["R_z"], m) + W["b"]
    names = (("U_i", "R_im", "b_i"), ("U_o", "R_om", "b_o"), ("U_f", "R_fom", "b_f"))
    return _lstm_tail(W, x, m, cand, c, names)


def core_mirnn(W, x, zh, zr, c):
    return mc.tanh_scaled((mc.column(W["U"], x) + W["b_u"]) * (mc.matvec(W["R"], zh) + W["b_r"])), c


CORE_STEPS = {
    "rnn": core_rnn,
    "lstm": core_lstm,
    "gru": core_gru,
    "mrnn": core_mrnn,
    "mlstm": core_mlstm,
    "mirnn": core_mirnn,
}


def stack_step_tape(stack: Var, a: Var, v: Var, noop_identity: bool = True) -> Var:
    """Tape version of :func:`diffstack.stack.stack_step` on a zero-padded vector."""
    pushed = mc.shift_down(stack, v)
    popped = mc.shift_up(stack)
    if noop_identity:
        kept = stack
    else:
        mask = np.zeros(stack.value.shape)
        mask[0] = 1.0
        kept = stack * mask
    return a[PUSH] * pushed + a[POP] * popped + a[NOOP] * kept


def step(
    W: dict,
    params: ModelParams,
    x: int,
    state: CellState,
    stack: Var | None,
    noise=None,
    carry_forward: bool = True,
) -> StepOutput:
    """One recurrent step: (x_t, state, stack) -> (state', stack', log p_next, yhat)."""
    core = params.core
    zh = stack_read_inject(state.z, stack, W, params.k, noise)
    fn = CORE_STEPS[core]
    if core == "lstm":
        cand, c_new = fn(W, x, zh, state.z, state.c, params.inject_all_gates)
    else:
        cand, c_new = fn(W, x, zh, state.z, state.c)
    z, u = step_carry_forward(cand, zh, state.noop_ct, carry_forward and stack is not None)
    c = c_new if u == 1.0 else state.c
    out_stack, action, push, ct = stack, None, None, state.noop_ct
    if stack is not None:
        a = mc.softmax_v(mc.matvec(W["A"], z) + W["b_a"])
        v = mc.sigmoid(mc.matvec(W["D"], z) + W["b_d"])
        out_stack = stack_step_tape(stack, a, mc.index(v, 0), params.noop_identity)
        action, push = a.value.copy(), float(v.value[0])
        ct = ct + 1 if int(np.argmax(action)) == NOOP else 0
    log_p = mc.log_softmax_v(mc.matvec(W["V"], z) + W["b_v"])
    yhat = mc.index(mc.sigmoid(mc.matvec(W["w_y"], z) + W["b_y"]), 0)
    return StepOutput(CellState(z, c, ct), out_stack, log_p, yhat, action, push, u)


def initial_state(tape: GradTape, params: ModelParams, max_len: int):
    z = tape.const(np.zeros(params.m))
    c = tape.const(np.zeros(params.m))
    stack = tape.const(np.zeros(max_len + 2)) if params.stack else None
    return CellState(z, c, 0), stack


def sequence_loss_tape(
    params: ModelParams,
    inputs,
    targets,
    label: float = -1,
    noise=None,
    carry_forward: bool = True,
    bptt: int = 0,
    ce_weight: float = 1.0,
    rec_weight: float = 1.0,
):
    """Build the whole-sequence loss on a fresh tape.

    Returns ``(tape, loss, outputs)``; at every ``bptt`` boundary the carried
    hidden, cell and stack values are re-entered as constants.
    """
    tape = GradTape()
    W = tape_params(params, tape)
    T = len(inputs)
    state, stack = initial_state(tape, params, T)
    loss = tape.const(0.0)
    outs = []
    for t in range(T):
        if bptt > 0 and t > 0 and t % bptt == 0:
            state = CellState(
                tape.const(state.z.value), tape.const(state.c.value), state.noop_ct
            )
            if stack is not None:
                stack = tape.const(stack.value)
        eps = None if noise is None else tape.const(noise[t])
        out = step(W, params, int(inputs[t]), state, stack, eps, carry_forward)
        loss = loss + (-ce_weight) * mc.index(out.log_p, int(targets[t]))
        if label >= 0:
            loss = loss + (0.5 * rec_weight) * mc.square(out.yhat - float(label))
        state, stack = out.state, out.stack
        outs.append(out)
    return tape, loss, outs
