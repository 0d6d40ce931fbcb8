"""Compiled forward/backward passes over one sequence.

Every parameter lives in one flat float64 vector ``theta``; ``off`` holds the
start offset of each named matrix (row-major) in slot order
``HEAD_SLOTS + STACK_SLOTS + core params``.  Gradients are hand-derived and
must agree with the tape implementation in :mod:`.reference`.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .params import CORE_PARAMS, CORES, HEAD_PARAMS, STACK_PARAMS

S1 = 1.7519
S2 = 2.0 / 3.0

V_, BV_, WY_, BY_, P_, A_, BA_, D_, BD_ = range(9)
C0 = 9  # first core slot

CORE_CODE = {name: i for i, name in enumerate(CORES)}
RNN, LSTM, GRU, MRNN, MLSTM, MIRNN = range(6)


def slot_offsets(params) -> np.ndarray:
    """Offsets in kernel slot order; absent stack matrices get -1."""
    off = []
    for name, _ in HEAD_PARAMS + STACK_PARAMS + CORE_PARAMS[params.core]:
        off.append(params.layout[name][0] if name in params.layout else -1)
    return np.array(off, dtype=np.int64)


@njit(cache=True, inline="always")
def _sig(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(cache=True)
def _mv(th, o, rows, cols, x, out):
    # out += W x
    for i in range(rows):
        s = 0.0
        base = o + i * cols
        for j in range(cols):
            s += th[base + j] * x[j]
        out[i] += s


@njit(cache=True)
def _mtv(th, o, rows, cols, g, out):
    # out += W^T g
    for i in range(rows):
        gi = g[i]
        if gi == 0.0:
            continue
        base = o + i * cols
        for j in range(cols):
            out[j] += th[base + j] * gi


@njit(cache=True)
def _outer(gr, o, rows, cols, g, x):
    for i in range(rows):
        gi = g[i]
        if gi == 0.0:
            continue
        base = o + i * cols
        for j in range(cols):
            gr[base + j] += gi * x[j]


@njit(cache=True)
def _col(th, o, rows, cols, j, out):
    for i in range(rows):
        out[i] += th[o + i * cols + j]


@njit(cache=True)
def _col_grad(gr, o, rows, cols, j, g):
    for i in range(rows):
        gr[o + i * cols + j] += g[i]


@njit(cache=True)
def _vec(th, o, n, out):
    for i in range(n):
        out[i] += th[o + i]


@njit(cache=True)
def _vec_grad(gr, o, n, g):
    for i in range(n):
        gr[o + i] += g[i]


# ---------------------------------------------------------------------------
# cores: forward writes candidate state zt / ct and cache; backward turns
# (dzt, dct) into gradients for zh (stack-read input), zr (raw previous
# state, LSTM gates in candidate-only mode) and c_prev.


@njit(cache=True)
def _core_fwd(core, th, off, d, m, x, zh, zr, cp, cache, zt, ct, inject_all):
    tmp = np.zeros(m)
    if core == RNN:
        _col(th, off[C0], m, d, x, tmp)
        _mv(th, off[C0 + 1], m, m, zh, tmp)
        _vec(th, off[C0 + 2], m, tmp)
        for i in range(m):
            h = math.tanh(S2 * tmp[i])
            cache[i] = h
            zt[i] = S1 * h
    elif core == LSTM or core == MLSTM:
        if core == LSTM:
            gin = zh if inject_all else zr
            cand = np.zeros(m)
            _col(th, off[C0], m, d, x, cand)
            _mv(th, off[C0 + 1], m, m, zh, cand)
            _vec(th, off[C0 + 2], m, cand)
            g0 = C0 + 3
            base = 0
        else:
            rmz = np.zeros(m)
            _mv(th, off[C0 + 1], m, m, zh, rmz)
            umx = np.zeros(m)
            _col(th, off[C0], m, d, x, umx)
            gin = np.empty(m)
            for i in range(m):
                gin[i] = umx[i] * rmz[i]
                cache[i] = rmz[i]
                cache[m + i] = gin[i]
            cand = np.zeros(m)
            _col(th, off[C0 + 2], m, d, x, cand)
            _mv(th, off[C0 + 3], m, m, gin, cand)
            _vec(th, off[C0 + 4], m, cand)
            g0 = C0 + 5
            base = 2 * m
        for gate in range(3):
            pre = np.zeros(m)
            _col(th, off[g0 + 3 * gate], m, d, x, pre)
            _mv(th, off[g0 + 3 * gate + 1], m, m, gin, pre)
            _vec(th, off[g0 + 3 * gate + 2], m, pre)
            for i in range(m):
                cache[base + gate * m + i] = _sig(pre[i])
        for i in range(m):
            ig = cache[base + i]
            og = cache[base + m + i]
            fg = cache[base + 2 * m + i]
            hc = math.tanh(S2 * cand[i])
            cache[base + 3 * m + i] = hc
            ct[i] = fg * cp[i] + ig * S1 * hc
            hs = math.tanh(S2 * ct[i])
            cache[base + 4 * m + i] = hs
            zt[i] = S1 * hs * og
    elif core == GRU:
        rp = np.zeros(m)
        _col(th, off[C0 + 3], m, d, x, rp)
        _mv(th, off[C0 + 4], m, m, zh, rp)
        _vec(th, off[C0 + 5], m, rp)
        up = np.zeros(m)
        _col(th, off[C0 + 6], m, d, x, up)
        _mv(th, off[C0 + 7], m, m, zh, up)
        _vec(th, off[C0 + 8], m, up)
        rz = np.empty(m)
        for i in range(m):
            r = _sig(rp[i])
            cache[i] = r
            cache[m + i] = _sig(up[i])
            rz[i] = r * zh[i]
        hp = np.zeros(m)
        _col(th, off[C0], m, d, x, hp)
        _mv(th, off[C0 + 1], m, m, rz, hp)
        _vec(th, off[C0 + 2], m, hp)
        for i in range(m):
            h = math.tanh(S2 * hp[i])
            cache[2 * m + i] = h
            u = cache[m + i]
            zt[i] = (1.0 - u) * zh[i] + u * S1 * h
    elif core == MRNN:
        mz = np.zeros(m)
        _mv(th, off[C0 + 1], m, m, zh, mz)
        mx = np.zeros(m)
        _col(th, off[C0], m, d, x, mx)
        mm = np.empty(m)
        for i in range(m):
            mm[i] = mx[i] * mz[i]
            cache[i] = mz[i]
            cache[m + i] = mm[i]
        pre = np.zeros(m)
        _mv(th, off[C0 + 2], m, m, mm, pre)
        _col(th, off[C0 + 3], m, d, x, pre)
        _vec(th, off[C0 + 4], m, pre)
        for i in range(m):
            h = math.tanh(S2 * pre[i])
            cache[2 * m + i] = h
            zt[i] = S1 * h
    else:  # MIRNN
        ux = np.zeros(m)
        _col(th, off[C0], m, d, x, ux)
        _vec(th, off[C0 + 2], m, ux)
        rz = np.zeros(m)
        _mv(th, off[C0 + 1], m, m, zh, rz)
        _vec(th, off[C0 + 3], m, rz)
        for i in range(m):
            cache[i] = rz[i]
            h = math.tanh(S2 * ux[i] * rz[i])
            cache[m + i] = h
            zt[i] = S1 * h
    if core != LSTM and core != MLSTM:
        for i in range(m):
            ct[i] = cp[i]


@njit(cache=True)
def _core_bwd(core, th, gr, off, d, m, x, zh, zr, cp, cache, dzt, dct, dzh, dzr, dcp, inject_all):
    if core == RNN:
        da = np.empty(m)
        for i in range(m):
            h = cache[i]
            da[i] = dzt[i] * S1 * S2 * (1.0 - h * h)
        _col_grad(gr, off[C0], m, d, x, da)
        _outer(gr, off[C0 + 1], m, m, da, zh)
        _vec_grad(gr, off[C0 + 2], m, da)
        _mtv(th, off[C0 + 1], m, m, da, dzh)
        for i in range(m):
            dcp[i] += dct[i]
    elif core == LSTM or core == MLSTM:
        if core == LSTM:
            base = 0
            g0 = C0 + 3
            gin = zh if inject_all else zr
        else:
            base = 2 * m
            g0 = C0 + 5
            gin = np.empty(m)
            for i in range(m):
                gin[i] = cache[m + i]
        dgin = np.zeros(m)
        dcand = np.empty(m)
        dpre = np.empty((3, m))
        for i in range(m):
            ig = cache[base + i]
            og = cache[base + m + i]
            fg = cache[base + 2 * m + i]
            hc = cache[base + 3 * m + i]
            hs = cache[base + 4 * m + i]
            do = dzt[i] * S1 * hs
            dc = dct[i] + dzt[i] * og * S1 * S2 * (1.0 - hs * hs)
            df = dc * cp[i]
            dcp[i] += dc * fg
            di = dc * S1 * hc
            dcand[i] = dc * ig * S1 * S2 * (1.0 - hc * hc)
            dpre[0, i] = di * ig * (1.0 - ig)
            dpre[1, i] = do * og * (1.0 - og)
            dpre[2, i] = df * fg * (1.0 - fg)
        for gate in range(3):
            g = dpre[gate]
            _col_grad(gr, off[g0 + 3 * gate], m, d, x, g)
            _outer(gr, off[g0 + 3 * gate + 1], m, m, g, gin)
            _vec_grad(gr, off[g0 + 3 * gate + 2], m, g)
            _mtv(th, off[g0 + 3 * gate + 1], m, m, g, dgin)
        if core == LSTM:
            _col_grad(gr, off[C0], m, d, x, dcand)
            _outer(gr, off[C0 + 1], m, m, dcand, zh)
            _vec_grad(gr, off[C0 + 2], m, dcand)
            _mtv(th, off[C0 + 1], m, m, dcand, dzh)
            if inject_all:
                for i in range(m):
                    dzh[i] += dgin[i]
            else:
                for i in range(m):
                    dzr[i] += dgin[i]
        else:
            _col_grad(gr, off[C0 + 2], m, d, x, dcand)
            _outer(gr, off[C0 + 3], m, m, dcand, gin)
            _vec_grad(gr, off[C0 + 4], m, dcand)
            _mtv(th, off[C0 + 3], m, m, dcand, dgin)
            # gin = umx * rmz
            umx = np.zeros(m)
            _col(th, off[C0], m, d, x, umx)
            dumx = np.empty(m)
            drmz = np.empty(m)
            for i in range(m):
                dumx[i] = dgin[i] * cache[i]
                drmz[i] = dgin[i] * umx[i]
            _col_grad(gr, off[C0], m, d, x, dumx)
            _outer(gr, off[C0 + 1], m, m, drmz, zh)
            _mtv(th, off[C0 + 1], m, m, drmz, dzh)
    elif core == GRU:
        dhp = np.empty(m)
        dup = np.empty(m)
        for i in range(m):
            r = cache[i]
            u = cache[m + i]
            h = cache[2 * m + i]
            dup[i] = dzt[i] * (S1 * h - zh[i]) * u * (1.0 - u)
            dzh[i] += dzt[i] * (1.0 - u)
            dhp[i] = dzt[i] * u * S1 * S2 * (1.0 - h * h)
        rz = np.empty(m)
        for i in range(m):
            rz[i] = cache[i] * zh[i]
        _col_grad(gr, off[C0], m, d, x, dhp)
        _outer(gr, off[C0 + 1], m, m, dhp, rz)
        _vec_grad(gr, off[C0 + 2], m, dhp)
        drz = np.zeros(m)
        _mtv(th, off[C0 + 1], m, m, dhp, drz)
        drp = np.empty(m)
        for i in range(m):
            r = cache[i]
            dzh[i] += drz[i] * r
            drp[i] = drz[i] * zh[i] * r * (1.0 - r)
        _col_grad(gr, off[C0 + 3], m, d, x, drp)
        _outer(gr, off[C0 + 4], m, m, drp, zh)
        _vec_grad(gr, off[C0 + 5], m, drp)
        _mtv(th, off[C0 + 4], m, m, drp, dzh)
        _col_grad(gr, off[C0 + 6], m, d, x, dup)
        _outer(gr, off[C0 + 7], m, m, dup, zh)
        _vec_grad(gr, off[C0 + 8], m, dup)
        _mtv(th, off[C0 + 7], m, m, dup, dzh)
        for i in range(m):
            dcp[i] += dct[i]
    elif core == MRNN:
        dpre = np.empty(m)
        mm = np.empty(m)
        for i in range(m):
            h = cache[2 * m + i]
            dpre[i] = dzt[i] * S1 * S2 * (1.0 - h * h)
            mm[i] = cache[m + i]
        _outer(gr, off[C0 + 2], m, m, dpre, mm)
        _col_grad(gr, off[C0 + 3], m, d, x, dpre)
        _vec_grad(gr, off[C0 + 4], m, dpre)
        dmm = np.zeros(m)
        _mtv(th, off[C0 + 2], m, m, dpre, dmm)
        mx = np.zeros(m)
        _col(th, off[C0], m, d, x, mx)
        dmx = np.empty(m)
        dmz = np.empty(m)
        for i in range(m):
            dmx[i] = dmm[i] * cache[i]
            dmz[i] = dmm[i] * mx[i]
        _col_grad(gr, off[C0], m, d, x, dmx)
        _outer(gr, off[C0 + 1], m, m, dmz, zh)
        _mtv(th, off[C0 + 1], m, m, dmz, dzh)
        for i in range(m):
            dcp[i] += dct[i]
    else:  # MIRNN
        ux = np.zeros(m)
        _col(th, off[C0], m, d, x, ux)
        _vec(th, off[C0 + 2], m, ux)
        dux = np.empty(m)
        drz = np.empty(m)
        for i in range(m):
            h = cache[m + i]
            dp = dzt[i] * S1 * S2 * (1.0 - h * h)
            dux[i] = dp * cache[i]
            drz[i] = dp * ux[i]
        _col_grad(gr, off[C0], m, d, x, dux)
        _vec_grad(gr, off[C0 + 2], m, dux)
        _outer(gr, off[C0 + 1], m, m, drz, zh)
        _vec_grad(gr, off[C0 + 3], m, drz)
        _mtv(th, off[C0 + 1], m, m, drz, dzh)
        for i in range(m):
            dcp[i] += dct[i]


# ---------------------------------------------------------------------------
# whole sequence


@njit(cache=True)
def run_sequence(
    core, th, off, d, m, k,
    use_stack, noop_identity, carry_forward, inject_all,
    inputs, targets, label, ce_weight, rec_weight,
    noise, bptt, want_grad, gr,
    out_y, out_ce, out_act, out_v, out_top,
):
    """Forward one sequence (and optionally backward); returns the summed loss.

    ``label < 0`` disables the recognition term.  Gradients are accumulated
    into ``gr`` with truncation every ``bptt`` steps.
    """
    T = inputs.shape[0]
    W = T + 2  # stack cells held per time step
    Z = np.zeros((T + 1, m))
    C = np.zeros((T + 1, m))
    ZH = np.zeros((T, m))
    S = np.zeros((T + 1, W))
    ACT = np.zeros((T, 3))
    PV = np.zeros(T)
    CT = np.zeros(T + 1, dtype=np.int64)
    U = np.ones(T)
    PN = np.zeros((T, d))
    Y = np.zeros(T)
    CACHE = np.zeros((T, 7 * m))
    ZT = np.zeros(m)
    CN = np.zeros(m)
    loss = 0.0
    for t in range(T):
        x = inputs[t]
        zh = ZH[t]
        for i in range(m):
            zh[i] = Z[t, i] + noise[t, i]
        if use_stack:
            for i in range(m):
                s = 0.0
                for j in range(k):
                    s += th[off[P_] + i * k + j] * S[t, j]
                zh[i] += s
        _core_fwd(core, th, off, d, m, x, zh, Z[t], C[t], CACHE[t], ZT, CN, inject_all)
        u = 1.0
        if carry_forward and use_stack and CT[t] > 1:
            u = 0.0
        U[t] = u
        for i in range(m):
            Z[t + 1, i] = u * ZT[i] + (1.0 - u) * zh[i]
            C[t + 1, i] = u * CN[i] + (1.0 - u) * C[t, i]
        z = Z[t + 1]
        if use_stack:
            la = np.zeros(3)
            _mv(th, off[A_], 3, m, z, la)
            _vec(th, off[BA_], 3, la)
            mx = max(la[0], max(la[1], la[2]))
            ssum = 0.0
            for a in range(3):
                la[a] = math.exp(la[a] - mx)
                ssum += la[a]
            for a in range(3):
                ACT[t, a] = la[a] / ssum
            vp = th[off[BD_]]
            for i in range(m):
                vp += th[off[D_] + i] * z[i]
            v = _sig(vp)
            PV[t] = v
            a0 = ACT[t, 0]
            a1 = ACT[t, 1]
            a2 = ACT[t, 2]
            S[t + 1, 0] = a0 * v + a1 * S[t, 1] + a2 * S[t, 0]
            for i in range(1, t + 1):
                val = a0 * S[t, i - 1] + a1 * S[t, i + 1]
                if noop_identity:
                    val += a2 * S[t, i]
                S[t + 1, i] = val
            # argmax with ties to the lowest index
            best = 0
            if ACT[t, 1] > ACT[t, best]:
                best = 1
            if ACT[t, 2] > ACT[t, best]:
                best = 2
            CT[t + 1] = CT[t] + 1 if best == 2 else 0
            out_act[t, 0] = a0
            out_act[t, 1] = a1
            out_act[t, 2] = a2
            out_v[t] = v
            for j in range(k):
                out_top[t, j] = S[t + 1, j]
        lo = np.zeros(d)
        _mv(th, off[V_], d, m, z, lo)
        _vec(th, off[BV_], d, lo)
        mx = lo[0]
        for i in range(1, d):
            if lo[i] > mx:
                mx = lo[i]
        ssum = 0.0
        for i in range(d):
            ssum += math.exp(lo[i] - mx)
        lse = mx + math.log(ssum)
        for i in range(d):
            PN[t, i] = math.exp(lo[i] - lse)
        ce = lse - lo[targets[t]]
        yp = th[off[BY_]]
        for i in range(m):
            yp += th[off[WY_] + i] * z[i]
        y = _sig(yp)
        Y[t] = y
        out_y[t] = y
        out_ce[t] = ce
        loss += ce_weight * ce
        if label >= 0:
            loss += rec_weight * 0.5 * (y - label) * (y - label)
    if not want_grad:
        return loss

    dZ = np.zeros(m)
    dC = np.zeros(m)
    dS = np.zeros(W)
    dzh = np.zeros(m)
    dzr = np.zeros(m)
    dcp = np.zeros(m)
    dSo = np.zeros(W)
    for t in range(T - 1, -1, -1):
        if bptt > 0 and (t + 1) % bptt == 0:
            for i in range(m):
                dZ[i] = 0.0
                dC[i] = 0.0
            for i in range(W):
                dS[i] = 0.0
        z = Z[t + 1]
        x = inputs[t]
        dz = dZ.copy()
        # heads
        dlo = np.empty(d)
        for i in range(d):
            dlo[i] = ce_weight * PN[t, i]
        dlo[targets[t]] -= ce_weight
        _outer(gr, off[V_], d, m, dlo, z)
        _vec_grad(gr, off[BV_], d, dlo)
        _mtv(th, off[V_], d, m, dlo, dz)
        if label >= 0:
            y = Y[t]
            dyp = rec_weight * (y - label) * y * (1.0 - y)
            gr[off[BY_]] += dyp
            for i in range(m):
                gr[off[WY_] + i] += dyp * z[i]
                dz[i] += th[off[WY_] + i] * dyp
        for i in range(W):
            dSo[i] = 0.0
        if use_stack:
            a0 = ACT[t, 0]
            a1 = ACT[t, 1]
            a2 = ACT[t, 2]
            v = PV[t]
            g0 = dS[0]
            da0 = g0 * v
            da1 = g0 * S[t, 1]
            da2 = g0 * S[t, 0]
            dSo[1] += a1 * g0
            dSo[0] += a2 * g0
            for i in range(1, t + 1):
                gi = dS[i]
                if gi == 0.0:
                    continue
                da0 += gi * S[t, i - 1]
                da1 += gi * S[t, i + 1]
                dSo[i - 1] += a0 * gi
                dSo[i + 1] += a1 * gi
                if noop_identity:
                    da2 += gi * S[t, i]
                    dSo[i] += a2 * gi
            dv = g0 * a0
            dot = a0 * da0 + a1 * da1 + a2 * da2
            dl = np.empty(3)
            dl[0] = a0 * (da0 - dot)
            dl[1] = a1 * (da1 - dot)
            dl[2] = a2 * (da2 - dot)
            _outer(gr, off[A_], 3, m, dl, z)
            _vec_grad(gr, off[BA_], 3, dl)
            _mtv(th, off[A_], 3, m, dl, dz)
            dvp = dv * v * (1.0 - v)
            gr[off[BD_]] += dvp
            for i in range(m):
                gr[off[D_] + i] += dvp * z[i]
                dz[i] += th[off[D_] + i] * dvp
        u = U[t]
        zh = ZH[t]
        for i in range(m):
            dzh[i] = (1.0 - u) * dz[i]
            dzr[i] = 0.0
            dcp[i] = (1.0 - u) * dC[i]
            ZT[i] = u * dz[i]
            CN[i] = u * dC[i]
        if u != 0.0:
            _core_bwd(core, th, gr, off, d, m, x, zh, Z[t], C[t], CACHE[t], ZT, CN, dzh, dzr, dcp, inject_all)
        if use_stack:
            for i in range(m):
                g = dzh[i]
                if g == 0.0:
                    continue
                for j in range(k):
                    gr[off[P_] + i * k + j] += g * S[t, j]
                    dSo[j] += th[off[P_] + i * k + j] * g
        for i in range(m):
            dZ[i] = dzh[i] + dzr[i]
            dC[i] = dcp[i]
        # cells at or below depth t of S[t] are padding and carry no gradient
        for i in range(W):
            dS[i] = dSo[i] if i < t else 0.0
    return loss


@njit(cache=True)
def adam_update(th, gr, m1, m2, step, lr, b1, b2, eps, clip):
    """Entrywise clip to +-clip, then one bias-corrected Adam step."""
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for i in range(th.shape[0]):
        g = gr[i]
        if g > clip:
            g = clip
        elif g < -clip:
            g = -clip
        m1[i] = b1 * m1[i] + (1.0 - b1) * g
        m2[i] = b2 * m2[i] + (1.0 - b2) * g * g
        mh = m1[i] / c1 if c1 > 0 else m1[i]
        vh = m2[i] / c2 if c2 > 0 else m2[i]
        th[i] -= lr * mh / (math.sqrt(vh) + eps)
