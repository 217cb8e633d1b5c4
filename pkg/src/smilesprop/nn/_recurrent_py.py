"""Pure-numpy GRU/LSTM recurrences.

Same contract as the compiled ``_recurrent`` extension: time-major inputs,
``xp`` is the precomputed input projection of shape (L, B, G*H).
"""
import numpy as np


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _flush(a):
    # zero denormals so long pad runs do not hit slow subnormal arithmetic
    a[np.abs(a) < np.finfo(a.dtype).tiny] = 0
    return a


def _steps(L, reverse):
    return range(L - 1, -1, -1) if reverse else range(L)


def gru_forward(xp, wh, reverse):
    L, B, H3 = xp.shape
    H = wh.shape[0]
    if H3 != 3 * H or wh.shape[1] != 3 * H:
        raise ValueError("gate width mismatch")
    hs = np.empty((L, B, H), dtype=xp.dtype)
    zs = np.empty_like(hs)
    rs = np.empty_like(hs)
    ns = np.empty_like(hs)
    w_zr, w_n = wh[:, : 2 * H], wh[:, 2 * H :]
    hprev = np.zeros((B, H), dtype=xp.dtype)
    for t in _steps(L, reverse):
        g = hprev @ w_zr
        z = _sigmoid(xp[t, :, :H] + g[:, :H])
        r = _sigmoid(xp[t, :, H : 2 * H] + g[:, H:])
        n = np.tanh(xp[t, :, 2 * H :] + (r * hprev) @ w_n)
        h = (1.0 - z) * hprev + z * n
        zs[t], rs[t], ns[t], hs[t] = z, r, n, h
        hprev = h
    return hs, zs, rs, ns


def gru_backward(dhs, hs, zs, rs, ns, wh, reverse, need_wh_grad=True):
    L, B, H = hs.shape
    w_zr, w_n = wh[:, : 2 * H], wh[:, 2 * H :]
    dxp = np.empty((L, B, 3 * H), dtype=hs.dtype)
    dwh = np.zeros((H, 3 * H), dtype=hs.dtype)
    carry = np.zeros((B, H), dtype=hs.dtype)
    zero = np.zeros((B, H), dtype=hs.dtype)
    order = list(_steps(L, reverse))
    for k in range(L - 1, -1, -1):
        t = order[k]
        hprev = hs[order[k - 1]] if k > 0 else zero
        z, r, n = zs[t], rs[t], ns[t]
        dh = dhs[t] + carry
        dz = dh * (n - hprev)
        da_n = dh * z * (1.0 - n * n)
        carry = dh * (1.0 - z)
        drh = da_n @ w_n.T
        if need_wh_grad:
            dwh[:, 2 * H :] += (r * hprev).T @ da_n
        da_z = dz * z * (1.0 - z)
        da_r = drh * hprev * r * (1.0 - r)
        carry = carry + drh * r
        da_zr = np.concatenate([da_z, da_r], axis=1)
        carry = _flush(carry + da_zr @ w_zr.T)
        if need_wh_grad and k > 0:
            dwh[:, : 2 * H] += hprev.T @ da_zr
        dxp[t, :, : 2 * H] = da_zr
        dxp[t, :, 2 * H :] = da_n
    return dxp, dwh


def lstm_forward(xp, wh, reverse):
    L, B, H4 = xp.shape
    H = wh.shape[0]
    if H4 != 4 * H or wh.shape[1] != 4 * H:
        raise ValueError("gate width mismatch")
    hs = np.empty((L, B, H), dtype=xp.dtype)
    cs = np.empty_like(hs)
    gates = np.empty((L, B, 4 * H), dtype=xp.dtype)
    hprev = np.zeros((B, H), dtype=xp.dtype)
    cprev = np.zeros((B, H), dtype=xp.dtype)
    for t in _steps(L, reverse):
        a = xp[t] + hprev @ wh
        i = _sigmoid(a[:, :H])
        f = _sigmoid(a[:, H : 2 * H])
        g = np.tanh(a[:, 2 * H : 3 * H])
        o = _sigmoid(a[:, 3 * H :])
        c = f * cprev + i * g
        h = o * np.tanh(c)
        gates[t] = np.concatenate([i, f, g, o], axis=1)
        cs[t], hs[t] = c, h
        hprev, cprev = h, c
    return hs, cs, gates


def lstm_backward(dhs, hs, cs, gates, wh, reverse, need_wh_grad=True):
    L, B, H = hs.shape
    dxp = np.empty((L, B, 4 * H), dtype=hs.dtype)
    dwh = np.zeros((H, 4 * H), dtype=hs.dtype)
    dh_carry = np.zeros((B, H), dtype=hs.dtype)
    dc_carry = np.zeros((B, H), dtype=hs.dtype)
    zero = np.zeros((B, H), dtype=hs.dtype)
    order = list(_steps(L, reverse))
    for k in range(L - 1, -1, -1):
        t = order[k]
        hprev = hs[order[k - 1]] if k > 0 else zero
        cprev = cs[order[k - 1]] if k > 0 else zero
        i, f, g, o = (gates[t, :, q * H : (q + 1) * H] for q in range(4))
        tc = np.tanh(cs[t])
        dh = dhs[t] + dh_carry
        dc = dc_carry + dh * o * (1.0 - tc * tc)
        da = np.concatenate(
            [
                dc * g * i * (1.0 - i),
                dc * cprev * f * (1.0 - f),
                dc * i * (1.0 - g * g),
                dh * tc * o * (1.0 - o),
            ],
            axis=1,
        )
        dc_carry = _flush(dc * f)
        dh_carry = _flush(da @ wh.T)
        if need_wh_grad and k > 0:
            dwh += hprev.T @ da
        dxp[t] = da
    return dxp, dwh
