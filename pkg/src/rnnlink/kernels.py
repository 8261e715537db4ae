"""Compiled forward and backward passes for a whole stacked network.

One kernel unrolls every layer over a window, optionally assembling output
feedback on the fly, so training windows, closed-loop prediction and batched
inference all execute the same arithmetic.  Each output element is
accumulated in a fixed order that does not depend on the batch size, which
makes results for a row independent of the other rows in its batch.

Cell kinds are integer codes: 0 vanilla-tanh, 1 vanilla-relu, 2 LSTM, 3 GRU.
Weights are packed per network:

``Wx0``  ``(G*H, n_in)``        input weights of layer 0
``Wxs``  ``(L-1, G*H, H)``      input weights of layers 1..L-1
``Wh``   ``(L, G*H, H)``        recurrent weights
``bias`` ``(L, G*H)``           zeros when the network has no bias
"""

from __future__ import annotations

import math

import numba
import numpy as np

VANILLA_TANH, VANILLA_RELU, LSTM, GRU = 0, 1, 2, 3
GATES = {VANILLA_TANH: 1, VANILLA_RELU: 1, LSTM: 4, GRU: 3}


@numba.njit(cache=True, inline="always")
def _sig(v):
    return 1.0 / (1.0 + math.exp(-v))


@numba.njit(cache=True)
def _matvec_rows(x, WT, out):
    """``out[b, j] = sum_k x[b, k] * WT[k, j]`` summed in increasing ``k``."""
    B, n = x.shape
    m = WT.shape[1]
    for b in range(B):
        for j in range(m):
            out[b, j] = 0.0
        for k in range(n):
            xv = x[b, k]
            for j in range(m):
                out[b, j] += xv * WT[k, j]


@numba.njit(cache=True)
def run_stack(kind, Wx0, Wxs, Wh, bias, head_W, head_b, masks,
              exo, fb_truth, teacher, fb_ch, hist, h, c,
              record, xs_rec, hs_rec, cs_rec, gates_rec, aux_rec, ys):
    """Unroll ``K = exo.shape[0]`` steps in place.

    ``h``/``c`` (``(L, B, H)``) and ``hist`` (``(B, K_y)``) are carried
    state, updated in place.  When ``teacher[t, b]`` is set the true value
    ``fb_truth[t, b]`` enters the feedback history after step ``t``,
    otherwise the prediction for output ``fb_ch`` does.  With ``record`` the
    per-step caches for :func:`backward_stack` are written; otherwise the
    ``*_rec`` arrays only need a leading dimension of 1 and serve as scratch.
    """
    K, B, E = exo.shape
    L, _, H = h.shape
    GH = Wh.shape[1]
    Ky = hist.shape[1]
    n_in = E + Ky
    n_out = head_W.shape[0]
    Wx0T = np.ascontiguousarray(Wx0.T)
    WhT = np.empty((L, H, GH))
    for l in range(L):
        WhT[l] = Wh[l].T
    WxsT = np.empty((max(L - 1, 0), H, GH))
    for l in range(L - 1):
        WxsT[l] = Wxs[l].T
    headT = np.ascontiguousarray(head_W.T)
    x = np.empty((B, n_in))
    inp = np.empty((B, H))
    px = np.empty((B, GH))
    ph = np.empty((B, GH))
    yb = np.empty((B, n_out))
    for t in range(K):
        r = t if record else 0
        for b in range(B):
            for k in range(E):
                x[b, k] = exo[t, b, k]
            for k in range(Ky):
                x[b, E + k] = hist[b, k]
        if record:
            xs_rec[t] = x
        for l in range(L):
            if record:
                hs_rec[t, l] = h[l]
                cs_rec[t, l] = c[l]
            if l == 0:
                _matvec_rows(x, Wx0T, px)
            else:
                for b in range(B):
                    for k in range(H):
                        inp[b, k] = h[l - 1, b, k] * masks[l - 1, b, k]
                _matvec_rows(inp, WxsT[l - 1], px)
            for b in range(B):
                for j in range(GH):
                    px[b, j] += bias[l, j]
            _matvec_rows(h[l], WhT[l], ph)
            for b in range(B):
                if kind == VANILLA_TANH or kind == VANILLA_RELU:
                    for k in range(H):
                        pre = px[b, k] + ph[b, k]
                        gates_rec[r, l, b, k] = pre
                        if kind == VANILLA_TANH:
                            h[l, b, k] = math.tanh(pre)
                        else:
                            h[l, b, k] = pre if pre > 0.0 else 0.0
                elif kind == LSTM:
                    for k in range(H):
                        ig = _sig(px[b, k] + ph[b, k])
                        fg = _sig(px[b, H + k] + ph[b, H + k])
                        gg = math.tanh(px[b, 2 * H + k] + ph[b, 2 * H + k])
                        og = _sig(px[b, 3 * H + k] + ph[b, 3 * H + k])
                        cn = fg * c[l, b, k] + ig * gg
                        tc = math.tanh(cn)
                        gates_rec[r, l, b, k] = ig
                        gates_rec[r, l, b, H + k] = fg
                        gates_rec[r, l, b, 2 * H + k] = gg
                        gates_rec[r, l, b, 3 * H + k] = og
                        aux_rec[r, l, b, k] = tc
                        c[l, b, k] = cn
                        h[l, b, k] = og * tc
                else:
                    for k in range(H):
                        rg = _sig(px[b, k] + ph[b, k])
                        zg = _sig(px[b, H + k] + ph[b, H + k])
                        hn = ph[b, 2 * H + k]
                        ng = math.tanh(px[b, 2 * H + k] + rg * hn)
                        gates_rec[r, l, b, k] = rg
                        gates_rec[r, l, b, H + k] = zg
                        gates_rec[r, l, b, 2 * H + k] = ng
                        aux_rec[r, l, b, k] = hn
                        h[l, b, k] = (1.0 - zg) * ng + zg * h[l, b, k]
        _matvec_rows(h[L - 1], headT, yb)
        for b in range(B):
            for o in range(n_out):
                yb[b, o] += head_b[o]
                ys[t, b, o] = yb[b, o]
            if Ky > 0:
                new = fb_truth[t, b] if teacher[t, b] else yb[b, fb_ch]
                for k in range(Ky - 1, 0, -1):
                    hist[b, k] = hist[b, k - 1]
                hist[b, 0] = new
    if record:
        hs_rec[K] = h
        cs_rec[K] = c


@numba.njit(cache=True)
def backward_stack(kind, Wx0, Wxs, Wh, head_W, masks,
                   xs_rec, hs_rec, cs_rec, gates_rec, aux_rec, dys,
                   gWx0, gWxs, gWh, gB, gHW, gHB):
    """Accumulate BPTT gradients of one recorded window into the ``g*`` arrays.

    Initial states are constants; gradients are zeroed by the caller.
    """
    K, B, n_out = dys.shape
    L = Wh.shape[0]
    GH = Wh.shape[1]
    H = Wh.shape[2]
    n_in = Wx0.shape[1]
    dh_next = np.zeros((L, B, H))
    dc_next = np.zeros((L, B, H))
    dabove = np.empty((B, H))
    dh = np.empty((B, H))
    dpx = np.empty((B, GH))
    dph = np.empty((B, GH))
    xin = np.empty((B, H))
    for t in range(K - 1, -1, -1):
        for b in range(B):
            for j in range(H):
                dabove[b, j] = 0.0
            for o in range(n_out):
                d = dys[t, b, o]
                gHB[o] += d
                for j in range(H):
                    gHW[o, j] += d * hs_rec[t + 1, L - 1, b, j]
                    dabove[b, j] += d * head_W[o, j]
        for l in range(L - 1, -1, -1):
            for b in range(B):
                for k in range(H):
                    g = dabove[b, k]
                    if l < L - 1:
                        g *= masks[l, b, k]
                    dh[b, k] = g + dh_next[l, b, k]
            for b in range(B):
                if kind == VANILLA_TANH or kind == VANILLA_RELU:
                    for k in range(H):
                        if kind == VANILLA_TANH:
                            hv = hs_rec[t + 1, l, b, k]
                            d = dh[b, k] * (1.0 - hv * hv)
                        else:
                            d = dh[b, k] if gates_rec[t, l, b, k] > 0.0 else 0.0
                        dpx[b, k] = d
                        dph[b, k] = d
                        dh_next[l, b, k] = 0.0
                elif kind == LSTM:
                    for k in range(H):
                        ig = gates_rec[t, l, b, k]
                        fg = gates_rec[t, l, b, H + k]
                        gg = gates_rec[t, l, b, 2 * H + k]
                        og = gates_rec[t, l, b, 3 * H + k]
                        tc = aux_rec[t, l, b, k]
                        do = dh[b, k] * tc
                        dct = dh[b, k] * og * (1.0 - tc * tc) + dc_next[l, b, k]
                        dpx[b, k] = dct * gg * ig * (1.0 - ig)
                        dpx[b, H + k] = dct * cs_rec[t, l, b, k] * fg * (1.0 - fg)
                        dpx[b, 2 * H + k] = dct * ig * (1.0 - gg * gg)
                        dpx[b, 3 * H + k] = do * og * (1.0 - og)
                        dc_next[l, b, k] = dct * fg
                        dh_next[l, b, k] = 0.0
                    for j in range(GH):
                        dph[b, j] = dpx[b, j]
                else:
                    for k in range(H):
                        rg = gates_rec[t, l, b, k]
                        zg = gates_rec[t, l, b, H + k]
                        ng = gates_rec[t, l, b, 2 * H + k]
                        hn = aux_rec[t, l, b, k]
                        hp = hs_rec[t, l, b, k]
                        dn_pre = dh[b, k] * (1.0 - zg) * (1.0 - ng * ng)
                        dr_pre = dn_pre * hn * rg * (1.0 - rg)
                        dz_pre = dh[b, k] * (hp - ng) * zg * (1.0 - zg)
                        dpx[b, k] = dr_pre
                        dpx[b, H + k] = dz_pre
                        dpx[b, 2 * H + k] = dn_pre
                        dph[b, k] = dr_pre
                        dph[b, H + k] = dz_pre
                        dph[b, 2 * H + k] = dn_pre * rg
                        dh_next[l, b, k] = dh[b, k] * zg
            # layer input as seen by the forward pass
            if l > 0:
                for b in range(B):
                    for k in range(H):
                        xin[b, k] = hs_rec[t + 1, l - 1, b, k] * masks[l - 1, b, k]
            for b in range(B):
                for j in range(GH):
                    d = dpx[b, j]
                    gB[l, j] += d
                    if l == 0:
                        for k in range(n_in):
                            gWx0[j, k] += d * xs_rec[t, b, k]
                    else:
                        for k in range(H):
                            gWxs[l - 1, j, k] += d * xin[b, k]
                    e = dph[b, j]
                    for k in range(H):
                        gWh[l, j, k] += e * hs_rec[t, l, b, k]
                        dh_next[l, b, k] += e * Wh[l, j, k]
                if l > 0:
                    for k in range(H):
                        dabove[b, k] = 0.0
                    for j in range(GH):
                        d = dpx[b, j]
                        for k in range(H):
                            dabove[b, k] += d * Wxs[l - 1, j, k]
