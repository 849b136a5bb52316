"""Sequential LSTM recurrence kernels.

Only the time loop lives here; gate pre-activations from the layer input
(one big gemm) and all parameter-gradient gemms happen in the caller.
The numba-jitted versions are the default. Set PERMSEP_DISABLE_NUMBA=1
(or run without numba installed) to fall back to the pure-numpy loop,
which computes the same thing about 25x slower. Both backends are
deterministic; `BACKEND` says which one is active.

Gate packing along the 4H axis is [input | forget | output | cell].
"""

import os

import numpy as np


def lstm_forward_numpy(zx, u):
    """Run the recurrence given input pre-activations.

    Args:
        zx: (T, 4H) array, x_t @ W_in.T + bias for every frame.
        u: (4H, H) recurrent weight matrix.

    Returns:
        ifog: (T, 4H) post-activation gates.
        c: (T, H) cell states.
        tc: (T, H) tanh of the cell states.
        h: (T, H) hidden states.
    """
    t_len, four_h = zx.shape
    hh = four_h // 4
    ifog = np.empty((t_len, four_h))
    c = np.empty((t_len, hh))
    tc = np.empty((t_len, hh))
    h = np.empty((t_len, hh))
    h_prev = np.zeros(hh)
    c_prev = np.zeros(hh)
    for t in range(t_len):
        z = zx[t] + u @ h_prev
        sig = 1.0 / (1.0 + np.exp(-z[: 3 * hh]))
        gg = np.tanh(z[3 * hh :])
        ig, fg, og = sig[:hh], sig[hh : 2 * hh], sig[2 * hh :]
        ct = fg * c_prev + ig * gg
        tct = np.tanh(ct)
        ifog[t, :hh] = ig
        ifog[t, hh : 2 * hh] = fg
        ifog[t, 2 * hh : 3 * hh] = og
        ifog[t, 3 * hh :] = gg
        c[t] = ct
        tc[t] = tct
        h[t] = og * tct
        c_prev = ct
        h_prev = h[t]
    return ifog, c, tc, h


def lstm_backward_numpy(dh_up, ifog, c, tc, ut):
    """Backpropagate through the recurrence.

    Args:
        dh_up: (T, H) upstream gradient on the hidden states.
        ifog, c, tc: forward caches.
        ut: (H, 4H) transpose of the recurrent matrix, C-contiguous.

    Returns:
        dz: (T, 4H) gradient on the gate pre-activations. The caller
        forms dW = dz.T @ x, dU = dz.T @ h_prev, db = dz.sum(0),
        dx = dz @ W from it.
    """
    t_len, hh = dh_up.shape
    dz = np.empty((t_len, 4 * hh))
    dh_rec = np.zeros(hh)
    dc_rec = np.zeros(hh)
    for t in range(t_len - 1, -1, -1):
        ig = ifog[t, :hh]
        fg = ifog[t, hh : 2 * hh]
        og = ifog[t, 2 * hh : 3 * hh]
        gg = ifog[t, 3 * hh :]
        tct = tc[t]
        dh = dh_up[t] + dh_rec
        do = dh * tct
        dc = dc_rec + dh * og * (1.0 - tct * tct)
        c_prev = c[t - 1] if t > 0 else np.zeros(hh)
        dz[t, :hh] = dc * gg * ig * (1.0 - ig)
        dz[t, hh : 2 * hh] = dc * c_prev * fg * (1.0 - fg)
        dz[t, 2 * hh : 3 * hh] = do * og * (1.0 - og)
        dz[t, 3 * hh :] = dc * ig * (1.0 - gg * gg)
        dc_rec = dc * fg
        dh_rec = ut @ dz[t]
    return dz


def _jit_kernels():
    from numba import njit

    @njit(cache=True)
    def forward(zx, u):
        t_len, four_h = zx.shape
        hh = four_h // 4
        ifog = np.empty((t_len, four_h))
        c = np.empty((t_len, hh))
        tc = np.empty((t_len, hh))
        h = np.empty((t_len, hh))
        h_prev = np.zeros(hh)
        c_prev = np.zeros(hh)
        for t in range(t_len):
            z = zx[t] + np.dot(u, h_prev)
            for k in range(hh):
                ig = 1.0 / (1.0 + np.exp(-z[k]))
                fg = 1.0 / (1.0 + np.exp(-z[hh + k]))
                og = 1.0 / (1.0 + np.exp(-z[2 * hh + k]))
                gg = np.tanh(z[3 * hh + k])
                ct = fg * c_prev[k] + ig * gg
                tct = np.tanh(ct)
                ifog[t, k] = ig
                ifog[t, hh + k] = fg
                ifog[t, 2 * hh + k] = og
                ifog[t, 3 * hh + k] = gg
                c[t, k] = ct
                tc[t, k] = tct
                h[t, k] = og * tct
            c_prev = c[t]
            h_prev = h[t]
        return ifog, c, tc, h

    @njit(cache=True)
    def backward(dh_up, ifog, c, tc, ut):
        t_len, hh = dh_up.shape
        dz = np.empty((t_len, 4 * hh))
        dh_rec = np.zeros(hh)
        dc_rec = np.zeros(hh)
        for t in range(t_len - 1, -1, -1):
            for k in range(hh):
                ig = ifog[t, k]
                fg = ifog[t, hh + k]
                og = ifog[t, 2 * hh + k]
                gg = ifog[t, 3 * hh + k]
                tct = tc[t, k]
                dh = dh_up[t, k] + dh_rec[k]
                do = dh * tct
                dc = dc_rec[k] + dh * og * (1.0 - tct * tct)
                c_prev = c[t - 1, k] if t > 0 else 0.0
                dz[t, k] = dc * gg * ig * (1.0 - ig)
                dz[t, hh + k] = dc * c_prev * fg * (1.0 - fg)
                dz[t, 2 * hh + k] = do * og * (1.0 - og)
                dz[t, 3 * hh + k] = dc * ig * (1.0 - gg * gg)
                dc_rec[k] = dc * fg
            dh_rec = np.dot(ut, dz[t])
        return dz

    return forward, backward


if os.environ.get("PERMSEP_DISABLE_NUMBA", "") not in ("", "0"):
    BACKEND = "numpy"
    lstm_forward, lstm_backward = lstm_forward_numpy, lstm_backward_numpy
else:
    try:
        lstm_forward, lstm_backward = _jit_kernels()
        BACKEND = "numba"
    except ImportError:
        BACKEND = "numpy"
        lstm_forward, lstm_backward = lstm_forward_numpy, lstm_backward_numpy
