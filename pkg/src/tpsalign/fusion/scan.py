"""Diagonal selective scan and the two spatial scan mixers built on it.

Per channel ``c`` and state ``d``::

    h[t, c, d] = A[c, d] * h[t-1, c, d] + B[c, d] * x[t, c]
    y[t, c]    = sum_d C[c, d] * h[t, c, d]

Sequences are laid out time first, ``(T, *batch, C)``, so many independent
scans run in one pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InvalidArgumentError

BLOCK = 16


@dataclass(frozen=True, eq=False)
class ScanParams:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        shapes = {np.shape(self.A), np.shape(self.B), np.shape(self.C)}
        if len(shapes) != 1 or len(np.shape(self.A)) != 2:
            raise InvalidArgumentError(f"A, B, C must share one (channels, state) shape, got {shapes}")
        check_decay(self.A)

    @property
    def channels(self):
        return self.A.shape[0]

    @property
    def state_dim(self):
        return self.A.shape[1]

    @classmethod
    def from_weights(cls, w, name):
        return cls(w[f"{name}.A"], w[f"{name}.B"], w[f"{name}.C"])


def check_decay(A):
    A = np.asarray(A)
    if not np.all(np.isfinite(A)) or np.any(A < 0) or np.any(A >= 1):
        raise InvalidArgumentError("scan decay A must lie in [0, 1)")


def _check_seq(x, A):
    x = np.asarray(x, dtype=float)
    if x.ndim < 2 or x.shape[0] < 1:
        raise InvalidArgumentError(f"expected a (T, ..., C) sequence with T >= 1, got {x.shape}")
    if x.shape[-1] != A.shape[0]:
        raise InvalidArgumentError(f"sequence has {x.shape[-1]} channels, scan expects {A.shape[0]}")
    return x


def scan_naive(x, A, B, C):
    """Reference loop. Returns outputs and all states (``states[0]`` is zero)."""
    check_decay(A)
    x = _check_seq(x, A)
    T = x.shape[0]
    states = np.zeros((T + 1,) + x.shape[1:] + (A.shape[1],))
    for t in range(T):
        states[t + 1] = A * states[t] + B * x[t][..., None]
    y = np.einsum("t...cd,cd->t...c", states[1:], C)
    return y, states


def scan_blocked(x, A, B, C, block=BLOCK):
    """Same recurrence evaluated ``block`` steps at a time with a decay-power matrix."""
    check_decay(A)
    x = _check_seq(x, A)
    T = x.shape[0]
    L = min(block, T)
    k = np.arange(L + 1)
    pw = A[None] ** k[:, None, None]  # A**0 == 1 even for A == 0
    lag = k[:L, None] - k[None, :L]
    M = np.where((lag >= 0)[..., None, None], pw[np.maximum(lag, 0)], 0.0)
    u = B * x[..., None]
    h = np.zeros(x.shape[1:] + (A.shape[1],))
    out = np.empty_like(x)
    for s in range(0, T, L):
        n = min(L, T - s)
        hs = np.einsum("tscd,s...cd->t...cd", M[:n, :n], u[s : s + n])
        hs += np.einsum("tcd,...cd->t...cd", pw[1 : n + 1], h)
        out[s : s + n] = np.einsum("t...cd,cd->t...c", hs, C)
        h = hs[-1]
    return out


def selective_scan_1d(x, p):
    """Scan output for ``x`` shaped (T, C) or (T, *batch, C)."""
    return scan_blocked(x, p.A, p.B, p.C)


def scan(x, A, B, C, name="scan"):
    """Differentiable scan: returns ``(y, back)`` with gradients for x, A, B, C."""
    y, states = scan_naive(x, A, B, C)
    T = x.shape[0]

    def back(dy):
        dx = np.empty_like(x)
        dA = np.zeros_like(A)
        dB = np.zeros_like(B)
        g = np.zeros(states.shape[1:])
        dC = (dy[..., None] * states[1:]).reshape(-1, *A.shape).sum(axis=0)
        for t in range(T - 1, -1, -1):
            g = g * A + dy[t][..., None] * C
            dx[t] = (g * B).sum(axis=-1)
            dB += (g * x[t][..., None]).reshape(-1, *A.shape).sum(axis=0)
            dA += (g * states[t]).reshape(-1, *A.shape).sum(axis=0)
        return dx, {f"{name}.A": dA, f"{name}.B": dB, f"{name}.C": dC}

    return y, back


# -- ES2D --------------------------------------------------------------------


def _check_map(f):
    f = np.asarray(f, dtype=float)
    if f.ndim != 3 or f.shape[2] < 1:
        raise InvalidArgumentError(f"expected an H x W x C feature map, got {f.shape}")
    return f


def es2d_fwd(f, A, B, C, name="scan"):
    """Skip scan: four stride-2 sub-grids, each scanned both ways and averaged."""
    f = _check_map(f)
    h, w, c = f.shape
    if h % 2 or w % 2:
        raise InvalidArgumentError(f"es2d needs even height and width, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    # (h2, 2, w2, 2, c) -> (h2*w2, 4, c): sub-grid (i, j) is batch index 2i + j
    seq = f.reshape(h2, 2, w2, 2, c).transpose(0, 2, 1, 3, 4).reshape(h2 * w2, 4, c)
    both = np.concatenate([seq, seq[::-1]], axis=1)
    y2, back_scan = scan(both, A, B, C, name)
    y = 0.5 * (y2[:, :4] + y2[::-1, 4:])
    out = y.reshape(h2, w2, 2, 2, c).transpose(0, 2, 1, 3, 4).reshape(h, w, c)

    def back(dout):
        dy = dout.reshape(h2, 2, w2, 2, c).transpose(0, 2, 1, 3, 4).reshape(h2 * w2, 4, c)
        dy2 = np.concatenate([0.5 * dy, 0.5 * dy[::-1]], axis=1)
        dboth, grads = back_scan(dy2)
        dseq = dboth[:, :4] + dboth[::-1, 4:]
        return dseq.reshape(h2, w2, 2, 2, c).transpose(0, 2, 1, 3, 4).reshape(h, w, c), grads

    return out, back


def es2d(f, p):
    return es2d_fwd(f, p.A, p.B, p.C)[0]


# -- LSSM --------------------------------------------------------------------


def lssm_fwd(f, A, B, C, win=4, name="scan"):
    """Raster scan inside each window plus a scan over window means, broadcast back."""
    f = _check_map(f)
    h, w, c = f.shape
    if win < 1 or h % win or w % win:
        raise InvalidArgumentError(f"lssm window {win} does not divide {h}x{w}")
    nh, nw = h // win, w // win
    # (nh, win, nw, win, c) -> (win*win, nh*nw, c)
    seq = f.reshape(nh, win, nw, win, c).transpose(1, 3, 0, 2, 4).reshape(win * win, nh * nw, c)
    y_in, back_in = scan(seq, A, B, C, name)
    means = seq.mean(axis=0)
    y_mean, back_mean = scan(means, A, B, C, name)
    y = y_in + y_mean[None]
    out = y.reshape(win, win, nh, nw, c).transpose(2, 0, 3, 1, 4).reshape(h, w, c)

    def back(dout):
        dy = dout.reshape(nh, win, nw, win, c).transpose(1, 3, 0, 2, 4).reshape(win * win, nh * nw, c)
        dseq, grads = back_in(dy)
        dmeans, g2 = back_mean(dy.sum(axis=0))
        for k, v in g2.items():
            grads[k] = grads[k] + v
        dseq = dseq + dmeans[None] / (win * win)
        return dseq.reshape(win, win, nh, nw, c).transpose(2, 0, 3, 1, 4).reshape(h, w, c), grads

    return out, back


def lssm(f, p, win=4):
    return lssm_fwd(f, p.A, p.B, p.C, win)[0]
