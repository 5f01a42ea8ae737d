"""Dense layers on H x W x C arrays with hand-written backward passes.

Every forward returns ``(y, back)``; ``back(dy)`` returns ``(dx, grads)`` where
``grads`` maps full parameter names to gradient arrays. Binders such as
:func:`ln` close over a weight dict and a key prefix so blocks can be built as
chains of single-input steps.
"""

from __future__ import annotations

import numpy as np

from ..errors import InvalidArgumentError

LN_EPS = 1e-5


def merge(into, grads):
    for k, v in grads.items():
        into[k] = into[k] + v if k in into else v
    return into


def chain(x, steps):
    """Run single-input steps in order; the returned ``back`` walks them in reverse."""
    backs = []
    for step in steps:
        x, b = step(x)
        backs.append(b)

    def back(dy):
        grads = {}
        for b in reversed(backs):
            dy, g = b(dy)
            merge(grads, g)
        return dy, grads

    return x, back


# -- elementwise -------------------------------------------------------------


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x):
    s = _sigmoid(x)
    return s, lambda dy: (dy * s * (1.0 - s), {})


def silu(x):
    s = _sigmoid(x)
    return x * s, lambda dy: (dy * (s + x * s * (1.0 - s)), {})


def tanh(x):
    t = np.tanh(x)
    return t, lambda dy: (dy * (1.0 - t * t), {})


# -- normalization and projections ------------------------------------------


def layer_norm(x, g, b, name="ln", eps=LN_EPS):
    """Per-pixel normalization over channels. A zero input maps to ``b``."""
    xc = x - x.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xh = xc * inv
    y = xh * g + b

    def back(dy):
        dxh = dy * g
        dx = inv * (dxh - dxh.mean(-1, keepdims=True) - xh * (dxh * xh).mean(-1, keepdims=True))
        sum_axes = tuple(range(x.ndim - 1))
        return dx, {f"{name}.g": (dy * xh).sum(axis=sum_axes), f"{name}.b": dy.sum(axis=sum_axes)}

    return y, back


def linear(x, W, b, name="lp"):
    """Channel projection ``x @ W + b`` applied at every pixel."""
    y = x @ W + b

    def back(dy):
        xf = x.reshape(-1, x.shape[-1])
        dyf = dy.reshape(-1, dy.shape[-1])
        return dy @ W.T, {f"{name}.W": xf.T @ dyf, f"{name}.b": dyf.sum(axis=0)}

    return y, back


SHIFTS = [(i, j) for i in range(3) for j in range(3)]


def depthwise3(x, k, b=None, name="dwc"):
    """Per-channel 3x3 correlation with zero padding."""
    h, w, _ = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    y = np.zeros_like(x)
    for i, j in SHIFTS:
        y += k[i, j] * xp[i : i + h, j : j + w]
    if b is not None:
        y = y + b

    def back(dy):
        dk = np.empty_like(k)
        dxp = np.zeros_like(xp)
        for i, j in SHIFTS:
            dk[i, j] = (dy * xp[i : i + h, j : j + w]).sum(axis=(0, 1))
            dxp[i : i + h, j : j + w] += k[i, j] * dy
        grads = {f"{name}.k": dk}
        if b is not None:
            grads[f"{name}.b"] = dy.sum(axis=(0, 1))
        return dxp[1:-1, 1:-1], grads

    return y, back


def _im2col(x):
    h, w, c = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    cols = np.empty((h, w, 9, c))
    for n, (i, j) in enumerate(SHIFTS):
        cols[:, :, n] = xp[i : i + h, j : j + w]
    return cols.reshape(h, w, 9 * c)


def conv3(x, W, b, name="conv"):
    """Dense 3x3 convolution, zero padded, ``W`` shaped (3, 3, Cin, Cout)."""
    h, w, c = x.shape
    if W.shape[2] != c:
        raise InvalidArgumentError(f"conv expects {W.shape[2]} input channels, got {c}")
    cols = _im2col(x)
    Wr = W.reshape(9 * c, -1)
    y = cols @ Wr + b

    def back(dy):
        dyf = dy.reshape(-1, dy.shape[-1])
        dW = (cols.reshape(-1, 9 * c).T @ dyf).reshape(W.shape)
        dcols = (dy @ Wr.T).reshape(h, w, 9, c)
        dxp = np.zeros((h + 2, w + 2, c))
        for n, (i, j) in enumerate(SHIFTS):
            dxp[i : i + h, j : j + w] += dcols[:, :, n]
        return dxp[1:-1, 1:-1], {f"{name}.W": dW, f"{name}.b": dyf.sum(axis=0)}

    return y, back


# -- resampling and pooling --------------------------------------------------


def _interp_matrix(n_in, factor):
    # half-pixel centers, edge clamped; factor 1 gives the identity exactly
    n_out = n_in * factor
    src = np.clip((np.arange(n_out) + 0.5) / factor - 0.5, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    t = src - lo
    M = np.zeros((n_out, n_in))
    M[np.arange(n_out), lo] += 1.0 - t
    M[np.arange(n_out), hi] += t
    return M


def upsample(x, factor):
    """Bilinear upsampling by an integer factor, as two interpolation matrices."""
    if factor < 1 or int(factor) != factor:
        raise InvalidArgumentError(f"upsample factor must be a positive integer, got {factor}")
    factor = int(factor)
    if factor == 1:
        return x, lambda dy: (dy, {})
    Mh = _interp_matrix(x.shape[0], factor)
    Mw = _interp_matrix(x.shape[1], factor)
    y = np.einsum("ah,hw...,bw->ab...", Mh, x, Mw)
    return y, lambda dy: (np.einsum("ah,ab...,bw->hw...", Mh, dy, Mw), {})


def _box3(x):
    h, w = x.shape[:2]
    xp = np.pad(x, ((1, 1), (1, 1)) + ((0, 0),) * (x.ndim - 2))
    return sum(xp[i : i + h, j : j + w] for i, j in SHIFTS)


def avgpool3(x):
    """3x3 mean over the neighbors that exist (borders average fewer pixels)."""
    count = _box3(np.ones(x.shape[:2]))
    if x.ndim == 3:
        count = count[..., None]
    y = _box3(x) / count
    # the zero-padded box sum is self-adjoint
    return y, lambda dy: (_box3(dy / count), {})


def gap(x):
    h, w = x.shape[:2]
    return x.mean(axis=(0, 1)), lambda dy: (np.broadcast_to(dy / (h * w), x.shape).copy(), {})


# -- binders -----------------------------------------------------------------


def ln(w, name):
    return lambda x: layer_norm(x, w[f"{name}.g"], w[f"{name}.b"], name)


def lp(w, name):
    return lambda x: linear(x, w[f"{name}.W"], w[f"{name}.b"], name)


def dwc(w, name):
    return lambda x: depthwise3(x, w[f"{name}.k"], w.get(f"{name}.b"), name)


def conv(w, name):
    return lambda x: conv3(x, w[f"{name}.W"], w[f"{name}.b"], name)
