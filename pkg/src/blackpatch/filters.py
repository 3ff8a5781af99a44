"""Replicate-padded box filters and small convolutions, with exact adjoints.

Everything here operates on the last two axes and is written so the
synthetic oracles can expose hand-derived vector-Jacobian products: every
forward op has an ``*_adjoint`` that satisfies <f(x), y> == <x, f_adj(y)>
to float precision, which is what the white-box gradient path relies on.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "box_mean",
    "box_mean_adjoint",
    "conv3x3_replicate",
    "conv3x3_replicate_adjoint",
    "pad_replicate",
    "fold_replicate",
]


def _pad_widths(k):
    # even windows are centered with the extra cell on the right
    return (k - 1) // 2, k // 2


def pad_replicate(x, left, right, axis):
    return np.concatenate(
        [
            np.repeat(np.take(x, [0], axis=axis), left, axis=axis),
            x,
            np.repeat(np.take(x, [-1], axis=axis), right, axis=axis),
        ],
        axis=axis,
    )


def fold_replicate(g, left, right, axis):
    """Adjoint of :func:`pad_replicate`: sum pad lanes back onto the edges."""
    g = np.moveaxis(g, axis, -1)
    core = g[..., left : g.shape[-1] - right].copy()
    if left:
        core[..., 0] += g[..., :left].sum(axis=-1)
    if right:
        core[..., -1] += g[..., g.shape[-1] - right :].sum(axis=-1)
    return np.moveaxis(core, -1, axis)


def _box_mean_1d(x, k, axis):
    left, right = _pad_widths(k)
    xp = np.moveaxis(pad_replicate(x, left, right, axis), axis, -1)
    out = sliding_window_view(xp, k, axis=-1).mean(axis=-1)
    return np.moveaxis(out, -1, axis)


def _box_mean_1d_adjoint(g, k, axis):
    left, right = _pad_widths(k)
    g = np.moveaxis(g, axis, -1)
    n = g.shape[-1]
    # adjoint of the sliding mean: zero-pad, reversed sliding sum, scale
    gz = np.zeros(g.shape[:-1] + (n + 2 * (k - 1),), dtype=g.dtype)
    gz[..., k - 1 : k - 1 + n] = g
    acc = sliding_window_view(gz, k, axis=-1).sum(axis=-1)[..., : n + left + right] / k
    out = fold_replicate(acc, left, right, -1)
    return np.moveaxis(out, -1, axis)


def box_mean(x, k):
    """Separable k x k box mean over the last two axes, replicate padding."""
    k = int(k)
    if k < 1:
        raise ValueError(f"kernel size must be >= 1, got {k}")
    if k == 1:
        return np.asarray(x).copy()
    return _box_mean_1d(_box_mean_1d(np.asarray(x), k, -2), k, -1)


def box_mean_adjoint(g, k):
    k = int(k)
    if k == 1:
        return np.asarray(g).copy()
    return _box_mean_1d_adjoint(_box_mean_1d_adjoint(np.asarray(g), k, -1), k, -2)


def conv3x3_replicate(x, weights, bias=None):
    """3x3 cross-correlation with replicate padding.

    ``x`` is (n, c_in, H, W), ``weights`` is (c_out, c_in, 3, 3); returns
    (n, c_out, H, W).
    """
    xp = pad_replicate(pad_replicate(x, 1, 1, -2), 1, 1, -1)
    windows = sliding_window_view(xp, (3, 3), axis=(-2, -1))
    out = np.einsum("ocij,nchwij->nohw", weights, windows, optimize=True)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return out


def conv3x3_replicate_adjoint(g, weights):
    """VJP of :func:`conv3x3_replicate` with respect to its input."""
    n, _, h, w = g.shape
    c_in = weights.shape[1]
    gp = np.zeros((n, c_in, h + 2, w + 2), dtype=g.dtype)
    for i in range(3):
        for j in range(3):
            gp[:, :, i : i + h, j : j + w] += np.einsum(
                "oc,nohw->nchw", weights[:, :, i, j], g, optimize=True
            )
    return fold_replicate(fold_replicate(gp, 1, 1, -2), 1, 1, -1)
