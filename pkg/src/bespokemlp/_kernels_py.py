"""Pure-Python/numpy implementations of the hot kernels.

Used when the compiled ``_kernels`` extension is unavailable or when
``BESPOKEMLP_PURE=1`` is set. Semantics must match ``_kernels.pyx`` exactly.
"""

import numpy as np


def _layer(x, w, bias, shift, widths):
    wp = np.where(w > 0, w, 0)
    wn = np.where(w < 0, -w, 0)
    acc = ((x @ wp.T - x @ wn.T) << shift) + bias
    lim = np.left_shift(np.int64(1), widths - 1)
    ovf = ((acc < -lim) | (acc >= lim)).any(axis=1)
    return acc, ovf


def forward_batch(x, w0, bias0, shift0, widths0, qshift, rbits, w1, bias1, shift1, widths1):
    """Integer inference over a batch of input codes.

    Returns ``(classes, hidden_acc, output_acc, overflow_flags)``.
    """
    x = np.asarray(x, dtype=np.int64)
    acc0, ovf0 = _layer(x, w0, bias0, shift0, widths0)
    top = (1 << rbits) - 1
    pos = np.maximum(acc0, 0)
    h = pos >> qshift if qshift >= 0 else pos << -qshift
    h = np.minimum(h, top)
    acc1, ovf1 = _layer(h, w1, bias1, shift1, widths1)
    if acc1.shape[1]:
        cls = np.argmax(acc1, axis=1).astype(np.int64)
    else:
        cls = np.zeros(len(x), np.int64)
    return cls, acc0, acc1, (ovf0 | ovf1).astype(np.uint8)


def nondominated_ranks(f):
    """Fast non-dominated sorting of an (n, m) objective array (minimization)."""
    f = np.asarray(f, dtype=np.float64)
    n = len(f)
    ranks = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return ranks
    le = (f[:, None, :] <= f[None, :, :]).all(axis=2)
    lt = (f[:, None, :] < f[None, :, :]).any(axis=2)
    dom = le & lt  # dom[i, j]: i dominates j
    count = dom.sum(axis=0)
    current = np.flatnonzero(count == 0)
    r = 0
    while current.size:
        ranks[current] = r
        count = count - dom[current].sum(axis=0)
        count[ranks >= 0] = -1
        current = np.flatnonzero(count == 0)
        r += 1
    return ranks
