"""Independent oracles shared by several test modules."""

import numpy as np

from bespokemlp import model


def numeric_grads(m, x, y, l1=0.0, eps=1e-6):
    """Central finite differences of the training loss w.r.t. every parameter."""
    out = []
    for layer in m.layers:
        pair = []
        for arr in (layer.weights, layer.biases):
            g = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + eps
                lp = model.loss_and_grads(m, x, y, l1)[0]
                arr[idx] = old - eps
                lm = model.loss_and_grads(m, x, y, l1)[0]
                arr[idx] = old
                g[idx] = (lp - lm) / (2 * eps)
            pair.append(g)
        out.append(tuple(pair))
    return out


def grad_rel_error(m, x, y, l1=0.0):
    """Largest per-array relative error ||a - n|| / max(||a|| + ||n||, 1e-12)."""
    _, analytic = model.loss_and_grads(m, x, y, l1)
    numeric = numeric_grads(m, x, y, l1)
    worst = 0.0
    for pa, pn in zip(analytic, numeric):
        for a, n in zip(pa, pn):
            worst = max(worst, float(np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), 1e-12)))
    return worst


def random_grad_case(seed):
    rng = np.random.default_rng(seed)
    d, h, k = int(rng.integers(1, 5)), int(rng.integers(1, 6)), int(rng.integers(2, 4))
    m = model.init_model(d, h, k, rng)
    for layer in m.layers:
        layer.biases[:] = rng.normal(0, 0.5, layer.biases.shape)
    x = rng.random((int(rng.integers(1, 8)), d))
    y = rng.integers(0, k, len(x))
    return m, x, y, float(rng.choice([0.0, 0.01]))


def real_inference(q, row):
    """Exact rational-arithmetic inference over the quantized values (no integer tricks)."""
    from fractions import Fraction as Fr
    g = q.genes
    x = [Fr(int(v)) * Fr(g.i.step) for v in row]
    for layer in range(2):
        w = q.weight_codes[layer]
        b = q.bias_codes[layer]
        acc = [sum((Fr(int(w[n, j])) * Fr(g.c.step) * x[j] for j in range(len(x))), Fr(0)) + Fr(int(b[n])) * Fr(g.b.step)
               for n in range(w.shape[0])]
        if layer == 0:
            top = Fr(g.r.max_code) * Fr(g.r.step)
            x = [min(max(Fr(int(np.floor(a / Fr(g.r.step)))) * Fr(g.r.step), Fr(0)), top) for a in acc]
    best = 0
    for k in range(1, len(acc)):
        if acc[k] > acc[best]:
            best = k
    return best
