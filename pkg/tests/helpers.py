"""Independent oracles shared by the test modules.

Nothing here calls into the package's kernels: convolution is a nested
loop, AUROC counts pairs, AUPRC sweeps every threshold.
"""

import itertools

import numpy as np


def naive_conv2d(x, w, b=None, stride=1, pad=0, groups=1):
    n, c, h, wd = x.shape
    co, cig, kh, kw = w.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    cog = co // groups
    out = np.zeros((n, co, ho, wo))
    for i in range(n):
        for o in range(co):
            g = o // cog
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0
                    for ci in range(cig):
                        for dy in range(kh):
                            for dx in range(kw):
                                acc += xp[i, g * cig + ci, y * stride + dy, xx * stride + dx] * w[o, ci, dy, dx]
                    out[i, o, y, xx] = acc + (0.0 if b is None else b[o])
    return out


def conv_instance(seed):
    rng = np.random.default_rng(seed)
    n, c, h, w = rng.integers(1, 3), rng.integers(1, 9), rng.integers(3, 9), rng.integers(3, 9)
    depthwise = bool(rng.integers(0, 2))
    groups = int(c) if depthwise else 1
    c_out = int(c) if depthwise else int(rng.integers(1, 6))
    k = int(rng.choice([1, 3, 3]))
    stride = int(rng.integers(1, 3))
    pad = k // 2
    x = rng.standard_normal((n, c, h, w)).astype(np.float32)
    wt = rng.standard_normal((c_out, c // groups, k, k)).astype(np.float32)
    b = rng.standard_normal(c_out).astype(np.float32)
    return x, wt, b, stride, pad, groups


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += float(a[i, k]) * float(b[k, j])
            out[i, j] = s
    return out


def pair_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p, q in itertools.product(pos, neg):
        total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def sweep_auprc(scores, labels):
    """Average precision by predicting positive at every distinct threshold, highest first."""
    n_pos = sum(1 for y in labels if y == 1)
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 1)
        k = sum(1 for s in scores if s >= t)
        recall = tp / n_pos
        ap += (recall - prev_recall) * (tp / k)
        prev_recall = recall
    return ap


def numeric_grad(f, x, h=1e-3, coords=None):
    """Central differences of scalar ``f`` w.r.t. array ``x`` (modified in place and restored)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def rel_error(analytic, numeric, coords=None):
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if coords is not None:
        a, n = a[list(coords)], n[list(coords)]
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def away_from_kinks(a, kinks=(0.0, 6.0), margin=0.01):
    """Nudge values so no element sits within ``margin`` of a piecewise-linear kink."""
    a = a.copy()
    for k in kinks:
        close = np.abs(a - k) < margin
        a[close] = k + np.where(a[close] >= k, margin, -margin) * 2
    return a
