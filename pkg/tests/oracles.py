"""Slow, obviously-correct reference implementations used as test oracles."""

import math

import numpy as np


def conv3d_loops(x, w, b, stride, padding):
    n, cin, d, h, wd = x.shape
    cout, _, k, _, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
    od = (d + 2 * padding - k) // stride + 1
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, cout, od, oh, ow))
    for ni in range(n):
        for co in range(cout):
            for i in range(od):
                for j in range(oh):
                    for l in range(ow):
                        acc = 0.0 if b is None else float(b[co])
                        for ci in range(cin):
                            for a in range(k):
                                for bb in range(k):
                                    for c in range(k):
                                        acc += xp[ni, ci, i * stride + a, j * stride + bb, l * stride + c] * w[co, ci, a, bb, c]
                        out[ni, co, i, j, l] = acc
    return out


def dice_loss_loops(p, g, eps=1e-5):
    """p, g: (K, ...) arrays; plain python sums per region."""
    sims = []
    for k in range(p.shape[0]):
        pk, gk = p[k].ravel().tolist(), g[k].ravel().tolist()
        inter = sum(a * b for a, b in zip(pk, gk))
        den = sum(a * a for a in pk) + sum(b * b for b in gk)
        sims.append((2 * inter + eps) / (den + eps))
    return 1.0 - sum(sims) / len(sims)


def bce_loops(p, g, clamp=1e-7):
    total, count = 0.0, 0
    for a, b in zip(p.ravel().tolist(), g.ravel().tolist()):
        a = min(max(a, clamp), 1 - clamp)
        total += -(b * math.log(a) + (1 - b) * math.log(1 - a))
        count += 1
    return total / count


def dice_sets(pred, gt):
    a = {tuple(i) for i in np.argwhere(pred)}
    b = {tuple(i) for i in np.argwhere(gt)}
    if not a and not b:
        return 1.0
    return 2 * len(a & b) / (len(a) + len(b))


def percentile_sorted(values, q):
    """Linear-interpolation percentile from a sorted list."""
    s = sorted(values)
    pos = (len(s) - 1) * q / 100.0
    lo = math.floor(pos)
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (s[hi] - s[lo]) * (pos - lo)
