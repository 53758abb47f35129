"""Compiled loops for the per-batch penalty terms.

Top-k selection picks the k largest scores; ties go to the lower feature index.
"""
import numba
import numpy as np


@numba.njit(cache=True)
def _top_k(scores, k):
    n = scores.shape[0]
    if k >= n:
        return np.arange(n)
    # Bounded insertion into a descending buffer; a later index never passes an
    # equal score, so ties stay in index order.
    out = np.empty(k, dtype=np.int64)
    vals = np.empty(k)
    m = 0
    for j in range(n):
        v = scores[j]
        if m == k and not v > vals[k - 1]:
            continue
        pos = m if m < k else k - 1
        while pos > 0 and vals[pos - 1] < v:
            vals[pos] = vals[pos - 1]
            out[pos] = out[pos - 1]
            pos -= 1
        vals[pos] = v
        out[pos] = j
        if m < k:
            m += 1
    return out


@numba.njit(cache=True)
def weight_spread(W, y, k, lam):
    """Term 1: value and dW, averaged over the labels ``y``."""
    F, C = W.shape
    n = y.shape[0]
    counts = np.zeros(C)
    for i in range(n):
        counts[y[i]] += 1.0
    spread = np.zeros((F, C))
    for j in range(F):
        for c in range(C):
            acc = 0.0
            for l in range(C):
                acc += abs(W[j, c] - W[j, l])
            spread[j, c] = acc
    value = 0.0
    dW = np.zeros((F, C))
    norm = lam / (n * k * (C - 1))
    for c in range(C):
        if counts[c] == 0.0:
            continue
        w = counts[c] * norm
        for j in _top_k(spread[:, c], k):
            value += w * spread[j, c]
            for l in range(C):
                diff = W[j, c] - W[j, l]
                if diff > 0:
                    dW[j, c] += w
                    dW[j, l] -= w
                elif diff < 0:
                    dW[j, c] -= w
                    dW[j, l] += w
    return value, dW


@numba.njit(cache=True)
def relative_contribution(z, logits, W, y, k, lam, all_classes, tol):
    """Term 2: value, dz, dW, and the number of rows skipped for a zero feature sum."""
    n, F = z.shape
    C = W.shape[1]
    dz = np.zeros((n, F))
    dW = np.zeros((F, C))
    value = 0.0
    skipped = 0
    scale = lam / (k * n)
    a = np.zeros(F)
    sd = np.zeros(F)
    for i in range(n):
        yi = y[i]
        total = 0.0
        for j in range(F):
            total += z[i, j]
        if abs(total) <= tol:
            skipped += 1
            continue
        other = -1
        best = -np.inf
        for c in range(C):
            if c != yi and logits[i, c] > best:
                best = logits[i, c]
                other = c
        for j in range(F):
            rel = z[i, j] / total
            if all_classes:
                acc = 0.0
                for c in range(C):
                    acc += abs(rel * (W[j, yi] - W[j, c]))
                a[j] = acc / (C - 1)
            else:
                a[j] = abs(rel * (W[j, yi] - W[j, other]))
        sel = _top_k(a, k)
        sd[:] = 0.0
        dot = 0.0
        for j in sel:
            value += a[j]
            rel = z[i, j] / total
            if all_classes:
                for c in range(C):
                    d = W[j, yi] - W[j, c]
                    s = np.sign(rel * d) * scale / (C - 1)
                    sd[j] += s * d
                    dW[j, yi] += s * rel
                    dW[j, c] -= s * rel
            else:
                d = W[j, yi] - W[j, other]
                s = np.sign(rel * d) * scale
                sd[j] = s * d
                dW[j, yi] += s * rel
                dW[j, other] -= s * rel
            dot += sd[j] * rel
        for j in range(F):
            dz[i, j] = (sd[j] - dot) / total
    return value * scale, dz, dW, skipped
