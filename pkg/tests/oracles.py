"""Naive reference implementations used as independent test oracles.

Nothing here imports from ``cact``; every routine is a direct loop over the
textbook definition.
"""
import math

import numpy as np


def conv2d_loops(x, w, b, stride=1, padding=0):
    B, C, H, W = x.shape
    K, _, kh, kw = w.shape
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((B, K, Ho, Wo))
    for n in range(B):
        for k in range(K):
            for oy in range(Ho):
                for ox in range(Wo):
                    acc = b[k] if b is not None else 0.0
                    for c in range(C):
                        for i in range(kh):
                            for j in range(kw):
                                y = oy * stride + i - padding
                                xx = ox * stride + j - padding
                                if 0 <= y < H and 0 <= xx < W:
                                    acc += x[n, c, y, xx] * w[k, c, i, j]
                    out[n, k, oy, ox] = acc
    return out


def avg3x3_loops(x):
    B, C, H, W = x.shape
    out = np.zeros_like(x)
    for n in range(B):
        for c in range(C):
            for y in range(H):
                for xx in range(W):
                    total = 0.0
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            if 0 <= y + dy < H and 0 <= xx + dx < W:
                                total += x[n, c, y + dy, xx + dx]
                    out[n, c, y, xx] = total / 9.0
    return out


def global_pool_loops(x, kind):
    B, C, H, W = x.shape
    out = np.zeros((B, C, 1, 1))
    for n in range(B):
        for c in range(C):
            vals = [x[n, c, y, xx] for y in range(H) for xx in range(W)]
            out[n, c, 0, 0] = max(vals) if kind == "global_max" else sum(vals) / len(vals)
    return out


def batch_norm_loops(x, gamma, beta, eps=1e-5):
    B, C, H, W = x.shape
    out = np.zeros_like(x)
    for c in range(C):
        vals = [x[n, c, y, xx] for n in range(B) for y in range(H) for xx in range(W)]
        mu = sum(vals) / len(vals)
        var = sum((v - mu) ** 2 for v in vals) / len(vals)
        for n in range(B):
            for y in range(H):
                for xx in range(W):
                    out[n, c, y, xx] = gamma[c] * (x[n, c, y, xx] - mu) / math.sqrt(var + eps) + beta[c]
    return out


def cross_entropy_loops(Y, P, weights=None):
    K, C = Y.shape
    total = 0.0
    for k in range(K):
        w = 1.0 if weights is None else weights[k]
        for c in range(C):
            total += w * Y[k, c] * math.log2(max(P[k, c], 1e-12))
    return -total / K


def segmentation_loss_loops(S, P):
    """S, P: [K, C, M, N]; per-cell CE averaged within image, then over images."""
    K, C, M, N = S.shape
    total = 0.0
    for k in range(K):
        img = 0.0
        for i in range(M):
            for j in range(N):
                for c in range(C):
                    img += S[k, c, i, j] * math.log2(max(P[k, c, i, j], 1e-12))
        total += img / (M * N)
    return -total / K


def confusion_f1(preds, truths, cls):
    tp = fp = fn = 0
    for p, t in zip(preds, truths):
        if p == cls and t == cls:
            tp += 1
        elif p == cls:
            fp += 1
        elif t == cls:
            fn += 1
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def enumerate_offsets(M, N, w, s):
    """Window offsets by brute force: every cell origin at stride, plus an edge-clamped tail."""
    rows = set()
    r = 0
    while r + w <= M:
        rows.add(r)
        r += s
    rows.add(M - w)
    cols = set()
    c = 0
    while c + w <= N:
        cols.add(c)
        c += s
    cols.add(N - w)
    return sorted((a, b) for a in rows for b in cols)
