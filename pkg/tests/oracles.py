"""Brute-force reference implementations used only by the tests."""
import math

import numpy as np


def conv2d_direct(x, w, b, stride, padding):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(n):
        for oc in range(o):
            for r in range(ho):
                for s in range(wo):
                    acc = b[oc]
                    for ic in range(c):
                        for a in range(k):
                            for bb in range(k):
                                y = r * stride + a - padding
                                z = s * stride + bb - padding
                                if 0 <= y < h and 0 <= z < wd:
                                    acc += x[i, ic, y, z] * w[oc, ic, a, bb]
                    out[i, oc, r, s] = acc
    return out


def matmul_loops(x, w, bias):
    n, d = x.shape
    k = w.shape[1]
    out = np.zeros((n, k))
    for i in range(n):
        for j in range(k):
            acc = bias[j]
            for t in range(d):
                acc += x[i, t] * w[t, j]
            out[i, j] = acc
    return out


def maxpool_loops(x, k, stride):
    n, c, h, w = x.shape
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for i in range(n):
        for ch in range(c):
            for r in range(ho):
                for s in range(wo):
                    best = -math.inf
                    for a in range(k):
                        for b in range(k):
                            best = max(best, x[i, ch, r * stride + a, s * stride + b])
                    out[i, ch, r, s] = best
    return out


def gap_loops(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c))
    for i in range(n):
        for ch in range(c):
            acc = 0.0
            for r in range(h):
                for s in range(w):
                    acc += x[i, ch, r, s]
            out[i, ch] = acc / (h * w)
    return out


def accuracy_count(probs, labels):
    correct = 0
    for row, y in zip(probs, labels):
        best = 0
        for j in range(1, len(row)):
            if row[j] > row[best]:
                best = j
        correct += best == y
    return 100.0 * correct / len(labels)


def auc_pairs(scores, positive):
    pos = [s for s, p in zip(scores, positive) if p]
    neg = [s for s, p in zip(scores, positive) if not p]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


def auc_macro_pairs(probs, labels):
    vals = []
    for c in range(probs.shape[1]):
        positive = [y == c for y in labels]
        if 0 < sum(positive) < len(labels):
            vals.append(auc_pairs(probs[:, c], positive))
    return 100.0 * sum(vals) / len(vals)


def adam_scalar(grad_fn, w, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    traj = []
    for t in range(1, steps + 1):
        g = grad_fn(w)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        w = w - lr * mh / (math.sqrt(vh) + eps)
        traj.append(w)
    return traj
