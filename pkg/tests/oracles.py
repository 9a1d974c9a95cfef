"""Independent float64 reference implementations used as test oracles."""

import math

import numpy as np
from scipy.signal import correlate2d


def conv2d_ref(x, w, b, stride, padding):
    x = np.asarray(x, np.float64)
    w = np.asarray(w, np.float64)
    c, h, wd = x.shape
    co = w.shape[0]
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    outs = []
    for o in range(co):
        acc = sum(correlate2d(xp[ci], w[o, ci], mode="valid") for ci in range(c))
        outs.append(acc[::stride, ::stride] + (0.0 if b is None else float(b[o])))
    return np.stack(outs)


def maxpool_ref(x):
    c, h, w = x.shape
    out = np.empty((c, h // 2, w // 2))
    arg = np.empty((c, h // 2, w // 2), dtype=np.int64)
    for ch in range(c):
        for i in range(h // 2):
            for j in range(w // 2):
                cells = [x[ch, 2 * i, 2 * j], x[ch, 2 * i, 2 * j + 1], x[ch, 2 * i + 1, 2 * j], x[ch, 2 * i + 1, 2 * j + 1]]
                k = int(np.argmax(cells))
                out[ch, i, j] = cells[k]
                arg[ch, i, j] = k
    return out, arg


def xent_ref(z, label):
    z = [float(v) for v in z]
    m = max(z)
    return m + math.log(sum(math.exp(v - m) for v in z)) - z[label]


def run_net(layers, params, x):
    """Float64 forward of a layer list; returns (output, kink signature).

    The signature records relu signs and pooling argmaxes so a finite-difference
    probe can tell whether it straddled a non-differentiable point.
    """
    h = np.asarray(x, np.float64)
    sig = []
    for layer in layers:
        kind = layer[0]
        if kind == "conv":
            _, wk, bk, stride, pad = layer
            h = conv2d_ref(h, params[wk], params[bk], stride, pad)
        elif kind == "relu":
            sig.append(h > 0)
            h = np.maximum(h, 0.0)
        elif kind == "tanh":
            h = np.tanh(h)
        elif kind == "pool":
            h, arg = maxpool_ref(h)
            sig.append(arg)
        elif kind == "dense":
            _, wk, bk = layer
            h = np.asarray(params[wk], np.float64) @ h.reshape(-1) + np.asarray(params[bk], np.float64)
    return h, sig


def same_signature(a, b):
    return all(np.array_equal(u, v) for u, v in zip(a, b))


def median_ref(img, k):
    """Explicit neighbourhood sort with edge replication."""
    h, w = img.shape
    r = k // 2
    out = np.empty_like(img)
    for i in range(h):
        for j in range(w):
            vals = []
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    ii = min(max(i + di, 0), h - 1)
                    jj = min(max(j + dj, 0), w - 1)
                    vals.append(img[ii, jj])
            vals.sort()
            out[i, j] = vals[len(vals) // 2]
    return out


class LinearModel:
    """Logits (0, v.x + b): the margin for source label 0 is the affine score."""

    def __init__(self, v, b=0.0):
        from confadv import tensor as T

        self._T = T
        v = np.asarray(v, np.float32).reshape(-1)
        self.w = np.stack([np.zeros_like(v), v])
        self.b = np.array([0.0, b], np.float32)

    def forward(self, x):
        T = self._T
        return T.dense(T.flatten(x), self.w, self.b)


def hyperplane_distance(v, b, x0, c):
    """Closed-form L2 distance from x0 to {v.x + b = c} and the foot point."""
    v = np.asarray(v, np.float64).reshape(-1)
    x0 = np.asarray(x0, np.float64).reshape(-1)
    gap = c - (v @ x0 + b)
    delta = gap * v / (v @ v)
    return float(np.linalg.norm(delta)), x0 + delta
