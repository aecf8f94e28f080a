"""Independent oracles shared by the tests: finite differences and scalar
re-implementations kept deliberately separate from the library code paths."""

from __future__ import annotations

import math

import numpy as np

FD_EPS = 1e-4
FD_RTOL = 1e-4


def numeric_gradient(f, arrays, eps: float = FD_EPS):
    """Central finite differences of the scalar ``f()`` wrt each array.

    Arrays are perturbed in place and restored; everything should be float64.
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + eps
            f_plus = f()
            a[idx] = orig - eps
            f_minus = f()
            a[idx] = orig
            g[idx] = (f_plus - f_minus) / (2.0 * eps)
            it.iternext()
        grads.append(g)
    return grads


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = max(np.abs(numeric).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / denom)


def scalar_cross_entropy(logits: np.ndarray, targets) -> float:
    """Per-element scalar re-evaluation of summed softmax cross entropy."""
    total = 0.0
    for row, t in zip(logits, targets):
        m = max(float(v) for v in row)
        denom = sum(math.exp(float(v) - m) for v in row)
        total += -(float(row[t]) - m - math.log(denom))
    return total


def scalar_kd_loss(o_hat: np.ndarray, teacher: np.ndarray, e: np.ndarray, v: np.ndarray) -> float:
    """Scalar re-evaluation of the distillation objective (sum over rows)."""

    def norm(x):
        return x / math.sqrt(sum(float(t) * float(t) for t in x))

    total = 0.0
    for i in range(o_hat.shape[0]):
        ob, tb = norm(o_hat[i]), norm(teacher[i])
        eb, vb = norm(e[i]), norm(v[i])
        cos = sum(a * b for a, b in zip(ob, tb))
        term2 = sum((a - b) ** 2 for a, b in zip(eb, vb))
        term3 = sum((a - b) ** 2 for a, b in zip(eb, vb))
        total += -cos + term2 + term3
    return total


def brute_force_quantize(e: np.ndarray, codewords: np.ndarray) -> int:
    """Exhaustive normalized nearest-neighbor with strict lowest-index ties."""
    ebar = e / np.linalg.norm(e)
    best_idx, best_dist = 0, np.inf
    for t in range(codewords.shape[0]):
        v = codewords[t].astype(np.float64)
        vbar = v / np.linalg.norm(v)
        dist = float(((vbar - ebar) ** 2).sum())
        if dist < best_dist:
            best_idx, best_dist = t, dist
    return best_idx
