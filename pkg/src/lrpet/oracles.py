"""Slow, independent reference computations used to check the fast paths.

None of these share code with ``tensor.py``.
"""

from __future__ import annotations

import math

import numpy as np


def jacobi_eigh(a, tol=1e-14, max_sweeps=100):
    """Eigenvalues and eigenvectors of a symmetric matrix by cyclic two-sided Jacobi.

    Returns (eigenvalues descending, eigenvectors as columns).
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    scale = max(np.sum(a * a), 1e-300)
    for _ in range(max_sweeps):
        off = np.sum(a * a) - np.sum(np.diag(a) ** 2)
        if off <= tol * tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-17 * math.sqrt(abs(a[p, p] * a[q, q])) or apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


def singular_values(w):
    """Singular values as square roots of the eigenvalues of W^T W (or W W^T)."""
    w = np.asarray(w, dtype=np.float64)
    gram = w.T @ w if w.shape[0] >= w.shape[1] else w @ w.T
    lam, _ = jacobi_eigh(gram)
    return np.sqrt(np.maximum(lam, 0.0))


def best_rank_error(w, r):
    """Eckart-Young optimum |W - W_r|_F from the eigenvalues of the Gram matrix."""
    w = np.asarray(w, dtype=np.float64)
    gram = w.T @ w if w.shape[0] >= w.shape[1] else w @ w.T
    lam, _ = jacobi_eigh(gram)
    return math.sqrt(max(float(np.sum(lam[r:])), 0.0))


def top_subspaces(w, r):
    """Orthonormal bases of the top-r left and right singular subspaces."""
    w = np.asarray(w, dtype=np.float64)
    _, vr = jacobi_eigh(w.T @ w)
    _, ul = jacobi_eigh(w @ w.T)
    return ul[:, :r], vr[:, :r]


def gaussian_solve(a, b):
    """Solve A X = B by Gaussian elimination with partial pivoting."""
    a = np.array(a, dtype=np.float64)
    b = np.array(b, dtype=np.float64)
    if b.ndim == 1:
        b = b[:, None]
    n = a.shape[0]
    for k in range(n):
        piv = k + int(np.argmax(np.abs(a[k:, k])))
        if a[piv, k] == 0.0:
            raise np.linalg.LinAlgError("singular system")
        if piv != k:
            a[[k, piv]] = a[[piv, k]]
            b[[k, piv]] = b[[piv, k]]
        for i in range(k + 1, n):
            f = a[i, k] / a[k, k]
            a[i, k:] -= f * a[k, k:]
            b[i] -= f * b[k]
    x = np.zeros_like(b)
    for i in range(n - 1, -1, -1):
        x[i] = (b[i] - a[i, i + 1 :] @ x[i + 1 :]) / a[i, i]
    return x


def naive_matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def direct_conv(x, kernel, stride=1, pad=0):
    """Sliding-window cross-correlation of (N, C, H, W) with (C_out, C, kh, kw)."""
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    c_out, _, kh, kw = kernel.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, c_out, ho, wo))
    for b in range(n):
        for o in range(c_out):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[b, o, i, j] = np.sum(patch * kernel[o])
    return out
