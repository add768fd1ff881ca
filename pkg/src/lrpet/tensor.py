"""Dense linear algebra on float64 numpy arrays.

Tensors are plain ``np.ndarray`` values of dtype float64. The SVD is a
one-sided (Hestenes) Jacobi iteration that sweeps disjoint column pairs in
round-robin order, so each round is a handful of vectorized numpy calls.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_SWEEPS = 60
# pair (i, j) is rotated while |a_i . a_j| > ROT_TOL * |a_i| |a_j|
ROT_TOL = 1e-15


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ParameterError(ValueError):
    pass


@dataclass(frozen=True)
class SvdFactors:
    u: np.ndarray  # m x k
    s: np.ndarray  # k, descending
    v: np.ndarray  # n x k

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.v.T


def as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def frobenius_norm(t) -> float:
    t = np.asarray(t, dtype=np.float64)
    if t.size == 0:
        return 0.0
    # scale first so huge/tiny entries neither overflow nor underflow
    scale = np.max(np.abs(t))
    if scale == 0.0:
        return 0.0
    return float(scale * np.sqrt(np.sum((t / scale) ** 2)))


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Disjoint column pairings covering every pair once (circle method)."""
    players = list(range(n + (n % 2)))
    k = len(players)
    rounds = []
    for _ in range(k - 1):
        p, q = [], []
        for i in range(k // 2):
            a, b = players[i], players[k - 1 - i]
            if a < n and b < n:
                p.append(min(a, b))
                q.append(max(a, b))
        rounds.append((np.array(p, dtype=np.intp), np.array(q, dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _complete_basis(q: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace the columns of ``q`` not flagged in ``keep`` with an orthonormal
    completion, drawing candidates from identity columns in order."""
    m, k = q.shape
    out = q.copy()
    basis = [out[:, j] for j in range(k) if keep[j]]
    candidates = iter(np.eye(m))
    for j in range(k):
        if keep[j]:
            continue
        for e in candidates:
            x = e.copy()
            for _ in range(2):
                for b in basis:
                    x -= (b @ x) * b
            nx = np.linalg.norm(x)
            if nx > 0.5:
                out[:, j] = x / nx
                basis.append(out[:, j])
                break
    return out


def svd(w) -> SvdFactors:
    """Thin SVD ``w = u @ diag(s) @ v.T`` with k = min(m, n) singular values."""
    w = as_matrix(w)
    m, n = w.shape
    if m < 1 or n < 1:
        raise ShapeError(f"empty matrix {w.shape}")
    if not np.all(np.isfinite(w)):
        raise DomainError("svd input contains NaN or Inf")

    transposed = m < n
    a = w.T.copy() if transposed else w.copy()
    rows, k = a.shape
    v = np.eye(k)

    if k > 1 and np.any(a):
        rounds = _round_robin(k)
        for _ in range(MAX_SWEEPS):
            rotated = False
            for p, q in rounds:
                ap, aq = a[:, p], a[:, q]
                alpha = np.einsum("ij,ij->j", ap, ap)
                beta = np.einsum("ij,ij->j", aq, aq)
                gamma = np.einsum("ij,ij->j", ap, aq)
                active = np.abs(gamma) > ROT_TOL * np.sqrt(alpha * beta)
                active &= gamma != 0.0
                if not active.any():
                    continue
                rotated = True
                p, q = p[active], q[active]
                alpha, beta, gamma = alpha[active], beta[active], gamma[active]
                with np.errstate(over="ignore"):
                    zeta = (beta - alpha) / (2.0 * gamma)
                # for huge zeta the rotation angle is ~1/(2 zeta); avoid squaring it
                big = np.abs(zeta) > 1e150
                z = np.where(big, 1.0, zeta)
                t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(z) + np.sqrt(1.0 + z * z))
                t = np.where(big, 0.5 / np.where(big, zeta, 1.0), t)
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                ap, aq = a[:, p], a[:, q]
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                vp, vq = v[:, p], v[:, q]
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
            if not rotated:
                break

    sv = np.sqrt(np.einsum("ij,ij->j", a, a))
    order = np.argsort(-sv, kind="stable")
    sv, a, v = sv[order], a[:, order], v[:, order]

    smax = sv[0] if k else 0.0
    keep = sv > max(rows, k) * np.finfo(np.float64).eps * smax
    u = np.zeros_like(a)
    u[:, keep] = a[:, keep] / sv[keep]
    if not keep.all():
        u = _complete_basis(u, keep)
        # tiny values below the noise floor are not resolvable; report them as zero
        sv = np.where(keep, sv, 0.0)

    if transposed:
        u, v = v, u
    return SvdFactors(u=u, s=sv, v=v)


def low_rank_project(w, r: int) -> np.ndarray:
    """Best rank-``r`` approximation in Frobenius norm (truncated SVD)."""
    w = as_matrix(w)
    k = min(w.shape)
    if not 1 <= r <= k:
        raise ParameterError(f"rank {r} outside [1, {k}]")
    f = svd(w)
    return (f.u[:, :r] * f.s[:r]) @ f.v[:, :r].T


def kernel_to_matrix(kernel) -> np.ndarray:
    """(c_out, c_in, kh, kw) -> c_out x (c_in*kh*kw), one flattened filter per row."""
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 4:
        raise ShapeError(f"expected a 4-d kernel, got shape {kernel.shape}")
    return kernel.reshape(kernel.shape[0], -1)


def matrix_to_kernel(mat, c_in: int, kh: int, kw: int) -> np.ndarray:
    mat = as_matrix(mat)
    if mat.shape[1] != c_in * kh * kw:
        raise ShapeError(f"matrix {mat.shape} does not hold {c_in}x{kh}x{kw} filters")
    return mat.reshape(mat.shape[0], c_in, kh, kw)


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0:
        raise ShapeError(f"window {k} larger than padded input {size + 2 * pad}")
    return span // stride + 1


def im2col(x, kh: int, kw: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Unfold sliding windows into columns.

    ``x`` is (C, H, W) or (N, C, H, W). The result is (C*kh*kw) x (N*Ho*Wo);
    rows follow the ``kernel_to_matrix`` flatten order, columns run image by
    image in scan order.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError(f"expected (N, C, H, W) input, got {x.shape}")
    n, c, h, w = x.shape
    ho = conv_out_size(h, kh, stride, pad)
    wo = conv_out_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (N, C, Ho, Wo, kh, kw) -> (C, kh, kw, N, Ho, Wo)
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)


def col2im(cols, x_shape, kh: int, kw: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Adjoint of ``im2col``: scatter-add columns back onto an (N, C, H, W) map."""
    n, c, h, w = x_shape
    ho = conv_out_size(h, kh, stride, pad)
    wo = conv_out_size(w, kw, stride, pad)
    cols = np.asarray(cols).reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                cols[:, i, j].transpose(1, 0, 2, 3)
            )
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return out


def conv2d(x, kernel, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlation of an (N, C, H, W) batch via im2col and one matmul."""
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = kernel.shape
    if c != c_in:
        raise ShapeError(f"input has {c} channels, kernel expects {c_in}")
    ho = conv_out_size(h, kh, stride, pad)
    wo = conv_out_size(w, kw, stride, pad)
    y = kernel_to_matrix(kernel) @ im2col(x, kh, kw, stride, pad)
    return y.reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3)
