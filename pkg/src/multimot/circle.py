"""Scaled matrix-product algebra for circle cost graphs.

A circle-structured plan is encoded by k matrices ``L_i`` (coupling marginal
i with marginal i+1 mod k); the unnormalized plan entry at ``(a_0, ..., a_{k-1})``
is ``prod_i L_i[a_i, a_{i+1}]``. Everything here works on the entrywise logs of
the ``L_i`` and factors out maxima so that products neither overflow nor lose the
rows that carry mass.
"""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp


class ScaledMatrix:
    """``exp(log_scale) * mat`` with ``mat`` entries in ``[0, 1]``-ish range."""

    __slots__ = ("mat", "log_scale")

    def __init__(self, mat, log_scale=0.0):
        self.mat = mat
        self.log_scale = float(log_scale)

    @classmethod
    def from_log(cls, log_mat):
        m = float(np.max(log_mat))
        return cls(np.exp(log_mat - m), m)

    @classmethod
    def identity(cls, n):
        return cls(np.eye(n), 0.0)

    def __matmul__(self, other: "ScaledMatrix") -> "ScaledMatrix":
        prod = self.mat @ other.mat
        peak = float(np.max(prod))
        if peak <= 0.0 or not np.isfinite(peak):
            return ScaledMatrix(prod, self.log_scale + other.log_scale)
        return ScaledMatrix(prod / peak, self.log_scale + other.log_scale + np.log(peak))

    @property
    def T(self) -> "ScaledMatrix":
        return ScaledMatrix(self.mat.T, self.log_scale)

    def value(self):
        return np.exp(self.log_scale) * self.mat

    def log(self):
        with np.errstate(divide="ignore"):
            return np.log(self.mat) + self.log_scale


def chain(log_mats, n) -> ScaledMatrix:
    """Product ``exp(M_0) @ exp(M_1) @ ...``; the identity for an empty chain."""
    out = ScaledMatrix.identity(n)
    for m in log_mats:
        out = out @ ScaledMatrix.from_log(m)
    return out


def log_matmul(log_a, log_b, chunk=64):
    """Exact log-domain product ``log(exp(A) @ exp(B))`` (slow fallback)."""
    out = np.empty((log_a.shape[0], log_b.shape[1]))
    for s in range(0, log_a.shape[0], chunk):
        blk = log_a[s:s + chunk, :, None] + log_b[None, :, :]
        out[s:s + chunk] = logsumexp(blk, axis=1)
    return out


def cycle_log_diag(log_mats) -> np.ndarray:
    """``log diag(exp(M_0) exp(M_1) ... exp(M_{m-1}))``.

    Rows of the first factor and columns of the last factor carry their own
    scale, so the diagonal of a row with tiny absolute mass is still resolved.
    """
    first, last = log_mats[0], log_mats[-1]
    if len(log_mats) == 1:
        return np.diag(first).copy()
    r = first.max(axis=1)
    s = last.max(axis=0)
    left = ScaledMatrix(np.exp(first - r[:, None]))
    for m in log_mats[1:-1]:
        left = left @ ScaledMatrix.from_log(m)
    right = np.exp(last - s[None, :])
    diag = np.einsum("ab,ba->a", left.mat, right)
    with np.errstate(divide="ignore"):
        out = np.log(diag) + left.log_scale + r + s
    bad = ~np.isfinite(out)
    if np.any(bad):
        # underflow in the scaled product; recompute the affected rows exactly
        acc = first[bad]
        for m in log_mats[1:-1]:
            acc = log_matmul(acc, m)
        out[bad] = logsumexp(acc + last[:, bad].T, axis=1)
    return out


def rotate(seq, start):
    return list(seq[start:]) + list(seq[:start])


def circle_log_trace(log_mats) -> float:
    """``log Tr(prod_i exp(M_i))``."""
    return float(logsumexp(cycle_log_diag(log_mats)))


def circle_log_marginal(log_mats, i) -> np.ndarray:
    """Log of the (unnormalized) one-way marginal of vertex ``i``."""
    return cycle_log_diag(rotate(log_mats, i))


def circle_pairwise_marginal(log_mats, u, v, normalize=True):
    """Pairwise marginal of vertices ``u < v`` of the circle plan.

    ``(L_u ... L_{v-1}) * [(L_0 ... L_{u-1})^T (L_v ... L_{k-1})^T]`` entrywise,
    empty products being the identity. With ``normalize`` the result is
    divided by the total mass ``Tr(prod L)`` and sums to 1.
    """
    k = len(log_mats)
    if not (0 <= u < v < k):
        raise ValueError(f"need 0 <= u < v < k, got u={u}, v={v}, k={k}")
    n = log_mats[0].shape[0]
    inner = chain(log_mats[u:v], n)
    outer = chain(log_mats[v:] + log_mats[:u], n)  # closes the loop from v back to u
    mat = inner.mat * outer.mat.T
    log_scale = inner.log_scale + outer.log_scale
    if normalize:
        total = mat.sum()
        return mat / total
    return np.exp(log_scale) * mat
