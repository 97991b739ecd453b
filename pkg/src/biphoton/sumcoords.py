"""Index-sum ("k+ = k_s + k_i", "lambda+ = lambda_s + lambda_i") bookkeeping.

With equal bin steps in both arms, the sum coordinate of bins ``j`` and ``l``
depends only on ``j + l``, giving ``2n - 1`` sum bins per axis.
"""

from __future__ import annotations

import numpy as np


def project(t4: np.ndarray) -> np.ndarray:
    """Sum a (n_k, n_l, n_k, n_l) tensor over bins sharing the same index sums."""
    nk, nl = t4.shape[:2]
    if t4.shape != (nk, nl, nk, nl):
        raise ValueError("expected a (n_k, n_lambda, n_k, n_lambda) tensor")
    out = np.zeros((2 * nk - 1, 2 * nl - 1), dtype=np.result_type(t4.dtype, np.int64))
    for j in range(nk):
        for m in range(nl):
            out[j : j + nk, m : m + nl] += t4[j, m]
    return out


def convolve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Full 2-D convolution of two (n_k, n_l) maps, fixed summation order."""
    nk, nl = a.shape
    out = np.zeros((2 * nk - 1, 2 * nl - 1), dtype=np.result_type(a.dtype, b.dtype, np.int64))
    for j in range(nk):
        for m in range(nl):
            out[j : j + nk, m : m + nl] += a[j, m] * b
    return out


def contributors(n_k: int, n_lambda: int) -> np.ndarray:
    """Number of (k-, lambda-) bin pairs feeding each sum bin."""

    def tri(n):
        a = np.arange(2 * n - 1)
        return np.minimum(a, 2 * n - 2 - a) + 1

    return np.outer(tri(n_k), tri(n_lambda))


def axes(grid) -> tuple[np.ndarray, np.ndarray]:
    """Physical k+ and lambda+ coordinates of the sum bins."""
    k0 = grid.k_axis("signal")[0] + grid.k_axis("idler")[0]
    l0 = grid.lambda_axis("signal")[0] + grid.lambda_axis("idler")[0]
    kp = k0 + np.arange(2 * grid.n_k - 1) * grid.k_step
    lp = l0 + np.arange(2 * grid.n_lambda - 1) * grid.lambda_step
    return kp, lp
