"""Small numeric kernels shared across modules.

Everything here is written dtype-generically: the loss-gradient machinery
evaluates these functions on complex arrays (complex-step differentiation),
so branch decisions look at real parts only and norms are computed as
sqrt(sum(x**2)) rather than through abs().
"""

from __future__ import annotations

import numpy as np


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Row-stable softmax. The stabilising shift uses the real part only."""
    shift = np.max(np.real(x), axis=axis, keepdims=True)
    e = np.exp(x - shift)
    return e / np.sum(e, axis=axis, keepdims=True)


def soft_clip(x: np.ndarray, c: float = 2.0) -> np.ndarray:
    """Smooth saturating nonlinearity, exactly identity on [-c, c].

    f(x) = x                          for |x| <= c
    f(x) = s * (c + tanh(s*x - c))    for |x| > c, s = sign(x)

    C2 at the joints; the exact linear region is what makes an
    identity-configured perceptron act as a true identity on inputs
    bounded by c.
    """
    xr = np.real(x)
    s = np.where(xr >= 0, 1.0, -1.0)
    inside = np.abs(xr) <= c
    # np.where evaluates both branches; the saturating branch is finite everywhere.
    return np.where(inside, x, s * (c + np.tanh(s * x - c)))


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    mu = np.mean(x, axis=-1, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=-1, keepdims=True)
    return gamma * (x - mu) / np.sqrt(var + eps) + beta


def l2_normalize(x: np.ndarray, axis: int = -1, eps: float = 0.0) -> np.ndarray:
    """Normalize rows to unit length; zero rows stay zero."""
    n = np.sqrt(np.sum(x ** 2, axis=axis, keepdims=True))
    safe = np.where(np.real(n) > eps, n, 1.0)
    return x / safe


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between rows of a (n,d) and b (m,d)."""
    diff = a[:, None, :] - b[None, :, :]
    return np.sum(diff ** 2, axis=-1)


def pairwise_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(pairwise_sq_dists(a, b))
