"""Scalar activations, matrix validation and the finite-difference oracle."""
from __future__ import annotations

from enum import Enum
from typing import Callable

import numpy as np
from scipy.special import expit

from .errors import NonFiniteError, ShapeMismatch


class ActivationKind(str, Enum):
    IDENTITY = "identity"  # testing only: reduces QLA to plain linear attention
    SILU = "silu"
    SHIFTED_ELU = "shifted_elu"


def as_matrix(x, dtype=np.float64) -> np.ndarray:
    """Return `x` as a finite 2-D array of `dtype`.

    This is the single constructor for the package's matrix carrier; it
    rejects NaN/Inf and anything that is not two-dimensional.
    """
    a = np.asarray(x, dtype=dtype)
    if a.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteError("matrix contains NaN or Inf")
    return a


def activation(kind: ActivationKind, x: np.ndarray) -> np.ndarray:
    kind = ActivationKind(kind)
    if kind is ActivationKind.IDENTITY:
        return np.array(x, copy=True)
    if kind is ActivationKind.SILU:
        return x * expit(x)
    # shifted ELU: x above 1, exp(x - 1) below; minimum() keeps exp from overflowing
    return np.where(x >= 1.0, x, np.exp(np.minimum(x, 1.0) - 1.0))


def activation_prime(kind: ActivationKind, x: np.ndarray) -> np.ndarray:
    kind = ActivationKind(kind)
    if kind is ActivationKind.IDENTITY:
        return np.ones_like(x)
    if kind is ActivationKind.SILU:
        s = expit(x)
        return s * (1.0 + x * (1.0 - s))
    # derivative at exactly 1 takes the x >= 1 branch
    return np.where(x >= 1.0, 1.0, np.exp(np.minimum(x, 1.0) - 1.0))


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    Each entry is ``(f(x + h e_ij) - f(x - h e_ij)) / 2h``. `x` is not modified.
    """
    if not h > 0:
        raise ValueError(f"step size must be positive, got {h}")
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm relative error ``max|a - n| / max(max|a|, max|n|)``.

    Both arrays are compared entry by entry; the denominator is the larger of
    the two tensors' max magnitudes so near-zero entries do not blow up the
    ratio. Two all-zero tensors have error 0.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ShapeMismatch(f"{a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    scale = max(np.max(np.abs(a)), np.max(np.abs(n)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(a - n)) / scale)


def sigmoid(x):
    return expit(x)
