"""Attention kernels.

Linear attention with candidate items, the masked mixed formulation used as a
dense oracle, quasi-linear attention (QLA) forward/backward in naive and
tiled form, and plain softmax attention.

Shapes follow the source/target convention: ``n`` source (history) rows,
``m`` target (candidate) rows, ``d`` features. Targets attend to every source
and to themselves only; they never see each other.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateNormalizer,
    FullyMaskedRow,
    ShapeMismatch,
    UnsupportedOuterActivation,
)
from .numerics import ActivationKind, activation, activation_prime, as_matrix

DENOMINATOR_GUARD = 1e-12


def _check(x, name):
    a = np.asarray(x)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float64)
    if a.ndim != 2:
        raise ShapeMismatch(f"{name}: expected 2-D, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class SourceTargetSplit:
    qs: np.ndarray
    qt: np.ndarray
    ks: np.ndarray
    kt: np.ndarray
    vs: np.ndarray
    vt: np.ndarray

    def __post_init__(self):
        for name in ("qs", "qt", "ks", "kt", "vs", "vt"):
            object.__setattr__(self, name, _check(getattr(self, name), name))
        d = self.qs.shape[1]
        if any(getattr(self, f).shape[1] != d for f in ("qt", "ks", "kt", "vs", "vt")):
            raise ShapeMismatch("all six blocks must share the feature dimension")
        if not (self.qs.shape[0] == self.ks.shape[0] == self.vs.shape[0]):
            raise ShapeMismatch("source blocks disagree on n")
        if not (self.qt.shape[0] == self.kt.shape[0] == self.vt.shape[0]):
            raise ShapeMismatch("target blocks disagree on m")

    @property
    def n(self) -> int:
        return self.qs.shape[0]

    @property
    def m(self) -> int:
        return self.qt.shape[0]

    @property
    def d(self) -> int:
        return self.qs.shape[1]

    @classmethod
    def from_full(cls, q, k, v, n):
        """Split stacked ``(n + m, d)`` Q/K/V at the source/target boundary."""
        return cls(q[:n], q[n:], k[:n], k[n:], v[:n], v[n:])

    @classmethod
    def sources_only(cls, q, k, v):
        empty = np.zeros((0, np.shape(q)[1]), dtype=np.asarray(q).dtype)
        return cls(q, empty, k, empty, v, empty)


@dataclass(frozen=True)
class QlaSaved:
    """Forward intermediates needed by :func:`qla_backward`.

    ``z_s`` is ``phi1(K[S])^T V[S]`` (d x d) before the outer activation;
    ``z_act`` is the same after it. ``u_t`` holds the target self-attention
    weights (row dot products of activated target queries and keys).
    """

    z_s: np.ndarray
    z_act: np.ndarray
    u_t: np.ndarray
    fqs: np.ndarray
    fqt: np.ndarray
    fks: np.ndarray
    fkt: np.ndarray
    phi1: ActivationKind
    phi2: ActivationKind


@dataclass(frozen=True)
class QlaGrads:
    d_qs: np.ndarray
    d_qt: np.ndarray
    d_ks: np.ndarray
    d_kt: np.ndarray
    d_vs: np.ndarray
    d_vt: np.ndarray

    def as_dict(self):
        return {k: getattr(self, k) for k in ("d_qs", "d_qt", "d_ks", "d_kt", "d_vs", "d_vt")}


def delta_diag(x, y) -> np.ndarray:
    """Row-wise dot products: ``out[i] = sum_k x[i, k] * y[i, k]``."""
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape != y.shape or x.ndim != 2:
        raise ShapeMismatch(f"delta_diag needs equal 2-D shapes, got {x.shape} and {y.shape}")
    return np.einsum("ij,ij->i", x, y)


def _rows_times(x, z):
    # one gemv per row so each output row depends only on its own input row,
    # bit for bit, whatever the other rows are
    out = np.empty((x.shape[0], z.shape[1]), dtype=np.result_type(x, z))
    for i in range(x.shape[0]):
        out[i] = x[i] @ z
    return out


def _normalized(num, den):
    if den.size and np.min(np.abs(den)) < DENOMINATOR_GUARD:
        raise DegenerateNormalizer(
            f"row normalizer magnitude {np.min(np.abs(den)):.3e} below {DENOMINATOR_GUARD}"
        )
    return num / den[:, None]


def lin_attn_self(q, k, v) -> np.ndarray:
    """``RowNormalize(Q K^T) V`` evaluated as ``Q (K^T V) / (Q colsum(K)^T)``."""
    q, k, v = as_matrix(q), as_matrix(k), as_matrix(v)
    if not (q.shape == k.shape and k.shape[0] == v.shape[0]):
        raise ShapeMismatch(f"q {q.shape}, k {k.shape}, v {v.shape}")
    return _normalized(q @ (k.T @ v), q @ k.sum(axis=0))


def lin_attn_target(t, k, v) -> np.ndarray:
    """Linear attention of target rows ``t`` against source keys and values."""
    t, k, v = as_matrix(t), as_matrix(k), as_matrix(v)
    if t.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeMismatch(f"t {t.shape}, k {k.shape}, v {v.shape}")
    return _normalized(t @ (k.T @ v), t @ k.sum(axis=0))


def diag_self_attn(t) -> np.ndarray:
    """Each target attending only to itself: ``Diag(T T^T) T``."""
    t = as_matrix(t)
    return delta_diag(t, t)[:, None] * t


def mixed_mask(n: int, m: int) -> np.ndarray:
    """Boolean mask ``[[1_nn, 0_nm], [1_mn, I_m]]``."""
    mask = np.zeros((n + m, n + m), dtype=bool)
    mask[:, :n] = True
    mask[n:, n:] = np.eye(m, dtype=bool)
    return mask


def mixed_masked_attn(split: SourceTargetSplit, norm: float = 1.0) -> np.ndarray:
    """Dense reference for ``((Q K^T) * M) V / norm`` with the mixed mask.

    Materialises the attention weights, so it costs O((n + m)^2 d). Target
    rows are evaluated over their unmasked columns only, which keeps every
    target row independent of the other targets.
    """
    if not norm > 0:
        raise ValueError(f"norm must be positive, got {norm}")
    n, m = split.n, split.m
    q = np.vstack([split.qs, split.qt])
    k = np.vstack([split.ks, split.kt])
    v = np.vstack([split.vs, split.vt])
    mask = mixed_mask(n, m)
    out = np.empty((n + m, split.d))
    if n:
        weights = (split.qs @ k.T) * mask[:n]
        out[:n] = weights @ v
    for j in range(m):
        cols = np.flatnonzero(mask[n + j])
        w = k[cols] @ q[n + j]
        out[n + j] = w @ v[cols]
    return out / norm


def qla_forward(split: SourceTargetSplit, phi1=ActivationKind.SHIFTED_ELU, phi2=ActivationKind.IDENTITY):
    """Quasi-linear attention, O((n + m) d^2).

    ``o_s = phi1(Q[S]) phi2(phi1(K[S])^T V[S])`` and
    ``o_t = phi1(Q[T]) phi2(phi1(K[S])^T V[S]) + Delta(phi1(Q[T]), phi1(K[T])) V[T]``.
    No row normalisation is applied.

    Returns ``(o_s, o_t, saved)``.
    """
    phi1, phi2 = ActivationKind(phi1), ActivationKind(phi2)
    fqs = activation(phi1, split.qs)
    fks = activation(phi1, split.ks)
    fqt = activation(phi1, split.qt)
    fkt = activation(phi1, split.kt)
    z_s = fks.T @ split.vs
    z_act = activation(phi2, z_s) if phi2 is not ActivationKind.IDENTITY else z_s
    o_s = fqs @ z_act
    u_t = delta_diag(fqt, fkt)
    o_t = _rows_times(fqt, z_act) + u_t[:, None] * split.vt
    saved = QlaSaved(z_s, z_act, u_t, fqs, fqt, fks, fkt, phi1, phi2)
    return o_s, o_t, saved


def qla_forward_blockwise(split: SourceTargetSplit, phi1=ActivationKind.SHIFTED_ELU,
                          phi2=ActivationKind.IDENTITY, block: int = 64):
    """Tiled QLA forward with the same contract as :func:`qla_forward`.

    The d x d state is accumulated over source tiles in ascending order, then
    query tiles are streamed against it. Peak temporary memory per step is one
    tile plus the d x d state.
    """
    if block < 1:
        raise ValueError(f"block must be >= 1, got {block}")
    phi1, phi2 = ActivationKind(phi1), ActivationKind(phi2)
    n, m, d = split.n, split.m, split.d
    dtype = np.result_type(split.qs, split.ks, split.vs)
    fks = np.empty((n, d), dtype=dtype)
    z_s = np.zeros((d, d), dtype=dtype)
    for s in range(0, n, block):
        e = min(s + block, n)
        fks[s:e] = activation(phi1, split.ks[s:e])
        z_s += fks[s:e].T @ split.vs[s:e]
    z_act = activation(phi2, z_s) if phi2 is not ActivationKind.IDENTITY else z_s

    fqs = np.empty((n, d), dtype=dtype)
    o_s = np.empty((n, d), dtype=dtype)
    for s in range(0, n, block):
        e = min(s + block, n)
        fqs[s:e] = activation(phi1, split.qs[s:e])
        o_s[s:e] = fqs[s:e] @ z_act

    fqt = np.empty((m, d), dtype=dtype)
    fkt = np.empty((m, d), dtype=dtype)
    u_t = np.empty(m, dtype=dtype)
    o_t = np.empty((m, d), dtype=dtype)
    for s in range(0, m, block):
        e = min(s + block, m)
        fqt[s:e] = activation(phi1, split.qt[s:e])
        fkt[s:e] = activation(phi1, split.kt[s:e])
        u_t[s:e] = delta_diag(fqt[s:e], fkt[s:e])
        o_t[s:e] = _rows_times(fqt[s:e], z_act) + u_t[s:e, None] * split.vt[s:e]
    saved = QlaSaved(z_s, z_act, u_t, fqs, fqt, fks, fkt, phi1, phi2)
    return o_s, o_t, saved


def qla_backward(saved: QlaSaved, split: SourceTargetSplit, d_os, d_ot, allow_outer: bool = True) -> QlaGrads:
    """Analytic gradients of QLA with respect to all six input blocks.

    For ``phi2 = Identity`` this is the closed form
    ``dQ[S] = (dO[S] V[S]^T phi(K[S])) * phi'(Q[S])`` and friends. For other
    outer activations the d x d state is chained through ``phi2'``; pass
    ``allow_outer=False`` to refuse that case.
    """
    d_os = np.asarray(d_os, dtype=np.float64)
    d_ot = np.asarray(d_ot, dtype=np.float64)
    if d_os.shape != (split.n, split.d) or d_ot.shape != (split.m, split.d):
        raise ShapeMismatch(
            f"output grads {d_os.shape}, {d_ot.shape} vs n={split.n}, m={split.m}, d={split.d}"
        )
    if saved.z_s.shape != (split.d, split.d) or saved.u_t.shape != (split.m,):
        raise ShapeMismatch("saved tensors do not match the split")
    outer = saved.phi2 is not ActivationKind.IDENTITY
    if outer and not allow_outer:
        raise UnsupportedOuterActivation(f"outer activation {saved.phi2.value}")

    # W = phi(Q)^T dO, a d x d matrix shared by the source key/value grads
    w = saved.fqs.T @ d_os + saved.fqt.T @ d_ot
    dz = w * activation_prime(saved.phi2, saved.z_s) if outer else w
    x_t = delta_diag(d_ot, split.vt)

    d_fqs = d_os @ saved.z_act.T
    d_fqt = d_ot @ saved.z_act.T + x_t[:, None] * saved.fkt
    d_fks = split.vs @ dz.T
    d_fkt = x_t[:, None] * saved.fqt
    d_vs = saved.fks @ dz
    d_vt = saved.u_t[:, None] * d_ot

    phi1 = saved.phi1
    if phi1 is not ActivationKind.IDENTITY:
        d_fqs = d_fqs * activation_prime(phi1, split.qs)
        d_fqt = d_fqt * activation_prime(phi1, split.qt)
        d_fks = d_fks * activation_prime(phi1, split.ks)
        d_fkt = d_fkt * activation_prime(phi1, split.kt)
    return QlaGrads(d_fqs, d_fqt, d_fks, d_fkt, d_vs, d_vt)


def qla_flop_count(n: int, m: int, d: int) -> int:
    """Multiply-add count of :func:`qla_forward` (activations excluded)."""
    return n * d * d + (n + m) * d * d + 2 * m * d


def _resolve_mask(mask, a, b):
    if mask is None or (isinstance(mask, str) and mask == "full"):
        return None
    if isinstance(mask, str):
        if mask != "causal":
            raise ValueError(f"unknown mask {mask!r}")
        # align the last query with the last key
        return np.arange(b)[None, :] <= (np.arange(a)[:, None] + (b - a))
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (a, b):
        raise ShapeMismatch(f"mask shape {mask.shape}, expected {(a, b)}")
    return mask


def softmax_attn(q, k, v, mask=None, scale: float = 1.0, chunk: int | None = None) -> np.ndarray:
    """``RowSoftmax(scale * Q K^T) V`` with an optional boolean keep-mask.

    `mask` is None/"full", "causal", or an explicit ``(a, b)`` boolean array
    (True = may attend). Query rows are processed in chunks so the score
    buffer stays bounded for long sequences. Dtype follows the inputs.
    """
    q, k, v = _check(q, "q"), _check(k, "k"), _check(v, "v")
    a, b = q.shape[0], k.shape[0]
    if q.shape[1] != k.shape[1] or v.shape[0] != b:
        raise ShapeMismatch(f"q {q.shape}, k {k.shape}, v {v.shape}")
    mask = _resolve_mask(mask, a, b)
    if b == 0 or (mask is not None and a and not mask.any(axis=1).all()):
        raise FullyMaskedRow("every query row needs at least one visible key")
    if chunk is None:
        chunk = max(1, (1 << 22) // max(b, 1))
    dtype = np.result_type(q, k, v)
    out = np.empty((a, v.shape[1]), dtype=dtype)
    kt = k.T
    for s in range(0, a, chunk):
        e = min(s + chunk, a)
        scores = q[s:e] @ kt
        if scale != 1.0:
            scores *= dtype.type(scale)
        if mask is not None:
            scores[~mask[s:e]] = -np.inf
        scores -= scores.max(axis=1, keepdims=True)
        np.exp(scores, out=scores)
        denom = scores.sum(axis=1, keepdims=True)
        out[s:e] = (scores @ v) / denom
    return out


def softmax_attn_probs(q, k, mask=None, scale: float = 1.0) -> np.ndarray:
    """Attention probabilities ``RowSoftmax(scale * Q K^T)`` (materialised)."""
    q, k = _check(q, "q"), _check(k, "k")
    mask = _resolve_mask(mask, q.shape[0], k.shape[0])
    if k.shape[0] == 0 or (mask is not None and q.shape[0] and not mask.any(axis=1).all()):
        raise FullyMaskedRow("every query row needs at least one visible key")
    scores = (q @ k.T) * scale
    if mask is not None:
        scores = np.where(mask, scores, -np.inf)
    scores = scores - scores.max(axis=1, keepdims=True)
    p = np.exp(scores)
    return p / p.sum(axis=1, keepdims=True)


def softmax_attn_backward(q, k, v, p, d_out, scale: float = 1.0):
    """Gradients of ``P V`` with ``P = RowSoftmax(scale * Q K^T)`` given saved ``P``.

    Masked entries have ``P = 0`` and therefore receive no gradient.
    Returns ``(d_q, d_k, d_v)``.
    """
    d_v = p.T @ d_out
    d_p = d_out @ v.T
    d_s = p * (d_p - np.sum(d_p * p, axis=1, keepdims=True))
    d_q = scale * (d_s @ k)
    d_k = scale * (d_s.T @ q)
    return d_q, d_k, d_v


def qla_causal_forward(q, k, v, phi1=ActivationKind.SHIFTED_ELU):
    """Causal source-only QLA: row i sees rows ``j <= i``.

    Uses per-row prefix states, O(n d^2) time and memory. Returns
    ``(out, saved)`` for :func:`qla_causal_backward`.
    """
    phi1 = ActivationKind(phi1)
    fq, fk = activation(phi1, q), activation(phi1, k)
    states = np.cumsum(np.einsum("na,nb->nab", fk, v), axis=0)
    out = np.einsum("na,nab->nb", fq, states)
    return out, (fq, fk, states, phi1)


def qla_causal_backward(saved, q, k, v, d_out):
    fq, fk, states, phi1 = saved
    d_fq = np.einsum("nb,nab->na", d_out, states)
    # reverse prefix sums of phi(q_i) outer dO_i
    g = np.cumsum(np.einsum("na,nb->nab", fq, d_out)[::-1], axis=0)[::-1]
    d_fk = np.einsum("nab,nb->na", g, v)
    d_v = np.einsum("nab,na->nb", g, fk)
    if phi1 is not ActivationKind.IDENTITY:
        d_fq = d_fq * activation_prime(phi1, q)
        d_fk = d_fk * activation_prime(phi1, k)
    return d_fq, d_fk, d_v
