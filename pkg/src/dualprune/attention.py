"""Reference attention, exponential-kernel algebra and RoPE.

Everything involving the exponential kernel ``kappa(x, y) = exp(x.y / sqrt(d))``
stays in log space until a caller asks for a value.  The feature map of the
kernel is never built: inner products between rank-1 updates
``phi(k_i)^T v_i`` are evaluated through ``(v_i . v_j) * kappa(k_i, k_j)``.

Dot products over the feature axis are taken as elementwise products summed
along the last axis rather than through BLAS, so a cell's value depends only
on its own operands and never on block shape or thread count.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, DegenerateInputError, NumericRangeError

LOG_OVERFLOW_LIMIT = 700.0
RADICAND_CLAMP = 1e-9


@dataclass(frozen=True)
class KernelParams:
    head_dim: int

    def __post_init__(self) -> None:
        if self.head_dim < 1:
            raise ConfigError(f"head_dim must be >= 1, got {self.head_dim}")

    @property
    def scale(self) -> float:
        return math.sqrt(self.head_dim)


@dataclass(frozen=True)
class RopeParams:
    base: float = 10000.0
    rotate: bool = True

    def __post_init__(self) -> None:
        if not self.base > 1:
            raise ConfigError(f"RoPE base must be > 1, got {self.base}")


def _params_for(x: np.ndarray, params: KernelParams | None) -> KernelParams:
    return params if params is not None else KernelParams(int(x.shape[-1]))


def _check_finite(*arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise DataError("non-finite input to attention")


def pairwise_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``out[..., i, j] = a[..., i, :] . b[..., j, :]`` with a shape-independent summation."""
    return np.sum(a[..., :, None, :] * b[..., None, :, :], axis=-1)


def row_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sum(a * b, axis=-1)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def softmax_attention(
    q: np.ndarray, K: np.ndarray, V: np.ndarray, params: KernelParams | None = None
) -> np.ndarray:
    """Softmax attention of a single query over ``N`` key/value rows (max-shifted)."""
    _check_finite(q, K, V)
    if K.shape[0] < 1 or K.shape[0] != V.shape[0] or K.shape[1] != q.shape[-1]:
        raise ConfigError(f"inconsistent shapes q{q.shape} K{K.shape} V{V.shape}")
    params = _params_for(q, params)
    logits = row_dot(K, q[None, :]) / params.scale
    w = np.exp(logits - logits.max())
    alpha = w / w.sum()
    return np.sum(alpha[:, None] * V, axis=0)


def kernel_expansion_attention(
    q: np.ndarray, K: np.ndarray, V: np.ndarray, params: KernelParams | None = None
) -> np.ndarray:
    """``eta_N(q) * sum_i kappa(q, k_i) v_i`` evaluated term by term, without a shift."""
    params = _params_for(q, params)
    kappas = [math.exp(exp_kernel_log(q, k, params)) for k in K]
    eta = 1.0 / math.fsum(kappas)
    out = np.zeros(V.shape[1])
    for kap, v in zip(kappas, V):
        out += kap * v
    return eta * out


def linear_attention_primal(q: np.ndarray, K: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Unnormalized linear attention as a weighted sum of values, weights ``q . k_i``."""
    _check_finite(q, K, V)
    if K.shape[0] != V.shape[0] or K.shape[1] != q.shape[-1]:
        raise ConfigError(f"inconsistent shapes q{q.shape} K{K.shape} V{V.shape}")
    alpha = row_dot(K, q[None, :])
    return np.sum(alpha[:, None] * V, axis=0)


def dual_weight_linear(K: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Sum of the per-token outer products ``k_i^T v_i`` (a ``d x d_v`` matrix)."""
    if K.shape[0] != V.shape[0]:
        raise ConfigError(f"K has {K.shape[0]} rows but V has {V.shape[0]}")
    return np.sum(K[:, :, None] * V[:, None, :], axis=0)


def linear_attention_dual(q: np.ndarray, K: np.ndarray, V: np.ndarray) -> np.ndarray:
    return q @ dual_weight_linear(K, V)


def exp_kernel_log(x: np.ndarray, y: np.ndarray, params: KernelParams | None = None) -> float:
    """``log kappa(x, y) = x . y / sqrt(d)``."""
    if x.shape != y.shape:
        raise ConfigError(f"kernel arguments differ in length: {x.shape} vs {y.shape}")
    params = _params_for(x, params)
    return float(np.dot(x, y)) / params.scale


def rbf_key_similarity(ki: np.ndarray, kj: np.ndarray, params: KernelParams | None = None) -> np.ndarray:
    """Gaussian RBF ``exp(-||k_i - k_j||^2 / (2 sqrt(d)))``; broadcasts over leading axes."""
    params = _params_for(ki, params)
    diff = ki - kj
    return np.exp(-np.sum(diff * diff, axis=-1) / (2.0 * params.scale))


# ---------------------------------------------------------------------------
# RoPE
# ---------------------------------------------------------------------------


def rope_angles(positions: np.ndarray, dim: int, base: float) -> np.ndarray:
    inv_freq = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    return np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]


def apply_rope(mat: np.ndarray, positions: Sequence[int] | np.ndarray, params: RopeParams = RopeParams()) -> np.ndarray:
    """Rotate interleaved pairs ``(x[2j], x[2j+1])`` of each row by ``pos * base**(-2j/d)``.

    ``mat`` may carry leading axes (e.g. heads); the token axis is second to last.
    """
    mat = np.asarray(mat, dtype=np.float64)
    d = mat.shape[-1]
    if d % 2:
        raise ConfigError(f"RoPE needs an even head dimension, got {d}")
    positions = np.asarray(positions)
    if positions.shape != (mat.shape[-2],):
        raise ConfigError(f"{positions.shape[0]} positions for {mat.shape[-2]} rows")
    theta = rope_angles(positions, d, params.base)
    cos, sin = np.cos(theta), np.sin(theta)
    even, odd = mat[..., 0::2], mat[..., 1::2]
    out = np.empty_like(mat)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


# ---------------------------------------------------------------------------
# Gram identities over rank-1 updates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DualGram:
    rows: np.ndarray
    cols: np.ndarray
    value_gram: np.ndarray
    log_key_kernel: np.ndarray

    def frobenius(self) -> np.ndarray:
        """``<dW_i, dW_j>_F`` for every cell; raises if any kernel would overflow."""
        over = self.log_key_kernel > LOG_OVERFLOW_LIMIT
        if np.any(over):
            r, c = np.argwhere(over)[0]
            raise NumericRangeError(
                f"kernel overflow at token pair ({self.rows[r]}, {self.cols[c]}): "
                f"log kappa = {self.log_key_kernel[r, c]:.3f} > {LOG_OVERFLOW_LIMIT}"
            )
        return self.value_gram * np.exp(self.log_key_kernel)


def gram(
    sel_a: Sequence[int] | np.ndarray,
    sel_b: Sequence[int] | np.ndarray,
    K: np.ndarray,
    V: np.ndarray,
    params: KernelParams | None = None,
) -> DualGram:
    params = _params_for(K, params)
    a = np.asarray(sel_a, dtype=np.int64)
    b = np.asarray(sel_b, dtype=np.int64)
    n = K.shape[0]
    for sel in (a, b):
        if sel.size and (sel.min() < 0 or sel.max() >= n):
            raise ConfigError(f"index out of range for {n} tokens")
    return DualGram(
        rows=a,
        cols=b,
        value_gram=pairwise_dot(V[a], V[b]),
        log_key_kernel=pairwise_dot(K[a], K[b]) / params.scale,
    )


def _shifted_update_norm_sq(
    idx: np.ndarray, K: np.ndarray, V: np.ndarray, scale: float, shift: float
) -> float:
    """``e^{-shift} * ||sum_{i in idx} dW_i||_F^2``."""
    if idx.size == 0:
        return 0.0
    vg = pairwise_dot(V[idx], V[idx])
    lk = pairwise_dot(K[idx], K[idx]) / scale
    return float(np.sum(vg * np.exp(lk - shift)))


def dual_weight_relative_errors(
    kept: Sequence[int] | np.ndarray,
    all_img: Sequence[int] | np.ndarray,
    K: np.ndarray,
    V: np.ndarray,
    params: KernelParams | None = None,
) -> np.ndarray:
    """Per-head ``||W_S - W_N||_F / ||W_N||_F`` for keys/values of shape ``[H, N, .]`` or ``[N, .]``.

    Since ``kept`` is a subset of ``all_img``, ``W_S - W_N`` is minus the sum of the
    dropped updates, so its norm comes from the Gram double sum over the dropped
    tokens.  Both sums share one log-space shift (the largest log kernel among
    the image tokens), which cancels in the ratio.
    """
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if K.ndim == 2:
        K, V = K[None], V[None]
    params = _params_for(K, params)
    all_idx = np.asarray(sorted(set(int(i) for i in all_img)), dtype=np.int64)
    kept_set = set(int(i) for i in kept)
    if all_idx.size == 0:
        raise ConfigError("all_img must be non-empty")
    if not kept_set <= set(all_idx.tolist()):
        raise ConfigError("kept must be a subset of all_img")
    dropped = np.asarray([i for i in all_idx if i not in kept_set], dtype=np.int64)

    errors = np.empty(K.shape[0])
    for h in range(K.shape[0]):
        lk_all = pairwise_dot(K[h, all_idx], K[h, all_idx]) / params.scale
        shift = float(lk_all.max())
        total = float(np.sum(pairwise_dot(V[h, all_idx], V[h, all_idx]) * np.exp(lk_all - shift)))
        if not total > 0:
            raise DegenerateInputError(f"head {h}: ||W_N||_F is zero, relative error undefined")
        resid = _shifted_update_norm_sq(dropped, K[h], V[h], params.scale, shift)
        ratio = resid / total
        if ratio < 0:
            if ratio < -RADICAND_CLAMP:
                raise DataError(f"head {h}: negative squared norm {ratio:.3e} beyond clamp tolerance")
            ratio = 0.0
        errors[h] = math.sqrt(ratio)
    return errors


def dual_weight_relative_error(
    kept: Sequence[int] | np.ndarray,
    all_img: Sequence[int] | np.ndarray,
    K: np.ndarray,
    V: np.ndarray,
    params: KernelParams | None = None,
) -> float:
    """Head-averaged relative Frobenius error of the kept subset's dual weight."""
    return float(np.mean(dual_weight_relative_errors(kept, all_img, K, V, params)))
