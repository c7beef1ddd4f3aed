"""Information magnitude and information duplication over a :class:`TokenBatch`.

Magnitude scores every image token against one aggregated query per head, then
averages heads and min-max normalizes.  Duplication returns blocks of squared,
head-averaged similarities between rank-1 dual updates (or one of the shared
baseline spaces).
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .attention import KernelParams, RopeParams, apply_rope, pairwise_dot, rbf_key_similarity, row_dot
from .errors import ConfigError
from .tensor_io import TokenBatch


class Scorer(str, Enum):
    IWP = "iwp"  # kappa(q, k_i) * ||v_i||
    ALIGNMENT = "alignment"  # kappa(q, k_i)
    DELTA_W_NORM = "delta_w_norm"  # sqrt(kappa(k_i, k_i)) * ||v_i||
    VALUE_NORM = "value_norm"
    KEY_NORM = "key_norm"
    RANDOM = "random"
    UNIFORM = "uniform"

    @property
    def uses_query(self) -> bool:
        return self in (Scorer.IWP, Scorer.ALIGNMENT)


class QueryMode(str, Enum):
    MEAN_TEXT = "mean_text"
    MEAN_IMAGE = "mean_image"
    LAST_TEXT = "last_text"


class SimilaritySpace(str, Enum):
    DUAL_WEIGHT = "dual_weight"
    KERNELIZED_KEY = "kernelized_key"
    KEY_COSINE = "key_cosine"
    VALUE_COSINE = "value_cosine"
    HIDDEN_COSINE = "hidden_cosine"


class HeadReduce(str, Enum):
    MEAN_OF_SQUARES = "mean_of_squares"
    SQUARE_OF_MEAN = "square_of_mean"


@dataclass(frozen=True)
class ScoreVector:
    scores: np.ndarray  # [N_img], in [0, 1]
    raw_per_head: np.ndarray | None = None  # [H, N_img] before head-mean and normalization
    degenerate: bool = False

    def __len__(self) -> int:
        return len(self.scores)


@dataclass(frozen=True)
class SimilarityBlock:
    rows: np.ndarray
    cols: np.ndarray
    cells: np.ndarray  # [len(rows), len(cols)]
    zero_norm: bool = False

    @property
    def cell_count(self) -> int:
        return int(self.cells.size)


def normalize_scores(raw: np.ndarray) -> tuple[np.ndarray, bool]:
    """Min-max map to [0, 1]; an all-equal vector becomes 0.5 everywhere with the flag set."""
    lo, hi = float(raw.min()), float(raw.max())
    if not hi > lo:
        return np.full(raw.shape, 0.5), True
    out = (raw - lo) / (hi - lo)
    return np.clip(out, 0.0, 1.0), False


# ---------------------------------------------------------------------------
# magnitude
# ---------------------------------------------------------------------------


def rotates(batch: TokenBatch, rope: RopeParams) -> bool:
    return rope.rotate and batch.rotary


def _maybe_rope(t: np.ndarray, batch: TokenBatch, rope: RopeParams) -> np.ndarray:
    return apply_rope(t, batch.positions, rope) if rotates(batch, rope) else t


def aggregate_query(
    batch: TokenBatch,
    query_mode: QueryMode | str = QueryMode.MEAN_TEXT,
    head: int = 0,
    rope: RopeParams = RopeParams(rotate=False),
) -> np.ndarray:
    mode = QueryMode(query_mode)
    queries = _maybe_rope(batch.queries[head], batch, rope)
    if mode is QueryMode.MEAN_IMAGE:
        return queries[batch.image_slice].mean(axis=0)
    text = queries[batch.text_slice]
    if text.shape[0] == 0:
        raise ConfigError(f"query mode {mode.value} needs at least one text token")
    if mode is QueryMode.LAST_TEXT:
        return text[-1].copy()
    return text.mean(axis=0)


def _log_norms(x: np.ndarray) -> np.ndarray:
    n = np.sqrt(row_dot(x, x))
    with np.errstate(divide="ignore"):
        return np.log(n)


def magnitude_scores(
    batch: TokenBatch,
    scorer: Scorer | str = Scorer.IWP,
    query_mode: QueryMode | str = QueryMode.MEAN_TEXT,
    rope: RopeParams = RopeParams(rotate=False),
    seed: int = 0,
) -> ScoreVector:
    """Score image tokens by information magnitude.

    Kernel-bearing scorers are formed as log-values per head, shifted by one
    global maximum across heads and tokens, exponentiated, averaged over heads
    and normalized.  The common shift is a positive factor on every token and
    cancels exactly under min-max normalization.

    ``rope.rotate`` (off by default) applies RoPE to queries and keys first.
    """
    scorer = Scorer(scorer)
    n_img = batch.n_img
    img = batch.image_slice
    params = KernelParams(batch.head_dim)

    if scorer is Scorer.UNIFORM:
        raw = np.ones((1, n_img))
    elif scorer is Scorer.RANDOM:
        raw = np.random.default_rng(seed).random((1, n_img))
    elif scorer is Scorer.VALUE_NORM:
        v = batch.values[:, img]
        raw = np.sqrt(row_dot(v, v))
    elif scorer is Scorer.KEY_NORM:
        k = _maybe_rope(batch.keys, batch, rope)[:, img]
        raw = np.sqrt(row_dot(k, k))
    else:
        keys = _maybe_rope(batch.keys, batch, rope)[:, img]
        if scorer is Scorer.DELTA_W_NORM:
            # log sqrt(kappa(k, k)) = ||k||^2 / (2 sqrt d)
            log_raw = row_dot(keys, keys) / (2.0 * params.scale) + _log_norms(batch.values[:, img])
        else:
            q = np.stack(
                [aggregate_query(batch, query_mode, h, rope) for h in range(batch.n_heads)]
            )
            log_raw = row_dot(keys, q[:, None, :]) / params.scale
            if scorer is Scorer.IWP:
                log_raw = log_raw + _log_norms(batch.values[:, img])
        finite = log_raw[np.isfinite(log_raw)]
        shift = float(finite.max()) if finite.size else 0.0
        raw = np.exp(log_raw - shift)

    scores, degenerate = normalize_scores(raw.mean(axis=0))
    return ScoreVector(scores=scores, raw_per_head=raw, degenerate=degenerate)


# ---------------------------------------------------------------------------
# duplication
# ---------------------------------------------------------------------------


def _cosine(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, bool]:
    """Pairwise cosine over the last axis; rows with zero norm give 0."""
    na = np.sqrt(row_dot(a, a))
    nb = np.sqrt(row_dot(b, b))
    denom = na[..., :, None] * nb[..., None, :]
    zero = denom == 0
    dots = pairwise_dot(a, b)
    cos = np.divide(dots, denom, out=np.zeros_like(dots), where=~zero)
    return np.clip(cos, -1.0, 1.0), bool(np.any(zero))


def dual_similarity_factorized(
    K: np.ndarray, V: np.ndarray, rows: np.ndarray, cols: np.ndarray, params: KernelParams
) -> tuple[np.ndarray, bool]:
    """Signed ``S_ij = cos(v_i, v_j) * RBF(k_i, k_j)`` for one head (or broadcast over heads)."""
    cos_v, zero = _cosine(V[..., rows, :], V[..., cols, :])
    rbf = rbf_key_similarity(K[..., rows, None, :], K[..., None, cols, :], params)
    return cos_v * rbf, zero


def dual_similarity_direct(
    K: np.ndarray, V: np.ndarray, rows: np.ndarray, cols: np.ndarray, params: KernelParams
) -> np.ndarray:
    """Signed ``S_ij`` as ``<dW_i, dW_j>_F / (||dW_i||_F ||dW_j||_F)`` from the Gram terms.

    The log kernel is normalized by half the diagonal log kernels before
    exponentiating, so nothing overflows.
    """
    kr, kc = K[..., rows, :], K[..., cols, :]
    vr, vc = V[..., rows, :], V[..., cols, :]
    log_k = pairwise_dot(kr, kc) / params.scale
    log_rr = row_dot(kr, kr) / params.scale
    log_cc = row_dot(kc, kc) / params.scale
    inner = pairwise_dot(vr, vc) * np.exp(log_k - 0.5 * log_rr[..., :, None] - 0.5 * log_cc[..., None, :])
    vnorm = np.sqrt(row_dot(vr, vr))[..., :, None] * np.sqrt(row_dot(vc, vc))[..., None, :]
    return np.divide(inner, vnorm, out=np.zeros_like(inner), where=vnorm != 0)


class Duplication:
    """Duplication cells for one batch and one similarity configuration.

    Rotated keys are computed once, so repeated :meth:`block` calls only pay
    for the requested cells.
    """

    def __init__(
        self,
        batch: TokenBatch,
        space: SimilaritySpace | str = SimilaritySpace.DUAL_WEIGHT,
        rope: RopeParams = RopeParams(rotate=True),
        head_reduce: HeadReduce | str = HeadReduce.MEAN_OF_SQUARES,
    ):
        self.batch = batch
        self.space = SimilaritySpace(space)
        self.head_reduce = HeadReduce(head_reduce)
        self.params = KernelParams(batch.head_dim)
        if self.space is SimilaritySpace.HIDDEN_COSINE and batch.hidden is None:
            raise ConfigError("hidden_cosine similarity needs batch.hidden")
        img = batch.image_slice
        self.keys = _maybe_rope(batch.keys, batch, rope)[:, img]
        self.values = batch.values[:, img]
        self.cells_evaluated = 0

    def _check(self, sel: np.ndarray) -> None:
        if sel.size and (sel.min() < 0 or sel.max() >= self.batch.n_img):
            raise ConfigError(f"duplication indices must refer to image tokens [0, {self.batch.n_img})")

    def block(self, rows: Sequence[int] | np.ndarray, cols: Sequence[int] | np.ndarray) -> SimilarityBlock:
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        self._check(rows)
        self._check(cols)
        self.cells_evaluated += rows.size * cols.size
        space = self.space

        if space is SimilaritySpace.HIDDEN_COSINE:
            hidden = self.batch.hidden
            cos, zero = _cosine(hidden[rows], hidden[cols])
            return SimilarityBlock(rows, cols, np.clip(cos * cos, 0.0, 1.0), zero)

        zero = False
        if space is SimilaritySpace.DUAL_WEIGHT:
            per_head, zero = dual_similarity_factorized(self.keys, self.values, rows, cols, self.params)
        elif space is SimilaritySpace.KERNELIZED_KEY:
            per_head = rbf_key_similarity(self.keys[:, rows, None, :], self.keys[:, None, cols, :], self.params)
        elif space is SimilaritySpace.KEY_COSINE:
            per_head, zero = _cosine(self.keys[:, rows], self.keys[:, cols])
        else:
            per_head, zero = _cosine(self.values[:, rows], self.values[:, cols])

        if self.head_reduce is HeadReduce.MEAN_OF_SQUARES:
            cells = np.mean(per_head * per_head, axis=0)
        else:
            m = np.mean(per_head, axis=0)
            cells = m * m
        return SimilarityBlock(rows, cols, np.clip(cells, 0.0, 1.0), zero)

    def __call__(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        return self.block(rows, cols).cells


def duplication_block(
    batch: TokenBatch,
    rows: Sequence[int] | np.ndarray,
    cols: Sequence[int] | np.ndarray,
    space: SimilaritySpace | str = SimilaritySpace.DUAL_WEIGHT,
    rope: RopeParams = RopeParams(rotate=True),
    head_reduce: HeadReduce | str = HeadReduce.MEAN_OF_SQUARES,
) -> SimilarityBlock:
    """Squared, head-averaged similarities between image tokens ``rows`` and ``cols``.

    Cells lie in [0, 1].  In the dual-weight space each head contributes
    ``(cos(v_i, v_j) * RBF(k_i, k_j))**2``; the other spaces use a squared cosine.
    RoPE (on by default here) rotates keys before they enter any key-based
    space, provided the batch comes from a rotary model.  Zero-norm vectors
    give cosine 0 and set ``zero_norm``.
    """
    return Duplication(batch, space, rope, head_reduce).block(rows, cols)
