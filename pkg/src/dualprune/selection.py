"""Token-subset selection over image tokens.

``pc_mmr`` is the production selector.  ``greedy_oracle`` re-derives every
penalty from scratch each step and is kept deliberately naive so it can check
``pc_mmr``.  ``sequential_mmr_additive``, ``top_k`` and ``random_select`` are
the baselines.

Ties are always broken toward the lower token index.
"""

from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from .attention import RopeParams
from .errors import ConfigError
from .metrics import (
    Duplication,
    HeadReduce,
    QueryMode,
    Scorer,
    ScoreVector,
    SimilaritySpace,
)
from .tensor_io import TokenBatch

# (rows, cols) -> squared similarity cells [len(rows), len(cols)]
SimilarityFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


class PenaltyForm(str, Enum):
    POWER = "power"  # P * (1 - s)^lambda
    EXPONENTIAL = "exponential"  # P * exp(-lambda * s)
    ADDITIVE = "additive"  # P - lambda * s


def keep_count(n_img: int, rho: float) -> int:
    """``round((1 - rho) * n_img)`` with halves rounded up."""
    return int(math.floor((1.0 - rho) * n_img + 0.5))


@dataclass(frozen=True)
class PruneConfig:
    rho: float
    lam: float = 5.0
    b0: int = 2
    g: float = 2.0
    penalty_form: PenaltyForm = PenaltyForm.POWER
    scorer: Scorer = Scorer.IWP
    space: SimilaritySpace = SimilaritySpace.DUAL_WEIGHT
    query_mode: QueryMode = QueryMode.MEAN_TEXT
    rope_magnitude: bool = False
    rope_duplication: bool = True
    rope_base: float = 10000.0
    head_reduce: HeadReduce = HeadReduce.MEAN_OF_SQUARES
    layer: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        for name, enum in (
            ("penalty_form", PenaltyForm),
            ("scorer", Scorer),
            ("space", SimilaritySpace),
            ("query_mode", QueryMode),
            ("head_reduce", HeadReduce),
        ):
            try:
                object.__setattr__(self, name, enum(getattr(self, name)))
            except ValueError:
                choices = ", ".join(m.value for m in enum)
                raise ConfigError(f"{name}={getattr(self, name)!r} is not one of: {choices}") from None
        if not 0.0 <= self.rho < 1.0:
            raise ConfigError(f"rho must lie in [0, 1), got {self.rho}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.b0 < 1:
            raise ConfigError(f"b0 must be >= 1, got {self.b0}")
        if self.g < 1:
            raise ConfigError(f"growth factor must be >= 1, got {self.g}")
        if not self.rope_base > 1:
            raise ConfigError(f"rope_base must be > 1, got {self.rope_base}")

    def keep_count(self, n_img: int) -> int:
        k = keep_count(n_img, self.rho)
        if not 1 <= k <= n_img:
            raise ConfigError(f"budget rho={self.rho} keeps {k} of {n_img} image tokens")
        return k

    @property
    def magnitude_rope(self) -> RopeParams:
        return RopeParams(base=self.rope_base, rotate=self.rope_magnitude)

    @property
    def duplication_rope(self) -> RopeParams:
        return RopeParams(base=self.rope_base, rotate=self.rope_duplication)

    def to_dict(self) -> dict:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, Enum):
                out[k] = v.value
        return out


@dataclass
class SelectionResult:
    kept: np.ndarray  # sorted image-token indices
    order: list[np.ndarray] = field(default_factory=list)  # per-iteration chunks, in selection order
    chunk_sizes: list[int] = field(default_factory=list)
    penalized: list[np.ndarray] = field(default_factory=list)  # scores ranked at each iteration
    s_max: np.ndarray | None = None
    cells_evaluated: int = 0
    s_max_history: list[np.ndarray] = field(default_factory=list)

    @property
    def selection_order(self) -> np.ndarray:
        return np.concatenate(self.order) if self.order else np.asarray(self.kept)

    def trace(self) -> list[dict]:
        return [
            {"iteration": i, "chunk_size": int(n), "selected": [int(x) for x in chunk]}
            for i, (n, chunk) in enumerate(zip(self.chunk_sizes, self.order))
        ]


def similarity_for(batch: TokenBatch, cfg: PruneConfig) -> Duplication:
    return Duplication(batch, cfg.space, cfg.duplication_rope, cfg.head_reduce)


def cached_rows(similarity: SimilarityFn, n_img: int) -> SimilarityFn:
    """Wrap ``similarity`` so each row is computed once against all image tokens.

    Cell values are unchanged because a cell never depends on its block's shape.
    """
    table = np.empty((n_img, n_img))
    have = np.zeros(n_img, dtype=bool)
    everything = np.arange(n_img, dtype=np.int64)

    def fn(r: np.ndarray, c: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=np.int64)
        missing = np.unique(r[~have[r]])
        if missing.size:
            table[missing] = similarity(missing, everything)
            have[missing] = True
        return table[np.ix_(r, np.asarray(c, dtype=np.int64))]

    return fn


def apply_penalty(p: np.ndarray, s: np.ndarray, lam: float, form: PenaltyForm | str) -> np.ndarray:
    form = PenaltyForm(form)
    if form is PenaltyForm.POWER:
        return p * np.power(1.0 - s, lam)
    if form is PenaltyForm.EXPONENTIAL:
        return p * np.exp(-lam * s)
    return p - lam * s


def _top_indices(candidates: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """The ``n`` candidates with the largest ``values``; equal values go to the lower index."""
    order = np.lexsort((candidates, -values))
    return candidates[order[:n]]


def _check_k(k: int, n_img: int) -> None:
    if not 1 <= k <= n_img:
        raise ConfigError(f"keep count {k} outside [1, {n_img}]")


def _as_scores(scores: ScoreVector | np.ndarray) -> np.ndarray:
    return np.asarray(scores.scores if isinstance(scores, ScoreVector) else scores, dtype=np.float64)


def pc_mmr(
    scores: ScoreVector | np.ndarray,
    batch: TokenBatch | None,
    cfg: PruneConfig,
    similarity: SimilarityFn | None = None,
    k: int | None = None,
) -> SelectionResult:
    """Progressive Chunked MMR.

    Each round moves the ``min(b, K - |C|)`` best-penalized candidates into the
    selected set, scores only the new chunk against the remaining candidates,
    folds that block's column maxima into ``s_max`` and re-penalizes the
    remaining candidates from the original scores.  The chunk size then grows
    as ``b <- b * g``.

    ``similarity`` overrides the batch-derived duplication block; ``k``
    overrides the budget-derived keep count.
    """
    p = _as_scores(scores)
    n_img = p.shape[0]
    k = cfg.keep_count(n_img) if k is None else k
    _check_k(k, n_img)
    if similarity is None:
        if batch is None:
            raise ConfigError("pc_mmr needs a batch or an explicit similarity function")
        similarity = similarity_for(batch, cfg)

    remaining = np.arange(n_img, dtype=np.int64)
    penalized = p.copy()
    s_max = np.zeros(n_img)
    result = SelectionResult(kept=np.empty(0, dtype=np.int64), s_max=s_max)
    b = float(cfg.b0)
    n_selected = 0

    while n_selected < k:
        chunk_size = min(int(b), k - n_selected)
        result.penalized.append(penalized[remaining].copy())
        chunk = _top_indices(remaining, penalized[remaining], chunk_size)
        remaining = remaining[~np.isin(remaining, chunk)]
        n_selected += chunk_size
        result.order.append(chunk)
        result.chunk_sizes.append(chunk_size)

        if remaining.size:
            block = similarity(chunk, remaining)
            result.cells_evaluated += block.size
            s_max[remaining] = np.maximum(s_max[remaining], block.max(axis=0))
            penalized[remaining] = apply_penalty(p[remaining], s_max[remaining], cfg.lam, cfg.penalty_form)
        result.s_max_history.append(s_max.copy())
        b *= cfg.g

    result.kept = np.sort(np.concatenate(result.order))
    return result


def greedy_oracle(
    scores: ScoreVector | np.ndarray,
    similarity: SimilarityFn,
    k: int,
    lam: float,
    penalty_form: PenaltyForm | str = PenaltyForm.POWER,
    b0: int = 1,
    g: float = 1.0,
) -> SelectionResult:
    """Reference chunked greedy that recomputes every candidate's max duplication from scratch.

    Each candidate's similarities to the whole selected set are fetched anew
    every step and scanned with a plain Python loop, so it shares no
    bookkeeping with :func:`pc_mmr`.
    """
    p = [float(x) for x in _as_scores(scores)]
    n = len(p)
    _check_k(k, n)
    selected: list[int] = []
    chunks: list[np.ndarray] = []
    sizes: list[int] = []
    cells = 0
    b = float(b0)
    while len(selected) < k:
        size = min(int(b), k - len(selected))
        candidates = [i for i in range(n) if i not in selected]
        ranked = []
        sel = np.asarray(selected, dtype=np.int64)
        for u in candidates:
            worst = 0.0
            if selected:
                column = similarity(sel, np.array([u]))[:, 0]
                cells += len(selected)
                for cell in column.tolist():
                    worst = max(worst, cell)
            val = float(apply_penalty(np.array([p[u]]), np.array([worst]), lam, penalty_form)[0])
            ranked.append((-val, u))
        ranked.sort()
        chunk = [u for _, u in ranked[:size]]
        selected.extend(chunk)
        chunks.append(np.asarray(chunk, dtype=np.int64))
        sizes.append(size)
        b *= g
    return SelectionResult(
        kept=np.asarray(sorted(selected), dtype=np.int64),
        order=chunks,
        chunk_sizes=sizes,
        cells_evaluated=cells,
    )


def sequential_mmr_additive(
    scores: ScoreVector | np.ndarray,
    batch: TokenBatch | None,
    cfg: PruneConfig,
    similarity: SimilarityFn | None = None,
    k: int | None = None,
) -> SelectionResult:
    """Classic one-at-a-time MMR: maximize ``lam * P_i - (1 - lam) * max_{j in C} S2_ij``.

    Here ``cfg.lam`` is the convex weight and must lie in [0, 1].
    """
    lam = cfg.lam
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"additive MMR needs lambda in [0, 1], got {lam}")
    p = _as_scores(scores)
    n_img = p.shape[0]
    k = cfg.keep_count(n_img) if k is None else k
    _check_k(k, n_img)
    if similarity is None:
        if batch is None:
            raise ConfigError("sequential_mmr_additive needs a batch or a similarity function")
        similarity = similarity_for(batch, cfg)

    remaining = np.arange(n_img, dtype=np.int64)
    s_max = np.zeros(n_img)
    first = _top_indices(remaining, p, 1)
    order = [first]
    result = SelectionResult(kept=first, s_max=s_max, chunk_sizes=[1])
    remaining = remaining[remaining != first[0]]
    last = first
    while len(order) < k:
        block = similarity(last, remaining)
        result.cells_evaluated += block.size
        s_max[remaining] = np.maximum(s_max[remaining], block[0])
        objective = lam * p[remaining] - (1.0 - lam) * s_max[remaining]
        result.penalized.append(objective)
        last = _top_indices(remaining, objective, 1)
        order.append(last)
        result.chunk_sizes.append(1)
        remaining = remaining[remaining != last[0]]

    result.order = order
    result.kept = np.sort(np.concatenate(order))
    return result


def top_k(scores: ScoreVector | np.ndarray, k: int) -> SelectionResult:
    p = _as_scores(scores)
    n = p.shape[0]
    _check_k(k, n)
    chosen = _top_indices(np.arange(n, dtype=np.int64), p, k)
    return SelectionResult(kept=np.sort(chosen), order=[chosen], chunk_sizes=[k], s_max=np.zeros(n))


def random_select(n_img: int, k: int, seed: int = 0) -> SelectionResult:
    _check_k(k, n_img)
    chosen = np.random.default_rng(seed).choice(n_img, size=k, replace=False).astype(np.int64)
    return SelectionResult(kept=np.sort(chosen), order=[chosen], chunk_sizes=[k], s_max=np.zeros(n_img))
