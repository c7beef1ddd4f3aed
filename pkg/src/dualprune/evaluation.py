"""Run selection methods on a batch and measure how well each kept set preserves it.

Evaluation consumes only kept-index sets, so selections produced elsewhere
(for example from a real model's activations) are scored the same way.
"""

from __future__ import annotations

import csv
import io
import json
import time
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .attention import KernelParams, RopeParams, apply_rope, dual_weight_relative_errors, pairwise_dot, row_dot
from .errors import BatchIOError, ConfigError, ConsistencyError
from .metrics import magnitude_scores
from .selection import (
    PruneConfig,
    SelectionResult,
    cached_rows,
    greedy_oracle,
    pc_mmr,
    random_select,
    sequential_mmr_additive,
    similarity_for,
    top_k,
)
from .tensor_io import TokenBatch

REPORT_SCHEMA = "dualprune.report/1"
SELECTION_SCHEMA = "dualprune.selection/1"

METHODS = ("iwp", "topk", "mmr-additive", "random", "oracle", "none")

CSV_FIELDS = (
    "method",
    "kept_count",
    "kept_ratio",
    "dual_weight_rel_error",
    "dual_weight_rel_error_per_head",
    "attn_output_cosine",
    "attn_output_l2_rel",
    "oracle_iou",
    "cluster_coverage",
    "duplication_cells_evaluated",
    "wall_time_ms",
)


def run_method(method: str, batch: TokenBatch, cfg: PruneConfig) -> SelectionResult:
    """Select image tokens with one named method under ``cfg``.

    ``iwp`` is magnitude scoring followed by Progressive Chunked MMR; ``topk``
    keeps the highest magnitude scores; ``oracle`` is the one-at-a-time
    multiplicative greedy; ``none`` keeps every image token.
    """
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    n_img = batch.n_img
    if method == "none":
        everything = np.arange(n_img, dtype=np.int64)
        return SelectionResult(kept=everything, order=[everything], chunk_sizes=[n_img])
    k = cfg.keep_count(n_img)
    if method == "random":
        return random_select(n_img, k, cfg.seed)
    scores = magnitude_scores(batch, cfg.scorer, cfg.query_mode, cfg.magnitude_rope, cfg.seed)
    if method == "topk":
        return top_k(scores, k)
    if method == "iwp":
        return pc_mmr(scores, batch, cfg, k=k)
    if method == "mmr-additive":
        return sequential_mmr_additive(scores, batch, cfg, k=k)
    return greedy_oracle(
        scores, cached_rows(similarity_for(batch, cfg), n_img), k, cfg.lam, cfg.penalty_form
    )


def selection_to_dict(method: str, result: SelectionResult, batch: TokenBatch, cfg: PruneConfig) -> dict:
    return {
        "schema": SELECTION_SCHEMA,
        "method": method,
        "n_img": batch.n_img,
        "n_text": batch.n_text,
        "keep_count": int(len(result.kept)),
        "kept": [int(i) for i in result.kept],
        "trace": result.trace(),
        "duplication_cells_evaluated": int(result.cells_evaluated),
        "config": cfg.to_dict(),
    }


def read_selection(path: str | Path, batch: TokenBatch) -> tuple[str, SelectionResult]:
    """Load a selection JSON and check it against ``batch``; returns (method, selection)."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise BatchIOError(f"{path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConsistencyError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict) or doc.get("schema") != SELECTION_SCHEMA:
        raise ConsistencyError(f"{path}: not a {SELECTION_SCHEMA} document")
    if doc.get("n_img") != batch.n_img or doc.get("n_text", batch.n_text) != batch.n_text:
        raise ConsistencyError(
            f"{path}: selection is for n_img={doc.get('n_img')}, manifest has n_img={batch.n_img}"
        )
    kept = np.asarray(doc.get("kept", []), dtype=np.int64)
    if kept.size == 0:
        raise ConfigError(f"{path}: empty selection; at least one image token must be kept")
    if kept.min() < 0 or kept.max() >= batch.n_img or len(set(kept.tolist())) != kept.size:
        raise ConsistencyError(f"{path}: kept indices must be distinct image-token indices")
    cells = int(doc.get("duplication_cells_evaluated", 0))
    return str(doc.get("method", path.stem)), SelectionResult(kept=np.sort(kept), cells_evaluated=cells)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _attention_keys(batch: TokenBatch, rope_base: float) -> tuple[np.ndarray, np.ndarray]:
    """Queries and keys as the model's attention sees them (rotated for rotary batches)."""
    if batch.rotary:
        rope = RopeParams(base=rope_base)
        return apply_rope(batch.queries, batch.positions, rope), apply_rope(batch.keys, batch.positions, rope)
    return batch.queries, batch.keys


def _softmax_outputs(q: np.ndarray, k: np.ndarray, v: np.ndarray, scale: float) -> np.ndarray:
    logits = pairwise_dot(q, k) / scale
    w = np.exp(logits - logits.max(axis=-1, keepdims=True))
    w /= w.sum(axis=-1, keepdims=True)
    return np.sum(w[..., :, :, None] * v[..., None, :, :], axis=-2)


def attention_perturbation(batch: TokenBatch, kept: np.ndarray, rope_base: float = 10000.0) -> tuple[float, float]:
    """Mean cosine and relative L2 between full and pruned attention outputs.

    Probes are the text-token queries of every head; the pruned context is the
    kept image tokens plus all text tokens.
    """
    q, k = _attention_keys(batch, rope_base)
    v = batch.values
    scale = KernelParams(batch.head_dim).scale
    probes = q[:, batch.text_slice]
    ctx = np.concatenate([np.asarray(kept, dtype=np.int64), np.arange(batch.n_img, batch.n_tokens)])
    full = _softmax_outputs(probes, k, v, scale)
    pruned = _softmax_outputs(probes, k[:, ctx], v[:, ctx], scale)
    nf = np.sqrt(row_dot(full, full))
    npr = np.sqrt(row_dot(pruned, pruned))
    denom = nf * npr
    cos = np.divide(row_dot(full, pruned), denom, out=np.ones_like(denom), where=denom > 0)
    diff = pruned - full
    l2 = np.sqrt(row_dot(diff, diff))
    l2_rel = np.divide(l2, nf, out=np.zeros_like(l2), where=nf > 0)
    return float(np.clip(np.mean(cos), -1.0, 1.0)), float(np.mean(l2_rel))


def jaccard(a: Iterable[int], b: Iterable[int]) -> float:
    sa, sb = set(int(x) for x in a), set(int(x) for x in b)
    union = sa | sb
    return len(sa & sb) / len(union) if union else 1.0


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    config: dict[str, Any]
    batch: dict[str, Any]
    rows: list[dict[str, Any]] = field(default_factory=list)
    seed: int = 0
    version: str = __version__

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema": REPORT_SCHEMA,
            "version": self.version,
            "seed": self.seed,
            "config": self.config,
            "batch": self.batch,
            "rows": self.rows,
        }


def evaluate(
    batch: TokenBatch,
    cfg: PruneConfig,
    methods: Sequence[str] = (),
    selections: Mapping[str, SelectionResult | np.ndarray] | None = None,
    timing: bool = False,
) -> EvalReport:
    """Build an :class:`EvalReport` with one row per method or external selection.

    Rows follow the order of ``selections`` then ``methods``.  ``wall_time_ms``
    is only measured when ``timing`` is set, keeping default reports
    byte-reproducible.
    """
    selections = dict(selections or {})
    names = list(selections) + list(methods)
    if len(set(names)) != len(names):
        raise ConfigError(f"each method may appear once per report, got {names}")
    if not names:
        raise ConfigError("nothing to evaluate: give at least one method or selection")

    img = np.arange(batch.n_img)
    _, att_keys = _attention_keys(batch, cfg.rope_base)
    k_img, v_img = att_keys[:, : batch.n_img], batch.values[:, : batch.n_img]
    clusters = batch.diagnostics.get("clusters")

    oracle = run_method("oracle", batch, cfg).kept if cfg.rho > 0 else img

    rows = []
    for name in names:
        cells = 0
        elapsed = None
        if name in selections:
            given = selections[name]
            if isinstance(given, SelectionResult):
                given, cells = given.kept, given.cells_evaluated
            kept = np.sort(np.asarray(given, dtype=np.int64))
            if kept.size == 0:
                raise ConfigError(f"{name}: empty selection; at least one image token must be kept")
        else:
            start = time.perf_counter()
            result = run_method(name, batch, cfg)
            elapsed = (time.perf_counter() - start) * 1e3
            kept, cells = result.kept, result.cells_evaluated
        per_head = dual_weight_relative_errors(kept, img, k_img, v_img)
        cos, l2 = attention_perturbation(batch, kept, cfg.rope_base)
        row = {
            "method": name,
            "kept_count": int(kept.size),
            "kept_ratio": kept.size / batch.n_img,
            "dual_weight_rel_error": float(np.mean(per_head)),
            "dual_weight_rel_error_per_head": [float(x) for x in per_head],
            "attn_output_cosine": cos,
            "attn_output_l2_rel": l2,
            "oracle_iou": jaccard(kept, oracle),
            "cluster_coverage": None if clusters is None else int(np.unique(clusters[kept]).size),
            "duplication_cells_evaluated": int(cells),
            "wall_time_ms": elapsed if timing and elapsed is not None else None,
        }
        rows.append(row)

    return EvalReport(
        config=cfg.to_dict(),
        batch={
            "n_img": batch.n_img,
            "n_text": batch.n_text,
            "heads": batch.n_heads,
            "head_dim": batch.head_dim,
            "value_dim": batch.value_dim,
            "layer": batch.layer,
            "rotary": batch.rotary,
        },
        rows=rows,
        seed=cfg.seed,
    )


def _csv_cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return f"{value:.17g}"
    if isinstance(value, (list, tuple)):
        return ";".join(_csv_cell(v) for v in value)
    return str(value)


def render_report(report: EvalReport | dict, fmt: str = "json") -> str:
    """Canonical JSON (sorted keys) or CSV with a fixed column order."""
    doc = report.to_dict() if isinstance(report, EvalReport) else report
    if fmt == "json":
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_FIELDS)
        for row in doc["rows"]:
            writer.writerow([_csv_cell(row.get(f)) for f in CSV_FIELDS])
        return buf.getvalue()
    raise ConfigError(f"unknown report format {fmt!r}; use json or csv")


def emit_report(report: EvalReport | dict, fmt: str = "json", path: str | Path | None = None) -> str:
    text = render_report(report, fmt)
    if path is not None:
        path = Path(path)
        try:
            path.write_text(text)
        except OSError as exc:
            raise BatchIOError(f"{path}: {exc.strerror or exc}") from exc
    return text
