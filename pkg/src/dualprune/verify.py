"""Self-contained identity and invariant checks behind ``dualprune verify``.

Every check draws its fixtures from a seeded generator, so a given
``(trials, seed)`` pair always prints the same lines.  ``faults`` names checks
whose independent side is deliberately perturbed, to prove the check can fail.
"""

from __future__ import annotations

import math
import tempfile
from collections.abc import Callable, Collection
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import (
    KernelParams,
    RopeParams,
    apply_rope,
    dual_weight_linear,
    exp_kernel_log,
    gram,
    kernel_expansion_attention,
    linear_attention_primal,
    rbf_key_similarity,
    row_dot,
    softmax_attention,
)
from .metrics import Duplication, dual_similarity_direct, dual_similarity_factorized, magnitude_scores
from .selection import PruneConfig, cached_rows, greedy_oracle, pc_mmr, top_k
from .tensor_io import SynthSpec, generate_synthetic_batch, read_npy, write_npy

FAULTS = ("rbf", "primal-dual", "softmax", "factorization", "pcmmr")


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_error: float
    tolerance: float
    trials: int
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {self.name:<26} max_err={self.max_error:.6e} "
            f"tol={self.tolerance:.1e} trials={self.trials}"
        )


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def check_primal_dual(rng: np.random.Generator, trials: int, fault: bool) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        n, d, dv = rng.integers(1, 65), rng.integers(1, 33), rng.integers(1, 33)
        q, K, V = rng.standard_normal(d), rng.standard_normal((n, d)), rng.standard_normal((n, dv))
        primal = linear_attention_primal(q, K, V)
        W = dual_weight_linear(K, V)
        if fault:
            W = W * (1 + 1e-6)
        dual = q @ W
        worst = max(worst, float(np.max(np.abs(primal - dual))) / (1 + float(np.linalg.norm(primal))))
    return CheckResult("primal-dual", worst, 1e-10, trials, worst <= 1e-10)


def check_softmax_kernel(rng: np.random.Generator, trials: int, fault: bool) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        n, d, dv = rng.integers(1, 65), rng.integers(1, 33), rng.integers(1, 33)
        q, K, V = rng.standard_normal(d), rng.standard_normal((n, d)), rng.standard_normal((n, dv))
        direct = softmax_attention(q, K, V)
        params = KernelParams(d + 1) if fault else KernelParams(d)
        expanded = kernel_expansion_attention(q, K, V, params)
        worst = max(worst, _rel(direct, expanded))
    return CheckResult("softmax-kernel", worst, 1e-12, trials, worst < 1e-12)


def check_rbf(rng: np.random.Generator, trials: int, fault: bool) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        d = int(rng.integers(1, 33))
        p = KernelParams(d)
        ki, kj = rng.standard_normal(d), rng.standard_normal(d)
        via_kernel = math.exp(
            exp_kernel_log(ki, kj, p) - 0.5 * exp_kernel_log(ki, ki, p) - 0.5 * exp_kernel_log(kj, kj, p)
        )
        if fault:
            diff = ki - kj
            via_rbf = math.exp(-float(diff @ diff) / (2.0 * p.scale * 1.01))
        else:
            via_rbf = float(rbf_key_similarity(ki, kj, p))
        worst = max(worst, abs(via_kernel - via_rbf))
    return CheckResult("rbf-identity", worst, 1e-9, trials, worst <= 1e-9)


def check_frobenius(rng: np.random.Generator, trials: int, fault: bool) -> CheckResult:
    worst = 0.0
    d, dv = 16, 16
    K, V = rng.standard_normal((trials, d)), rng.standard_normal((trials, dv))
    p = KernelParams(d)
    for i in range(trials):
        diag = gram([i], [i], K, V, p).frobenius()[0, 0]
        via_norms = math.sqrt(math.exp(exp_kernel_log(K[i], K[i], p))) * float(np.linalg.norm(V[i]))
        worst = max(worst, abs(math.sqrt(diag) - via_norms) / via_norms)
    return CheckResult("frobenius-norm", worst, 1e-12, trials, worst < 1e-12)


def check_factorization(rng: np.random.Generator, trials: int, fault: bool) -> CheckResult:
    worst = 0.0
    n_heads, d, dv = 2, 16, 16
    n = max(2, int(math.isqrt(trials)) + 1)
    K, V = rng.standard_normal((n_heads, n, d)), rng.standard_normal((n_heads, n, dv))
    p = KernelParams(d + 1) if fault else KernelParams(d)
    pairs = rng.integers(0, n, size=(trials, 2))
    rows, cols = pairs[:, 0].tolist(), pairs[:, 1].tolist()
    for h in range(n_heads):
        for r, c in zip(rows, cols):
            r, c = np.array([r]), np.array([c])
            direct = dual_similarity_direct(K[h], V[h], r, c, KernelParams(d))[0, 0]
            fact = dual_similarity_factorized(K[h], V[h], r, c, p)[0][0, 0]
            worst = max(worst, abs(float(direct) - float(fact)))
    return CheckResult("similarity-factorization", worst, 1e-10, trials, worst <= 1e-10)


def check_rope(rng: np.random.Generator, trials: int, fault: bool) -> CheckResult:
    d = 16
    rows = rng.standard_normal((trials, d))
    pos = np.sort(rng.choice(100 * trials, size=trials, replace=False))
    rotated = apply_rope(rows, pos, RopeParams())
    err = np.abs(np.sqrt(row_dot(rotated, rotated)) - np.sqrt(row_dot(rows, rows)))
    worst = float(np.max(err / np.sqrt(row_dot(rows, rows))))
    return CheckResult("rope-isometry", worst, 1e-12, trials, worst <= 1e-12)


def _random_instance(rng: np.random.Generator, max_img: int) -> tuple:
    n_img = int(rng.integers(8, max_img + 1))
    spec = SynthSpec(
        H=int(rng.integers(1, 4)),
        N_img=n_img,
        N_text=int(rng.integers(1, 9)),
        d=8,
        d_v=8,
        cluster_count=int(rng.integers(1, min(n_img, 12) + 1)),
        cluster_noise=float(rng.uniform(0.0, 0.5)),
        seed=int(rng.integers(0, 2**32)),
    )
    rho = float(rng.choice([0.647, 0.778, 0.889]))
    return generate_synthetic_batch(spec), rho


def check_pcmmr_oracle(rng: np.random.Generator, trials: int, fault: bool) -> CheckResult:
    mismatches = 0
    for _ in range(trials):
        batch, rho = _random_instance(rng, 64)
        cfg = PruneConfig(rho=rho, b0=1, g=1)
        scores = magnitude_scores(batch)
        fast = pc_mmr(scores, batch, cfg)
        lam = cfg.lam * 0.5 if fault else cfg.lam
        sim = cached_rows(Duplication(batch, cfg.space, cfg.duplication_rope), batch.n_img)
        slow = greedy_oracle(scores, sim, cfg.keep_count(batch.n_img), lam, cfg.penalty_form)
        mismatches += not np.array_equal(fast.kept, slow.kept)
    return CheckResult("pcmmr-oracle", float(mismatches), 0.0, trials, mismatches == 0)


def check_collapse(rng: np.random.Generator, trials: int, fault: bool) -> CheckResult:
    mismatches = 0
    for _ in range(trials):
        batch, rho = _random_instance(rng, 64)
        scores = magnitude_scores(batch)
        k = PruneConfig(rho=rho).keep_count(batch.n_img)
        ref = top_k(scores, k).kept
        no_penalty = pc_mmr(scores, batch, PruneConfig(rho=rho, lam=0.0)).kept
        one_chunk = pc_mmr(scores, batch, PruneConfig(rho=rho, b0=k)).kept
        mismatches += not np.array_equal(ref, no_penalty)
        mismatches += not np.array_equal(ref, one_chunk)
    return CheckResult("collapse-to-topk", float(mismatches), 0.0, trials, mismatches == 0)


def check_npy(rng: np.random.Generator, trials: int, fault: bool) -> CheckResult:
    bad = 0
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "t.npy"
        for _ in range(trials):
            shape = tuple(int(s) for s in rng.integers(0, 6, size=rng.integers(1, 4)))
            t = rng.standard_normal(shape)
            write_npy(path, t)
            back = read_npy(path)
            bad += back.shape != t.shape or back.tobytes() != t.tobytes()
    return CheckResult("npy-roundtrip", float(bad), 0.0, trials, bad == 0)


CHECKS: dict[str, tuple[Callable[[np.random.Generator, int, bool], CheckResult], str | None, Callable[[int], int]]] = {
    "primal-dual": (check_primal_dual, "primal-dual", lambda t: t),
    "softmax-kernel": (check_softmax_kernel, "softmax", lambda t: t),
    "rbf-identity": (check_rbf, "rbf", lambda t: 2 * t),
    "frobenius-norm": (check_frobenius, None, lambda t: 2 * t),
    "similarity-factorization": (check_factorization, "factorization", lambda t: 2 * t),
    "rope-isometry": (check_rope, None, lambda t: t),
    "pcmmr-oracle": (check_pcmmr_oracle, "pcmmr", lambda t: max(1, t // 10)),
    "collapse-to-topk": (check_collapse, None, lambda t: max(1, t // 10)),
    "npy-roundtrip": (check_npy, None, lambda t: max(1, t // 5)),
}


def run_checks(trials: int = 500, seed: int = 0, faults: Collection[str] = ()) -> list[CheckResult]:
    """Run every check; each gets its own generator derived from ``seed`` and its position."""
    results = []
    for i, (fn, fault_name, scale) in enumerate(CHECKS.values()):
        rng = np.random.default_rng([seed, i])
        results.append(fn(rng, scale(trials), fault_name in faults))
    return results
