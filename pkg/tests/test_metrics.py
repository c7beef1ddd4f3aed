import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_batch
from dualprune.attention import KernelParams, RopeParams, apply_rope
from dualprune.errors import ConfigError
from dualprune.metrics import (
    Duplication,
    HeadReduce,
    QueryMode,
    Scorer,
    SimilaritySpace,
    aggregate_query,
    dual_similarity_direct,
    dual_similarity_factorized,
    duplication_block,
    magnitude_scores,
    normalize_scores,
)
from dualprune.tensor_io import SynthSpec, generate_synthetic_batch


def random_batch(seed, H=2, n_img=10, n_text=3, d=8, dv=6, rotary=False):
    rng = np.random.default_rng(seed)
    return make_batch(
        rng.standard_normal((H, n_img, d)),
        rng.standard_normal((H, n_img, dv)),
        text_queries=rng.standard_normal((H, n_text, d)),
        image_queries=rng.standard_normal((H, n_img, d)),
        rotary=rotary,
        hidden=rng.standard_normal((n_img + n_text, 5)),
    )


# ---------------------------------------------------------------------------
# query aggregation
# ---------------------------------------------------------------------------


def test_single_text_token_modes_agree():
    b = random_batch(1, n_text=1)
    for h in range(2):
        a = aggregate_query(b, QueryMode.MEAN_TEXT, h)
        assert np.array_equal(a, aggregate_query(b, QueryMode.LAST_TEXT, h))
        assert np.array_equal(a, b.queries[h, -1])


def test_antipodal_text_queries_cancel():
    u = np.array([0.5, -2.0])
    b = make_batch(np.ones((3, 2)), np.ones((3, 2)), text_queries=np.stack([u, -u]))
    assert not np.any(aggregate_query(b, "mean_text"))


def test_mean_text_of_basis_vectors():
    b = make_batch(np.ones((3, 2)), np.ones((3, 2)), text_queries=np.eye(2))
    assert aggregate_query(b, "mean_text").tolist() == [0.5, 0.5]


def test_mean_image_and_last_text():
    b = random_batch(2)
    np.testing.assert_allclose(aggregate_query(b, "mean_image", 1), b.queries[1, :10].mean(axis=0), rtol=1e-15)
    assert np.array_equal(aggregate_query(b, "last_text", 0), b.queries[0, -1])


def test_query_rope_only_when_requested():
    b = random_batch(3, rotary=True)
    plain = aggregate_query(b, "mean_text", 0)
    rotated = aggregate_query(b, "mean_text", 0, RopeParams(rotate=True))
    expected = apply_rope(b.queries[0], b.positions)[b.text_slice].mean(axis=0)
    np.testing.assert_allclose(rotated, expected, rtol=1e-14)
    assert not np.allclose(plain, rotated)


# ---------------------------------------------------------------------------
# magnitude
# ---------------------------------------------------------------------------


def test_uniform_scorer_is_degenerate():
    sv = magnitude_scores(random_batch(0), "uniform")
    assert sv.degenerate
    assert np.all(sv.scores == 0.5)


def test_value_norm_min_max():
    V = np.array([[2.0, 0.0], [0.0, 4.0], [6.0, 0.0]])
    b = make_batch(np.ones((3, 2)), V)
    sv = magnitude_scores(b, Scorer.VALUE_NORM)
    assert sv.scores.tolist() == [0.0, 0.5, 1.0]
    assert not sv.degenerate


def test_iwp_scalar_example():
    K = np.array([[2.0, 0, 0, 0], [0, 2.0, 0, 0]])
    V = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]])
    b = make_batch(K, V, text_queries=np.array([[1.0, 0, 0, 0]]))
    sv = magnitude_scores(b, "iwp")
    raw = sv.raw_per_head[0]
    assert raw[0] / raw[1] == pytest.approx(math.e, rel=1e-15)
    assert sv.scores.tolist() == [1.0, 0.0]


def test_iwp_matches_direct_formula():
    b = random_batch(4)
    p = KernelParams(b.head_dim)
    raw = np.zeros(b.n_img)
    for h in range(b.n_heads):
        q = b.queries[h, b.text_slice].mean(axis=0)
        for i in range(b.n_img):
            raw[i] += math.exp(float(q @ b.keys[h, i]) / p.scale) * float(np.linalg.norm(b.values[h, i]))
    expected = (raw - raw.min()) / (raw.max() - raw.min())
    np.testing.assert_allclose(magnitude_scores(b, "iwp").scores, expected, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize(
    "scorer, formula",
    [
        ("alignment", lambda q, k, v, s: math.exp(float(q @ k) / s)),
        ("delta_w_norm", lambda q, k, v, s: math.exp(float(k @ k) / (2 * s)) * np.linalg.norm(v)),
        ("key_norm", lambda q, k, v, s: np.linalg.norm(k)),
    ],
)
def test_other_scorers_match_formulas(scorer, formula):
    b = random_batch(5, H=1)
    s = KernelParams(b.head_dim).scale
    q = b.queries[0, b.text_slice].mean(axis=0)
    raw = np.array([formula(q, b.keys[0, i], b.values[0, i], s) for i in range(b.n_img)])
    expected = (raw - raw.min()) / (raw.max() - raw.min())
    np.testing.assert_allclose(magnitude_scores(b, scorer).scores, expected, rtol=1e-12, atol=1e-12)


def test_query_mode_ignored_without_query():
    b = random_batch(6)
    for scorer in ("value_norm", "key_norm", "delta_w_norm"):
        a = magnitude_scores(b, scorer, "mean_text").scores
        c = magnitude_scores(b, scorer, "mean_image").scores
        assert np.array_equal(a, c)


def test_random_scorer_reproducible():
    b = random_batch(7)
    a = magnitude_scores(b, "random", seed=3).scores
    assert np.array_equal(a, magnitude_scores(b, "random", seed=3).scores)
    assert not np.array_equal(a, magnitude_scores(b, "random", seed=4).scores)


def test_large_logits_do_not_overflow():
    K = np.array([[400.0, 0.0], [399.0, 0.0], [0.0, 1.0]])
    b = make_batch(K, np.ones((3, 2)), text_queries=np.array([[10.0, 0.0]]))
    sv = magnitude_scores(b, "iwp")
    assert np.all(np.isfinite(sv.scores))
    assert sv.scores[0] == 1.0 and sv.scores[2] == 0.0


def test_magnitude_rope_switch():
    b = random_batch(8, rotary=True)
    plain = magnitude_scores(b, "iwp").scores
    rotated = magnitude_scores(b, "iwp", rope=RopeParams(rotate=True)).scores
    assert not np.allclose(plain, rotated)
    # batches flagged non-rotary are never rotated
    nb = random_batch(8, rotary=False)
    assert np.array_equal(magnitude_scores(nb, "iwp", rope=RopeParams(rotate=True)).scores, plain)


def test_single_image_token_is_degenerate():
    b = make_batch(np.ones((1, 2)), np.ones((1, 2)))
    sv = magnitude_scores(b, "iwp")
    assert sv.degenerate and sv.scores.tolist() == [0.5]


def test_normalize_scores():
    out, flag = normalize_scores(np.array([3.0, 1.0, 2.0]))
    assert out.tolist() == [1.0, 0.0, 0.5] and not flag


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), c=st.floats(1e-3, 1e3), scorer=st.sampled_from(list(Scorer)))
def test_scores_in_unit_interval_and_value_scale_invariant(seed, c, scorer):
    b = random_batch(seed)
    sv = magnitude_scores(b, scorer, seed=seed)
    assert len(sv) == b.n_img
    assert np.all((sv.scores >= 0) & (sv.scores <= 1))
    if not sv.degenerate:
        assert sv.scores.max() == 1.0 and sv.scores.min() == 0.0
    if scorer is Scorer.IWP:
        scaled = make_batch(b.keys[:, :10], b.values[:, :10] * c, text_queries=b.queries[:, 10:],
                            image_queries=b.queries[:, :10])
        other = magnitude_scores(scaled, scorer).scores
        # identical normalized scores, hence identical ranking
        np.testing.assert_allclose(other, sv.scores, rtol=1e-9, atol=1e-12)


# ---------------------------------------------------------------------------
# duplication
# ---------------------------------------------------------------------------


def test_self_similarity_is_one():
    b = random_batch(9)
    cells = duplication_block(b, range(10), range(10)).cells
    np.testing.assert_allclose(np.diag(cells), 1.0, rtol=1e-15)


def test_antipodal_values_are_duplicates():
    k = np.array([0.3, 1.0])
    v = np.array([1.0, -2.0, 0.5])
    b = make_batch(np.stack([k, k]), np.stack([v, -v]))
    fact, _ = dual_similarity_factorized(b.keys[0], b.values[0], np.array([0]), np.array([1]), KernelParams(2))
    assert fact[0, 0] == pytest.approx(-1.0, abs=1e-15)
    assert duplication_block(b, [0], [1]).cells[0, 0] == pytest.approx(1.0, abs=1e-15)


def test_orthogonal_values_never_duplicate():
    K = np.array([[1.0, 1.0], [1.0, 1.0], [5.0, -3.0]])
    V = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 2.0]])
    b = make_batch(K, V)
    cells = duplication_block(b, [0], [1, 2]).cells
    assert cells.tolist() == [[0.0, 0.0]]


def test_dual_weight_cell_formula():
    b = random_batch(10, H=2)
    p = KernelParams(b.head_dim)
    i, j = 2, 7
    expected = 0.0
    for h in range(2):
        vi, vj, ki, kj = b.values[h, i], b.values[h, j], b.keys[h, i], b.keys[h, j]
        cos = float(vi @ vj) / (np.linalg.norm(vi) * np.linalg.norm(vj))
        rbf = math.exp(-float((ki - kj) @ (ki - kj)) / (2 * p.scale))
        expected += (cos * rbf) ** 2 / 2
    assert duplication_block(b, [i], [j]).cells[0, 0] == pytest.approx(expected, rel=1e-12)


def test_square_of_mean_head_reduce():
    b = random_batch(11, H=2)
    mos = duplication_block(b, [1], [4]).cells[0, 0]
    som = duplication_block(b, [1], [4], head_reduce=HeadReduce.SQUARE_OF_MEAN).cells[0, 0]
    p = KernelParams(b.head_dim)
    s = [dual_similarity_factorized(b.keys[h], b.values[h], np.array([1]), np.array([4]), p)[0][0, 0] for h in range(2)]
    assert mos == pytest.approx((s[0] ** 2 + s[1] ** 2) / 2, rel=1e-12)
    assert som == pytest.approx(((s[0] + s[1]) / 2) ** 2, rel=1e-12)


def test_factorization_matches_direct():
    rng = np.random.default_rng(13)
    K, V = rng.standard_normal((12, 6)), rng.standard_normal((12, 5))
    p = KernelParams(6)
    idx = np.arange(12)
    fact, _ = dual_similarity_factorized(K, V, idx, idx, p)
    direct = dual_similarity_direct(K, V, idx, idx, p)
    assert np.max(np.abs(fact - direct)) <= 1e-10


@pytest.mark.parametrize("space", list(SimilaritySpace))
def test_spaces_symmetric_unit_diagonal(space):
    b = random_batch(14)
    cells = duplication_block(b, range(10), range(10), space=space).cells
    assert np.all((cells >= 0) & (cells <= 1))
    np.testing.assert_allclose(cells, cells.T, atol=1e-15)
    np.testing.assert_allclose(np.diag(cells), 1.0, rtol=1e-14)


def test_key_cosine_space():
    b = random_batch(15, H=1)
    k = b.keys[0, :10]
    cos = (k[3] @ k[5]) / (np.linalg.norm(k[3]) * np.linalg.norm(k[5]))
    assert duplication_block(b, [3], [5], space="key_cosine").cells[0, 0] == pytest.approx(cos**2, rel=1e-12)


def test_hidden_cosine_requires_hidden():
    b = make_batch(np.ones((2, 2)), np.ones((2, 2)))
    with pytest.raises(ConfigError):
        duplication_block(b, [0], [1], space="hidden_cosine")


def test_zero_norm_value_is_flagged():
    V = np.array([[0.0, 0.0], [1.0, 2.0]])
    b = make_batch(np.ones((2, 2)), V)
    block = duplication_block(b, [0, 1], [0, 1])
    assert block.zero_norm
    assert block.cells[0, 1] == 0.0 and block.cells[0, 0] == 0.0
    assert np.all(np.isfinite(block.cells))


def test_text_indices_rejected():
    b = random_batch(16)
    with pytest.raises(ConfigError):
        duplication_block(b, [10], [0])


def test_duplication_rope_default_on_for_rotary_batches():
    b = random_batch(17, rotary=True)
    rotated = duplication_block(b, range(10), range(10)).cells
    plain = duplication_block(b, range(10), range(10), rope=RopeParams(rotate=False)).cells
    assert not np.allclose(rotated, plain)


def test_cells_evaluated_counter():
    b = random_batch(18)
    dup = Duplication(b)
    dup.block([0, 1], [2, 3, 4])
    dup([5], [6])
    assert dup.cells_evaluated == 7


def test_block_values_independent_of_block_shape():
    b = generate_synthetic_batch(SynthSpec(N_img=40, seed=2))
    dup = Duplication(b)
    full = dup(np.arange(40), np.arange(40))
    for r in (0, 17, 39):
        row = dup(np.array([r]), np.arange(40))
        assert row.tobytes() == full[r : r + 1].tobytes()
    col = dup(np.arange(40), np.array([11]))
    assert col.tobytes() == np.ascontiguousarray(full[:, 11:12]).tobytes()


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), space=st.sampled_from(list(SimilaritySpace)))
def test_cells_in_unit_interval(seed, space):
    b = random_batch(seed, rotary=bool(seed % 2))
    cells = duplication_block(b, range(10), range(10), space=space).cells
    assert np.all((cells >= 0) & (cells <= 1))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), c=st.floats(1e-3, 1e3))
def test_cells_invariant_to_value_rescaling(seed, c):
    b = random_batch(seed)
    scaled = make_batch(b.keys[:, :10], 3 * b.values[:, :10], text_queries=b.queries[:, 10:])
    a = duplication_block(b, range(10), range(10)).cells
    np.testing.assert_allclose(duplication_block(scaled, range(10), range(10)).cells, a, atol=1e-12)
    # a single token rescaled by any positive factor
    V = b.values[:, :10].copy()
    V[:, 4] *= c
    one = make_batch(b.keys[:, :10], V, text_queries=b.queries[:, 10:])
    np.testing.assert_allclose(duplication_block(one, range(10), range(10)).cells, a, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_factorization_property(seed):
    rng = np.random.default_rng(seed)
    K, V = rng.standard_normal((6, 4)), rng.standard_normal((6, 4))
    p = KernelParams(4)
    idx = np.arange(6)
    fact, _ = dual_similarity_factorized(K, V, idx, idx, p)
    for i in range(6):
        for j in range(6):
            cos = float(V[i] @ V[j]) / (np.linalg.norm(V[i]) * np.linalg.norm(V[j]))
            kern = math.exp(float(K[i] @ K[j]) / 2 - float(K[i] @ K[i]) / 4 - float(K[j] @ K[j]) / 4)
            assert abs(fact[i, j] - cos * kern) <= 1e-10
