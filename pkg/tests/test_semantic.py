import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ssnav.semantic import (
    ClassSplit,
    DimensionMismatch,
    EmbeddingTable,
    InfeasibleSpec,
    MalformedLine,
    MissingClass,
    ZeroNormVector,
    cosine_similarity,
    load_embeddings,
    save_embeddings,
    similarity_column,
    synth_embeddings,
)


def write(tmp_path, text):
    p = tmp_path / "emb.txt"
    p.write_text(text, encoding="utf-8")
    return p


def test_load_embeddings_reads_back(tmp_path):
    p = write(tmp_path, "cup 1.0 0.0\nmug 0.8 0.6\n")
    table = load_embeddings(p, ["cup", "mug"])
    assert table.dim == 2
    assert len(table) == 2
    np.testing.assert_array_equal(table["mug"], [0.8, 0.6])


def test_load_embeddings_keeps_request_order(tmp_path):
    p = write(tmp_path, "cup 1.0 0.0\nmug 0.8 0.6\nbowl 0 1\n")
    assert load_embeddings(p, ["bowl", "cup"]).classes == ["bowl", "cup"]


def test_load_embeddings_missing_class(tmp_path):
    p = write(tmp_path, "cup 1.0 0.0\nmug 0.8 0.6\n")
    with pytest.raises(MissingClass) as err:
        load_embeddings(p, ["cup", "ghost"])
    assert err.value.name == "ghost"


def test_load_embeddings_zero_norm(tmp_path):
    p = write(tmp_path, "cup 0.0 0.0\n")
    with pytest.raises(ZeroNormVector):
        load_embeddings(p, ["cup"])


def test_load_embeddings_bad_dims_and_lines(tmp_path):
    with pytest.raises(DimensionMismatch):
        load_embeddings(write(tmp_path, "cup 1 0\nmug 1 0 0\n"), ["cup", "mug"])
    with pytest.raises(MalformedLine):
        load_embeddings(write(tmp_path, "cup 1 zero\n"), ["cup"])
    with pytest.raises(MalformedLine):
        load_embeddings(write(tmp_path, "cup\n"), ["cup"])


def test_embedding_file_round_trip(tmp_path):
    table = synth_embeddings(3, ["a", "b", "c"], 6, [0, 0, 1])
    p = tmp_path / "e.txt"
    save_embeddings(table, p)
    assert load_embeddings(p, table.classes) == table


def test_synth_embeddings_cluster_bounds():
    table = synth_embeddings(7, ["a", "b", "c", "d"], 8, [0, 0, 1, 1])
    assert cosine_similarity(table["a"], table["b"]) >= 0.7
    assert cosine_similarity(table["c"], table["d"]) >= 0.7
    assert cosine_similarity(table["a"], table["c"]) <= 0.3


def test_synth_embeddings_deterministic():
    args = (7, ["a", "b", "c", "d"], 8, [0, 0, 1, 1])
    assert synth_embeddings(*args) == synth_embeddings(*args)
    assert synth_embeddings(8, *args[1:]) != synth_embeddings(*args)


def test_ten_unit_vectors_in_2d_cannot_be_mutually_dissimilar():
    # oracle: pairwise cosine <= 0.1 needs pairwise angle >= acos(0.1) ~ 84.3 deg;
    # sorted by angle, the n gaps sum to 360 deg, so at most 4 such vectors fit
    min_gap = math.degrees(math.acos(0.1))
    assert math.floor(360 / min_gap) == 4
    rng = np.random.default_rng(0)
    for _ in range(2000):
        ang = np.sort(rng.uniform(0, 2 * np.pi, 5))
        vecs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        cos = vecs @ vecs.T
        assert (cos[np.triu_indices(5, 1)] > 0.1).any()
    with pytest.raises(InfeasibleSpec):
        synth_embeddings(1, [f"c{i}" for i in range(10)], 2, list(range(10)), budget=200)


def test_cosine_examples():
    assert cosine_similarity([3, 4], [3, 4]) == 1.0
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    with mpmath.workdps(50):
        expected = float(mpmath.mpf(32) / (mpmath.sqrt(14) * mpmath.sqrt(77)))
    assert cosine_similarity([1, 2, 3], [4, 5, 6]) == pytest.approx(expected, abs=1e-15)
    assert cosine_similarity([1, 2, 3], [4, 5, 6]) == pytest.approx(0.974631846, abs=1e-9)


def test_cosine_errors():
    with pytest.raises(DimensionMismatch):
        cosine_similarity([1, 2], [1, 2, 3])
    with pytest.raises(ZeroNormVector):
        cosine_similarity([0, 0], [1, 2])


vectors = st.integers(2, 8).flatmap(
    lambda n: st.tuples(
        st.lists(st.floats(-1e3, 1e3), min_size=n, max_size=n),
        st.lists(st.floats(-1e3, 1e3), min_size=n, max_size=n),
    )
).filter(lambda p: np.linalg.norm(p[0]) > 1e-6 and np.linalg.norm(p[1]) > 1e-6)


@given(vectors, st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_cosine_scale_invariant_and_symmetric(pair, a, b):
    x, y = np.array(pair[0]), np.array(pair[1])
    base = cosine_similarity(x, y)
    assert -1.0 <= base <= 1.0
    assert cosine_similarity(y, x) == base
    assert abs(cosine_similarity(a * x, b * y) - base) <= 1e-12


def test_cosine_range_randomized():
    rng = np.random.default_rng(11)
    for _ in range(100_000 // 100):
        x = rng.standard_normal((100, 3))
        for v in x:
            assert -1.0 <= cosine_similarity(v, v * 2.5) <= 1.0
            assert -1.0 <= cosine_similarity(v, -v) <= 1.0


def test_split_invariants():
    with pytest.raises(ValueError):
        ClassSplit(("a",), ("a",), ("b",))
    with pytest.raises(ValueError):
        ClassSplit((), (), ("b",))
    with pytest.raises(ValueError):
        ClassSplit(("a",), (), ())
    split = ClassSplit(("a", "b"), (), ("z",))
    assert split.model_classes == ("a", "b", "z")


@pytest.fixture
def small():
    split = ClassSplit(("a", "b"), ("u",), ("z",))
    table = synth_embeddings(5, ["a", "b", "z", "u"], 16, [0, 0, 1, 0])
    return split, table


def test_similarity_column_self_row(small):
    split, table = small
    col = similarity_column(table, split, "b")
    assert len(col) == 3
    assert col[1] == 1.0


def test_similarity_column_unseen_target_matches_pairwise_oracle(small):
    split, table = small
    col = similarity_column(table, split, "u")
    assert len(col) == 3  # unseen never gets a row
    for j, name in enumerate(split.model_classes):
        g, t = table[name], table["u"]
        oracle = sum(p * q for p, q in zip(g, t)) / math.sqrt(sum(p * p for p in g) * sum(q * q for q in t))
        assert col[j] == pytest.approx(oracle, abs=1e-12)
    assert col[0] >= 0.7 and col[1] >= 0.7
    assert col[2] <= 0.3


def test_similarity_column_ignores_table_order(small):
    split, table = small
    shuffled = EmbeddingTable(table.dim, {k: table[k] for k in reversed(table.classes)})
    for target in ("a", "u"):
        np.testing.assert_array_equal(similarity_column(table, split, target), similarity_column(shuffled, split, target))


def test_similarity_column_unknown(small):
    split, table = small
    with pytest.raises(MissingClass):
        similarity_column(table, split, "ghost")
