import numpy as np
import pytest

from rszero import dec, tensorcore
from rszero.dec import (
    average_prompt_templates,
    build_naive_classifier,
    build_refined_classifier,
    classify,
    score_channels,
    select_top_k,
)
from rszero.errors import (
    DimMismatch,
    EmptyTemplateList,
    KOutOfRange,
    ShapeMismatch,
    TooFewClasses,
)
from rszero.tensorcore import EmbeddingMatrix


def brute_force_scores(x, lam):
    """Independent oracle: explicit double loop over ordered class pairs."""
    n, d = x.shape
    s = np.zeros(d)
    for i in range(n):
        for j in range(n):
            if i != j:
                s += x[i] * x[j]
    s /= n * (n - 1)
    mean = x.mean(axis=0)
    v = np.zeros(d)
    for i in range(n):
        v += (x[i] - mean) ** 2
    v /= n
    return s, v, -lam * s + (1 - lam) * v


class TestScoreChannels:
    def test_identical_rows_closed_form(self):
        m = EmbeddingMatrix(np.array([[1.0, 0.0], [1.0, 0.0]]))
        sc = score_channels(m, 0.7)
        assert np.max(np.abs(sc.S - [1.0, 0.0])) <= 1e-12
        assert np.max(np.abs(sc.V - [0.0, 0.0])) <= 1e-12
        assert np.max(np.abs(sc.O - [-0.7, 0.0])) <= 1e-12

    def test_orthogonal_rows_closed_form(self):
        m = EmbeddingMatrix(np.array([[1.0, 0.0], [0.0, 1.0]]))
        sc = score_channels(m, 0.7)
        assert np.max(np.abs(sc.S - [0.0, 0.0])) <= 1e-12
        assert np.max(np.abs(sc.V - [0.25, 0.25])) <= 1e-12
        assert np.max(np.abs(sc.O - [0.075, 0.075])) <= 1e-12

    def test_matches_pairwise_loop_oracle(self):
        rng = np.random.default_rng(21)
        m = tensorcore.l2_normalize_rows(EmbeddingMatrix(rng.normal(size=(4, 8))))
        sc = score_channels(m, 0.7)
        s, v, o = brute_force_scores(m.data, 0.7)
        assert np.allclose(sc.S, s, atol=1e-12)
        assert np.allclose(sc.V, v, atol=1e-12)
        assert np.allclose(sc.O, o, atol=1e-12)

    def test_normalizes_unnormalized_input(self):
        rng = np.random.default_rng(22)
        raw = rng.normal(size=(5, 6)) * 3.0
        sc1 = score_channels(EmbeddingMatrix(raw), 0.5)
        sc2 = score_channels(tensorcore.l2_normalize_rows(EmbeddingMatrix(raw)), 0.5)
        assert np.allclose(sc1.O, sc2.O, atol=1e-12)

    def test_too_few_classes(self):
        with pytest.raises(TooFewClasses):
            score_channels(EmbeddingMatrix(np.array([[1.0, 0.0]])), 0.7)

    def test_sum_of_s_is_mean_pairwise_cosine(self):
        rng = np.random.default_rng(23)
        m = tensorcore.l2_normalize_rows(EmbeddingMatrix(rng.normal(size=(6, 10))))
        sc = score_channels(m, 0.7)
        x = m.data
        n = x.shape[0]
        total = 0.0
        for i in range(n):
            for j in range(n):
                if i != j:
                    total += float(x[i] @ x[j])
        assert abs(sc.S.sum() - total / (n * (n - 1))) <= 1e-9

    def test_s_bounded_on_normalized_input(self):
        rng = np.random.default_rng(24)
        m = tensorcore.l2_normalize_rows(EmbeddingMatrix(rng.normal(size=(5, 9))))
        sc = score_channels(m, 0.7)
        assert np.all(sc.S >= -1.0 - 1e-12)
        assert np.all(sc.S <= 1.0 + 1e-12)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(25)
        m = tensorcore.l2_normalize_rows(EmbeddingMatrix(rng.normal(size=(5, 7))))
        perm = rng.permutation(5)
        sc1 = score_channels(m, 0.6)
        sc2 = score_channels(EmbeddingMatrix(m.data[perm], normalized=True), 0.6)
        assert np.allclose(sc1.O, sc2.O, atol=1e-12)


class TestSelectTopK:
    def test_identical_rows_case(self):
        m = EmbeddingMatrix(np.array([[1.0, 0.0], [1.0, 0.0]]))
        sel = select_top_k(score_channels(m, 0.7), 1)
        assert sel.indices == [1]

    def test_tie_broken_by_lower_index(self):
        m = EmbeddingMatrix(np.array([[1.0, 0.0], [0.0, 1.0]]))
        sel = select_top_k(score_channels(m, 0.7), 1)
        assert sel.indices == [0]

    def test_k_equals_d_is_permutation(self):
        rng = np.random.default_rng(26)
        m = tensorcore.l2_normalize_rows(EmbeddingMatrix(rng.normal(size=(4, 12))))
        sel = select_top_k(score_channels(m, 0.7), 12)
        assert sorted(sel.indices) == list(range(12))

    def test_prefix_property(self):
        rng = np.random.default_rng(27)
        m = tensorcore.l2_normalize_rows(EmbeddingMatrix(rng.normal(size=(4, 10))))
        sc = score_channels(m, 0.7)
        for k in range(1, 10):
            a = select_top_k(sc, k).indices
            b = select_top_k(sc, k + 1).indices
            assert b[: len(a)] == a

    def test_k_out_of_range(self):
        m = EmbeddingMatrix(np.array([[1.0, 0.0], [0.0, 1.0]]))
        sc = score_channels(m, 0.7)
        with pytest.raises(KOutOfRange):
            select_top_k(sc, 0)
        with pytest.raises(KOutOfRange):
            select_top_k(sc, 3)

    def test_lambda_one_sorts_by_ascending_similarity(self):
        rng = np.random.default_rng(28)
        m = tensorcore.l2_normalize_rows(EmbeddingMatrix(rng.normal(size=(5, 9))))
        sc = score_channels(m, 1.0)
        got = select_top_k(sc, 9).indices
        expect = sorted(range(9), key=lambda i: (sc.S[i], i))
        assert got == expect

    def test_lambda_zero_sorts_by_descending_variance(self):
        rng = np.random.default_rng(29)
        m = tensorcore.l2_normalize_rows(EmbeddingMatrix(rng.normal(size=(5, 9))))
        sc = score_channels(m, 0.0)
        got = select_top_k(sc, 9).indices
        expect = sorted(range(9), key=lambda i: (-sc.V[i], i))
        assert got == expect


class TestClassifier:
    def test_slicing_renormalizes(self):
        m = EmbeddingMatrix(np.array([[1.0, 0.0, 1.0, 0.0], [0.0, 2.0, 1.0, 2.0]]))
        sel = dec.ChannelSelection(indices=[0, 2], k=2, source_D=4)
        clf = build_refined_classifier(m, sel, ["a", "b"])
        norms = np.linalg.norm(clf.weights.data, axis=1)
        assert np.allclose(norms, 1.0)
        assert clf.weights.data.shape == (2, 2)

    def test_paper_operating_point_shapes(self):
        # 768-channel text embeddings refined to the default 300 channels
        rng = np.random.default_rng(30)
        m = tensorcore.l2_normalize_rows(EmbeddingMatrix(rng.normal(size=(8, 768))))
        sel = select_top_k(score_channels(m, 0.7), 300)
        clf = build_refined_classifier(m, sel, [f"c{i}" for i in range(8)])
        assert clf.weights.data.shape == (8, 300)
        assert clf.selection.k == 300

    def test_full_selection_matches_naive_argmax(self):
        rng = np.random.default_rng(31)
        m = tensorcore.l2_normalize_rows(EmbeddingMatrix(rng.normal(size=(5, 12))))
        names = [f"c{i}" for i in range(5)]
        sel = select_top_k(score_channels(m, 0.7), 12)
        refined = build_refined_classifier(m, sel, names)
        naive = build_naive_classifier(m, names)
        for _ in range(20):
            q = rng.normal(size=12)
            z_ref = classify(refined, q[sel.indices])
            z_naive = classify(naive, q)
            assert np.argmax(z_ref) == np.argmax(z_naive)
            assert np.allclose(np.sort(z_ref), np.sort(z_naive), atol=1e-9)

    def test_query_equal_to_row_scores_one(self):
        rng = np.random.default_rng(32)
        m = tensorcore.l2_normalize_rows(EmbeddingMatrix(rng.normal(size=(4, 6))))
        clf = build_naive_classifier(m, list("abcd"))
        z = classify(clf, m.data[2])
        assert abs(z[2] - 1.0) <= 1e-12
        assert np.argmax(z) == 2

    def test_orthogonal_query_scores_zero(self):
        m = EmbeddingMatrix(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), normalized=True)
        clf = build_naive_classifier(m, ["a", "b"])
        z = classify(clf, np.array([0.0, 0.0, 5.0]))
        assert np.allclose(z, 0.0)

    def test_matches_dot_product_oracle(self):
        rng = np.random.default_rng(33)
        m = tensorcore.l2_normalize_rows(EmbeddingMatrix(rng.normal(size=(6, 9))))
        clf = build_naive_classifier(m, [f"c{i}" for i in range(6)])
        q = rng.normal(size=9)
        qn = q / np.linalg.norm(q)
        expect = np.array([float(m.data[i] @ qn) for i in range(6)])
        assert np.allclose(classify(clf, q), expect, atol=1e-12)

    def test_dim_mismatch(self):
        m = EmbeddingMatrix(np.eye(2), normalized=True)
        clf = build_naive_classifier(m, ["a", "b"])
        with pytest.raises(DimMismatch):
            classify(clf, np.array([1.0, 2.0, 3.0]))

    def test_selection_dim_mismatch(self):
        m = EmbeddingMatrix(np.eye(3), normalized=True)
        sel = dec.ChannelSelection(indices=[0], k=1, source_D=4)
        with pytest.raises(DimMismatch):
            build_refined_classifier(m, sel, list("abc"))


class TestTemplateAveraging:
    def test_single_template_identity(self):
        rng = np.random.default_rng(34)
        m = tensorcore.l2_normalize_rows(EmbeddingMatrix(rng.normal(size=(3, 5))))
        out = average_prompt_templates([m])
        assert np.allclose(out.data, m.data, atol=1e-12)

    def test_two_identical_templates(self):
        rng = np.random.default_rng(35)
        m = tensorcore.l2_normalize_rows(EmbeddingMatrix(rng.normal(size=(3, 5))))
        out = average_prompt_templates([m, m])
        assert np.allclose(out.data, m.data, atol=1e-12)

    def test_symmetric_pair(self):
        a = EmbeddingMatrix(np.array([[1.0, 0.0]]))
        b = EmbeddingMatrix(np.array([[0.0, 1.0]]))
        out = average_prompt_templates([a, b])
        assert np.allclose(out.data, [[0.7071, 0.7071]], atol=1e-4)

    def test_empty_list(self):
        with pytest.raises(EmptyTemplateList):
            average_prompt_templates([])

    def test_shape_mismatch(self):
        a = EmbeddingMatrix(np.eye(2))
        b = EmbeddingMatrix(np.eye(3))
        with pytest.raises(ShapeMismatch):
            average_prompt_templates([a, b])


class TestSelectionJson:
    def test_round_trip(self):
        sel = dec.ChannelSelection(indices=[3, 1, 2], k=3, source_D=5)
        back = dec.ChannelSelection.from_json_dict(sel.to_json_dict())
        assert back == sel
