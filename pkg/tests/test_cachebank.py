import math

import numpy as np
import pytest

from rszero import cachebank, dec, tensorcore
from rszero.cachebank import (
    PROVENANCE_PSEUDO,
    PROVENANCE_SEEN,
    augment_unseen,
    build_seen_bank,
    cache_logits,
    load_bank,
    prior_injected_logits,
    save_bank,
)
from rszero.errors import (
    ClassCountMismatch,
    DimMismatch,
    EmptyBank,
    InsufficientInstances,
    MissingUnseenClass,
)
from rszero.tensorcore import EmbeddingMatrix


def two_class_bank():
    instances = {"a": [np.array([1.0, 0.0, 0.0])], "b": [np.array([0.0, 1.0, 0.0])]}
    return build_seen_bank(instances, K=1, class_index_map={"a": 0, "b": 1})


class TestBuildSeenBank:
    def test_orthogonal_identity_values(self):
        bank = two_class_bank()
        assert bank.keys.data.shape == (2, 3)
        assert np.array_equal(bank.values, np.eye(2))
        assert bank.provenance == [PROVENANCE_SEEN, PROVENANCE_SEEN]

    def test_insufficient_instances(self):
        instances = {"a": [np.ones(3)]}
        with pytest.raises(InsufficientInstances) as e:
            build_seen_bank(instances, K=4, class_index_map={"a": 0})
        assert e.value.have == 1
        assert e.value.need == 4

    def test_matches_concatenation_oracle(self):
        rng = np.random.default_rng(61)
        vecs = {name: [rng.normal(size=5) for _ in range(3)] for name in ("x", "y", "z")}
        cmap = {"x": 2, "y": 0, "z": 1}
        bank = build_seen_bank(vecs, K=2, class_index_map=cmap)
        # oracle: classes laid out by ascending column index, first K each
        expected_rows = []
        expected_labels = []
        for name in sorted(cmap, key=cmap.get):
            for v in vecs[name][:2]:
                expected_rows.append(v / np.linalg.norm(v))
                expected_labels.append(cmap[name])
        assert np.allclose(bank.keys.data, np.stack(expected_rows), atol=1e-12)
        assert [int(np.argmax(r)) for r in bank.values] == expected_labels

    def test_takes_first_k_in_input_order(self):
        v1, v2, v3 = np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array([1.0, 1.0])
        bank = build_seen_bank({"a": [v1, v2, v3]}, K=2, class_index_map={"a": 0, "u": 1})
        assert np.allclose(bank.keys.data[0], [1.0, 0.0])
        assert np.allclose(bank.keys.data[1], [0.0, 1.0])

    def test_empty_input(self):
        with pytest.raises(EmptyBank):
            build_seen_bank({}, K=1, class_index_map={"a": 0})

    def test_unknown_class_rejected(self):
        with pytest.raises(ClassCountMismatch):
            build_seen_bank({"q": [np.ones(2)]}, K=1, class_index_map={"a": 0})


class TestAugmentUnseen:
    def make_base(self, K):
        rng = np.random.default_rng(62)
        instances = {
            "s0": [rng.normal(size=4) for _ in range(K)],
            "s1": [rng.normal(size=4) for _ in range(K)],
        }
        cmap = {"s0": 0, "s1": 1, "u0": 2}
        return build_seen_bank(instances, K=K, class_index_map=cmap)

    def test_k4_yields_two_rows_per_unseen(self):
        bank = self.make_base(4)
        pseudo = {"u0": [(np.array([1.0, 1.0, 0.0, 0.0]), 0.9)]}
        out = augment_unseen(bank, pseudo, K=4)
        assert out.P == 2
        assert out.n_rows == 8 + 2
        pseudo_rows = [i for i, p in enumerate(out.provenance) if p == PROVENANCE_PSEUDO]
        assert len(pseudo_rows) == 2
        assert np.array_equal(out.keys.data[pseudo_rows[0]], out.keys.data[pseudo_rows[1]])

    def test_k1_floors_to_one_row(self):
        bank = self.make_base(1)
        out = augment_unseen(bank, {"u0": [(np.ones(4), 0.5)]}, K=1)
        assert out.P == 1
        assert out.n_rows == 2 + 1

    def test_top1_by_score_selected(self):
        bank = self.make_base(2)
        best = np.array([0.0, 0.0, 0.0, 2.0])
        pseudo = {
            "u0": [(np.ones(4), 0.1), (best, 0.95), (np.ones(4), 0.4)]
        }
        out = augment_unseen(bank, pseudo, K=2)
        row = out.keys.data[out.n_rows - 1]
        assert np.allclose(row, best / np.linalg.norm(best))

    def test_missing_unseen_class(self):
        bank = self.make_base(2)
        with pytest.raises(MissingUnseenClass):
            augment_unseen(bank, {}, K=2)

    def test_count_check_labels_over_three_classes(self):
        bank = self.make_base(4)
        out = augment_unseen(bank, {"u0": [(np.ones(4), 1.0)]}, K=4)
        assert out.values.shape == (10, 3)
        assert np.all(out.values.sum(axis=1) == 1.0)


class TestCacheLogits:
    def test_query_equals_key_row(self):
        bank = two_class_bank()
        out = cache_logits(bank, np.array([1.0, 0.0, 0.0]))
        e = math.e
        assert np.allclose(out, [e / (e + 1), 1 / (e + 1)], atol=1e-12)

    def test_identical_keys_give_row_label_distribution(self):
        v = np.array([1.0, 2.0])
        bank = build_seen_bank(
            {"a": [v, v], "b": [v]},
            K=1,
            class_index_map={"a": 0, "b": 1},
        )
        # one row per class here; with identical keys the softmax is uniform
        out = cache_logits(bank, np.array([5.0, -3.0]))
        assert np.allclose(out, [0.5, 0.5], atol=1e-12)

    def test_matches_matrix_multiply_oracle(self):
        rng = np.random.default_rng(63)
        instances = {
            "a": [rng.normal(size=6) for _ in range(4)],
            "b": [rng.normal(size=6) for _ in range(4)],
        }
        bank = build_seen_bank(instances, K=4, class_index_map={"a": 0, "b": 1})
        q = rng.normal(size=6)
        qn = q / np.linalg.norm(q)
        sims = bank.keys.data @ qn
        expect = tensorcore.softmax(sims) @ bank.values
        assert np.allclose(cache_logits(bank, q), expect, atol=1e-12)

    def test_probability_vector(self):
        rng = np.random.default_rng(64)
        bank = build_seen_bank(
            {"a": [rng.normal(size=3) for _ in range(2)],
             "b": [rng.normal(size=3) for _ in range(2)]},
            K=2,
            class_index_map={"a": 0, "b": 1},
        )
        for _ in range(25):
            out = cache_logits(bank, rng.normal(size=3))
            assert np.all(out >= 0)
            assert abs(out.sum() - 1.0) <= 1e-9

    def test_query_scale_invariance(self):
        bank = two_class_bank()
        q = np.array([0.3, 0.9, 0.1])
        assert np.allclose(cache_logits(bank, q), cache_logits(bank, 7.5 * q), atol=1e-12)

    def test_duplicating_whole_bank_preserves_logits(self):
        rng = np.random.default_rng(65)
        instances = {
            "a": [rng.normal(size=4) for _ in range(2)],
            "b": [rng.normal(size=4) for _ in range(2)],
        }
        bank = build_seen_bank(instances, K=2, class_index_map={"a": 0, "b": 1})
        doubled = cachebank.CacheBank(
            keys=EmbeddingMatrix(
                np.vstack([bank.keys.data, bank.keys.data]), normalized=True
            ),
            values=np.vstack([bank.values, bank.values]),
            class_names=bank.class_names,
            K=bank.K * 2,
            P=0,
            provenance=bank.provenance * 2,
        )
        q = rng.normal(size=4)
        assert np.allclose(cache_logits(bank, q), cache_logits(doubled, q), atol=1e-9)

    def test_dim_mismatch(self):
        bank = two_class_bank()
        with pytest.raises(DimMismatch):
            cache_logits(bank, np.ones(5))


class TestPriorInjection:
    def setup_method(self):
        rng = np.random.default_rng(66)
        self.emb = tensorcore.l2_normalize_rows(EmbeddingMatrix(rng.normal(size=(3, 8))))
        self.names = ["a", "b", "u"]
        self.clf = dec.build_naive_classifier(self.emb, self.names)
        instances = {
            "a": [rng.normal(size=8) for _ in range(2)],
            "b": [rng.normal(size=8) for _ in range(2)],
        }
        bank = build_seen_bank(instances, K=2, class_index_map={"a": 0, "b": 1, "u": 2})
        self.bank = augment_unseen(bank, {"u": [(rng.normal(size=8), 0.7)]}, K=2)
        self.rng = rng

    def test_alpha_zero_equals_classify(self):
        q = self.rng.normal(size=8)
        assert np.allclose(
            prior_injected_logits(self.clf, self.bank, q, 0.0),
            dec.classify(self.clf, q),
            atol=1e-12,
        )

    def test_compositional_oracle(self):
        q = self.rng.normal(size=8)
        expect = dec.classify(self.clf, q) + 0.5 * cache_logits(self.bank, q)
        assert np.allclose(
            prior_injected_logits(self.clf, self.bank, q, 0.5), expect, atol=1e-12
        )

    def test_affine_in_alpha(self):
        q = self.rng.normal(size=8)
        l0 = prior_injected_logits(self.clf, self.bank, q, 0.0)
        l1 = prior_injected_logits(self.clf, self.bank, q, 1.0)
        for alpha in (0.25, 0.5, 0.8):
            la = prior_injected_logits(self.clf, self.bank, q, alpha)
            assert np.max(np.abs(la - (l0 + alpha * (l1 - l0)))) <= 1e-9

    def test_refined_classifier_slices_query(self):
        sel = dec.select_top_k(dec.score_channels(self.emb, 0.7), 5)
        refined = dec.build_refined_classifier(self.emb, sel, self.names)
        q = self.rng.normal(size=8)
        expect = dec.classify(refined, q[sel.indices]) + 0.5 * cache_logits(self.bank, q)
        got = prior_injected_logits(refined, self.bank, q, 0.5)
        assert np.allclose(got, expect, atol=1e-12)

    def test_class_count_mismatch(self):
        clf2 = dec.build_naive_classifier(
            EmbeddingMatrix(np.eye(8)[:2], normalized=True), ["a", "b"]
        )
        with pytest.raises(ClassCountMismatch):
            prior_injected_logits(clf2, self.bank, np.ones(8), 0.5)


class TestBankIo:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(67)
        instances = {
            "a": [rng.normal(size=4).astype(np.float32).astype(np.float64) for _ in range(2)],
            "b": [rng.normal(size=4).astype(np.float32).astype(np.float64) for _ in range(2)],
        }
        bank = build_seen_bank(instances, K=2, class_index_map={"a": 0, "b": 1, "u": 2})
        bank = augment_unseen(bank, {"u": [(np.ones(4), 0.9)]}, K=2)
        save_bank(tmp_path / "bank", bank)
        back = load_bank(tmp_path / "bank")
        assert back.K == bank.K
        assert back.P == bank.P
        assert back.class_names == bank.class_names
        assert back.provenance == bank.provenance
        q = rng.normal(size=4)
        assert np.allclose(cache_logits(back, q), cache_logits(bank, q), atol=1e-6)
