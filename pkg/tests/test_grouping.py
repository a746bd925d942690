import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from styleaware.errors import ClassifierError, GroupingError
from styleaware.grouping import (
    ArtistClassifier,
    ClassifierSpec,
    EmbeddingIndex,
    build_embedding_index,
    build_style_set,
    distance,
    distance_matrix,
    embed,
    order_statistic_index,
    predict,
    quantile_threshold,
    train_artist_classifier,
)
from styleaware.synthetic import make_artist_corpus

import oracles


def random_index(m, f=16, seed=0):
    rng = np.random.default_rng(seed)
    return EmbeddingIndex([f"e{i}" for i in range(m)], rng.normal(size=(m, f)))


def three_clusters(per=10, seed=0):
    rng = np.random.default_rng(seed)
    centres = np.eye(3, 8) * 10
    vecs = np.concatenate([c + 0.1 * rng.normal(size=(per, 8)) for c in centres])
    ids = [f"{name}{i}" for name in "ABC" for i in range(per)]
    return EmbeddingIndex(ids, vecs)


class TestDistance:
    def test_closed_forms(self):
        assert distance([1, 2, 3], [1, 2, 3]) == pytest.approx(0.0, abs=1e-15)
        assert distance([1, 0], [0, 1]) == 1.0
        assert distance([1, -2], [-1, 2]) == pytest.approx(2.0, abs=1e-12)

    def test_zero_vector(self):
        with pytest.raises(GroupingError):
            distance([0, 0], [1, 0])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.lists(st.floats(-5, 5), min_size=3, max_size=3))
    def test_symmetric_and_bounded(self, a, b):
        if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
            return
        d = distance(a, b)
        assert 0.0 <= d <= 2.0
        assert d == distance(b, a)

    def test_matrix_matches_pairwise(self):
        v = np.random.default_rng(1).normal(size=(12, 5))
        d = distance_matrix(v)
        assert (np.diag(d) == 0).all()
        assert (d == d.T).all()
        for i in range(12):
            for j in range(12):
                if i != j:
                    assert abs(d[i, j] - oracles.cosine_distance(v[i], v[j])) < 1e-12


class TestQuantile:
    def test_five_points_smallest(self):
        index = random_index(5)
        d = oracles.all_pair_distances(index.vectors.astype(np.float64))
        assert len(d) == 10
        assert quantile_threshold(index, 0.10) == pytest.approx(min(d), abs=1e-12)

    def test_identical_points(self):
        index = EmbeddingIndex(list("abcd"), np.ones((4, 3)))
        assert quantile_threshold(index, 0.5) == 0.0

    def test_order_statistic_index_decimal(self):
        assert order_statistic_index(0.1, 11) == 1
        assert order_statistic_index(0.3, 11) == 3
        assert order_statistic_index(0.05, 4951) == 247

    @pytest.mark.parametrize("q", [0.05, 0.10, 0.20, 0.5])
    def test_matches_enumeration(self, q):
        index = random_index(100, seed=5)
        ref = oracles.lower_quantile(oracles.all_pair_distances(index.vectors), q)
        assert quantile_threshold(index, q) == pytest.approx(ref, abs=1e-12)

    def test_bad_q(self):
        with pytest.raises(GroupingError):
            quantile_threshold(random_index(5), 1.0)

    def test_sampled_when_over_cap(self):
        index = random_index(60, seed=2)
        exact = quantile_threshold(index, 0.2)
        sampled = quantile_threshold(index, 0.2, max_pairs=1000, seed=1)
        assert sampled == quantile_threshold(index, 0.2, max_pairs=1000, seed=1)
        assert abs(sampled - exact) < 0.1


class TestStyleSet:
    def test_three_clusters(self):
        index = three_clusters()
        s = build_style_set("A3", index, threshold=0.5)
        assert sorted(s.member_ids) == sorted(f"A{i}" for i in range(10))

    def test_only_query(self):
        index = three_clusters()
        s = build_style_set("B0", index, threshold=0.0)
        assert s.member_ids == ["B0"]

    def test_unknown_query(self):
        with pytest.raises(GroupingError):
            build_style_set("nope", three_clusters())

    @settings(max_examples=15, deadline=None)
    @given(m=st.integers(3, 60), seed=st.integers(0, 1000), q=st.sampled_from([0.05, 0.1, 0.2]))
    def test_brute_force_membership(self, m, seed, q):
        index = random_index(m, f=6, seed=seed)
        vecs = index.vectors.astype(np.float64)
        t = oracles.lower_quantile(oracles.all_pair_distances(vecs), q)
        query = seed % m
        expect = [index.ids[j] for j in range(m) if j == query or oracles.cosine_distance(vecs[query], vecs[j]) < t]
        got = build_style_set(index.ids[query], index, q)
        assert got.threshold == pytest.approx(t, abs=1e-12)
        assert got.member_ids == expect

    def test_nested_in_q(self):
        index = random_index(80, seed=9)
        sets = [set(build_style_set("e4", index, q).member_ids) for q in (0.05, 0.10, 0.20)]
        assert sets[0] <= sets[1] <= sets[2]


class TestIndexFile:
    def test_round_trip(self, tmp_path):
        index = EmbeddingIndex(["a", "ü/ß.png", "c"], np.random.default_rng(0).normal(size=(3, 7)))
        index.save(tmp_path / "x.idx")
        back = EmbeddingIndex.load(tmp_path / "x.idx")
        assert back.ids == index.ids
        assert np.array_equal(back.vectors, index.vectors)

    def test_layout(self, tmp_path):
        EmbeddingIndex(["ab", "c"], np.ones((2, 3))).save(tmp_path / "x.idx")
        raw = (tmp_path / "x.idx").read_bytes()
        assert raw[:8] == b"SAEMBIDX"
        assert raw[8:20] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
        assert raw[20:26] == (2).to_bytes(4, "little") + b"ab"
        assert len(raw) == 20 + 6 + 5 + 4 * 6

    def test_truncated(self, tmp_path):
        EmbeddingIndex(["a", "b"], np.ones((2, 3))).save(tmp_path / "x.idx")
        data = (tmp_path / "x.idx").read_bytes()
        (tmp_path / "y.idx").write_bytes(data[:-3])
        with pytest.raises(GroupingError):
            EmbeddingIndex.load(tmp_path / "y.idx")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "z.idx").write_bytes(b"garbage" * 4)
        with pytest.raises(GroupingError):
            EmbeddingIndex.load(tmp_path / "z.idx")

    def test_validation(self):
        with pytest.raises(GroupingError):
            EmbeddingIndex(["a", "a"], np.ones((2, 2)))
        with pytest.raises(GroupingError):
            EmbeddingIndex(["a", "b"], np.array([[1.0, 0.0], [0.0, 0.0]]))


class TestClassifier:
    def test_separable_corpus(self, artist_classifier):
        assert artist_classifier.holdout_accuracy >= 0.95

    def test_one_class(self):
        with pytest.raises(ClassifierError):
            train_artist_classifier({"only": [torch.rand(3, 32, 32)]}, ClassifierSpec(0.0625, 32))

    def test_empty_class(self):
        with pytest.raises(ClassifierError):
            train_artist_classifier({"a": [torch.rand(3, 32, 32)], "b": []}, ClassifierSpec(0.0625, 32))

    def test_untrained_embed(self):
        clf = ArtistClassifier(ClassifierSpec(0.0625, 32), ["a", "b"])
        with pytest.raises(ClassifierError):
            embed(torch.rand(3, 32, 32), clf)

    def test_deterministic_training(self):
        corpus = make_artist_corpus(6, size=32, seed=2)
        spec = ClassifierSpec(0.0625, 32)
        a = train_artist_classifier(corpus, spec, epochs=2, seed=4)
        b = train_artist_classifier(corpus, spec, epochs=2, seed=4)
        img = corpus["artist_a"][0]
        assert np.array_equal(embed(img, a), embed(img, b))

    def test_embedding_properties(self, artist_classifier):
        img = torch.rand(3, 40, 24)
        v1, v2 = embed(img, artist_classifier), embed(img, artist_classifier)
        assert v1.shape == (artist_classifier.spec.feature_width,)
        assert np.array_equal(v1, v2)
        both = embed([torch.zeros(3, 32, 32), torch.ones(3, 32, 32)], artist_classifier)
        assert both.shape[0] == 2 and np.isfinite(both).all()

    def test_full_width_feature_is_4096(self):
        assert ClassifierSpec().feature_width == 4096

    def test_save_load(self, artist_classifier, tmp_path):
        artist_classifier.save(tmp_path / "clf.pt")
        back = ArtistClassifier.load(tmp_path / "clf.pt")
        imgs = [torch.rand(3, 32, 32) for _ in range(3)]
        assert np.array_equal(predict(back, imgs), predict(artist_classifier, imgs))
        assert back.holdout_accuracy == artist_classifier.holdout_accuracy

    def test_index_from_images(self, artist_classifier):
        images = {f"im{i}": torch.rand(3, 32, 32) for i in range(4)}
        index = build_embedding_index(images, artist_classifier)
        assert index.ids == list(images)
        assert index.vectors.shape == (4, artist_classifier.spec.feature_width)


def test_corrupt_classifier_file(tmp_path):
    (tmp_path / "clf.pt").write_bytes(b"nope")
    with pytest.raises(ClassifierError):
        ArtistClassifier.load(tmp_path / "clf.pt")
