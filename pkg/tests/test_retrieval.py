"""Tests for lite_mind/retrieval.py"""
import json
import logging

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose

from lite_mind.constants import NSD_TEST_STIMULI
from lite_mind.errors import ConfigError, DataError, ShapeError
from lite_mind.retrieval import (
    EmbeddingStore, RetrievalProtocol, chance_level, cosine_sim, eval_pool_retrieval,
    evaluate_zero_shot, export_embeddings, full_rank_retrieval, ridge_oracle, zero_shot_classify,
)
from lite_mind.utils import l2_normalize


def _store(matrix, prefix='s'):
    return EmbeddingStore(ids=[f"{prefix}{i:04d}" for i in range(len(matrix))], matrix=np.asarray(matrix, dtype=float))


def _pair(rng, count, dim, noise):
    images = rng.standard_normal((count, dim))
    voxels = images + noise * rng.standard_normal((count, dim))
    return _store(voxels), _store(images)


class TestCosineSim:
    def test_identical(self):
        assert cosine_sim([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert cosine_sim([1, 0], [0, 1]) == 0.0

    def test_hand_value(self):
        assert cosine_sim([1, 1], [1, 0]) == pytest.approx(1 / np.sqrt(2))

    def test_both_zero_warns(self, caplog):
        with caplog.at_level(logging.WARNING):
            assert cosine_sim([0, 0], [0, 0]) == 0.0
        assert 'zero vectors' in caplog.text

    def test_matches_scalar_loop(self, rng):
        a, b = rng.standard_normal((2, 17))
        dot = sum(x * y for x, y in zip(a, b))
        norms = np.sqrt(sum(x * x for x in a)) * np.sqrt(sum(y * y for y in b))
        assert abs(cosine_sim(a, b) - dot / norms) <= 1e-10

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            cosine_sim([1, 2], [1, 2, 3])


class TestEmbeddingStore:
    def test_duplicate_ids(self):
        with pytest.raises(DataError):
            EmbeddingStore(ids=['a', 'a'], matrix=np.eye(2))

    def test_normalized_flag_checked(self):
        with pytest.raises(DataError):
            EmbeddingStore(ids=['a'], matrix=np.array([[2.0, 0.0]]), normalized=True)

    def test_non_finite_rows(self):
        with pytest.raises(DataError):
            EmbeddingStore(ids=['a'], matrix=np.array([[np.nan, 0.0]]))

    def test_item_shape_roundtrip(self, rng):
        array = rng.standard_normal((3, 2, 4))
        store = EmbeddingStore.from_array(['a', 'b', 'c'], array)
        assert store.dim == 8
        assert_allclose(store.items(), array)
        assert_allclose(store.take(['c', 'a']).matrix, store.matrix[[2, 0]])


class TestProtocol:
    def test_defaults(self):
        protocol = RetrievalProtocol()
        assert (protocol.pool_size, protocol.n_seeds, protocol.top_k) == (300, 30, (1, 5))

    def test_rejects_tiny_pool(self):
        with pytest.raises(ConfigError):
            RetrievalProtocol(pool_size=1)

    def test_chance_levels(self):
        assert chance_level(300) == pytest.approx(0.003333, abs=1e-6)
        assert chance_level(982) == pytest.approx(0.001, abs=2e-5)
        assert chance_level(50) == pytest.approx(0.02)


class TestPoolRetrieval:
    def test_self_retrieval(self, rng):
        store = _store(rng.standard_normal((40, 8)))
        report = eval_pool_retrieval(store, store, RetrievalProtocol(pool_size=10, n_seeds=5))
        assert report.image_retrieval_acc == 1.0
        assert report.brain_retrieval_acc == 1.0

    def test_hand_enumeration(self):
        images = _store(np.eye(3))
        voxels = _store([[1.0, 0.5, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        report = eval_pool_retrieval(voxels, images, RetrievalProtocol(pool_size=3, n_seeds=2))
        assert report.image_retrieval_acc == pytest.approx(2 / 3)
        assert report.brain_retrieval_acc == pytest.approx(1.0)

    def test_ties_count_as_miss(self):
        images = _store(np.eye(2))
        voxels = _store([[1.0, 1.0], [0.0, 1.0]])
        report = eval_pool_retrieval(voxels, images, RetrievalProtocol(pool_size=2, n_seeds=1))
        assert report.image.acc_per_seed == [0.5]

    def test_seed_decomposition_and_reproducibility(self, rng):
        voxels, images = _pair(rng, 60, 6, 1.5)
        protocol = RetrievalProtocol(pool_size=20, n_seeds=7, base_seed=11)
        first = eval_pool_retrieval(voxels, images, protocol)
        second = eval_pool_retrieval(voxels, images, protocol)
        assert first.to_dict() == second.to_dict()
        assert abs(np.mean(first.image.acc_per_seed) - first.image_retrieval_acc) <= 1e-9
        assert len(first.brain.acc_per_seed) == 7

    def test_permutation_invariance(self, rng):
        voxels, images = _pair(rng, 50, 6, 1.5)
        protocol = RetrievalProtocol(pool_size=15, n_seeds=4)
        order = rng.permutation(50)
        shuffled_v = EmbeddingStore(ids=[voxels.ids[i] for i in order], matrix=voxels.matrix[order])
        shuffled_i = EmbeddingStore(ids=[images.ids[i] for i in order], matrix=images.matrix[order])
        base = eval_pool_retrieval(voxels, images, protocol)
        moved = eval_pool_retrieval(shuffled_v, shuffled_i, protocol)
        assert base.image.acc_per_seed == moved.image.acc_per_seed
        assert base.brain.acc_per_seed == moved.brain.acc_per_seed

    def test_scale_invariance(self, rng):
        voxels, images = _pair(rng, 30, 5, 1.0)
        scaled = EmbeddingStore(ids=voxels.ids, matrix=voxels.matrix * rng.uniform(0.1, 10, (30, 1)))
        protocol = RetrievalProtocol(pool_size=10, n_seeds=3)
        assert eval_pool_retrieval(voxels, images, protocol).to_dict() == \
            eval_pool_retrieval(scaled, images, protocol).to_dict()

    def test_pool_larger_than_store(self, rng):
        store = _store(rng.standard_normal((5, 3)))
        with pytest.raises(ShapeError):
            eval_pool_retrieval(store, store, RetrievalProtocol(pool_size=6))

    def test_misaligned_ids(self, rng):
        with pytest.raises(ShapeError):
            eval_pool_retrieval(_store(np.eye(3), 'a'), _store(np.eye(3), 'b'), RetrievalProtocol(pool_size=2))

    def test_pool_beats_full_rank(self, rng):
        voxels, images = _pair(rng, 80, 8, 2.0)
        pool = eval_pool_retrieval(voxels, images, RetrievalProtocol(pool_size=20, n_seeds=5))
        full = full_rank_retrieval(voxels, images)
        assert pool.image_retrieval_acc >= full.topk['image'][1]
        assert pool.brain_retrieval_acc >= full.topk['brain'][1]

    def test_chance_calibration(self, rng):
        voxels = _store(rng.standard_normal((NSD_TEST_STIMULI, 32)))
        images = _store(rng.standard_normal((NSD_TEST_STIMULI, 32)))
        report = eval_pool_retrieval(voxels, images, RetrievalProtocol())
        # per-query hit rates vary with the query's global rank, so the spread is wider than binomial
        assert abs(report.image_retrieval_acc - 1 / 300) <= 0.005
        assert abs(report.brain_retrieval_acc - 1 / 300) <= 0.005
        full = full_rank_retrieval(voxels, images)
        assert full.topk['image'][1] <= 0.006

    def test_report_json(self, rng, tmp_path):
        store = _store(rng.standard_normal((10, 3)))
        report = eval_pool_retrieval(store, store, RetrievalProtocol(pool_size=5, n_seeds=2))
        report.save_json(tmp_path / 'report.json')
        payload = json.loads((tmp_path / 'report.json').read_text())
        directions = payload['directions']
        assert [d['direction'] for d in directions] == ['image', 'brain']
        assert set(directions[0]) == {'direction', 'pool_size', 'n_seeds', 'acc_mean', 'acc_per_seed', 'topk'}
        assert directions[0]['topk'] == {'1': 1.0, '5': 1.0}


class TestFullRank:
    def test_self_ranks(self, rng):
        store = _store(rng.standard_normal((12, 4)))
        report = full_rank_retrieval(store, store)
        assert report.ranks_image.tolist() == [1] * 12
        assert report.ranks_brain.tolist() == [1] * 12

    def test_four_item_hand_case(self):
        images = _store(np.eye(4))
        voxels = _store([
            [1.0, 0.0, 0.0, 0.0],
            [0.9, 0.1, 0.0, 0.0],
            [0.0, 0.0, 0.5, 1.0],
            [0.0, 0.0, 0.0, 1.0],
        ])
        report = full_rank_retrieval(voxels, images, top_k=(1, 2))
        assert report.ranks_image.tolist() == [1, 2, 2, 1]
        assert report.topk['image'] == {1: 0.5, 2: 1.0}

    def test_similarity_csv(self, rng, tmp_path):
        store = _store(rng.standard_normal((3, 2)))
        report = full_rank_retrieval(store, store)
        report.save_similarity_csv(tmp_path / 'sim.csv')
        frame = pd.read_csv(tmp_path / 'sim.csv', index_col='id')
        assert list(frame.columns) == store.ids
        assert_allclose(frame.to_numpy(), report.similarity)


class TestZeroShot:
    def test_class_matching_retrieved_image_ranks_first(self, rng):
        images = _store(rng.standard_normal((6, 5)), 'img')
        classes = EmbeddingStore(ids=['cat', 'dog', 'car'],
                                 matrix=np.vstack([rng.standard_normal(5), images.row('img0003'), rng.standard_normal(5)]))
        ranking = zero_shot_classify(images.row('img0003') * 2.0, images, classes)
        assert ranking[0] == 'dog'
        assert sorted(ranking) == ['car', 'cat', 'dog']

    def test_brute_force_five_classes(self, rng):
        images = _store(rng.standard_normal((20, 6)), 'img')
        classes = _store(rng.standard_normal((5, 6)), 'class')
        queries = rng.standard_normal((15, 6))
        for query in queries:
            best_image, best_score = None, -np.inf
            for item, row in zip(images.ids, images.matrix):
                score = cosine_sim(query, row)
                if score > best_score:
                    best_image, best_score = item, score
            scores = [(cosine_sim(images.row(best_image), row), item) for item, row in zip(classes.ids, classes.matrix)]
            expected = [item for _, item in sorted(scores, key=lambda pair: -pair[0])]
            assert zero_shot_classify(query, images, classes) == expected

    def test_empty_class_store(self, rng):
        images = _store(rng.standard_normal((3, 2)))
        with pytest.raises(DataError):
            zero_shot_classify(np.ones(2), images, EmbeddingStore(ids=[], matrix=np.zeros((0, 2))))

    def _ten_class_setup(self, rng, count=200):
        prototypes = l2_normalize(rng.standard_normal((10, 16)))
        labels = np.arange(count) % 10
        images = _store(prototypes[labels] + 0.05 * rng.standard_normal((count, 16)), 'img')
        classes = EmbeddingStore(ids=[f"c{i}" for i in range(10)], matrix=prototypes)
        truth = {item: f"c{labels[i]}" for i, item in enumerate(images.ids)}
        return images, classes, truth

    def test_noiseless_ten_classes(self, rng):
        images, classes, truth = self._ten_class_setup(rng)
        voxels = EmbeddingStore(ids=images.ids, matrix=images.matrix.copy())
        report = evaluate_zero_shot(voxels, images, classes, truth)
        assert report.topk[1] == 1.0
        assert report.to_dict()['chance_top1'] == pytest.approx(0.1)

    def test_random_queries_near_chance(self, rng):
        images, classes, truth = self._ten_class_setup(rng, count=400)
        voxels = EmbeddingStore(ids=images.ids, matrix=rng.standard_normal((400, 16)))
        report = evaluate_zero_shot(voxels, images, classes, truth)
        assert abs(report.topk[1] - 0.1) <= 3 * np.sqrt(0.09 / 400) + 0.01


class TestRidgeOracle:
    def _linear_task(self, rng, noise, n_train=300, n_test=100):
        mapping = rng.standard_normal((120, 24))
        latents = l2_normalize(rng.standard_normal((n_train + n_test, 24)))
        voxels = latents @ mapping.T + noise * rng.standard_normal((n_train + n_test, 120))
        test = _store(latents[n_train:])
        return voxels[:n_train], latents[:n_train], voxels[n_train:], test

    def test_low_noise_is_solvable(self, rng):
        train_x, train_v, test_x, test_v = self._linear_task(rng, 0.1)
        report = ridge_oracle(train_x, train_v, test_x, test_v, RetrievalProtocol(pool_size=50, n_seeds=5), alpha=1.0)
        assert report.image_retrieval_acc > 0.9
        assert report.brain_retrieval_acc > 0.9

    def test_overwhelming_noise_is_near_chance(self, rng):
        train_x, train_v, test_x, test_v = self._linear_task(rng, 100.0)
        report = ridge_oracle(train_x, train_v, test_x, test_v, RetrievalProtocol(pool_size=50, n_seeds=5), alpha=1.0)
        assert report.image_retrieval_acc < 0.1


def test_export_embeddings(tmp_path, rng):
    voxels = _store(rng.standard_normal((4, 3)))
    images = _store(rng.standard_normal((4, 3)))
    export_embeddings(tmp_path / 'emb.csv', voxels, images)
    frame = pd.read_csv(tmp_path / 'emb.csv')
    assert list(frame.columns) == ['id', 'modality', 'e0', 'e1', 'e2']
    assert frame['modality'].value_counts().to_dict() == {'voxel': 4, 'image': 4}
