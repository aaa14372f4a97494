"""Tests for lite_mind/data_handler.py"""
import json
import struct

import numpy as np
import pytest
import torch

from lite_mind.backbone import BackboneConfig, DftBackbone
from lite_mind.data_handler import (
    DatasetManifest, SyntheticSpec, average_trials, generate_synthetic, load_dataset, read_ids,
    read_parameters, read_tensor, synthetic_latents, write_ids, write_parameters, write_tensor,
)
from lite_mind.errors import (
    BadMagicError, ConfigError, DataError, ShapeError, TruncatedTensorError, UnsupportedDtypeError,
    UnsupportedVersionError,
)
from lite_mind.retrieval import RetrievalProtocol, ridge_oracle
from lite_mind.utils import l2_normalize

F64_2X3 = (b'LMND' + struct.pack('<HBB', 1, 1, 2) + struct.pack('<2Q', 2, 3)
           + struct.pack('<6d', 1.0, 2.0, 3.0, 4.0, 5.0, 6.0))


class TestTensorFile:
    def test_hand_built_fixture(self, tmp_path):
        assert len(F64_2X3) == 72
        path = tmp_path / 'fixture.lmnd'
        path.write_bytes(F64_2X3)
        array = read_tensor(path)
        assert array.dtype == np.float64
        np.testing.assert_array_equal(array, [[1, 2, 3], [4, 5, 6]])

    def test_writer_matches_fixture(self, tmp_path):
        write_tensor(tmp_path / 'out.lmnd', np.arange(1.0, 7.0).reshape(2, 3))
        assert (tmp_path / 'out.lmnd').read_bytes() == F64_2X3

    @pytest.mark.parametrize('dtype', [np.float32, np.float64])
    def test_roundtrip(self, tmp_path, rng, dtype):
        array = rng.standard_normal((3, 4, 5)).astype(dtype)
        write_tensor(tmp_path / 'a.lmnd', array)
        loaded = read_tensor(tmp_path / 'a.lmnd')
        assert loaded.dtype == dtype
        np.testing.assert_array_equal(loaded, array)

    def test_big_endian_input_is_stored_little_endian(self, tmp_path):
        write_tensor(tmp_path / 'be.lmnd', np.arange(1.0, 7.0).reshape(2, 3).astype('>f8'))
        assert (tmp_path / 'be.lmnd').read_bytes() == F64_2X3

    def test_rejects_integer_arrays(self, tmp_path):
        with pytest.raises(UnsupportedDtypeError):
            write_tensor(tmp_path / 'i.lmnd', np.arange(3))

    @pytest.mark.parametrize('corrupt, error', [
        (lambda raw: b'NOPE' + raw[4:], BadMagicError),
        (lambda raw: raw[:4] + struct.pack('<H', 2) + raw[6:], UnsupportedVersionError),
        (lambda raw: raw[:6] + b'\x07' + raw[7:], UnsupportedDtypeError),
        (lambda raw: raw[:12], TruncatedTensorError),
        (lambda raw: raw[:-1], TruncatedTensorError),
        (lambda raw: raw + b'\x00', TruncatedTensorError),
        (lambda raw: raw[:5], TruncatedTensorError),
        (lambda raw: raw[:7] + b'\x03' + raw[8:], TruncatedTensorError),
    ])
    def test_corruption(self, tmp_path, corrupt, error):
        path = tmp_path / 'bad.lmnd'
        path.write_bytes(corrupt(F64_2X3))
        with pytest.raises(error):
            read_tensor(path)

    def test_truncation_reports_sizes(self, tmp_path):
        path = tmp_path / 'short.lmnd'
        path.write_bytes(F64_2X3[:-8])
        with pytest.raises(TruncatedTensorError) as caught:
            read_tensor(path)
        assert (caught.value.expected, caught.value.actual) == (72, 64)

    def test_ids_roundtrip(self, tmp_path):
        write_ids(tmp_path / 'ids.txt', ['a', 'b c', 'd'])
        assert read_ids(tmp_path / 'ids.txt') == ['a', 'b c', 'd']


class TestAverageTrials:
    def test_mean(self):
        np.testing.assert_array_equal(average_trials([np.array([1.0, 2.0]), np.array([3.0, 4.0])]), [2.0, 3.0])

    def test_single_trial(self, rng):
        trial = rng.standard_normal(5)
        np.testing.assert_array_equal(average_trials([trial]), trial)

    def test_empty(self):
        with pytest.raises(DataError):
            average_trials([])

    def test_mismatched(self):
        with pytest.raises(ShapeError):
            average_trials([np.zeros(2), np.zeros(3)])


class TestManifest:
    def test_missing_field(self):
        with pytest.raises(DataError):
            DatasetManifest.from_dict({'subject': 's', 'split': 'train', 'voxel_len': 3})

    def test_bad_split(self):
        with pytest.raises(DataError):
            DatasetManifest.from_dict({'subject': 's', 'split': 'val', 'voxel_len': 3, 'records': []})

    def test_unknown_embedding_kind(self):
        with pytest.raises(DataError):
            DatasetManifest.from_dict({'subject': 's', 'split': 'test', 'voxel_len': 3, 'records': [],
                                       'embeddings': {'audio': {'tensor_file': 'a', 'ids_file': 'b'}}})


class TestLoadDataset:
    def test_test_split_is_averaged(self, synthetic_subject, small_spec):
        dataset = load_dataset(synthetic_subject.test_manifest)
        assert len(dataset.voxels) == small_spec.n_test
        assert dataset.voxels.ids[0] == 'stim00040'
        raw = read_tensor(synthetic_subject.test_manifest.parent / 'voxels_test.lmnd')
        np.testing.assert_allclose(dataset.voxels.matrix[0], raw[:2].mean(axis=0))
        assert dataset.targets('hidden').items().shape == (small_spec.n_test, 3, 4)
        assert dataset.targets('hidden').ids == dataset.voxels.ids

    def test_train_split_keeps_trials(self, synthetic_subject, small_spec):
        dataset = load_dataset(synthetic_subject.train_manifest)
        assert dataset.voxels.matrix.shape == (small_spec.n_pairs, small_spec.voxel_len)
        targets = dataset.targets('cls')
        assert targets.matrix.shape == (small_spec.n_pairs, 4)
        np.testing.assert_array_equal(targets.matrix[3], dataset.cls.row('stim00003'))

    def test_labels_and_classes(self, synthetic_subject):
        dataset = load_dataset(synthetic_subject.test_manifest)
        assert dataset.labels['stim00041'] == 'class001'
        assert dataset.text.ids == [f"class{c:03d}" for c in range(5)]

    def _edit_manifest(self, path, edit):
        payload = json.loads(path.read_text())
        edit(payload)
        path.write_text(json.dumps(payload))

    def test_voxel_length_mismatch(self, synthetic_subject):
        self._edit_manifest(synthetic_subject.test_manifest, lambda m: m.update(voxel_len=31))
        with pytest.raises(ShapeError, match='voxel_len'):
            load_dataset(synthetic_subject.test_manifest)

    def test_missing_file(self, synthetic_subject):
        self._edit_manifest(synthetic_subject.test_manifest,
                            lambda m: m['embeddings']['hidden'].update(tensor_file='gone.lmnd'))
        with pytest.raises(DataError, match='embeddings.hidden.tensor_file'):
            load_dataset(synthetic_subject.test_manifest)

    def test_unknown_stimulus(self, synthetic_subject):
        self._edit_manifest(synthetic_subject.train_manifest,
                            lambda m: m['records'][0].update(stimulus_id='ghost'))
        with pytest.raises(DataError, match='ghost'):
            load_dataset(synthetic_subject.train_manifest)

    def test_trial_index_out_of_range(self, synthetic_subject):
        self._edit_manifest(synthetic_subject.train_manifest,
                            lambda m: m['records'][0].update(trial_index=10_000))
        with pytest.raises(DataError):
            load_dataset(synthetic_subject.train_manifest)


class TestSynthetic:
    def test_byte_identical_regeneration(self, tmp_path, small_spec):
        first = generate_synthetic(small_spec, tmp_path / 'a').train_manifest.parent
        second = generate_synthetic(small_spec, tmp_path / 'b').train_manifest.parent
        names = sorted(p.name for p in first.iterdir())
        assert names == sorted(p.name for p in second.iterdir())
        for name in names:
            assert (first / name).read_bytes() == (second / name).read_bytes(), name

    def test_latents_depend_on_map_seed_only(self, small_spec):
        other = SyntheticSpec(**{**small_spec.to_dict(), 'noise_seed': 99, 'noise_sigma': 5.0})
        np.testing.assert_array_equal(synthetic_latents(small_spec).embeddings, synthetic_latents(other).embeddings)

    def test_noiseless_pairs_are_recoverable(self, synthetic_subject, small_spec):
        latents = synthetic_latents(small_spec)
        dataset = load_dataset(synthetic_subject.test_manifest)
        recovered = dataset.voxels.matrix @ np.linalg.pinv(latents.mapping).T
        hidden = dataset.targets('hidden')
        scores = l2_normalize(recovered) @ l2_normalize(hidden.matrix.astype(np.float64)).T
        assert (np.argmax(scores, axis=1) == np.arange(len(hidden))).all()

    def test_overwhelming_noise_is_near_chance(self, tmp_path):
        spec = SyntheticSpec(n_pairs=300, n_test=100, voxel_len=200, embed_shape=(4, 8), noise_sigma=100.0)
        output = generate_synthetic(spec, tmp_path)
        train, test = load_dataset(output.train_manifest), load_dataset(output.test_manifest)
        report = ridge_oracle(train.voxels.matrix, train.targets('hidden').matrix, test.voxels.matrix,
                              test.targets('hidden'), RetrievalProtocol(pool_size=50, n_seeds=5))
        assert report.image_retrieval_acc < 0.1

    def test_bad_spec(self):
        with pytest.raises(ConfigError):
            SyntheticSpec(embed_shape=(4,))

    def test_patch_map_is_scaled_isometry(self):
        spec = SyntheticSpec(n_pairs=10, n_test=5, voxel_len=64, embed_shape=(2, 4), map_kind='patch', map_patch=8)
        latents = synthetic_latents(spec)
        assert latents.mapping.shape == (64, 8)
        np.testing.assert_allclose(latents.mapping.T @ latents.mapping, 64.0 * np.eye(8), atol=1e-10)
        block = latents.mapping[8:16, 4:8]
        np.testing.assert_allclose(block, 8.0 * latents.token_mix[1, 1] * latents.channel_mix, atol=1e-12)

    def test_patch_map_truncates_last_patch(self):
        spec = SyntheticSpec(n_pairs=10, n_test=5, voxel_len=60, embed_shape=(2, 4), map_kind='patch', map_patch=8)
        assert synthetic_latents(spec).mapping.shape == (60, 8)

    @pytest.mark.parametrize('settings', [
        {'map_kind': 'sparse'},
        {'map_kind': 'patch', 'map_patch': 3},
        {'map_kind': 'patch', 'map_patch': 64},
    ])
    def test_bad_patch_map(self, settings):
        with pytest.raises(ConfigError):
            SyntheticSpec(voxel_len=64, embed_shape=(2, 4), **settings)


class TestParameterFiles:
    def test_roundtrip(self, tmp_path, tiny_config):
        source = DftBackbone(tiny_config, seed=1)
        entries = write_parameters(source, tmp_path)
        target = DftBackbone(tiny_config, seed=2)
        read_parameters(target, tmp_path, entries)
        for (name, a), (_, b) in zip(source.named_parameters(), target.named_parameters()):
            assert torch.equal(a, b), name
        assert entries[0]['file'] == 'params/000_embedder.proj.lmnd'

    def test_order_mismatch(self, tmp_path, tiny_config):
        model = DftBackbone(tiny_config)
        entries = write_parameters(model, tmp_path)
        with pytest.raises(DataError):
            read_parameters(model, tmp_path, list(reversed(entries)))

    def test_shape_mismatch(self, tmp_path, tiny_config):
        entries = write_parameters(DftBackbone(tiny_config), tmp_path)
        wider = BackboneConfig(**{**tiny_config.to_dict(), 'voxel_len': 12})
        with pytest.raises(ShapeError):
            read_parameters(DftBackbone(wider), tmp_path, entries)
