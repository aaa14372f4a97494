"""Shared fixtures"""
import numpy as np
import pytest
import torch

from lite_mind.backbone import BackboneConfig
from lite_mind.data_handler import SyntheticSpec, generate_synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return BackboneConfig(voxel_len=10, patch_size=2, embed_dim=4, depth=2, filter_count=2,
                          out_tokens=3, out_dim=4)


@pytest.fixture
def tiny_cls_config():
    return BackboneConfig(voxel_len=10, patch_size=2, embed_dim=4, depth=1, filter_count=2,
                          out_tokens=1, out_dim=4, variant='cls')


@pytest.fixture
def small_spec():
    return SyntheticSpec(n_pairs=40, n_test=20, voxel_len=30, embed_shape=(3, 4), noise_sigma=0.0,
                         map_seed=3, noise_seed=4, class_count=5, class_spread=0.1, test_trials=2)


@pytest.fixture
def synthetic_subject(tmp_path, small_spec):
    return generate_synthetic(small_spec, tmp_path / 'subject')


@pytest.fixture(autouse=True)
def _single_thread():
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(threads)
