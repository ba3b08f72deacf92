import copy

import numpy as np
import pytest
import torch

from config import load_config
from dataset import SyntheticConfig, generate_scene
from geometry import CameraModel

TINY_OVERRIDES = {
    'model': {
        'backbone_widths': [8, 8, 16, 16, 16],
        'hidden_dim': 16,
        'heads': 2,
        'ffn_dim': 32,
        'dropout': 0.0,
        'encoder_layers': 1,
        'min_image_edge': 32,
        'points': {'count': 32, 'group_size': 8, 'radius': 0.5, 'mlp': [16, 16]},
        'entity': {'num_queries': 8, 'decoder_layers': 2},
        'relation': {'decoder_layers': 2, 'mlp_hidden': 32},
    },
    'train': {
        'epochs': 1, 'batch_size': 2, 'device': 'cpu', 'checkpoint_every': 1,
        'min_size': 64, 'max_size': 80, 'eval_size': 64, 'lr': 1e-4,
    },
    'synthetic': {
        'image_size': [64, 96], 'entities': [2, 4], 'floor_points': 64, 'points_per_m2': 60.0,
    },
}


@pytest.fixture
def tiny_cfg(monkeypatch):
    monkeypatch.delenv('ORSG_DEVICE', raising=False)
    return load_config(None, copy.deepcopy(TINY_OVERRIDES))


@pytest.fixture
def syn(tiny_cfg):
    return SyntheticConfig.from_config(tiny_cfg)


@pytest.fixture
def scene(syn):
    """A generated scene with at least two annotated entities."""
    for seed in range(50):
        sample = generate_scene(syn, seed, min_visible=0.25)
        if len(sample.annotations.entities) >= 2:
            return sample
    pytest.fail('no synthetic scene with two visible entities in 50 seeds')


@pytest.fixture
def camera():
    return CameraModel.look_at((0.0, -4.0, 1.5), (0.0, 0.0, 0.5), 60.0, (96, 64))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def double_precision():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)
