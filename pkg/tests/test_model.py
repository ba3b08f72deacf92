import copy
from dataclasses import replace

import pytest
import torch

from config import load_config
from model import SceneGraphModel, prepare_input
from tests.conftest import TINY_OVERRIDES


def _model(overrides=None):
    cfg = copy.deepcopy(TINY_OVERRIDES)
    for section, values in (overrides or {}).items():
        for key, value in values.items():
            cfg.setdefault(section, {}).setdefault(key, {})
            if isinstance(value, dict):
                cfg[section][key].update(value)
            else:
                cfg[section][key] = value
    cfg = load_config(None, cfg)
    torch.manual_seed(0)
    return SceneGraphModel(cfg), cfg


def test_pairs_follow_entity_count(scene):
    model, cfg = _model()
    inp = prepare_input(scene, cfg)
    out = model(inp, extra_indices=[0, 3, 5])
    n = len(out.entity_set)
    assert n >= 3
    assert out.relations.logits.shape == (n * (n - 1), 14)
    assert len(out.relations.layer_logits) == 2
    assert out.bundle.grid == (2, 3)


def test_predict_needs_no_annotations(scene):
    model, cfg = _model()
    graph = model.predict(prepare_input(replace(scene, annotations=None), cfg))
    assert all(0 <= e.subject < len(graph.nodes) and 0 <= e.object < len(graph.nodes) for e in graph.edges)
    assert all(e.subject != e.object for e in graph.edges)
    assert model.training


def test_fixed_mode_pairs_every_query(scene):
    model, cfg = _model({'model': {'relation': {'query_mode': 'fixed:5'}}})
    out = model(prepare_input(scene, cfg))
    assert len(out.entity_set) == 8
    assert out.relations.logits.shape == (5, 14)
    assert out.queries.pair_logits.shape == (56,)


def test_projection_fusion_without_gvc(scene):
    model, cfg = _model({'model': {'gvc': {'enabled': False}}})
    counts = model.stage_parameter_counts()
    assert counts['gvc'] == 0
    out = model(prepare_input(scene, cfg))
    assert out.bundle.f_u.tokens.shape == (6, 16)


def test_stage_counts_cover_every_parameter():
    model, _ = _model()
    counts = model.stage_parameter_counts()
    stages = ('multiview_encoder', 'point_encoder', 'gvc', 'entity_decoder', 'relation')
    assert sum(counts[s] for s in stages) == counts['total']
    assert 0 < counts['backbone'] < counts['multiview_encoder']


@pytest.mark.parametrize('memory, extra', [('fu', 0), ('fu_r2_r4', None)])
def test_memory_variants_run(scene, memory, extra):
    model, cfg = _model({'model': {'relation': {'memory': memory}}})
    out = model(prepare_input(scene, cfg))
    if extra == 0:
        assert out.bundle.memory.tokens.shape[0] == out.bundle.memory.fu_rows
    else:
        assert out.bundle.memory.tokens.shape[0] > out.bundle.memory.fu_rows
