import json

import pytest

from config import DEFAULT_CONFIG, config_fingerprint, get, load_config, parse_overrides, query_mode, save_config
from errors import ConfigurationError


@pytest.fixture(autouse=True)
def _no_device_env(monkeypatch):
    monkeypatch.delenv('ORSG_DEVICE', raising=False)


def test_defaults_are_not_shared():
    cfg = load_config()
    cfg['model']['hidden_dim'] = 8
    assert DEFAULT_CONFIG['model']['hidden_dim'] == 256
    assert load_config()['model']['relation']['query_mode'] == 'dynamic'


def test_dotted_overrides():
    assert parse_overrides(['model.entity.num_queries=30', 'loss.relation_mode=literal', 'train.lr=1e-3']) == {
        'model': {'entity': {'num_queries': 30}},
        'loss': {'relation_mode': 'literal'},
        'train': {'lr': 1e-3},
    }
    cfg = load_config(None, ['model.relation.memory=fu_r2_r4', 'model.vst.enabled=false'])
    assert cfg['model']['relation']['memory'] == 'fu_r2_r4'
    assert cfg['model']['vst']['enabled'] is False
    with pytest.raises(ConfigurationError):
        parse_overrides(['model.hidden_dim'])


def test_file_then_overrides(tmp_path):
    path = tmp_path / 'run.json'
    path.write_text(json.dumps({'train': {'epochs': 5, 'seed': 3}}))
    cfg = load_config(path, {'train': {'seed': 9}})
    assert cfg['train']['epochs'] == 5
    assert cfg['train']['seed'] == 9
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / 'missing.json')


def test_unknown_key_is_rejected():
    with pytest.raises(ConfigurationError, match='model.entity.num_querys'):
        load_config(None, {'model': {'entity': {'num_querys': 3}}})
    with pytest.raises(ConfigurationError):
        load_config(None, {'model': {'vst': 1}})


@pytest.mark.parametrize('overrides', [
    {'model': {'heads': 3}},
    {'model': {'relation': {'memory': 'fu_r9'}}},
    {'model': {'relation': {'query_mode': 'fixed:0'}}},
    {'model': {'relation': {'query_mode': 'sometimes'}}},
    {'model': {'points': {'mlp': [64, 128]}}},
    {'model': {'vst': {'kv_views': [1, 2]}}},
    {'loss': {'relation_mode': 'bce'}},
    {'train': {'lr': 0}},
    {'synthetic': {'entities': [4, 2]}},
])
def test_invalid_values(overrides):
    with pytest.raises(ConfigurationError):
        load_config(None, overrides)


def test_query_mode():
    assert query_mode(load_config()) == ('dynamic', None)
    assert query_mode(load_config(None, {'model': {'relation': {'query_mode': 'fixed:20'}}})) == ('fixed', 20)


def test_fingerprint_tracks_model_section_only():
    base = load_config()
    assert config_fingerprint(base) == config_fingerprint(load_config(None, {'train': {'epochs': 3}}))
    assert config_fingerprint(base) != config_fingerprint(load_config(None, {'model': {'heads': 4}}))


def test_device_environment(monkeypatch):
    monkeypatch.setenv('ORSG_DEVICE', 'cpu')
    assert load_config()['train']['device'] == 'cpu'


def test_save_round_trip(tmp_path):
    cfg = load_config(None, {'train': {'seed': 5}})
    save_config(cfg, tmp_path / 'out' / 'config.json')
    assert load_config(tmp_path / 'out' / 'config.json') == cfg
    assert get(cfg, 'train.seed') == 5
    assert get(cfg, 'train.nothing', 'x') == 'x'
