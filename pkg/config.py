"""
Hierarchical run configuration.

Configs are JSON documents merged over DEFAULT_CONFIG; every key has a default here.
Dotted overrides (``model.entity.num_queries=30``) are accepted on the command line.
"""

import copy
import hashlib
import json
import os
from pathlib import Path

from errors import ConfigurationError

MEMORY_VARIANTS = {
    'fu': (),
    'fu_r4': (4,),
    'fu_r2_r4': (2, 4),
    'fu_r2_r3_r4': (2, 3, 4),
}

DEFAULT_CONFIG = {
    'model': {
        'backbone': 'toy',           # toy | resnet50-like
        'backbone_widths': [32, 64, 128, 256, 256],
        'hidden_dim': 256,
        'heads': 8,
        'ffn_dim': 2048,
        'dropout': 0.1,
        'activation': 'relu',
        'encoder_layers': 6,
        'encode_aux_views': True,    # false: only the query view goes through the encoder
        'min_image_edge': 64,
        'vst': {
            'enabled': True,
            'query_view': 1,         # 1-based view numbers, View#1 is the main view
            'kv_views': [2, 3, 4],
        },
        'points': {
            'count': 1024,
            'radius': 0.4,
            'group_size': 32,
            'levels': 1,
            'mlp': [64, 128, 256],
        },
        'gvc': {
            'enabled': True,
            'sa_layers': 1,
            'use_pos': True,
        },
        'entity': {
            'num_queries': 20,
            'decoder_layers': 6,
            'num_classes': 12,
            'score_threshold': 0.5,
            'nms_iou': 0.7,
            'class_wise_nms': True,
        },
        'relation': {
            'memory': 'fu_r4',
            'threshold': 0.5,
            'query_mode': 'dynamic',  # dynamic | fixed:K
            'decoder_layers': 6,
            'num_predicates': 14,
            'mlp_hidden': 512,
            'use_spatial': True,
            'use_points': True,
            'train_pairing': 'matched',  # matched | filtered
        },
    },
    'loss': {
        'lambda': 1.0,
        'relation_mode': 'standard',  # standard | literal
        'focal': {'alpha': 0.25, 'gamma': 2.0},
        'match_weights': [2.0, 5.0, 2.0],
        'entity_weights': [2.0, 5.0, 2.0],
        'aux': True,
    },
    'train': {
        'epochs': 80,
        'lr': 5e-5,
        'weight_decay': 1e-4,
        'batch_size': 2,
        'seed': 42,
        'device': 'auto',
        'checkpoint_every': 10,
        'grad_clip': 0.1,
        'lr_drop': 0,                 # epochs between step decays, 0 disables
        'lr_gamma': 0.1,
        'min_size': 480,
        'max_size': 800,
        'eval_size': 480,
        'flip_prob': 0.5,
        'jitter': 0.2,
        'num_workers': 0,
    },
    'data': {
        'min_visible': 0.25,
        'image_mean': [0.485, 0.456, 0.406],
        'image_std': [0.229, 0.224, 0.225],
    },
    'synthetic': {
        'entities': [3, 6],
        'classes': [],                # empty: the full entity vocabulary
        'close_to': 1.0,
        'lying_on_overlap': 0.5,
        'lying_on_gap': 0.05,
        'holding_radius': 0.15,
        'touching_gap': 0.02,
        'adjacent_prob': 0.3,
        'point_noise': 0.01,
        'points_per_m2': 400.0,
        'floor_points': 512,
        'image_size': [480, 640],     # H, W
        'room': [6.0, 6.0],
        'max_retries': 200,
        'seed': 0,
    },
    'eval': {
        'iou': 0.5,
        'recall_k': 50,
    },
}


def _deep_merge(base, update, prefix=''):
    for key, value in update.items():
        dotted = f'{prefix}{key}'
        if key not in base:
            raise ConfigurationError(f'unknown configuration key: {dotted}')
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigurationError(f'{dotted} must be a mapping')
            _deep_merge(base[key], value, prefix=f'{dotted}.')
        else:
            base[key] = value
    return base


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(items):
    """['a.b=1', 'c=x'] -> nested dict."""
    nested = {}
    for item in items or []:
        if '=' not in item:
            raise ConfigurationError(f'override must look like key=value: {item}')
        key, raw = item.split('=', 1)
        node = nested
        parts = key.strip().split('.')
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = _parse_value(raw.strip())
    return nested


def get(cfg, dotted, default=None):
    node = cfg
    for part in dotted.split('.'):
        if not isinstance(node, dict) or part not in node:
            return default
        node = node[part]
    return node


def query_mode(cfg):
    """('dynamic', None) or ('fixed', K)."""
    mode = get(cfg, 'model.relation.query_mode', 'dynamic')
    if mode == 'dynamic':
        return 'dynamic', None
    if isinstance(mode, str) and mode.startswith('fixed:'):
        try:
            k = int(mode.split(':', 1)[1])
        except ValueError:
            raise ConfigurationError(f'model.relation.query_mode: bad K in {mode!r}')
        if k < 1:
            raise ConfigurationError('model.relation.query_mode: K must be >= 1')
        return 'fixed', k
    raise ConfigurationError(f'model.relation.query_mode must be dynamic or fixed:K, got {mode!r}')


def validate_config(cfg):
    model = cfg['model']
    if model['backbone'] not in ('toy', 'resnet50-like'):
        raise ConfigurationError(f"model.backbone must be toy or resnet50-like, got {model['backbone']!r}")
    width, heads = model['hidden_dim'], model['heads']
    if heads < 1 or width % heads != 0:
        raise ConfigurationError(f'model.heads ({heads}) must divide model.hidden_dim ({width})')
    if width % 4 != 0:
        raise ConfigurationError('model.hidden_dim must be divisible by 4 for the sine encoding')
    views = [model['vst']['query_view']] + list(model['vst']['kv_views'])
    if any(v not in (1, 2, 3, 4) for v in views) or len(set(views)) != len(views):
        raise ConfigurationError(f'model.vst views must be distinct view numbers in 1..4, got {views}')
    if model['vst']['enabled'] and not model['vst']['kv_views']:
        raise ConfigurationError('model.vst.kv_views is empty while VST is enabled')
    if model['points']['count'] < 1 or model['points']['radius'] <= 0:
        raise ConfigurationError('model.points.count must be >= 1 and model.points.radius > 0')
    if model['points']['levels'] not in (1, 2):
        raise ConfigurationError('model.points.levels must be 1 or 2')
    if not model['points']['mlp'] or model['points']['mlp'][-1] != width:
        raise ConfigurationError('model.points.mlp must end at model.hidden_dim')
    if len(model['backbone_widths']) != 5 or any(c % 8 for c in model['backbone_widths']):
        raise ConfigurationError('model.backbone_widths needs 5 stage widths, each divisible by 8')
    if model['relation']['memory'] not in MEMORY_VARIANTS:
        raise ConfigurationError(
            f"model.relation.memory must be one of {sorted(MEMORY_VARIANTS)}, got {model['relation']['memory']!r}"
        )
    if model['relation']['train_pairing'] not in ('matched', 'filtered'):
        raise ConfigurationError('model.relation.train_pairing must be matched or filtered')
    query_mode(cfg)
    if model['entity']['num_queries'] < 1:
        raise ConfigurationError('model.entity.num_queries must be >= 1')

    loss = cfg['loss']
    if loss['relation_mode'] not in ('standard', 'literal'):
        raise ConfigurationError('loss.relation_mode must be standard or literal')
    if len(loss['match_weights']) != 3 or len(loss['entity_weights']) != 3:
        raise ConfigurationError('loss.match_weights and loss.entity_weights need 3 entries')

    train = cfg['train']
    if train['lr'] <= 0:
        raise ConfigurationError('train.lr must be > 0')
    if train['epochs'] < 1:
        raise ConfigurationError('train.epochs must be >= 1')
    if train['batch_size'] < 1:
        raise ConfigurationError('train.batch_size must be >= 1')
    if not train['min_size'] <= train['max_size']:
        raise ConfigurationError('train.min_size must not exceed train.max_size')

    syn = cfg['synthetic']
    lo, hi = syn['entities']
    if not 1 <= lo <= hi:
        raise ConfigurationError('synthetic.entities must be [min, max] with 1 <= min <= max')
    for key in ('close_to', 'lying_on_overlap', 'lying_on_gap', 'holding_radius', 'touching_gap'):
        if syn[key] <= 0:
            raise ConfigurationError(f'synthetic.{key} must be > 0')
    return cfg


def load_config(path=None, overrides=None):
    """Defaults <- JSON file <- dotted overrides <- ORSG_DEVICE."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f'config file not found: {path}')
        with open(path, 'r', encoding='utf-8') as f:
            try:
                _deep_merge(cfg, json.load(f))
            except json.JSONDecodeError as e:
                raise ConfigurationError(f'{path}: invalid JSON ({e})')
    if overrides:
        if isinstance(overrides, (list, tuple)):
            overrides = parse_overrides(overrides)
        _deep_merge(cfg, overrides)
    device = os.getenv('ORSG_DEVICE')
    if device:
        cfg['train']['device'] = device
    return validate_config(cfg)


def config_fingerprint(cfg, section='model'):
    payload = json.dumps(cfg[section], sort_keys=True)
    return hashlib.sha1(payload.encode('utf-8')).hexdigest()


def save_config(cfg, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
