#!/usr/bin/env python3
"""
Synthetic learning benchmark.

Generates a train / held-out split once, then trains and evaluates:
  * dynamic relation queries (full trait priors)
  * fixed:20 relation queries
  * dynamic queries without the spatial / point priors
for each seed, and writes benchmark_summary.csv plus a per-run table.
"""

import argparse
import copy
import sys
from pathlib import Path

import pandas as pd

from config import load_config
from dataset import generate_dataset
from engine import evaluate, train
from logging_utils import configure_logger, get_logger, new_run_id

logger = get_logger('benchmark')

# toy backbone at desk scale
BENCHMARK_OVERRIDES = {
    'model': {
        'backbone': 'toy',
        'backbone_widths': [16, 32, 64, 64, 64],
        'hidden_dim': 64,
        'heads': 4,
        'ffn_dim': 128,
        'encoder_layers': 2,
        'min_image_edge': 64,
        'points': {'count': 256, 'group_size': 16, 'mlp': [32, 64, 64]},
        'entity': {'decoder_layers': 3},
        'relation': {'decoder_layers': 3, 'mlp_hidden': 128},
    },
    'train': {'epochs': 60, 'lr': 2e-4, 'batch_size': 4, 'min_size': 224, 'max_size': 256, 'eval_size': 240,
              'checkpoint_every': 0},
    'synthetic': {'image_size': [240, 320], 'entities': [3, 6]},
}

VARIANTS = {
    'dynamic': {},
    'fixed20': {'model': {'relation': {'query_mode': 'fixed:20'}}},
    'no_priors': {'model': {'relation': {'use_spatial': False, 'use_points': False}}},
}


def run_variant(name, overrides, seed, data_dir, val_dir, out_dir, base_config=None):
    cfg = load_config(base_config, _merge(BENCHMARK_OVERRIDES, overrides, {'train': {'seed': seed}}))
    run_dir = Path(out_dir) / f'{name}_seed{seed}'
    ckpt, history = train(cfg, data_dir, run_dir)
    report = evaluate(ckpt, val_dir, run_dir)
    return {
        'variant': name,
        'seed': seed,
        'macro_f1': report.macro_f1,
        'macro_precision': report.macro_precision,
        'macro_recall': report.macro_recall,
        'recall_at_k': report.recall_at_k,
        'wmap_rel': report.wmap_rel,
        'wmap_phr': report.wmap_phr,
        'final_loss': float(history['loss'].iloc[-1]) if not history.empty else float('nan'),
    }


def _merge(*docs):
    out = {}
    for doc in docs:
        for key, value in doc.items():
            if isinstance(value, dict) and isinstance(out.get(key), dict):
                out[key] = _merge(out[key], value)
            else:
                out[key] = copy.deepcopy(value)
    return out


def summarize(runs: pd.DataFrame) -> pd.DataFrame:
    summary = runs.groupby('variant')[['macro_f1', 'recall_at_k', 'wmap_rel', 'wmap_phr']].agg(['mean', 'std'])
    summary.columns = [f'{metric}_{stat}' for metric, stat in summary.columns]
    summary = summary.reset_index()

    by_seed = runs.pivot(index='seed', columns='variant', values='macro_f1')
    checks = {}
    if {'dynamic', 'fixed20'} <= set(by_seed.columns):
        checks['dynamic_ge_fixed20'] = bool((by_seed['dynamic'] >= by_seed['fixed20']).all())
    if {'dynamic', 'no_priors'} <= set(by_seed.columns):
        checks['priors_not_worse'] = bool(by_seed['dynamic'].mean() >= by_seed['no_priors'].mean())
    if 'dynamic' in by_seed:
        checks['dynamic_f1_ge_0.80'] = bool(by_seed['dynamic'].mean() >= 0.80)
    for key, value in checks.items():
        summary[key] = value
    return summary


def main(argv=None):
    parser = argparse.ArgumentParser(description='Synthetic learning benchmark')
    parser.add_argument('--out', default='runs/benchmark')
    parser.add_argument('--config', default=None)
    parser.add_argument('--train-count', type=int, default=200)
    parser.add_argument('--val-count', type=int, default=50)
    parser.add_argument('--seeds', type=int, nargs='+', default=[0, 1, 2])
    parser.add_argument('--variants', nargs='+', default=list(VARIANTS), choices=list(VARIANTS))
    args = parser.parse_args(argv)

    configure_logger('orsg', run_id=new_run_id())
    out_dir = Path(args.out)
    data_cfg = load_config(args.config, copy.deepcopy(BENCHMARK_OVERRIDES))
    train_dir, val_dir = out_dir / 'data' / 'train', out_dir / 'data' / 'val'
    if not train_dir.exists():
        generate_dataset(data_cfg, train_dir, args.train_count, seed=1000)
    else:
        logger.info(f'[SKIP] {train_dir} exists, reusing it')
    if not val_dir.exists():
        generate_dataset(data_cfg, val_dir, args.val_count, seed=900000)
    else:
        logger.info(f'[SKIP] {val_dir} exists, reusing it')

    rows = []
    for seed in args.seeds:
        for name in args.variants:
            logger.info(f'[INFO] benchmark {name} seed {seed}')
            rows.append(run_variant(name, VARIANTS[name], seed, train_dir, val_dir, out_dir, args.config))
            pd.DataFrame(rows).to_csv(out_dir / 'benchmark_runs.csv', index=False)

    summary = summarize(pd.DataFrame(rows))
    summary.to_csv(out_dir / 'benchmark_summary.csv', index=False)
    logger.info(f'[OK] benchmark summary saved: {out_dir / "benchmark_summary.csv"}')
    print(summary.to_string(index=False))
    return 0


if __name__ == '__main__':
    sys.exit(main())
