#!/usr/bin/env python3
"""
orsg command line.

    orsg generate --config cfg.json --out data/train --count 200
    orsg train    --config cfg.json --data data/train --out runs/r1 [--val data/val] [--resume ckpt]
    orsg eval     --ckpt runs/r1/checkpoint_last.pt --data data/val [--out dir]
    orsg infer    --ckpt runs/r1/checkpoint_last.pt --record data/val/scene_00000 --out graph.json [--figure g.png]
    orsg serve    --run runs/r1

Every command takes --set key.path=value overrides applied over the config file.
"""

import argparse
import json
import sys

from config import load_config
from errors import OrsgError
from logging_utils import configure_logger, new_run_id


def _add_common(p):
    p.add_argument('--config', help='JSON config merged over the defaults')
    p.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                   help='dotted override, repeatable (e.g. model.relation.query_mode=fixed:20)')
    p.add_argument('--log-level', default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog='orsg', description='Operating-room scene graph generation')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('generate', help='write synthetic multi-view scenes')
    _add_common(p)
    p.add_argument('--out', required=True)
    p.add_argument('--count', type=int, required=True)
    p.add_argument('--seed', type=int, default=None)

    p = sub.add_parser('train', help='single-stage training')
    _add_common(p)
    p.add_argument('--data', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--val', default=None)
    p.add_argument('--resume', default=None)

    p = sub.add_parser('eval', help='metrics of a checkpoint over a dataset')
    _add_common(p)
    p.add_argument('--ckpt', required=True)
    p.add_argument('--data', required=True)
    p.add_argument('--out', default=None)

    p = sub.add_parser('infer', help='scene graph of one record')
    _add_common(p)
    p.add_argument('--ckpt', required=True)
    p.add_argument('--record', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--figure', default=None)

    p = sub.add_parser('serve', help='flask viewer for a run directory')
    p.add_argument('--run', required=True)
    p.add_argument('--host', default='127.0.0.1')
    p.add_argument('--port', type=int, default=5000)
    p.add_argument('--log-level', default=None)
    return parser


def _config(args, from_checkpoint=False):
    """Checkpoint commands use the stored config unless one is given explicitly."""
    if from_checkpoint and not args.config and not args.overrides:
        return None
    return load_config(args.config, args.overrides)


def run(args):
    if args.command == 'generate':
        from dataset import generate_dataset
        cfg = _config(args)
        generate_dataset(cfg, args.out, args.count, args.seed)
    elif args.command == 'train':
        from engine import train
        cfg = _config(args)
        train(cfg, args.data, args.out, resume=args.resume, val_dir=args.val)
    elif args.command == 'eval':
        from engine import evaluate
        report = evaluate(args.ckpt, args.data, args.out, _config(args, from_checkpoint=True))
        print(json.dumps(report.to_dict()['macro'], indent=2))
    elif args.command == 'infer':
        from engine import describe_predicates, infer
        graph = infer(args.ckpt, args.record, args.out, args.figure, _config(args, from_checkpoint=True))
        print(json.dumps(describe_predicates(graph), indent=2, sort_keys=True))
    elif args.command == 'serve':
        from app import serve
        serve(args.run, args.host, args.port)


def main(argv=None):
    args = build_parser().parse_args(argv)
    run_id = new_run_id()
    logger = configure_logger('orsg', level=args.log_level, run_id=run_id)
    logger.info(f'[INFO] orsg {args.command} (run {run_id})')
    try:
        run(args)
    except OrsgError as e:
        logger.error(f'[ERROR] {type(e).__name__}: {e}')
        return 2
    return 0


if __name__ == '__main__':
    sys.exit(main())
