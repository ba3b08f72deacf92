#!/usr/bin/env python3
"""
Flask viewer for a run directory
Serves training history, evaluation metrics, predicted scene graphs and figures
"""

from pathlib import Path
import json
import os

from flask import Flask, jsonify, send_from_directory
import pandas as pd

from errors import SchemaError
from logging_utils import get_logger, read_json_lines
from scene_graph import SceneGraph

logger = get_logger('app')


def get_history(run_dir):
    """Per-epoch history: history.csv, else the epoch records of train_log.jsonl"""
    history_file = run_dir / 'history.csv'
    if history_file.exists():
        return pd.read_csv(history_file)
    log = read_json_lines(run_dir / 'train_log.jsonl')
    if log.empty or 'event' not in log:
        return pd.DataFrame()
    return log[log['event'] == 'epoch'].drop(columns=['event']).dropna(axis=1, how='all')


def get_metrics(run_dir):
    metrics_file = run_dir / 'metrics.json'
    if not metrics_file.exists():
        return None
    with open(metrics_file, 'r', encoding='utf-8') as f:
        return json.load(f)


def find_graph(run_dir, name):
    for candidate in (run_dir / 'graphs' / f'{name}.json', run_dir / f'{name}.json'):
        if candidate.exists():
            return candidate
    return None


def get_figures(run_dir):
    figures = sorted(run_dir.rglob('*.png'), key=lambda p: p.stat().st_mtime, reverse=True)
    return [str(f.relative_to(run_dir)) for f in figures]


def create_app(run_dir=None):
    run_dir = Path(run_dir or os.getenv('ORSG_RUN_DIR', 'runs/latest')).resolve()
    app = Flask(__name__)
    app.config['RUN_DIR'] = run_dir

    @app.route('/')
    def index():
        graphs = sorted(p.stem for p in (run_dir / 'graphs').glob('*.json')) if (run_dir / 'graphs').exists() else []
        return jsonify({
            'run_dir': str(run_dir),
            'has_history': (run_dir / 'history.csv').exists() or (run_dir / 'train_log.jsonl').exists(),
            'has_metrics': (run_dir / 'metrics.json').exists(),
            'graphs': graphs,
            'figures': get_figures(run_dir) if run_dir.exists() else [],
        })

    @app.route('/api/history')
    def api_history():
        """API: per-epoch training history"""
        history = get_history(run_dir)
        return jsonify(history.to_dict('records') if not history.empty else [])

    @app.route('/api/metrics')
    def api_metrics():
        """API: evaluation report"""
        metrics = get_metrics(run_dir)
        if metrics:
            return jsonify(metrics)
        return jsonify({'error': 'No metrics found'}), 404

    @app.route('/api/graph/<name>')
    def api_graph(name):
        """API: predicted scene graph by record name"""
        path = find_graph(run_dir, name)
        if path is None:
            return jsonify({'error': f'No graph named {name}'}), 404
        try:
            graph = SceneGraph.load(path, name)
        except SchemaError as e:
            logger.warning(f'[WARNING] {path}: {e}')
            return jsonify({'error': str(e)}), 422
        return jsonify(graph.to_dict())

    @app.route('/figures/<path:filename>')
    def serve_figure(filename):
        fig_file = run_dir / filename
        if fig_file.suffix == '.png' and fig_file.exists():
            return send_from_directory(str(run_dir), filename)
        return "Figure not found", 404

    return app


def serve(run_dir, host='127.0.0.1', port=5000, debug=False):
    app = create_app(run_dir)
    print('=' * 60)
    print('orsg run viewer')
    print('=' * 60)
    print(f'Run directory: {app.config["RUN_DIR"]}')
    print(f'Viewer available at: http://{host}:{port}')
    print('=' * 60)
    app.run(debug=debug, host=host, port=port)


if __name__ == '__main__':
    serve(os.getenv('ORSG_RUN_DIR', 'runs/latest'))
