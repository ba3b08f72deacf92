#!/usr/bin/env python3
"""
Figures for runs and predictions (matplotlib, headless).
"""

from pathlib import Path

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
from matplotlib.patches import Rectangle
import numpy as np
import pandas as pd

from dataset import CLASS_COLORS, ENTITY_CLASSES, PREDICATES
from scene_graph import SceneGraph

LOSS_COLUMNS = ['loss', 'loss_entity', 'loss_relation']
ENTITY_COLUMNS = ['entity_class', 'entity_l1', 'entity_giou']
VALIDATION_COLUMNS = ['val_macro_f1', 'val_recall_at_k', 'val_wmap_rel']


def plot_training_curves(history: pd.DataFrame, fig_file):
    """Per-epoch losses (top) and entity terms / validation metrics (bottom)."""
    fig_file = Path(fig_file)
    fig_file.parent.mkdir(parents=True, exist_ok=True)

    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(12, 8))
    epochs = history['epoch'].values

    for column, style in zip(LOSS_COLUMNS, ['k-', 'b-', 'g--']):
        if column in history:
            ax1.plot(epochs, history[column].values, style, linewidth=1.2, label=column)
    ax1.set_xlabel('Epoch')
    ax1.set_ylabel('Loss')
    ax1.set_title('Training loss')
    ax1.legend()
    ax1.grid(True)

    val = [c for c in VALIDATION_COLUMNS if c in history]
    shown = val if val else [c for c in ENTITY_COLUMNS if c in history]
    for column in shown:
        ax2.plot(epochs, history[column].values, linewidth=1.2, marker='o', markersize=3, label=column)
    ax2.set_xlabel('Epoch')
    ax2.set_ylabel('Validation metric' if val else 'Entity loss terms')
    if shown:
        ax2.legend()
    ax2.grid(True)

    plt.tight_layout()
    plt.savefig(fig_file, dpi=150, bbox_inches='tight')
    plt.close()
    return fig_file


def _color(class_id):
    return tuple(c / 255.0 for c in CLASS_COLORS[ENTITY_CLASSES[class_id]])


def draw_scene_graph(image: np.ndarray, graph: SceneGraph, fig_file, max_edges=20):
    """Main view with predicted boxes (left) and the top-scored triplets as text (right)."""
    fig_file = Path(fig_file)
    fig_file.parent.mkdir(parents=True, exist_ok=True)

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(14, 6), gridspec_kw={'width_ratios': [3, 2]})
    ax1.imshow(image)
    for i, node in enumerate(graph.nodes):
        x1, y1, x2, y2 = node.box
        color = _color(node.class_id)
        ax1.add_patch(Rectangle((x1, y1), x2 - x1, y2 - y1, fill=False, edgecolor=color, linewidth=2))
        ax1.text(x1, y1 - 2, f'{i}:{ENTITY_CLASSES[node.class_id]} {node.score:.2f}',
                 color='white', fontsize=7, bbox={'facecolor': color, 'alpha': 0.7, 'pad': 1})
    for edge in graph.edges[:max_edges]:
        s, o = graph.nodes[edge.subject].box, graph.nodes[edge.object].box
        ax1.annotate('', xy=((o[0] + o[2]) / 2, (o[1] + o[3]) / 2), xytext=((s[0] + s[2]) / 2, (s[1] + s[3]) / 2),
                     arrowprops={'arrowstyle': '->', 'color': 'yellow', 'alpha': 0.6})
    ax1.set_title(graph.name or 'main view')
    ax1.axis('off')

    lines = [f'{e.subject}:{ENTITY_CLASSES[graph.nodes[e.subject].class_id]}  {PREDICATES[e.predicate]}  '
             f'{e.object}:{ENTITY_CLASSES[graph.nodes[e.object].class_id]}  ({e.score:.2f})'
             for e in graph.edges[:max_edges]]
    ax2.text(0.0, 1.0, '\n'.join(lines) if lines else 'no relations', va='top', ha='left',
             family='monospace', fontsize=8)
    ax2.set_title(f'{len(graph.nodes)} entities, {len(graph.edges)} relations')
    ax2.axis('off')

    plt.tight_layout()
    plt.savefig(fig_file, dpi=150, bbox_inches='tight')
    plt.close()
    return fig_file
