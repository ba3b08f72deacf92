#!/usr/bin/env python3
"""
Training, evaluation and inference drivers.

Run directory produced by `train`:
    config.json                 merged configuration
    train_log.jsonl             one record per optimizer step / epoch / validation
    history.csv                 per-epoch means
    curves.png                  loss curves
    checkpoint_last.pt          replaced atomically every epoch
    checkpoint_epochXXXX.pt     at train.checkpoint_every and the final epoch
"""

import io
import json
import os
import random
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
import torch
from torch.utils.data import DataLoader

from config import config_fingerprint, get, save_config
from dataset import PREDICATES, SceneDataset, SceneSample, collate_scenes, load_4dor_record, resize_sample
from errors import InputError, NonFiniteLossError, RecordIOError, SchemaError
from geometry import boxes_to_tensor, xyxy_to_normalized_cxcywh
from logging_utils import append_json_line, get_logger
from losses import assign_pair_targets, entity_loss, pair_confidence_loss, relation_loss, total_loss
from metrics import MetricsAccumulator, MetricsReport
from model import SceneGraphModel, prepare_input
from scene_graph import SceneGraph

logger = get_logger('engine')


def set_seed(seed):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    if torch.cuda.is_available():
        torch.cuda.manual_seed_all(seed)
        os.environ.setdefault('CUBLAS_WORKSPACE_CONFIG', ':4096:8')


def resolve_device(cfg) -> torch.device:
    name = os.getenv('ORSG_DEVICE') or cfg['train']['device']
    if name == 'auto':
        name = 'cuda' if torch.cuda.is_available() else 'cpu'
    return torch.device(name)


def build_model(cfg, device='cpu') -> SceneGraphModel:
    model = SceneGraphModel(cfg).to(device)
    for stage, count in model.stage_parameter_counts().items():
        logger.info(f'[INFO] parameters {stage}: {count:,}')
    return model


# -- per-scene objective ---------------------------------------------------------------------------

@dataclass
class SceneTerms:
    entity: torch.Tensor
    entity_terms: Dict[str, float]
    layer_logits: List[torch.Tensor]
    targets: torch.Tensor
    pair_logits: Optional[torch.Tensor] = None
    pair_targets: Optional[torch.Tensor] = None
    num_pairs: int = 0
    num_matched: int = 0


def gt_targets(sample: SceneSample, device):
    """GT labels and normalized cxcywh boxes of the (already augmented) sample."""
    entities = sample.annotations.entities
    labels = torch.as_tensor([e.class_id for e in entities], dtype=torch.long, device=device)
    if not entities:
        return labels, torch.zeros(0, 4, device=device)
    boxes = boxes_to_tensor([e.box2d for e in entities]).to(device)
    return labels, xyxy_to_normalized_cxcywh(boxes, sample.main_size)


def scene_terms(model: SceneGraphModel, sample: SceneSample, cfg, device) -> SceneTerms:
    if sample.annotations is None:
        raise InputError(f'scene {sample.name!r} has no annotations to train on')
    inp = prepare_input(sample, cfg, device)
    labels, boxes = gt_targets(sample, device)

    bundle = model.encode(inp)
    entities = model.detect(bundle)
    loss_ent, terms, match = entity_loss(entities.layers, labels, boxes, cfg['loss'])

    extra = match.proposal_indices if get(cfg, 'model.relation.train_pairing') == 'matched' else ()
    entity_set = model.proposals(entities, inp.image_size, extra)
    queries, relations = model.relate(bundle, entity_set, inp)

    proposal_to_gt = match.as_dict()
    entity_to_gt = [proposal_to_gt.get(int(q), -1) for q in entity_set.indices.tolist()]
    relations_gt = list(sample.annotations.relations)
    num_predicates = get(cfg, 'model.relation.num_predicates')
    targets = assign_pair_targets(queries.pairs.cpu(), entity_to_gt, relations_gt, num_predicates, device)

    out = SceneTerms(loss_ent, terms, relations.layer_logits, targets,
                     num_pairs=len(queries), num_matched=len(match.proposal_indices))
    if queries.pair_logits is not None:
        candidates = assign_pair_targets(queries.candidate_pairs.cpu(), entity_to_gt, relations_gt,
                                         num_predicates, device)
        out.pair_logits = queries.pair_logits
        out.pair_targets = (candidates.sum(dim=-1) > 0).to(candidates.dtype)
    return out


def batch_loss(model: SceneGraphModel, batch: List[SceneSample], cfg, device):
    """lambda * L_ent + L_rel over a batch; relation terms pool every pair of every scene."""
    loss_cfg = cfg['loss']
    scenes = [scene_terms(model, s, cfg, device) for s in batch]
    loss_ent = torch.stack([s.entity for s in scenes]).mean()
    terms = {k: float(np.mean([s.entity_terms[k] for s in scenes])) for k in scenes[0].entity_terms}

    num_layers = len(scenes[0].layer_logits)
    used = range(num_layers) if loss_cfg['aux'] else [num_layers - 1]
    targets = torch.cat([s.targets for s in scenes], dim=0)
    focal = loss_cfg['focal']
    loss_rel = loss_ent.new_zeros(())
    for k in used:
        logits = torch.cat([s.layer_logits[k] for s in scenes], dim=0)
        loss_rel = loss_rel + relation_loss(logits, targets, loss_cfg['relation_mode'], focal['alpha'], focal['gamma'])
    if scenes[0].pair_logits is not None:
        pair_logits = torch.cat([s.pair_logits for s in scenes])
        pair_targets = torch.cat([s.pair_targets for s in scenes])
        loss_pair = pair_confidence_loss(pair_logits, pair_targets, focal['alpha'], focal['gamma'])
        terms['pair_confidence'] = float(loss_pair.detach())
        loss_rel = loss_rel + loss_pair

    terms['pairs'] = float(sum(s.num_pairs for s in scenes))
    terms['positive_pairs'] = float((targets.sum(dim=-1) > 0).sum())
    return total_loss(loss_ent, loss_rel, loss_cfg['lambda'], terms)


# -- checkpoints -----------------------------------------------------------------------------------

def _atomic_write(path: Path, payload: bytes):
    tmp = path.with_suffix(path.suffix + '.tmp')
    with open(tmp, 'wb') as f:
        f.write(payload)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def checkpoint_state(model, optimizer, scheduler, epoch, cfg, history):
    return {
        'model': model.state_dict(),
        'optimizer': optimizer.state_dict() if optimizer is not None else None,
        'scheduler': scheduler.state_dict() if scheduler is not None else None,
        'epoch': int(epoch),
        'config': cfg,
        'fingerprint': config_fingerprint(cfg),
        'history': list(history),
    }


def checkpoint_bytes(state) -> bytes:
    buffer = io.BytesIO()
    torch.save(state, buffer)
    return buffer.getvalue()


def save_checkpoint(path, state) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(path, checkpoint_bytes(state))
    return path


def load_checkpoint(path, map_location='cpu'):
    path = Path(path)
    if not path.exists():
        raise RecordIOError('checkpoint', path)
    state = torch.load(path, map_location=map_location, weights_only=False)
    for key in ('model', 'epoch', 'config', 'fingerprint'):
        if key not in state:
            raise SchemaError(key, f'{path} is not an orsg checkpoint')
    return state


def restore_model(state, cfg=None, device='cpu') -> SceneGraphModel:
    """Model from a checkpoint; `cfg`, when given, must describe the same model."""
    if cfg is not None and config_fingerprint(cfg) != state['fingerprint']:
        raise SchemaError('model', 'configuration does not match the checkpoint '
                                   f"({config_fingerprint(cfg)[:10]} vs {state['fingerprint'][:10]})")
    cfg = cfg or state['config']
    model = SceneGraphModel(cfg).to(device)
    model.load_state_dict(state['model'])
    model.eval()
    return model


# -- training --------------------------------------------------------------------------------------

def _epoch_loader(dataset, cfg, epoch):
    generator = torch.Generator()
    generator.manual_seed(cfg['train']['seed'] + epoch)
    dataset.set_epoch(epoch)
    return DataLoader(dataset, batch_size=cfg['train']['batch_size'], shuffle=True, generator=generator,
                      collate_fn=collate_scenes, num_workers=cfg['train']['num_workers'])


def train_step(model, optimizer, batch, cfg, device, batch_id='0:0'):
    model.train()
    breakdown = batch_loss(model, batch, cfg, device)
    value = float(breakdown.total.detach())
    if not np.isfinite(value):
        raise NonFiniteLossError(batch_id, value)
    optimizer.zero_grad()
    breakdown.total.backward()
    if cfg['train']['grad_clip'] > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg['train']['grad_clip'])
    optimizer.step()
    return breakdown


def build_optimizer(model, cfg):
    train_cfg = cfg['train']
    optimizer = torch.optim.AdamW(model.parameters(), lr=train_cfg['lr'], weight_decay=train_cfg['weight_decay'])
    scheduler = None
    if train_cfg['lr_drop'] > 0:
        scheduler = torch.optim.lr_scheduler.StepLR(optimizer, train_cfg['lr_drop'], gamma=train_cfg['lr_gamma'])
    return optimizer, scheduler


def train(cfg, data_dir, out_dir, resume=None, val_dir=None):
    """Single-stage optimization of the whole model; returns (last checkpoint path, history frame)."""
    from visualize import plot_training_curves

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    set_seed(cfg['train']['seed'])
    device = resolve_device(cfg)
    dataset = SceneDataset(data_dir, cfg, training=True)
    if len(dataset) == 0:
        raise InputError(f'no records under {data_dir}')
    val_set = SceneDataset(val_dir, cfg, training=False) if val_dir else None

    model = build_model(cfg, device)
    optimizer, scheduler = build_optimizer(model, cfg)
    history, start_epoch = [], 0
    if resume:
        state = load_checkpoint(resume, device)
        if state['fingerprint'] != config_fingerprint(cfg):
            raise SchemaError('model', f'{resume} was trained with a different model configuration')
        model.load_state_dict(state['model'])
        if state['optimizer'] is not None:
            optimizer.load_state_dict(state['optimizer'])
        if scheduler is not None and state['scheduler'] is not None:
            scheduler.load_state_dict(state['scheduler'])
        history, start_epoch = list(state['history']), state['epoch']
        logger.info(f'[OK] resumed from {resume} at epoch {start_epoch}')
    save_config(cfg, out_dir / 'config.json')
    log_file = out_dir / 'train_log.jsonl'

    logger.info(f'[INFO] training on {len(dataset)} scenes, device {device}, epochs {start_epoch}..{cfg["train"]["epochs"]}')
    last_path = out_dir / 'checkpoint_last.pt'
    for epoch in range(start_epoch, cfg['train']['epochs']):
        started = time.perf_counter()
        rows = []
        for step, batch in enumerate(_epoch_loader(dataset, cfg, epoch)):
            breakdown = train_step(model, optimizer, batch, cfg, device, batch_id=f'{epoch}:{step}')
            record = {'event': 'step', 'epoch': epoch, 'step': step, **breakdown.as_dict()}
            append_json_line(log_file, record)
            rows.append(breakdown.as_dict())
        if scheduler is not None:
            scheduler.step()

        summary = {'epoch': epoch + 1, 'lr': optimizer.param_groups[0]['lr'],
                   'seconds': time.perf_counter() - started}
        summary.update({k: float(v) for k, v in pd.DataFrame(rows).mean().items()})
        if val_set is not None and len(val_set):
            report = evaluate_model(model, val_set, cfg)
            summary.update({'val_macro_f1': report.macro_f1, 'val_recall_at_k': report.recall_at_k,
                            'val_wmap_rel': report.wmap_rel})
            append_json_line(log_file, {'event': 'validation', 'epoch': epoch + 1, **report.to_dict()})
        append_json_line(log_file, {'event': 'epoch', **summary})
        history.append(summary)
        logger.info(f"[OK] epoch {epoch + 1}/{cfg['train']['epochs']} loss {summary['loss']:.4f} "
                    f"({summary['seconds']:.1f}s)")

        state = checkpoint_state(model, optimizer, scheduler, epoch + 1, cfg, history)
        save_checkpoint(last_path, state)
        every = cfg['train']['checkpoint_every']
        if (every > 0 and (epoch + 1) % every == 0) or epoch + 1 == cfg['train']['epochs']:
            save_checkpoint(out_dir / f'checkpoint_epoch{epoch + 1:04d}.pt', state)

    history_df = pd.DataFrame(history)
    history_df.to_csv(out_dir / 'history.csv', index=False)
    if not history_df.empty:
        plot_training_curves(history_df, out_dir / 'curves.png')
    return last_path, history_df


# -- evaluation / inference ------------------------------------------------------------------------

def evaluate_model(model: SceneGraphModel, dataset, cfg) -> MetricsReport:
    device = next(model.parameters()).device
    acc = MetricsAccumulator(get(cfg, 'eval.iou'), get(cfg, 'eval.recall_k'))
    for index in range(len(dataset)):
        sample = dataset[index]
        pred = model.predict(prepare_input(sample, cfg, device))
        acc.add(pred, SceneGraph.from_annotations(sample.annotations, sample.name))
    return acc.report()


def evaluate(ckpt_path, data_dir, out_dir=None, cfg=None) -> MetricsReport:
    state = load_checkpoint(ckpt_path)
    cfg = cfg or state['config']
    device = resolve_device(cfg)
    model = restore_model(state, cfg, device)
    dataset = SceneDataset(data_dir, cfg, training=False)
    if len(dataset) == 0:
        raise InputError(f'no records under {data_dir}')

    report = evaluate_model(model, dataset, cfg)
    out_dir = Path(out_dir) if out_dir else Path(ckpt_path).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / 'metrics.json', 'w', encoding='utf-8') as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
    report.per_predicate_frame().to_csv(out_dir / 'per_predicate.csv')
    logger.info(f'[OK] macro F1 {report.macro_f1:.4f}  R@{report.k} {report.recall_at_k:.4f}  '
                f'wmAP rel {report.wmap_rel:.4f} phr {report.wmap_phr:.4f} over {report.num_scenes} scenes')
    return report


def _rescale_graph(graph: SceneGraph, sx, sy) -> SceneGraph:
    for node in graph.nodes:
        x1, y1, x2, y2 = node.box
        node.box = [x1 * sx, y1 * sy, x2 * sx, y2 * sy]
    return graph


def infer(ckpt_path, record_path, out_path, figure=None, cfg=None) -> SceneGraph:
    """Scene graph of one record; annotations are never read. Boxes are in record pixels."""
    state = load_checkpoint(ckpt_path)
    cfg = cfg or state['config']
    device = resolve_device(cfg)
    model = restore_model(state, cfg, device)

    sample = load_4dor_record(record_path, with_annotations=False)
    resized = resize_sample(sample, get(cfg, 'train.eval_size'))
    started = time.perf_counter()
    graph = model.predict(prepare_input(resized, cfg, device))
    elapsed = time.perf_counter() - started
    (w0, h0), (w1, h1) = sample.main_size, resized.main_size
    graph = _rescale_graph(graph, w0 / w1, h0 / h1)

    graph.save(out_path)
    logger.info(f'[OK] {sample.name}: {len(graph.nodes)} entities, {len(graph.edges)} relations '
                f'in {elapsed * 1000:.1f} ms -> {out_path}')
    if figure:
        from visualize import draw_scene_graph
        draw_scene_graph(sample.views[0], graph, figure)
        logger.info(f'[OK] figure saved: {figure}')
    return graph


def describe_predicates(graph: SceneGraph):
    """Predicate histogram of a graph, used in inference summaries."""
    counts = pd.Series([PREDICATES[e.predicate] for e in graph.edges], dtype=object).value_counts()
    return {str(k): int(v) for k, v in counts.items()}
