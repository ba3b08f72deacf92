"""
Training objective: set matching, entity losses (focal + L1 + GIoU),
relation focal loss in its standard and literal forms, auxiliary terms and
the weighted total.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from torchvision.ops import box_convert, generalized_box_iou

from entity_decoder import EntityLayerOutput
from errors import MatchError
from geometry import Box2D, boxes_to_tensor
from logging_utils import get_logger

logger = get_logger('losses')

PROB_EPS = 1e-7


@dataclass
class MatchResult:
    proposal_indices: np.ndarray   # (G',) proposals that received a GT entity
    gt_indices: np.ndarray         # (G',) the GT entity each one received
    cost: float

    def as_dict(self):
        """proposal index -> GT index."""
        return {int(p): int(g) for p, g in zip(self.proposal_indices, self.gt_indices)}


@dataclass
class LossBreakdown:
    entity: torch.Tensor
    relation: torch.Tensor
    total: torch.Tensor
    lam: float
    terms: Dict[str, float] = field(default_factory=dict)

    def as_dict(self):
        out = {'loss': float(self.total.detach()), 'loss_entity': float(self.entity.detach()),
               'loss_relation': float(self.relation.detach())}
        out.update(self.terms)
        return out


def focal_loss(p, y, alpha=0.25, gamma=2.0):
    """Elementwise -alpha * (1 - p_t)^gamma * log(p_t), p_t = p if y == 1 else 1 - p."""
    p = torch.as_tensor(p).clamp(PROB_EPS, 1.0 - PROB_EPS)
    y = torch.as_tensor(y, dtype=p.dtype, device=p.device)
    p_t = p * y + (1.0 - p) * (1.0 - y)
    return -alpha * (1.0 - p_t) ** gamma * torch.log(p_t)


def giou(a: Box2D, b: Box2D) -> float:
    return float(generalized_box_iou(boxes_to_tensor([a], torch.float64), boxes_to_tensor([b], torch.float64))[0, 0])


def _xyxy(boxes_cxcywh):
    return box_convert(boxes_cxcywh, 'cxcywh', 'xyxy')


def min_cost_assignment(cost) -> tuple:
    """(rows, cols) of a minimum-cost assignment covering every column of a (Q, G) matrix."""
    cost = np.asarray(cost, dtype=float)
    rows, cols = linear_sum_assignment(cost)
    order = np.argsort(cols, kind='stable')
    return rows[order], cols[order]


@torch.no_grad()
def matching_cost(layer: EntityLayerOutput, gt_labels, gt_boxes, weights=(2.0, 5.0, 2.0)):
    """(Q, G) cost: w_cls (1 - p[gt class]) + w_L1 |box - gt|_1 + w_giou (1 - GIoU)."""
    w_cls, w_l1, w_giou = weights
    probs = layer.logits.softmax(dim=-1)
    cost_cls = 1.0 - probs[:, gt_labels]
    cost_l1 = torch.cdist(layer.boxes, gt_boxes.to(layer.boxes.dtype), p=1)
    cost_giou = 1.0 - generalized_box_iou(_xyxy(layer.boxes), _xyxy(gt_boxes.to(layer.boxes.dtype)))
    return w_cls * cost_cls + w_l1 * cost_l1 + w_giou * cost_giou


def hungarian_match(layer: EntityLayerOutput, gt_labels, gt_boxes, weights=(2.0, 5.0, 2.0)) -> MatchResult:
    """Minimum-cost injective assignment of GT entities (normalized cxcywh boxes) to proposals."""
    num_q, num_g = layer.logits.shape[0], int(gt_labels.shape[0])
    if num_g > num_q:
        raise MatchError(num_g, num_q)
    if num_g == 0:
        return MatchResult(np.zeros(0, dtype=int), np.zeros(0, dtype=int), 0.0)
    cost = matching_cost(layer, gt_labels, gt_boxes, weights).cpu().numpy()
    rows, cols = min_cost_assignment(cost)
    return MatchResult(rows, cols, float(cost[rows, cols].sum()))


def entity_layer_loss(layer: EntityLayerOutput, gt_labels, gt_boxes, match: MatchResult, alpha, gamma):
    """(class focal, L1, 1 - GIoU), each normalized by max(G, 1)."""
    num_q, width = layer.logits.shape
    background = width - 1
    norm = float(max(int(gt_labels.shape[0]), 1))
    target_classes = torch.full((num_q,), background, dtype=torch.long, device=layer.logits.device)
    src = torch.as_tensor(match.proposal_indices, dtype=torch.long, device=layer.logits.device)
    tgt = torch.as_tensor(match.gt_indices, dtype=torch.long, device=layer.logits.device)
    if len(src):
        target_classes[src] = gt_labels[tgt]
    onehot = torch.nn.functional.one_hot(target_classes, width).to(layer.logits.dtype)
    loss_cls = focal_loss(layer.logits.softmax(dim=-1), onehot, alpha, gamma).sum() / norm
    if len(src):
        pred_boxes, tgt_boxes = layer.boxes[src], gt_boxes[tgt].to(layer.boxes.dtype)
        loss_l1 = (pred_boxes - tgt_boxes).abs().sum() / norm
        loss_giou = (1.0 - torch.diag(generalized_box_iou(_xyxy(pred_boxes), _xyxy(tgt_boxes)))).sum() / norm
    else:
        loss_l1 = layer.boxes.sum() * 0.0
        loss_giou = layer.boxes.sum() * 0.0
    return loss_cls, loss_l1, loss_giou


def entity_loss(layers: List[EntityLayerOutput], gt_labels, gt_boxes, loss_cfg,
                matches: Optional[List[MatchResult]] = None):
    """Weighted entity loss summed over decoder layers (final layer only when aux is off).

    Matching is recomputed for every layer unless `matches` is given.
    Returns (loss, per-term floats, final-layer match).
    """
    used = layers if loss_cfg['aux'] else layers[-1:]
    if matches is not None and not loss_cfg['aux']:
        matches = matches[-1:]
    w_cls, w_l1, w_giou = loss_cfg['entity_weights']
    alpha, gamma = loss_cfg['focal']['alpha'], loss_cfg['focal']['gamma']
    total = layers[-1].logits.sum() * 0.0
    terms = {'entity_class': 0.0, 'entity_l1': 0.0, 'entity_giou': 0.0}
    final_match = None
    for k, layer in enumerate(used):
        match = matches[k] if matches is not None else hungarian_match(layer, gt_labels, gt_boxes, loss_cfg['match_weights'])
        cls_, l1, gi = entity_layer_loss(layer, gt_labels, gt_boxes, match, alpha, gamma)
        total = total + w_cls * cls_ + w_l1 * l1 + w_giou * gi
        terms['entity_class'] += float(cls_.detach())
        terms['entity_l1'] += float(l1.detach())
        terms['entity_giou'] += float(gi.detach())
        final_match = match
    return total, terms, final_match


def assign_pair_targets(pairs, entity_to_gt, gt_relations, num_predicates=14, device=None) -> torch.Tensor:
    """(P, num_predicates) indicators of the GT predicates on each pair's matched GT entities.

    `entity_to_gt[i]` is the GT index of paired entity i, or -1 when it matched nothing.
    """
    pairs = torch.as_tensor(pairs, dtype=torch.long).reshape(-1, 2)
    targets = torch.zeros(pairs.shape[0], num_predicates, device=device)
    if pairs.shape[0] == 0 or not gt_relations:
        return targets
    by_pair = {}
    for s, p, o in gt_relations:
        by_pair.setdefault((int(s), int(o)), []).append(int(p))
    for row, (i, j) in enumerate(pairs.tolist()):
        a, b = int(entity_to_gt[i]), int(entity_to_gt[j])
        if a < 0 or b < 0:
            continue
        for p in by_pair.get((a, b), []):
            targets[row, p] = 1.0
    return targets


def relation_loss(logits, targets, mode='standard', alpha=0.25, gamma=2.0):
    """Focal relation loss on sigmoid outputs.

    standard: mean focal term over every output of every pair.
    literal: per pair with at least one positive, (1 / sum g) * sum g * focal(g_hat, g),
        averaged over those pairs; negatives contribute nothing.
    """
    targets = targets.to(logits.dtype)
    if logits.numel() == 0:
        return logits.sum() * 0.0
    terms = focal_loss(logits.sigmoid(), targets, alpha, gamma)
    if mode == 'standard':
        return terms.mean()
    if mode != 'literal':
        raise ValueError(f'unknown relation loss mode {mode!r}')
    positives = targets.sum(dim=-1)
    rows = positives > 0
    if not bool(rows.any()):
        logger.warning('[WARNING] literal relation loss: no positive predicate in the batch, returning 0')
        return logits.sum() * 0.0
    per_pair = (targets * terms).sum(dim=-1)[rows] / positives[rows]
    return per_pair.mean()


def pair_confidence_loss(pair_logits, pair_targets, alpha=0.25, gamma=2.0):
    """Focal loss of the fixed:K pair scorer toward 'pair carries at least one GT predicate'."""
    if pair_logits.numel() == 0:
        return pair_logits.sum() * 0.0
    return focal_loss(pair_logits.sigmoid(), pair_targets.to(pair_logits.dtype), alpha, gamma).mean()


def total_loss(entity, relation, lam=1.0, terms=None) -> LossBreakdown:
    return LossBreakdown(entity, relation, lam * entity + relation, lam, dict(terms or {}))
