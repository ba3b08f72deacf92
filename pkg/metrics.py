"""
Scene-graph evaluation.

Two protocols live side by side:
  * entity-matched relation precision / recall / macro-F1 per predicate
  * triplet detection metrics: recall@K and GT-weighted mAP (relationship and phrase)
"""

from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd
from scipy.optimize import linear_sum_assignment

from dataset import PREDICATES
from entity_decoder import stable_order
from geometry import box_iou_matrix
from scene_graph import SceneGraph, ScoredTriplet

PROTOCOL_VERSION = 1


def match_pred_to_gt_entities(pred_nodes, gt_nodes, iou_threshold=0.5) -> Dict[int, int]:
    """Greedy by descending prediction score: each prediction claims the unclaimed same-class
    GT with the highest IoU >= threshold."""
    if not pred_nodes or not gt_nodes:
        return {}
    iou = box_iou_matrix([n.box for n in pred_nodes], [n.box for n in gt_nodes])
    claimed, mapping = set(), {}
    for p in stable_order([n.score for n in pred_nodes]):
        best, best_iou = None, -1.0
        for g, gt in enumerate(gt_nodes):
            if g in claimed or gt.class_id != pred_nodes[p].class_id:
                continue
            if iou[p, g] >= iou_threshold and iou[p, g] > best_iou:
                best, best_iou = g, iou[p, g]
        if best is not None:
            claimed.add(best)
            mapping[int(p)] = best
    return mapping


@dataclass
class PredicateCounts:
    tp: np.ndarray = field(default_factory=lambda: np.zeros(len(PREDICATES), dtype=int))
    fp: np.ndarray = field(default_factory=lambda: np.zeros(len(PREDICATES), dtype=int))
    fn: np.ndarray = field(default_factory=lambda: np.zeros(len(PREDICATES), dtype=int))

    def __iadd__(self, other):
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self


def relation_counts(pred_graph: SceneGraph, gt_graph: SceneGraph, entity_map) -> PredicateCounts:
    gt = {(e.subject, e.predicate, e.object) for e in gt_graph.edges}
    counts = PredicateCounts()
    hit = set()
    for e in pred_graph.edges:
        key = (entity_map.get(e.subject), e.predicate, entity_map.get(e.object))
        if key[0] is not None and key[2] is not None and key in gt and key not in hit:
            counts.tp[e.predicate] += 1
            hit.add(key)
        else:
            counts.fp[e.predicate] += 1
    for s, p, o in gt - hit:
        counts.fn[p] += 1
    return counts


def _ratio(num, den):
    return float(num) / float(den) if den > 0 else 0.0


def prf_from_counts(counts: PredicateCounts):
    """Per-predicate table plus macro averages over predicates present in GT."""
    rows = {}
    for p, name in enumerate(PREDICATES):
        tp, fp, fn = int(counts.tp[p]), int(counts.fp[p]), int(counts.fn[p])
        precision, recall = _ratio(tp, tp + fp), _ratio(tp, tp + fn)
        f1 = _ratio(2 * precision * recall, precision + recall)
        rows[name] = {'precision': precision, 'recall': recall, 'f1': f1,
                      'tp': tp, 'fp': fp, 'fn': fn, 'support': tp + fn}
    present = [name for name, r in rows.items() if r['support'] > 0]
    macro = {
        key: float(np.mean([rows[n][key] for n in present])) if present else 0.0
        for key in ('precision', 'recall', 'f1')
    }
    return rows, macro, present


def relation_prf1(pred_graph: SceneGraph, gt_graph: SceneGraph, entity_map):
    rows, macro, _ = prf_from_counts(relation_counts(pred_graph, gt_graph, entity_map))
    return rows, macro


def _union_box(a, b):
    return [min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3])]


def triplet_overlap(pred: Sequence[ScoredTriplet], gt: Sequence[ScoredTriplet], mode='rel', iou=0.5):
    """(P, G) match quality, 0 where incompatible.

    rel: both boxes reach the IoU threshold; quality = min of the two IoUs.
    phr: the subject-object union boxes reach the threshold; quality = union IoU.
    """
    quality = np.zeros((len(pred), len(gt)))
    if not pred or not gt:
        return quality
    same = np.array([[p.predicate == g.predicate and p.subject_class == g.subject_class
                      and p.object_class == g.object_class for g in gt] for p in pred])
    if mode == 'rel':
        iou_s = box_iou_matrix([p.subject_box for p in pred], [g.subject_box for g in gt])
        iou_o = box_iou_matrix([p.object_box for p in pred], [g.object_box for g in gt])
        ok = same & (iou_s >= iou) & (iou_o >= iou)
        quality = np.where(ok, np.minimum(iou_s, iou_o), 0.0)
    elif mode == 'phr':
        iou_u = box_iou_matrix([_union_box(p.subject_box, p.object_box) for p in pred],
                               [_union_box(g.subject_box, g.object_box) for g in gt])
        ok = same & (iou_u >= iou)
        quality = np.where(ok, iou_u, 0.0)
    else:
        raise ValueError(f'unknown triplet match mode {mode!r}')
    return quality


def recall_counts(pred: Sequence[ScoredTriplet], gt: Sequence[ScoredTriplet], k=50, iou=0.5):
    """(matched, total): maximum one-to-one matching between the top-k predictions and GT."""
    if k <= 0 or not gt or not pred:
        return 0, len(gt)
    top = [pred[i] for i in stable_order([t.score for t in pred])[:k]]
    compatible = triplet_overlap(top, gt, 'rel', iou) > 0
    rows, cols = linear_sum_assignment(-compatible.astype(float))
    return int(compatible[rows, cols].sum()), len(gt)


def recall_at_k(pred: Sequence[ScoredTriplet], gt: Sequence[ScoredTriplet], k=50, iou=0.5) -> float:
    matched, total = recall_counts(pred, gt, k, iou)
    return _ratio(matched, total)


def triplet_tp_flags(pred: Sequence[ScoredTriplet], gt: Sequence[ScoredTriplet], mode='rel', iou=0.5):
    """Greedy per-scene TP flags in descending score order; each GT is claimable once."""
    quality = triplet_overlap(pred, gt, mode, iou)
    flags = np.zeros(len(pred), dtype=bool)
    claimed = np.zeros(len(gt), dtype=bool)
    for i in stable_order([t.score for t in pred]):
        q = np.where(claimed, 0.0, quality[i]) if len(gt) else np.zeros(0)
        if len(q) and q.max() > 0:
            g = int(np.argmax(q))
            claimed[g] = True
            flags[i] = True
    return flags


def average_precision(scores, flags, num_gt) -> float:
    """All-point interpolated AP."""
    if num_gt <= 0:
        return 0.0
    order = stable_order(scores)
    flags = np.asarray(flags, dtype=float)[order]
    tp = np.cumsum(flags)
    fp = np.cumsum(1.0 - flags)
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, np.finfo(float).eps)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


class WeightedMAP:
    """Folds scenes into per-predicate ranked lists and GT counts."""

    def __init__(self, mode='rel', iou=0.5):
        self.mode = mode
        self.iou = iou
        self.scores = {p: [] for p in range(len(PREDICATES))}
        self.flags = {p: [] for p in range(len(PREDICATES))}
        self.gt_counts = np.zeros(len(PREDICATES), dtype=int)

    def add(self, pred: Sequence[ScoredTriplet], gt: Sequence[ScoredTriplet]):
        flags = triplet_tp_flags(pred, gt, self.mode, self.iou)
        for t, f in zip(pred, flags):
            self.scores[t.predicate].append(t.score)
            self.flags[t.predicate].append(bool(f))
        for t in gt:
            self.gt_counts[t.predicate] += 1

    def per_predicate(self):
        return {p: average_precision(self.scores[p], self.flags[p], self.gt_counts[p])
                for p in range(len(PREDICATES)) if self.gt_counts[p] > 0}

    def value(self) -> float:
        aps = self.per_predicate()
        total = sum(self.gt_counts[p] for p in aps)
        if total == 0:
            return 0.0
        return float(sum(self.gt_counts[p] * ap for p, ap in aps.items()) / total)


def wmap(pred: Sequence[ScoredTriplet], gt: Sequence[ScoredTriplet], mode='rel', iou=0.5) -> float:
    acc = WeightedMAP(mode, iou)
    acc.add(pred, gt)
    return acc.value()


@dataclass
class MetricsReport:
    per_predicate: Dict[str, dict]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    recall_at_k: float
    k: int
    wmap_rel: float
    wmap_phr: float
    num_scenes: int
    present_predicates: List[str]

    def to_dict(self):
        return {
            'protocol_version': PROTOCOL_VERSION,
            'num_scenes': self.num_scenes,
            'macro': {'precision': self.macro_precision, 'recall': self.macro_recall, 'f1': self.macro_f1},
            f'recall@{self.k}': self.recall_at_k,
            'wmap_rel': self.wmap_rel,
            'wmap_phr': self.wmap_phr,
            'present_predicates': self.present_predicates,
            'per_predicate': self.per_predicate,
        }

    def per_predicate_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame.from_dict(self.per_predicate, orient='index')
        frame.index.name = 'predicate'
        return frame


class MetricsAccumulator:
    def __init__(self, iou=0.5, k=50):
        self.iou = iou
        self.k = k
        self.counts = PredicateCounts()
        self.recall_matched = 0
        self.recall_total = 0
        self.wmap_rel = WeightedMAP('rel', iou)
        self.wmap_phr = WeightedMAP('phr', iou)
        self.num_scenes = 0

    def add(self, pred_graph: SceneGraph, gt_graph: SceneGraph):
        entity_map = match_pred_to_gt_entities(pred_graph.nodes, gt_graph.nodes, self.iou)
        self.counts += relation_counts(pred_graph, gt_graph, entity_map)
        pred_t, gt_t = pred_graph.triplets(), gt_graph.triplets()
        matched, total = recall_counts(pred_t, gt_t, self.k, self.iou)
        self.recall_matched += matched
        self.recall_total += total
        self.wmap_rel.add(pred_t, gt_t)
        self.wmap_phr.add(pred_t, gt_t)
        self.num_scenes += 1

    def report(self) -> MetricsReport:
        rows, macro, present = prf_from_counts(self.counts)
        return MetricsReport(rows, macro['precision'], macro['recall'], macro['f1'],
                             _ratio(self.recall_matched, self.recall_total), self.k,
                             self.wmap_rel.value(), self.wmap_phr.value(), self.num_scenes, present)
