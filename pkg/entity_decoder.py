"""
Set prediction of entities from the unified feature: learned queries, a
6-layer decoder, class / box heads, score filtering and NMS.
"""

from dataclasses import dataclass
from typing import List

import numpy as np
import torch
from torch import nn

from geometry import box_iou_matrix, normalized_cxcywh_to_xyxy
from nn_core import MLP, DecoderLayer


@dataclass
class EntityLayerOutput:
    logits: torch.Tensor   # (Q, num_classes + 1), last column is background
    boxes: torch.Tensor    # (Q, 4) normalized cxcywh in [0, 1]


@dataclass
class EntityOutputs:
    layers: List[EntityLayerOutput]   # one per decoder layer, final layer last
    embeddings: torch.Tensor          # (Q, C) final decoder output

    @property
    def final(self):
        return self.layers[-1]


@dataclass
class EntitySet:
    """Surviving proposals as stacked tensors, ordered by descending score."""
    indices: torch.Tensor      # (N,) query indices
    boxes: torch.Tensor        # (N, 4) xyxy pixels, differentiable
    logits: torch.Tensor       # (N, K + 1)
    labels: torch.Tensor       # (N,)
    scores: torch.Tensor       # (N,)
    embeddings: torch.Tensor   # (N, C)

    def __len__(self):
        return int(self.indices.shape[0])


class EntityDecoder(nn.Module):
    def __init__(self, model_cfg):
        super().__init__()
        width = model_cfg['hidden_dim']
        ent = model_cfg['entity']
        self.num_classes = ent['num_classes']
        self.query_embed = nn.Embedding(ent['num_queries'], width)
        self.layers = nn.ModuleList(
            DecoderLayer(width, model_cfg['heads'], model_cfg['ffn_dim'], model_cfg['dropout'], model_cfg['activation'])
            for _ in range(ent['decoder_layers'])
        )
        self.norm = nn.LayerNorm(width)
        self.class_head = nn.Linear(width, self.num_classes + 1)
        self.box_head = MLP([width, width, width, 4])

    def forward(self, memory, memory_pos=None, queries=None) -> EntityOutputs:
        return decode_entities(memory, self, memory_pos, queries)


def decode_entities(memory, decoder: EntityDecoder, memory_pos=None, queries=None) -> EntityOutputs:
    """Queries attend to F_u (positions on keys); every layer emits class and box predictions."""
    tgt = decoder.query_embed.weight if queries is None else queries
    layers = []
    for layer in decoder.layers:
        tgt, _ = layer(tgt, memory, memory_pos=memory_pos)
        hidden = decoder.norm(tgt)
        layers.append(EntityLayerOutput(decoder.class_head(hidden), decoder.box_head(hidden).sigmoid()))
    if not layers:
        hidden = decoder.norm(tgt)
        layers.append(EntityLayerOutput(decoder.class_head(hidden), decoder.box_head(hidden).sigmoid()))
    return EntityOutputs(layers, hidden)


def foreground_scores(logits):
    """(score, label): max softmax probability over the foreground classes."""
    probs = logits.softmax(dim=-1)
    scores, labels = probs[:, :-1].max(dim=-1)
    is_background = probs.argmax(dim=-1) == logits.shape[-1] - 1
    return scores, labels, is_background


def stable_order(scores: np.ndarray) -> np.ndarray:
    """Descending score, ties by ascending index."""
    scores = np.asarray(scores, dtype=float)
    return np.lexsort((np.arange(len(scores)), -scores))


def greedy_nms(boxes: np.ndarray, scores: np.ndarray, labels: np.ndarray, iou_threshold, class_wise=True):
    """Indices kept by greedy NMS, in stable descending-score order."""
    order = stable_order(scores)
    iou = box_iou_matrix(boxes, boxes)
    keep = []
    for i in order:
        suppressed = any(
            iou[i, j] > iou_threshold and (not class_wise or labels[i] == labels[j]) for j in keep
        )
        if not suppressed:
            keep.append(int(i))
    return keep


def select_entities(outputs: EntityOutputs, image_size, indices) -> EntitySet:
    final = outputs.final
    idx = torch.as_tensor(list(indices), dtype=torch.long, device=final.logits.device)
    scores, labels, _ = foreground_scores(final.logits)
    boxes = normalized_cxcywh_to_xyxy(final.boxes, image_size)
    return EntitySet(idx, boxes[idx], final.logits[idx], labels[idx], scores[idx], outputs.embeddings[idx])


def filter_entities(outputs: EntityOutputs, image_size, score_threshold=0.5, nms_iou=0.7,
                    class_wise=True) -> EntitySet:
    """Drop background-argmax and low-score proposals, then class-wise greedy NMS."""
    final = outputs.final
    scores, labels, is_background = foreground_scores(final.logits.detach())
    candidates = ((~is_background) & (scores > score_threshold)).nonzero().flatten().cpu().numpy()
    if len(candidates) == 0:
        return select_entities(outputs, image_size, [])
    boxes = normalized_cxcywh_to_xyxy(final.boxes.detach(), image_size)[candidates].cpu().numpy()
    kept = greedy_nms(boxes, scores[candidates].cpu().numpy(), labels[candidates].cpu().numpy(),
                      nms_iou, class_wise)
    return select_entities(outputs, image_size, [int(candidates[k]) for k in kept])


def merge_entity_indices(scores, primary, extra):
    """Union of two index lists in stable descending-score order."""
    merged = sorted(set(int(i) for i in primary) | set(int(i) for i in extra))
    if not merged:
        return []
    order = stable_order(np.asarray([float(scores[i]) for i in merged]))
    return [merged[k] for k in order]
