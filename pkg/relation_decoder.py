"""
Relation stage: ordered entity pairs, relational trait priors, dynamic relation
queries, the cross-attention memory, foreground-union masks and the
relation-sensitive transformer that emits multi-label predicate logits.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from config import MEMORY_VARIANTS
from entity_decoder import EntitySet, stable_order
from errors import ConfigurationError
from geometry import Box2D, boxes_to_tensor, mask_to_bias, pair_union_masks, project_points, spatial_features
from logging_utils import get_logger
from multiview_encoder import SynergicFeature, ViewFeatureGrid
from nn_core import MLP, DecoderLayer
from pointcloud_encoder import PointFeatureSet
from scene_graph import GraphEdge, GraphNode, SceneGraph

logger = get_logger('relation_decoder')

SPATIAL_DIM = 5


@dataclass
class RelationQuerySet:
    queries: torch.Tensor          # (P, C)
    pairs: torch.Tensor            # (P, 2) subject / object rows of the entity set
    masks: torch.Tensor            # (P, h, w) bool foreground union over the F_u grid
    priors: torch.Tensor           # (P, D) trait-prior input to the MLP
    empty_pool: torch.Tensor = None  # (N,) entities whose box holds no projected point
    pair_logits: Optional[torch.Tensor] = None   # fixed:K mode, pre-selection confidence (all pairs)
    candidate_pairs: Optional[torch.Tensor] = None

    def __len__(self):
        return int(self.pairs.shape[0])


@dataclass
class MemoryFeature:
    tokens: torch.Tensor   # (M, C); the first fu_rows rows are F_u verbatim
    fu_rows: int
    h: int
    w: int


@dataclass
class RelationDecodeOutput:
    layer_logits: List[torch.Tensor]               # (P, num_predicates) per decoder layer
    attention: List[torch.Tensor] = field(default_factory=list)   # (heads, P, M) per layer
    fallback_rows: List[torch.Tensor] = field(default_factory=list)

    @property
    def logits(self):
        return self.layer_logits[-1]


def ordered_pairs(n, device=None) -> torch.Tensor:
    """(n(n-1), 2) row-major ordered pairs (i, j), i != j."""
    if n < 2:
        return torch.zeros(0, 2, dtype=torch.long, device=device)
    ii, jj = torch.meshgrid(torch.arange(n, device=device), torch.arange(n, device=device), indexing='ij')
    keep = ii != jj
    return torch.stack([ii[keep], jj[keep]], dim=-1)


def _points_in_boxes(point_set: PointFeatureSet, cam_main, boxes: torch.Tensor) -> torch.Tensor:
    """(N, S) bool: point s projects validly into the main view inside box n."""
    pixels, _, valid = project_points(point_set.coords.detach().cpu().numpy(), cam_main)
    pix = torch.as_tensor(pixels, dtype=boxes.dtype, device=boxes.device)
    valid = torch.as_tensor(valid, device=boxes.device)
    b = boxes.detach()
    inside = (
        (pix[None, :, 0] >= b[:, None, 0]) & (pix[None, :, 0] <= b[:, None, 2])
        & (pix[None, :, 1] >= b[:, None, 1]) & (pix[None, :, 1] <= b[:, None, 3])
    )
    return inside & valid[None, :]


def pool_point_features_batch(point_set: PointFeatureSet, cam_main, boxes: torch.Tensor):
    """Mean point feature per box; (N, C) features and an (N,) empty flag."""
    width = point_set.features.shape[-1]
    if boxes.shape[0] == 0:
        return point_set.features.new_zeros(0, width), torch.zeros(0, dtype=torch.bool)
    member = _points_in_boxes(point_set, cam_main, boxes).to(point_set.features.dtype)
    counts = member.sum(dim=1, keepdim=True)
    pooled = member @ point_set.features / counts.clamp(min=1.0)
    return pooled, (counts.squeeze(-1) == 0).cpu()


def pool_point_features(point_set: PointFeatureSet, cam_main, box: Box2D):
    pooled, empty = pool_point_features_batch(point_set, cam_main,
                                              boxes_to_tensor([box], point_set.features.dtype).to(point_set.features.device))
    if bool(empty[0]):
        logger.debug('[INFO] no projected point inside box %s', box.as_list())
    return pooled[0], bool(empty[0])


class RelationStage(nn.Module):
    """Trait-prior MLP, optional pair scorer, and the relation-sensitive decoder."""

    def __init__(self, model_cfg, fixed_k=None):
        super().__init__()
        width = model_cfg['hidden_dim']
        rel = model_cfg['relation']
        self.use_spatial = rel['use_spatial']
        self.use_points = rel['use_points']
        self.fixed_k = fixed_k
        self.prior_dim = 2 * width + (SPATIAL_DIM if self.use_spatial else 0) + (2 * width if self.use_points else 0)
        self.trait_mlp = MLP([self.prior_dim, rel['mlp_hidden'], width])
        self.pair_scorer = MLP([width, width, 1]) if fixed_k else None
        self.layers = nn.ModuleList(
            DecoderLayer(width, model_cfg['heads'], model_cfg['ffn_dim'], model_cfg['dropout'], model_cfg['activation'])
            for _ in range(rel['decoder_layers'])
        )
        self.head = nn.Linear(width, rel['num_predicates'])
        self.num_predicates = rel['num_predicates']


def trait_priors(entities: EntitySet, pairs, pooled, image_size, use_spatial=True, use_points=True):
    """[R_ij, S_ij, P_ij] rows for each ordered pair."""
    subj, obj = pairs[:, 0], pairs[:, 1]
    parts = [entities.embeddings[subj], entities.embeddings[obj]]
    if use_spatial:
        parts.append(spatial_features(entities.boxes[subj], entities.boxes[obj], image_size).to(entities.embeddings.dtype))
    if use_points:
        parts += [pooled[subj], pooled[obj]]
    return torch.cat(parts, dim=-1)


def build_relation_queries(entities: EntitySet, point_set: PointFeatureSet, cam_main, image_size, grid,
                           stage: RelationStage) -> RelationQuerySet:
    device = entities.embeddings.device
    n = len(entities)
    pairs = ordered_pairs(n, device)
    pooled, empty = pool_point_features_batch(point_set, cam_main, entities.boxes)
    width = entities.embeddings.shape[-1]
    if len(pairs) == 0:
        h, w = grid
        return RelationQuerySet(entities.embeddings.new_zeros(0, width), pairs,
                                torch.zeros(0, h, w, dtype=torch.bool, device=device),
                                entities.embeddings.new_zeros(0, stage.prior_dim), empty)
    priors = trait_priors(entities, pairs, pooled, image_size, stage.use_spatial, stage.use_points)
    queries = stage.trait_mlp(priors)
    masks = pair_union_masks(entities.boxes, pairs, grid, image_size)
    query_set = RelationQuerySet(queries, pairs, masks, priors, empty)
    if stage.fixed_k:
        query_set = select_top_pairs(query_set, stage)
    return query_set


def select_top_pairs(query_set: RelationQuerySet, stage: RelationStage) -> RelationQuerySet:
    """fixed:K mode: keep the K most confident pairs (stable on ties)."""
    pair_logits = stage.pair_scorer(query_set.queries).squeeze(-1)
    order = stable_order(pair_logits.detach().cpu().numpy())[:stage.fixed_k]
    keep = torch.as_tensor(np.sort(order), dtype=torch.long, device=query_set.queries.device)
    return RelationQuerySet(query_set.queries[keep], query_set.pairs[keep], query_set.masks[keep],
                            query_set.priors[keep], query_set.empty_pool, pair_logits, query_set.pairs)


def _resize_grid(grid: ViewFeatureGrid, h, w):
    if (grid.h, grid.w) == (h, w):
        return grid.tokens
    x = grid.tokens.transpose(0, 1).reshape(1, -1, grid.h, grid.w)
    x = F.interpolate(x, size=(h, w), mode='bilinear', align_corners=False)
    return x[0].flatten(1).transpose(0, 1)


def build_memory(f_u: SynergicFeature, memory_grids: Dict[int, ViewFeatureGrid], variant='fu_r4') -> MemoryFeature:
    """M = [F_u, R_k...] with every R_k resized to the F_u grid."""
    if variant not in MEMORY_VARIANTS:
        raise ConfigurationError(f'unknown memory variant {variant!r}')
    parts = [f_u.tokens]
    for view in MEMORY_VARIANTS[variant]:
        if view not in memory_grids:
            raise ConfigurationError(f'memory variant {variant} needs view {view}')
        parts.append(_resize_grid(memory_grids[view], f_u.h, f_u.w))
    return MemoryFeature(torch.cat(parts, dim=0), f_u.tokens.shape[0], f_u.h, f_u.w)


def memory_bias(masks: torch.Tensor, memory: MemoryFeature, dtype=None) -> torch.Tensor:
    """(P, M) additive bias: Z on the F_u rows, 0 on auxiliary-view rows."""
    dtype = dtype or memory.tokens.dtype
    z = mask_to_bias(masks.reshape(masks.shape[0], -1), dtype=dtype).to(memory.tokens.device)
    rest = memory.tokens.shape[0] - memory.fu_rows
    return torch.cat([z, z.new_zeros(z.shape[0], rest)], dim=1)


def relation_decode(queries: torch.Tensor, memory: MemoryFeature, bias: Optional[torch.Tensor],
                    stage: RelationStage, keep_attention=False) -> RelationDecodeOutput:
    """Unmasked self-attention over queries, masked cross-attention to M, no positional encoding."""
    if queries.shape[0] == 0:
        empty = queries.new_zeros(0, stage.num_predicates)
        return RelationDecodeOutput([empty for _ in range(max(1, len(stage.layers)))])
    out = RelationDecodeOutput([])
    x = queries
    for layer in stage.layers:
        x, cross = layer(x, memory.tokens, memory_mask=bias)
        out.layer_logits.append(stage.head(x))
        out.fallback_rows.append(cross.fallback_rows)
        if keep_attention:
            out.attention.append(cross.weights)
    if not stage.layers:
        out.layer_logits.append(stage.head(x))
    if any(bool(f.any()) for f in out.fallback_rows):
        logger.debug('[INFO] relation queries with an all-masked memory fell back to uniform attention')
    return out


def assemble_graph(entities: EntitySet, pairs: torch.Tensor, logits: torch.Tensor, threshold=0.5, name='') -> SceneGraph:
    """Edges where sigmoid(logit) > threshold, sorted by descending score."""
    nodes = [GraphNode(int(entities.labels[i]), [float(v) for v in entities.boxes[i].tolist()], float(entities.scores[i]))
             for i in range(len(entities))]
    edges = []
    if logits.numel():
        probs = logits.detach().sigmoid().cpu()
        rows, preds = (probs > threshold).nonzero(as_tuple=True)
        for r, p in zip(rows.tolist(), preds.tolist()):
            s, o = pairs[r].tolist()
            edges.append(GraphEdge(s, o, p, float(probs[r, p])))
    edges.sort(key=lambda e: -e.score)
    return SceneGraph(nodes, edges, name)
