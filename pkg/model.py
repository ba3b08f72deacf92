"""
Single-stage scene-graph model: multi-view encoding, point encoding and
fusion, entity set prediction and relation decoding in one forward pass.
"""

from dataclasses import dataclass
from typing import List, Optional

import torch
from torch import nn

from config import query_mode
from dataset import SceneSample, image_to_tensor
from entity_decoder import EntityDecoder, EntityOutputs, EntitySet, filter_entities, foreground_scores, \
    merge_entity_indices, select_entities, stable_order
from geometry import CameraModel
from multiview_encoder import MultiViewEncoder, MultiViewOutput, SynergicFeature
from pointcloud_encoder import PointEncoder, PointFeatureSet, build_gvc, projection_fuse
from relation_decoder import MemoryFeature, RelationDecodeOutput, RelationQuerySet, RelationStage, \
    assemble_graph, build_memory, build_relation_queries, memory_bias, relation_decode
from scene_graph import SceneGraph


@dataclass
class SceneInput:
    images: List[torch.Tensor]     # 4 x (3, H, W), index 0 is the main view
    cloud: torch.Tensor            # (N, 3)
    cameras: List[CameraModel]
    name: str = ''

    @property
    def image_size(self):
        return self.cameras[0].image_size


def prepare_input(sample: SceneSample, cfg, device='cpu', dtype=torch.float32) -> SceneInput:
    images = [image_to_tensor(v, cfg['data']).to(device=device, dtype=dtype) for v in sample.views]
    cloud = torch.as_tensor(sample.cloud, dtype=dtype, device=device)
    return SceneInput(images, cloud, list(sample.cameras), sample.name)


@dataclass
class FeatureBundle:
    views: MultiViewOutput        # F_m, F_alpha, F_s, main-view positions, R_k grids
    f_p: PointFeatureSet
    f_u: SynergicFeature
    memory: MemoryFeature

    @property
    def grid(self):
        return (self.f_u.h, self.f_u.w)


@dataclass
class SceneOutput:
    bundle: FeatureBundle
    entities: EntityOutputs
    entity_set: EntitySet
    queries: RelationQuerySet
    relations: RelationDecodeOutput


class SceneGraphModel(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        model_cfg = cfg['model']
        self.cfg = cfg
        self.mode, fixed_k = query_mode(cfg)
        self.memory_variant = model_cfg['relation']['memory']
        self.multiview = MultiViewEncoder(model_cfg)
        self.point_encoder = PointEncoder(model_cfg['points'], model_cfg['hidden_dim'])
        self.gvc = build_gvc(model_cfg)
        self.entity_decoder = EntityDecoder(model_cfg)
        self.relation = RelationStage(model_cfg, fixed_k)

    def encode(self, inp: SceneInput) -> FeatureBundle:
        views = self.multiview(inp.images)
        f_p = self.point_encoder(inp.cloud)
        if self.gvc is not None:
            f_u = self.gvc(views.f_s, f_p, views.pos)
        else:
            f_u = projection_fuse(views.f_s, f_p, inp.cameras[0])
        memory = build_memory(f_u, views.memory_grids, self.memory_variant)
        return FeatureBundle(views, f_p, f_u, memory)

    def detect(self, bundle: FeatureBundle) -> EntityOutputs:
        return self.entity_decoder(bundle.f_u.tokens, bundle.views.pos)

    def proposals(self, entities: EntityOutputs, image_size, extra_indices=()) -> EntitySet:
        """Entities that enter pairing: all proposals in fixed:K mode, else filtered ones
        (plus `extra_indices`, the GT-matched proposals during training)."""
        ent = self.cfg['model']['entity']
        if self.mode == 'fixed':
            scores, _, _ = foreground_scores(entities.final.logits.detach())
            return select_entities(entities, image_size, stable_order(scores.cpu().numpy()))
        kept = filter_entities(entities, image_size, ent['score_threshold'], ent['nms_iou'], ent['class_wise_nms'])
        if len(extra_indices) == 0:
            return kept
        scores, _, _ = foreground_scores(entities.final.logits.detach())
        merged = merge_entity_indices(scores.cpu().numpy(), kept.indices.tolist(), extra_indices)
        return select_entities(entities, image_size, merged)

    def relate(self, bundle: FeatureBundle, entity_set: EntitySet, inp: SceneInput, keep_attention=False):
        queries = build_relation_queries(entity_set, bundle.f_p, inp.cameras[0], inp.image_size, bundle.grid,
                                         self.relation)
        bias = memory_bias(queries.masks, bundle.memory) if len(queries) else None
        return queries, relation_decode(queries.queries, bundle.memory, bias, self.relation, keep_attention)

    def forward(self, inp: SceneInput, extra_indices=(), keep_attention=False) -> SceneOutput:
        bundle = self.encode(inp)
        entities = self.detect(bundle)
        entity_set = self.proposals(entities, inp.image_size, extra_indices)
        queries, relations = self.relate(bundle, entity_set, inp, keep_attention)
        return SceneOutput(bundle, entities, entity_set, queries, relations)

    @torch.no_grad()
    def predict(self, inp: SceneInput) -> SceneGraph:
        was_training = self.training
        self.eval()
        out = self(inp)
        self.train(was_training)
        threshold = self.cfg['model']['relation']['threshold']
        return assemble_graph(out.entity_set, out.queries.pairs, out.relations.logits, threshold, inp.name)

    def stage_parameter_counts(self):
        stages = {
            'backbone': self.multiview.backbone,
            'multiview_encoder': self.multiview,
            'point_encoder': self.point_encoder,
            'gvc': self.gvc,
            'entity_decoder': self.entity_decoder,
            'relation': self.relation,
        }
        counts = {name: sum(p.numel() for p in m.parameters()) if m is not None else 0 for name, m in stages.items()}
        counts['total'] = sum(p.numel() for p in self.parameters())
        return counts
