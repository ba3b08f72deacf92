"""
Per-view backbone features, the shared transformer encoder, and View-Sync
Transfusion (main-view queries attending to the concatenated auxiliary views).
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Optional

import torch
from torch import nn
from torchvision.models import resnet50

from errors import ConfigurationError, ShapeError
from nn_core import EncoderLayer, FeedForward, MultiHeadAttention, flat_positional_encoding
from config import MEMORY_VARIANTS

STRIDE = 32


@dataclass
class ViewFeatureGrid:
    tokens: torch.Tensor   # (h*w, C)
    h: int
    w: int
    view: int              # 1-based view number
    stride: int = STRIDE

    @property
    def shape(self):
        return (self.h, self.w)


@dataclass
class SynergicFeature:
    tokens: torch.Tensor   # (h*w, C)
    h: int
    w: int


class ToyBackbone(nn.Module):
    """Five stride-2 conv3x3 stages: an (H, W) image becomes a ceil(H/32) x ceil(W/32) grid."""

    def __init__(self, widths=(32, 64, 128, 256, 256)):
        super().__init__()
        stages, in_ch = [], 3
        for out_ch in widths:
            stages.append(nn.Sequential(
                nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=2, padding=1, bias=False),
                nn.GroupNorm(8, out_ch),
                nn.ReLU(inplace=True),
            ))
            in_ch = out_ch
        self.stages = nn.Sequential(*stages)
        self.out_channels = in_ch

    def forward(self, image):
        return self.stages(image)


class ResNet50Backbone(nn.Module):
    """Reference slot for the 50-layer residual network (randomly initialized)."""

    def __init__(self):
        super().__init__()
        net = resnet50(weights=None)
        self.body = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool,
                                  net.layer1, net.layer2, net.layer3, net.layer4)
        self.out_channels = 2048

    def forward(self, image):
        return self.body(image)


def build_backbone(model_cfg):
    if model_cfg['backbone'] == 'toy':
        return ToyBackbone(model_cfg['backbone_widths'])
    if model_cfg['backbone'] == 'resnet50-like':
        return ResNet50Backbone()
    raise ConfigurationError(f"unknown backbone {model_cfg['backbone']!r}")


def expected_grid(height, width, stride=STRIDE):
    return math.ceil(height / stride), math.ceil(width / stride)


class ViewSyncTransfusion(nn.Module):
    """F1 = LN(F_m + A(F_m, F_alpha)); F_s = LN(FFN(F1) + F1)."""

    def __init__(self, width, heads, ffn_dim, dropout=0.0, activation='relu'):
        super().__init__()
        self.cross_attn = MultiHeadAttention(width, heads, dropout)
        self.norm1 = nn.LayerNorm(width)
        self.ffn = FeedForward(width, ffn_dim, dropout, activation)
        self.norm2 = nn.LayerNorm(width)
        self.dropout = nn.Dropout(dropout)

    def forward(self, main_tokens, aux_tokens, main_pos=None, aux_pos=None):
        q = main_tokens if main_pos is None else main_tokens + main_pos
        k = aux_tokens if aux_pos is None else aux_tokens + aux_pos
        attended = self.cross_attn(q, k, aux_tokens).output
        fused = self.norm1(main_tokens + self.dropout(attended))
        return self.norm2(fused + self.dropout(self.ffn(fused)))


def vst_fuse(main: SynergicFeature, aux: List[ViewFeatureGrid], module: ViewSyncTransfusion,
             main_pos=None, aux_pos: Optional[List[torch.Tensor]] = None) -> SynergicFeature:
    """Fuse auxiliary views into the main-view sequence; aux grids may differ in size."""
    if not aux:
        raise ConfigurationError('VST needs at least one auxiliary view')
    widths = {g.tokens.shape[-1] for g in aux} | {main.tokens.shape[-1]}
    if len(widths) != 1:
        raise ShapeError(f'VST channel widths differ: {sorted(widths)}')
    f_alpha = torch.cat([g.tokens for g in aux], dim=0)
    pos_alpha = torch.cat(aux_pos, dim=0) if aux_pos is not None else None
    fused = module(main.tokens, f_alpha, main_pos, pos_alpha)
    return SynergicFeature(fused, main.h, main.w)


@dataclass
class MultiViewOutput:
    f_m: torch.Tensor                     # encoded main view (h*w, C)
    f_alpha: Optional[torch.Tensor]       # concatenated auxiliary views, None when VST is off
    f_s: SynergicFeature
    pos: torch.Tensor                     # main-view sine encoding (h*w, C)
    memory_grids: Dict[int, ViewFeatureGrid]   # channel-projected raw backbone grids R_k


class MultiViewEncoder(nn.Module):
    def __init__(self, model_cfg):
        super().__init__()
        width = model_cfg['hidden_dim']
        vst_cfg = model_cfg['vst']
        self.width = width
        self.min_edge = model_cfg['min_image_edge']
        self.query_view = vst_cfg['query_view']
        self.kv_views = list(vst_cfg['kv_views']) if vst_cfg['enabled'] else []
        self.memory_views = list(MEMORY_VARIANTS[model_cfg['relation']['memory']])
        self.encode_aux_views = model_cfg['encode_aux_views']

        self.backbone = build_backbone(model_cfg)
        self.input_proj = nn.Conv2d(self.backbone.out_channels, width, kernel_size=1)
        self.memory_proj = nn.Conv2d(self.backbone.out_channels, width, kernel_size=1) if self.memory_views else None
        self.encoder = nn.ModuleList(
            EncoderLayer(width, model_cfg['heads'], model_cfg['ffn_dim'], model_cfg['dropout'], model_cfg['activation'])
            for _ in range(model_cfg['encoder_layers'])
        )
        self.vst = ViewSyncTransfusion(width, model_cfg['heads'], model_cfg['ffn_dim'],
                                       model_cfg['dropout'], model_cfg['activation']) if self.kv_views else None

    def backbone_extract(self, image, view=1):
        """(3, H, W) image -> (raw backbone map (1, C_b, h, w), projected ViewFeatureGrid)."""
        if image.dim() != 3 or image.shape[0] != 3:
            raise ShapeError(f'expected a (3, H, W) image, got {tuple(image.shape)}')
        if min(image.shape[1:]) < self.min_edge:
            raise ShapeError(f'image short edge {min(image.shape[1:])} below {self.min_edge}')
        raw = self.backbone(image.unsqueeze(0))
        proj = self.input_proj(raw)[0]
        h, w = proj.shape[1:]
        return raw, ViewFeatureGrid(proj.flatten(1).transpose(0, 1), h, w, view)

    def transformer_encode(self, grid: ViewFeatureGrid) -> ViewFeatureGrid:
        if not self.encoder:
            return grid
        pos = flat_positional_encoding(grid.h, grid.w, self.width, like=grid.tokens)
        x = grid.tokens
        for layer in self.encoder:
            x = layer(x, pos)
        return ViewFeatureGrid(x, grid.h, grid.w, grid.view, grid.stride)

    def forward(self, images: List[torch.Tensor]) -> MultiViewOutput:
        """`images` holds the four views in record order (index 0 is View#1)."""
        if len(images) < max([self.query_view] + self.kv_views + self.memory_views):
            raise ConfigurationError(f'{len(images)} views given, configuration needs more')
        needed = sorted({self.query_view, *self.kv_views, *self.memory_views})
        grids, memory_grids = {}, {}
        for view in needed:
            raw, grid = self.backbone_extract(images[view - 1], view)
            if view == self.query_view or view in self.kv_views:
                grids[view] = grid
            if view in self.memory_views:
                mem = self.memory_proj(raw)[0]
                memory_grids[view] = ViewFeatureGrid(mem.flatten(1).transpose(0, 1), mem.shape[1], mem.shape[2], view)

        main = self.transformer_encode(grids[self.query_view])
        main_pos = flat_positional_encoding(main.h, main.w, self.width, like=main.tokens)
        if self.vst is None:
            f_s = SynergicFeature(main.tokens, main.h, main.w)
            return MultiViewOutput(main.tokens, None, f_s, main_pos, memory_grids)

        aux, aux_pos = [], []
        for view in self.kv_views:
            grid = self.transformer_encode(grids[view]) if self.encode_aux_views else grids[view]
            aux.append(grid)
            aux_pos.append(flat_positional_encoding(grid.h, grid.w, self.width, like=grid.tokens))
        f_s = vst_fuse(SynergicFeature(main.tokens, main.h, main.w), aux, self.vst, main_pos, aux_pos)
        f_alpha = torch.cat([g.tokens for g in aux], dim=0)
        return MultiViewOutput(main.tokens, f_alpha, f_s, main_pos, memory_grids)
