"""
Set-abstraction point encoder (farthest-point sampling, radius grouping,
shared MLP, max-pool) and Geometry-Visual Cohesion, which folds the point
features into the 2D synergic feature.
"""

from dataclasses import dataclass

import torch
from torch import nn

from errors import InputError, ShapeError
from geometry import project_points
from multiview_encoder import SynergicFeature
from nn_core import MultiHeadAttention


@dataclass
class PointFeatureSet:
    features: torch.Tensor   # (S, C)
    coords: torch.Tensor     # (S, 3) world meters

    def __post_init__(self):
        if self.features.shape[0] != self.coords.shape[0]:
            raise ShapeError(f'{self.features.shape[0]} point features for {self.coords.shape[0]} coordinates')


def farthest_point_sample(xyz: torch.Tensor, count: int) -> torch.Tensor:
    """Indices of `count` points; starts from the point farthest from the centroid.

    Ties go to the lowest index. When the cloud holds fewer than `count` points the full
    farthest-point ordering is tiled.
    """
    n = xyz.shape[0]
    if n == 0:
        raise InputError('empty point cloud')
    xyz = xyz.detach()
    steps = min(count, n)
    order = torch.empty(steps, dtype=torch.long, device=xyz.device)
    centroid = xyz.mean(dim=0, keepdim=True)
    farthest = torch.argmax(((xyz - centroid) ** 2).sum(dim=-1))
    distance = torch.full((n,), float('inf'), dtype=xyz.dtype, device=xyz.device)
    for i in range(steps):
        order[i] = farthest
        dist = ((xyz - xyz[farthest]) ** 2).sum(dim=-1)
        distance = torch.minimum(distance, dist)
        farthest = torch.argmax(distance)
    if steps < count:
        order = order[torch.arange(count, device=xyz.device) % steps]
    return order


def ball_group(xyz: torch.Tensor, centers: torch.Tensor, radius: float, group_size: int) -> torch.Tensor:
    """(S, group_size) indices of the nearest points within `radius` of each center.

    Short groups are padded with their nearest point; a center always groups itself.
    """
    dist = torch.cdist(centers.detach(), xyz.detach())
    k = min(group_size, xyz.shape[0])
    nearest, idx = torch.sort(dist, dim=-1, stable=True)
    nearest, idx = nearest[:, :k], idx[:, :k]
    first = idx[:, :1].expand_as(idx)
    idx = torch.where(nearest <= radius, idx, first)
    if k < group_size:
        idx = torch.cat([idx, idx[:, :1].expand(-1, group_size - k)], dim=1)
    return idx


class SetAbstraction(nn.Module):
    """Group around sampled centers, run a shared point MLP, max-pool each group."""

    def __init__(self, in_dim, mlp_dims, radius, group_size):
        super().__init__()
        self.radius = radius
        self.group_size = group_size
        layers, d = [], in_dim
        for out in mlp_dims:
            layers += [nn.Linear(d, out), nn.ReLU()]
            d = out
        self.mlp = nn.Sequential(*layers)

    def forward(self, xyz, centers, point_feats=None):
        idx = ball_group(xyz, centers, self.radius, self.group_size)
        grouped = xyz[idx]                                     # (S, K, 3)
        parts = [grouped - centers.unsqueeze(1), grouped]
        if point_feats is not None:
            parts.append(point_feats[idx])
        return self.mlp(torch.cat(parts, dim=-1)).max(dim=1).values


class PointEncoder(nn.Module):
    def __init__(self, points_cfg, width):
        super().__init__()
        self.count = points_cfg['count']
        self.levels = points_cfg['levels']
        mlp = list(points_cfg['mlp'])
        if mlp[-1] != width:
            raise ShapeError(f'point MLP ends at {mlp[-1]}, model width is {width}')
        self.sa1 = SetAbstraction(6, mlp, points_cfg['radius'], points_cfg['group_size'])
        self.sa2 = None
        if self.levels == 2:
            self.sa2 = SetAbstraction(6 + width, [width, width], 2 * points_cfg['radius'], points_cfg['group_size'])

    def forward(self, cloud: torch.Tensor) -> PointFeatureSet:
        return encode_points(cloud, self)


def encode_points(cloud: torch.Tensor, encoder: PointEncoder) -> PointFeatureSet:
    if cloud.dim() != 2 or cloud.shape[-1] != 3:
        raise InputError(f'point cloud must be (N, 3), got {tuple(cloud.shape)}')
    if cloud.shape[0] == 0:
        raise InputError('empty point cloud')
    idx = farthest_point_sample(cloud, encoder.count)
    centers = cloud[idx]
    feats = encoder.sa1(cloud, centers)
    if encoder.sa2 is not None:
        feats = encoder.sa2(centers, centers, feats)
    return PointFeatureSet(feats, centers)


class SelfAttentionBlock(nn.Module):
    """x = LN(x + A(x + pos, x + pos, x))."""

    def __init__(self, width, heads, dropout=0.0):
        super().__init__()
        self.attn = MultiHeadAttention(width, heads, dropout)
        self.norm = nn.LayerNorm(width)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, pos=None):
        qk = x if pos is None else x + pos
        return self.norm(x + self.dropout(self.attn(qk, qk, x).output))


class GeometryVisualCohesion(nn.Module):
    """F_u = F_s + CA(SA(F_s), SA(F_p))."""

    def __init__(self, width, heads, sa_layers=1, dropout=0.0, use_pos=True):
        super().__init__()
        self.use_pos = use_pos
        self.sa_visual = nn.ModuleList(SelfAttentionBlock(width, heads, dropout) for _ in range(sa_layers))
        self.sa_points = nn.ModuleList(SelfAttentionBlock(width, heads, dropout) for _ in range(sa_layers))
        self.cross_attn = MultiHeadAttention(width, heads, dropout)

    def cross_term(self, f_s_tokens, f_p_tokens, pos=None):
        if f_s_tokens.shape[-1] != f_p_tokens.shape[-1]:
            raise ShapeError(f'GVC widths differ: {f_s_tokens.shape[-1]} vs {f_p_tokens.shape[-1]}')
        visual = f_s_tokens
        for block in self.sa_visual:
            visual = block(visual, pos if self.use_pos else None)
        geometric = f_p_tokens
        for block in self.sa_points:
            geometric = block(geometric)
        return self.cross_attn(visual, geometric, geometric).output

    def forward(self, f_s: SynergicFeature, f_p: PointFeatureSet, pos=None) -> SynergicFeature:
        return SynergicFeature(f_s.tokens + self.cross_term(f_s.tokens, f_p.features, pos), f_s.h, f_s.w)


def gvc_fuse(f_s: SynergicFeature, f_p: PointFeatureSet, module: GeometryVisualCohesion, pos=None) -> SynergicFeature:
    return module(f_s, f_p, pos)


def projection_fuse(f_s: SynergicFeature, f_p: PointFeatureSet, cam_main) -> SynergicFeature:
    """Cross-attention-free fallback: scatter-average point features into the main-view
    cells their projections land in, then add them to F_s."""
    pixels, _, valid = project_points(f_p.coords.detach().cpu().numpy(), cam_main)
    width, height = cam_main.image_size
    cols = torch.as_tensor(pixels[:, 0] * f_s.w / width, device=f_s.tokens.device).floor().long().clamp(0, f_s.w - 1)
    rows = torch.as_tensor(pixels[:, 1] * f_s.h / height, device=f_s.tokens.device).floor().long().clamp(0, f_s.h - 1)
    keep = torch.as_tensor(valid, device=f_s.tokens.device)
    cells = (rows * f_s.w + cols)[keep]
    feats = f_p.features[keep]
    summed = torch.zeros_like(f_s.tokens).index_add(0, cells, feats)
    counts = torch.zeros(f_s.h * f_s.w, dtype=f_s.tokens.dtype, device=f_s.tokens.device)
    counts = counts.index_add(0, cells, torch.ones_like(cells, dtype=f_s.tokens.dtype))
    return SynergicFeature(f_s.tokens + summed / counts.clamp(min=1.0).unsqueeze(-1), f_s.h, f_s.w)


def build_gvc(model_cfg):
    gvc = model_cfg['gvc']
    if not gvc['enabled']:
        return None
    return GeometryVisualCohesion(model_cfg['hidden_dim'], model_cfg['heads'], gvc['sa_layers'],
                                  model_cfg['dropout'], gvc['use_pos'])
