import pytest
import torch

from errors import InputError, ShapeError
from multiview_encoder import SynergicFeature
from nn_core import finite_difference_gradcheck
from pointcloud_encoder import GeometryVisualCohesion, PointEncoder, PointFeatureSet, ball_group, \
    farthest_point_sample, gvc_fuse, projection_fuse


def _cloud(n=64, seed=0):
    return torch.randn(n, 3, generator=torch.Generator().manual_seed(seed))


def test_fps_starts_far_from_centroid_and_is_unique():
    xyz = _cloud()
    idx = farthest_point_sample(xyz, 16)
    far = torch.argmax(((xyz - xyz.mean(0)) ** 2).sum(-1))
    assert idx[0] == far
    assert len(set(idx.tolist())) == 16


def test_fps_second_pick_is_farthest_from_first():
    xyz = torch.tensor([[0.0, 0, 0], [1.0, 0, 0], [5.0, 0, 0], [2.0, 0, 0]])
    idx = farthest_point_sample(xyz, 3)
    assert idx[:2].tolist() == [2, 0]


def test_fps_tiles_small_clouds():
    idx = farthest_point_sample(_cloud(5), 12)
    assert idx.shape == (12,)
    assert torch.equal(idx[:5], idx[5:10])
    with pytest.raises(InputError):
        farthest_point_sample(torch.zeros(0, 3), 4)


def test_ball_group_pads_with_center():
    xyz = torch.tensor([[0.0, 0, 0], [0.1, 0, 0], [3.0, 0, 0]])
    idx = ball_group(xyz, xyz[:1], radius=0.5, group_size=5)
    assert idx.tolist() == [[0, 1, 0, 0, 0]]


def test_point_encoder_shapes(tiny_cfg):
    torch.manual_seed(0)
    enc = PointEncoder(tiny_cfg['model']['points'], 16)
    out = enc(_cloud(200))
    assert out.features.shape == (32, 16)
    assert out.coords.shape == (32, 3)


def test_two_level_encoder(tiny_cfg):
    points = dict(tiny_cfg['model']['points'], levels=2)
    enc = PointEncoder(points, 16)
    assert enc(_cloud(100)).features.shape == (32, 16)
    with pytest.raises(ShapeError):
        PointEncoder(dict(points, mlp=[16, 8]), 16)


def test_point_encoder_rejects_bad_cloud(tiny_cfg):
    enc = PointEncoder(tiny_cfg['model']['points'], 16)
    with pytest.raises(InputError):
        enc(torch.zeros(10, 2))


def test_gvc_is_residual_with_same_shape():
    torch.manual_seed(0)
    module = GeometryVisualCohesion(8, 2)
    f_s = SynergicFeature(torch.randn(6, 8), 2, 3)
    f_p = PointFeatureSet(torch.randn(10, 8), torch.randn(10, 3))
    f_u = gvc_fuse(f_s, f_p, module)
    assert f_u.tokens.shape == (6, 8) and (f_u.h, f_u.w) == (2, 3)
    assert torch.allclose(f_u.tokens - f_s.tokens, module.cross_term(f_s.tokens, f_p.features))
    with pytest.raises(ShapeError):
        module.cross_term(torch.randn(6, 8), torch.randn(10, 4))


def test_projection_fuse_adds_cell_means(camera):
    f_s = SynergicFeature(torch.zeros(6, 4), 2, 3)
    # both points project to the principal point (48, 32): bottom-middle cell of a 2x3 grid
    coords = torch.tensor([[0.0, 0.0, 0.5], [0.0, 0.0, 0.5]])
    feats = torch.tensor([[1.0, 2.0, 3.0, 4.0], [3.0, 2.0, 1.0, 0.0]])
    f_u = projection_fuse(f_s, PointFeatureSet(feats, coords), camera)
    assert f_u.tokens[4].tolist() == [2.0, 2.0, 2.0, 2.0]
    assert f_u.tokens[[0, 1, 2, 3, 5]].abs().sum() == 0


def test_gradcheck_gvc(double_precision):
    torch.manual_seed(0)
    module = GeometryVisualCohesion(8, 2)
    gen = torch.Generator().manual_seed(5)
    f_s, f_p = torch.randn(6, 8, generator=gen), torch.randn(5, 8, generator=gen)
    coords = torch.zeros(5, 3)

    def op(a, b):
        return gvc_fuse(SynergicFeature(a, 2, 3), PointFeatureSet(b, coords), module).tokens

    report = finite_difference_gradcheck(op, [f_s, f_p])
    assert report.passed, report.messages


def test_point_encoder_ignores_input_order(tiny_cfg):
    for levels in (1, 2):
        torch.manual_seed(0)
        enc = PointEncoder(dict(tiny_cfg['model']['points'], levels=levels), 16)
        for seed in range(3):
            cloud = _cloud(150, seed=seed)
            perm = torch.randperm(150, generator=torch.Generator().manual_seed(10 + seed))
            base, moved = enc(cloud), enc(cloud[perm])
            assert torch.allclose(base.coords, moved.coords)
            assert torch.allclose(base.features, moved.features, atol=1e-5)


def test_unified_feature_gradient_reaches_point_coordinates(tiny_cfg):
    torch.manual_seed(0)
    enc = PointEncoder(tiny_cfg['model']['points'], 16)
    module = GeometryVisualCohesion(16, 2)
    cloud = _cloud(120).requires_grad_(True)
    f_s = SynergicFeature(torch.randn(6, 16, generator=torch.Generator().manual_seed(1)), 2, 3)
    f_u = gvc_fuse(f_s, enc(cloud), module)
    f_u.tokens.pow(2).sum().backward()
    assert cloud.grad is not None
    assert cloud.grad.abs().sum() > 0
