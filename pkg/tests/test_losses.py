import itertools
import math

import numpy as np
import pytest
import torch

from entity_decoder import EntityLayerOutput
from errors import MatchError
from geometry import Box2D
from losses import assign_pair_targets, entity_layer_loss, entity_loss, focal_loss, giou, hungarian_match, \
    min_cost_assignment, pair_confidence_loss, relation_loss, total_loss
from relation_decoder import ordered_pairs

LOSS_CFG = {
    'focal': {'alpha': 0.25, 'gamma': 2.0},
    'match_weights': [2.0, 5.0, 2.0],
    'entity_weights': [2.0, 5.0, 2.0],
    'aux': True,
}


def _brute_force(cost):
    q, g = cost.shape
    best = math.inf
    for rows in itertools.permutations(range(q), g):
        best = min(best, sum(cost[r, c] for c, r in enumerate(rows)))
    return best


def test_focal_reduces_to_bce():
    p = torch.arange(1, 1000, dtype=torch.float64) / 1000.0
    for y in (0.0, 1.0):
        target = torch.full_like(p, y)
        bce = -(target * torch.log(p) + (1 - target) * torch.log(1 - p))
        assert torch.allclose(focal_loss(p, target, alpha=1.0, gamma=0.0), bce, atol=1e-12, rtol=0)


def test_focal_closed_form():
    value = focal_loss(torch.tensor(0.5, dtype=torch.float64), 1.0, alpha=1.0, gamma=2.0)
    assert float(value) == pytest.approx(0.25 * math.log(2), abs=1e-9)
    p = torch.tensor([0.6, 0.8, 0.99], dtype=torch.float64)
    assert (focal_loss(p, torch.ones(3)).diff() < 0).all()


def test_giou_cases():
    a = Box2D(0, 0, 1, 1)
    assert giou(a, a) == pytest.approx(1.0)
    assert giou(a, Box2D(1, 0, 2, 1)) == pytest.approx(0.0)
    assert giou(a, Box2D(100, 100, 101, 101)) < -0.99


@pytest.mark.parametrize('n', [1, 2, 3, 4, 5])
def test_assignment_matches_brute_force(n):
    rng = np.random.default_rng(n)
    for _ in range(200):
        q = int(rng.integers(n, n + 2))
        cost = rng.random((q, n))
        rows, cols = min_cost_assignment(cost)
        assert cols.tolist() == list(range(n))
        assert len(set(rows.tolist())) == n
        assert cost[rows, cols].sum() == pytest.approx(_brute_force(cost), abs=1e-12)


def _layer(logits, boxes):
    return EntityLayerOutput(torch.as_tensor(logits, dtype=torch.float32), torch.as_tensor(boxes, dtype=torch.float32))


def test_hungarian_picks_matching_proposal():
    logits = torch.full((3, 13), -5.0)
    logits[0, 4] = 5.0
    logits[1, 7] = 5.0
    logits[2, 12] = 5.0
    boxes = [[0.2, 0.2, 0.1, 0.1], [0.7, 0.6, 0.2, 0.3], [0.5, 0.5, 0.5, 0.5]]
    layer = _layer(logits, boxes)
    gt_boxes = torch.tensor([[0.7, 0.6, 0.2, 0.3], [0.2, 0.2, 0.1, 0.1]])
    match = hungarian_match(layer, torch.tensor([7, 4]), gt_boxes)
    assert match.as_dict() == {1: 0, 0: 1}
    with pytest.raises(MatchError):
        hungarian_match(layer, torch.tensor([1, 2, 3, 4]), torch.rand(4, 4))
    assert len(hungarian_match(layer, torch.zeros(0, dtype=torch.long), torch.zeros(0, 4)).proposal_indices) == 0

def _cxcywh_box(row):
    cx, cy, w, h = (float(v) for v in row)
    return Box2D(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def test_hungarian_match_is_optimal_on_real_layer_outputs():
    rng = np.random.default_rng(11)
    weights = (2.0, 5.0, 2.0)
    for _ in range(40):
        q = int(rng.integers(1, 6))
        g = int(rng.integers(0, q + 1))
        logits = torch.as_tensor(rng.normal(0, 2, size=(q, 13)))
        boxes = torch.as_tensor(np.concatenate([rng.uniform(0.2, 0.8, (q, 2)), rng.uniform(0.05, 0.3, (q, 2))], 1))
        gt_labels = torch.as_tensor(rng.integers(0, 12, size=g))
        gt_boxes = torch.as_tensor(np.concatenate([rng.uniform(0.2, 0.8, (g, 2)), rng.uniform(0.05, 0.3, (g, 2))], 1))
        match = hungarian_match(EntityLayerOutput(logits, boxes), gt_labels, gt_boxes, weights)

        probs = logits.softmax(-1).numpy()
        cost = np.zeros((q, g))
        for i in range(q):
            for j in range(g):
                cost[i, j] = (weights[0] * (1 - probs[i, int(gt_labels[j])])
                              + weights[1] * np.abs(boxes[i].numpy() - gt_boxes[j].numpy()).sum()
                              + weights[2] * (1 - giou(_cxcywh_box(boxes[i]), _cxcywh_box(gt_boxes[j]))))
        assert sorted(match.gt_indices.tolist()) == list(range(g))
        assert len(set(match.proposal_indices.tolist())) == g
        best = _brute_force(cost) if g else 0.0
        assert match.cost == pytest.approx(best, abs=1e-9)
        assert cost[match.proposal_indices, match.gt_indices].sum() == pytest.approx(best, abs=1e-9)

    with pytest.raises(MatchError) as info:
        hungarian_match(EntityLayerOutput(torch.zeros(2, 13), torch.full((2, 4), 0.5)),
                        torch.tensor([0, 1, 2]), torch.full((3, 4), 0.5))
    assert (info.value.num_gt, info.value.num_proposals) == (3, 2)



def test_perfect_proposals_have_zero_box_terms():
    logits = torch.full((2, 13), -30.0)
    logits[0, 2] = 30.0
    logits[1, 12] = 30.0
    boxes = torch.tensor([[0.4, 0.5, 0.2, 0.2], [0.5, 0.5, 0.1, 0.1]])
    layer = _layer(logits, boxes)
    labels, gt = torch.tensor([2]), boxes[:1].clone()
    match = hungarian_match(layer, labels, gt)
    cls_, l1, gi = entity_layer_loss(layer, labels, gt, match, 0.25, 2.0)
    assert float(l1) == pytest.approx(0.0, abs=1e-6)
    assert float(gi) == pytest.approx(0.0, abs=1e-6)
    assert float(cls_) < 1e-6


def test_aux_layers_only_add():
    torch.manual_seed(0)
    layers = [_layer(torch.randn(4, 13), torch.rand(4, 4) * 0.5 + 0.25) for _ in range(3)]
    labels, gt = torch.tensor([1, 5]), torch.tensor([[0.3, 0.3, 0.2, 0.2], [0.6, 0.6, 0.3, 0.2]])
    full, _, match_full = entity_loss(layers, labels, gt, LOSS_CFG)
    final, _, match_final = entity_loss(layers, labels, gt, dict(LOSS_CFG, aux=False))
    assert float(final) <= float(full)
    assert match_full.as_dict() == match_final.as_dict()


def test_pair_targets():
    pairs = ordered_pairs(3)
    targets = assign_pair_targets(pairs, [1, 0, -1], [(0, 3, 1), (1, 7, 0), (1, 3, 0)])
    assert targets.shape == (6, 14)
    # entity 0 -> GT 1, entity 1 -> GT 0: pair (0, 1) carries GT (1, *, 0)
    assert targets[0].nonzero().flatten().tolist() == [3, 7]
    assert targets[2].nonzero().flatten().tolist() == [3]
    assert targets[[1, 3, 4, 5]].sum() == 0


def test_pair_targets_follow_proposal_permutation():
    pairs = ordered_pairs(3)
    relations = [(0, 3, 1), (2, 8, 0)]
    base = assign_pair_targets(pairs, [0, 1, 2], relations)
    perm = [2, 0, 1]   # new entity k is old entity perm[k]
    permuted = assign_pair_targets(pairs, perm, relations)
    lookup = {tuple(p): i for i, p in enumerate(pairs.tolist())}
    for row, (i, j) in enumerate(pairs.tolist()):
        assert torch.equal(permuted[row], base[lookup[(perm[i], perm[j])]])


def test_relation_loss_standard_and_literal():
    logits = torch.zeros(1, 14, dtype=torch.float64)
    targets = torch.zeros(1, 14, dtype=torch.float64)
    targets[0, 3] = 1.0
    literal = relation_loss(logits, targets, 'literal', alpha=1.0, gamma=2.0)
    assert float(literal) == pytest.approx(0.25 * math.log(2), abs=1e-9)

    perturbed = logits.clone()
    perturbed[0, [0, 5, 13]] = torch.tensor([4.0, -3.0, 9.0], dtype=torch.float64)
    assert float(relation_loss(perturbed, targets, 'literal', 1.0, 2.0)) == pytest.approx(float(literal), abs=1e-12)
    assert float(relation_loss(perturbed, targets, 'standard', 1.0, 2.0)) != pytest.approx(
        float(relation_loss(logits, targets, 'standard', 1.0, 2.0)))


def test_relation_loss_edge_cases():
    confident_negative = torch.full((4, 14), -30.0)
    assert float(relation_loss(confident_negative, torch.zeros(4, 14))) < 1e-10
    assert float(relation_loss(confident_negative, torch.zeros(4, 14), 'literal')) == 0.0
    assert float(relation_loss(torch.zeros(0, 14), torch.zeros(0, 14))) == 0.0
    with pytest.raises(ValueError):
        relation_loss(torch.zeros(1, 14), torch.zeros(1, 14), 'other')


def test_pair_confidence_and_total():
    loss = pair_confidence_loss(torch.tensor([10.0, -10.0]), torch.tensor([1.0, 0.0]))
    assert float(loss) < 1e-6
    ent, rel = torch.tensor(2.0), torch.tensor(3.0)
    assert float(total_loss(ent, rel, 1.0).total) == 5.0
    assert float(total_loss(ent, rel, 0.0).total) == 3.0
    assert float(total_loss(ent, rel, 0.5).total) == 4.0
