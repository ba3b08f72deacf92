import numpy as np
import torch

from entity_decoder import EntityDecoder, EntityLayerOutput, EntityOutputs, filter_entities, greedy_nms, \
    merge_entity_indices, select_entities, stable_order
from geometry import box_iou_matrix


def _outputs(class_ids, scores, boxes, num_classes=12, width=4):
    """Final-layer outputs whose softmax puts `score` on `class_id` (class_id -1 is background)."""
    q = len(class_ids)
    logits = torch.full((q, num_classes + 1), -20.0)
    for i, (c, s) in enumerate(zip(class_ids, scores)):
        rest = np.log((1 - s) / num_classes)
        logits[i] = float(rest)
        logits[i, c] = float(np.log(s))
    layer = EntityLayerOutput(logits, torch.tensor(boxes, dtype=torch.float32))
    return EntityOutputs([layer], torch.arange(q * width, dtype=torch.float32).reshape(q, width))


def test_decoder_shapes(tiny_cfg):
    torch.manual_seed(0)
    decoder = EntityDecoder(tiny_cfg['model'])
    out = decoder(torch.randn(6, 16), torch.randn(6, 16))
    assert len(out.layers) == 2
    assert out.final.logits.shape == (8, 13)
    assert out.final.boxes.shape == (8, 4)
    assert ((out.final.boxes >= 0) & (out.final.boxes <= 1)).all()
    assert out.embeddings.shape == (8, 16)


def test_stable_order_breaks_ties_by_index():
    assert stable_order([0.5, 0.9, 0.5, 0.9]).tolist() == [1, 3, 0, 2]


def test_greedy_nms_class_wise():
    boxes = np.array([[0, 0, 10, 10], [1, 1, 10, 10], [0, 0, 10, 10]], dtype=float)
    scores = np.array([0.9, 0.8, 0.7])
    labels = np.array([1, 1, 2])
    assert greedy_nms(boxes, scores, labels, 0.7, class_wise=True) == [0, 2]
    assert greedy_nms(boxes, scores, labels, 0.7, class_wise=False) == [0]


def test_filter_entities_drops_background_and_low_scores():
    boxes = [[0.2, 0.2, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2], [0.5, 0.5, 0.1, 0.1], [0.21, 0.2, 0.2, 0.2]]
    out = _outputs([3, 5, 12, 3], [0.9, 0.4, 0.95, 0.8], boxes)
    kept = filter_entities(out, (100, 100), score_threshold=0.5, nms_iou=0.7)
    assert kept.indices.tolist() == [0]
    assert kept.labels.tolist() == [3]
    assert kept.boxes[0].tolist() == [10.0, 10.0, 30.0, 30.0]
    assert torch.equal(kept.embeddings[0], out.embeddings[0])


def test_filter_entities_empty():
    out = _outputs([12, 12], [0.9, 0.9], [[0.5, 0.5, 0.2, 0.2]] * 2)
    kept = filter_entities(out, (64, 64))
    assert len(kept) == 0
    assert kept.embeddings.shape == (0, 4)


def test_select_and_merge_keep_score_order():
    out = _outputs([0, 1, 2], [0.6, 0.9, 0.7], [[0.5, 0.5, 0.2, 0.2]] * 3)
    scores = [0.6, 0.9, 0.7]
    merged = merge_entity_indices(scores, [1], [0, 2, 1])
    assert merged == [1, 2, 0]
    picked = select_entities(out, (10, 10), merged)
    assert picked.indices.tolist() == [1, 2, 0]


def test_decoder_is_equivariant_to_query_order(tiny_cfg):
    torch.manual_seed(0)
    decoder = EntityDecoder(tiny_cfg['model']).eval()
    gen = torch.Generator().manual_seed(4)
    memory, pos = torch.randn(6, 16, generator=gen), torch.randn(6, 16, generator=gen)
    queries = decoder.query_embed.weight.detach()
    for seed in range(5):
        perm = torch.randperm(queries.shape[0], generator=torch.Generator().manual_seed(seed))
        base = decoder(memory, pos, queries)
        moved = decoder(memory, pos, queries[perm])
        for a, b in zip(base.layers, moved.layers):
            assert torch.allclose(a.logits[perm], b.logits, atol=1e-5)
            assert torch.allclose(a.boxes[perm], b.boxes, atol=1e-5)
        assert torch.allclose(base.embeddings[perm], moved.embeddings, atol=1e-5)


def _random_detections(rng, n):
    xy = rng.uniform(0, 80, size=(n, 2))
    wh = rng.uniform(5, 30, size=(n, 2))
    return np.concatenate([xy, xy + wh], axis=1), rng.random(n), rng.integers(0, 3, size=n)


def test_greedy_nms_is_idempotent_and_separated(rng):
    for _ in range(100):
        boxes, scores, labels = _random_detections(rng, int(rng.integers(1, 15)))
        for class_wise in (True, False):
            keep = greedy_nms(boxes, scores, labels, 0.5, class_wise)
            assert np.all(np.diff(scores[keep]) < 0)
            iou = box_iou_matrix(boxes[keep], boxes[keep])
            for a in range(len(keep)):
                for b in range(a + 1, len(keep)):
                    if not class_wise or labels[keep[a]] == labels[keep[b]]:
                        assert iou[a, b] <= 0.5
            again = greedy_nms(boxes[keep], scores[keep], labels[keep], 0.5, class_wise)
            assert again == list(range(len(keep)))


def test_filter_entities_is_idempotent(rng):
    for _ in range(20):
        n = int(rng.integers(2, 10))
        classes = [int(c) for c in rng.integers(0, 3, size=n)]
        scores = [float(s) for s in rng.uniform(0.55, 0.95, size=n)]
        boxes = np.concatenate([rng.uniform(0.3, 0.7, size=(n, 2)), rng.uniform(0.1, 0.4, size=(n, 2))], axis=1)
        out = _outputs(classes, scores, boxes.tolist())
        kept = filter_entities(out, (100, 100), score_threshold=0.5, nms_iou=0.7)
        assert np.all(np.diff(kept.scores.numpy()) < 0)
        index = kept.indices.tolist()
        sub = _outputs([classes[i] for i in index], [scores[i] for i in index], boxes[index].tolist())
        assert filter_entities(sub, (100, 100), score_threshold=0.5, nms_iou=0.7).indices.tolist() == \
            list(range(len(index)))
