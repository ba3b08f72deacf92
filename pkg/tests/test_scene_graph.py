import json

import pytest

from errors import SchemaError
from scene_graph import GraphEdge, GraphNode, SceneGraph

DOC = {
    'nodes': [
        {'class': 'patient', 'box': [10, 20, 60, 40], 'score': 0.9},
        {'class': 'operating_table', 'box': [5, 25, 70, 50], 'score': 0.8},
        {'class': 'drill', 'box': [30, 10, 36, 16]},
    ],
    'edges': [
        {'s': 0, 'o': 1, 'predicate': 'lying_on', 'score': 0.5},
        {'s': 1, 'o': 0, 'predicate': 'close_to', 'score': 0.25},
    ],
}


def test_from_dict_and_back():
    graph = SceneGraph.from_dict(DOC, name='demo')
    assert graph.name == 'demo'
    assert [n.class_id for n in graph.nodes] == [0, 5, 10]
    assert graph.nodes[2].score == 1.0
    assert graph.edges[0] == GraphEdge(0, 1, 8, 0.5)
    out = graph.to_dict()
    assert out['nodes'][0] == {'class': 'patient', 'box': [10.0, 20.0, 60.0, 40.0], 'score': 0.9}
    assert out['edges'][1] == {'s': 1, 'o': 0, 'predicate': 'close_to', 'score': 0.25}


def test_triplet_score_is_product():
    triplets = SceneGraph.from_dict(DOC).triplets()
    assert len(triplets) == 2
    assert triplets[0].score == pytest.approx(0.5 * 0.9 * 0.8)
    assert triplets[0].subject_box == (10.0, 20.0, 60.0, 40.0)
    assert (triplets[1].subject_class, triplets[1].predicate, triplets[1].object_class) == (5, 3, 0)


@pytest.mark.parametrize('doc, key', [
    ({'nodes': []}, 'nodes/edges'),
    ({'nodes': [{'class': 'robot', 'box': [0, 0, 1, 1]}], 'edges': []}, 'nodes[0].class'),
    ({'nodes': [{'class': 'saw', 'box': [0, 0, 1]}], 'edges': []}, 'nodes[0].box'),
    ({'nodes': [{'class': 'saw', 'box': [0, 0, 1, 1]}], 'edges': [{'s': 0, 'o': 0, 'predicate': 'juggling'}]},
     'edges[0].predicate'),
    ({'nodes': [{'class': 'saw', 'box': [0, 0, 1, 1]}], 'edges': [{'s': 0, 'o': 3, 'predicate': 'holding'}]},
     'edges[0]'),
])
def test_schema_errors_name_the_key(doc, key):
    with pytest.raises(SchemaError) as info:
        SceneGraph.from_dict(doc)
    assert info.value.key == key


def test_save_load_sorted_keys(tmp_path):
    graph = SceneGraph.from_dict(DOC)
    path = graph.save(tmp_path / 'graphs' / 'scene_007.json')
    text = path.read_text()
    assert text == json.dumps(json.loads(text), indent=2, sort_keys=True) + '\n'
    loaded = SceneGraph.load(path)
    assert loaded.name == 'scene_007'
    assert loaded.to_dict() == graph.to_dict()


def test_load_rejects_invalid_json(tmp_path):
    path = tmp_path / 'broken.json'
    path.write_text('{"nodes": [')
    with pytest.raises(SchemaError):
        SceneGraph.load(path)


def test_from_annotations(scene):
    graph = SceneGraph.from_annotations(scene.annotations, name=scene.name)
    assert len(graph.nodes) == len(scene.annotations.entities)
    assert len(graph.edges) == len(scene.annotations.relations)
    assert all(isinstance(n, GraphNode) and n.score == 1.0 for n in graph.nodes)
