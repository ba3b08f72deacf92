"""Scene-graph container and its JSON interchange format.

    {"nodes": [{"class": name, "box": [x1, y1, x2, y2], "score": s}],
     "edges": [{"s": i, "o": j, "predicate": name, "score": s}]}
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional

from dataset import CLASS_ID, ENTITY_CLASSES, PREDICATE_ID, PREDICATES, AnnotationSet
from errors import SchemaError


@dataclass
class GraphNode:
    class_id: int
    box: List[float]
    score: float = 1.0

    def to_dict(self):
        return {'class': ENTITY_CLASSES[self.class_id], 'box': [float(v) for v in self.box], 'score': float(self.score)}


@dataclass
class GraphEdge:
    subject: int
    object: int
    predicate: int
    score: float = 1.0

    def to_dict(self):
        return {'s': self.subject, 'o': self.object, 'predicate': PREDICATES[self.predicate], 'score': float(self.score)}


class ScoredTriplet(NamedTuple):
    subject_class: int
    subject_box: tuple
    predicate: int
    object_class: int
    object_box: tuple
    score: float


@dataclass
class SceneGraph:
    nodes: List[GraphNode] = field(default_factory=list)
    edges: List[GraphEdge] = field(default_factory=list)
    name: str = ''

    def triplets(self) -> List[ScoredTriplet]:
        """Edges as class/box triplets; score = edge score x subject score x object score."""
        out = []
        for e in self.edges:
            s, o = self.nodes[e.subject], self.nodes[e.object]
            out.append(ScoredTriplet(s.class_id, tuple(s.box), e.predicate, o.class_id, tuple(o.box),
                                     e.score * s.score * o.score))
        return out

    def to_dict(self):
        return {'nodes': [n.to_dict() for n in self.nodes], 'edges': [e.to_dict() for e in self.edges]}

    @classmethod
    def from_dict(cls, doc, name=''):
        if not isinstance(doc, dict) or 'nodes' not in doc or 'edges' not in doc:
            raise SchemaError('nodes/edges', 'scene graph document needs both keys')
        nodes = []
        for i, n in enumerate(doc['nodes']):
            cls_name = n.get('class')
            if cls_name not in CLASS_ID:
                raise SchemaError(f'nodes[{i}].class', f'unknown entity class {cls_name!r}')
            box = n.get('box')
            if not isinstance(box, list) or len(box) != 4:
                raise SchemaError(f'nodes[{i}].box', 'expected [x1, y1, x2, y2]')
            nodes.append(GraphNode(CLASS_ID[cls_name], [float(v) for v in box], float(n.get('score', 1.0))))
        edges = []
        for k, e in enumerate(doc['edges']):
            pred = e.get('predicate')
            if pred not in PREDICATE_ID:
                raise SchemaError(f'edges[{k}].predicate', f'unknown predicate {pred!r}')
            s, o = e.get('s'), e.get('o')
            if not (isinstance(s, int) and isinstance(o, int) and 0 <= s < len(nodes) and 0 <= o < len(nodes)):
                raise SchemaError(f'edges[{k}]', f'node index out of range for {len(nodes)} nodes')
            edges.append(GraphEdge(s, o, PREDICATE_ID[pred], float(e.get('score', 1.0))))
        return cls(nodes, edges, name)

    @classmethod
    def from_annotations(cls, annotations: AnnotationSet, name=''):
        nodes = [GraphNode(e.class_id, e.box2d.as_list(), 1.0) for e in annotations.entities]
        edges = [GraphEdge(r.subject, r.object, r.predicate, 1.0) for r in annotations.relations]
        return cls(nodes, edges, name)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            f.write(self.to_json() + '\n')
        return path

    @classmethod
    def load(cls, path, name: Optional[str] = None):
        path = Path(path)
        with open(path, 'r', encoding='utf-8') as f:
            try:
                doc = json.load(f)
            except json.JSONDecodeError as e:
                raise SchemaError(str(path), f'invalid JSON ({e})')
        return cls.from_dict(doc, name if name is not None else path.stem)
