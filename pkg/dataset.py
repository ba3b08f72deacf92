"""
Scene records: the synthetic multi-view OR scene generator, record I/O in the
4D-OR-style directory layout, and training-time augmentation.

Record layout (one directory per timestep):
    view1.png .. view4.png   view1 is the main view
    cloud.ply                ascii xyz, world frame
    cameras.json             [{intrinsics: 9, extrinsics: 16, width, height}] x 4
    annotations.json         {entities: [{class, box2d?, box3d?, hand_anchor?}],
                              relations: [[s, pred, o]], wrists: [{xy, class}]}
"""

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, NamedTuple, Optional

import numpy as np
import torch
from PIL import Image, ImageDraw, ImageEnhance
from torch.utils.data import Dataset

from errors import GenerationError, NoProjectionError, OutOfImageError, RecordIOError, SchemaError
from geometry import Box2D, Box3D, CameraModel, project_box3d, project_points, visible_fraction, wrist_instrument_box
from logging_utils import get_logger

logger = get_logger('dataset')

ENTITY_CLASSES = [
    'patient', 'head_surgeon', 'assistant_surgeon', 'circulating_nurse', 'anaesthetist',
    'operating_table', 'instrument_table', 'secondary_table', 'anesthesia_equipment',
    'instrument', 'drill', 'saw',
]
PREDICATES = [
    'assisting', 'cementing', 'cleaning', 'close_to', 'cutting', 'drilling', 'hammering',
    'holding', 'lying_on', 'operating', 'preparing', 'sawing', 'suturing', 'touching',
]
CLASS_ID = {name: i for i, name in enumerate(ENTITY_CLASSES)}
PREDICATE_ID = {name: i for i, name in enumerate(PREDICATES)}
SYNTHETIC_PREDICATES = ('close_to', 'lying_on', 'holding', 'touching')

HUMAN_CLASSES = ('head_surgeon', 'assistant_surgeon', 'circulating_nurse', 'anaesthetist')
TABLE_CLASSES = ('operating_table', 'instrument_table', 'secondary_table')
PATIENT_SUPPORTS = ('operating_table', 'instrument_table')
INSTRUMENT_CLASSES = ('instrument', 'drill', 'saw')

# half extents (x along the facing direction, y, z), meters
CLASS_HALF_EXTENTS = {
    'patient': (0.9, 0.3, 0.15),
    'head_surgeon': (0.2, 0.25, 0.9),
    'assistant_surgeon': (0.2, 0.25, 0.88),
    'circulating_nurse': (0.2, 0.25, 0.85),
    'anaesthetist': (0.2, 0.25, 0.87),
    'operating_table': (1.0, 0.35, 0.45),
    'instrument_table': (0.5, 0.3, 0.45),
    'secondary_table': (0.4, 0.4, 0.4),
    'anesthesia_equipment': (0.3, 0.3, 0.7),
    'instrument': (0.1, 0.03, 0.03),
    'drill': (0.1, 0.05, 0.08),
    'saw': (0.15, 0.04, 0.05),
}
CLASS_COLORS = {
    'patient': (230, 190, 150),
    'head_surgeon': (40, 120, 220),
    'assistant_surgeon': (60, 190, 200),
    'circulating_nurse': (120, 80, 200),
    'anaesthetist': (220, 90, 160),
    'operating_table': (150, 150, 160),
    'instrument_table': (200, 200, 80),
    'secondary_table': (140, 100, 60),
    'anesthesia_equipment': (80, 160, 80),
    'instrument': (250, 250, 250),
    'drill': (240, 120, 30),
    'saw': (220, 30, 30),
}
BACKGROUND_COLOR = (45, 48, 56)
HAND_FORWARD = 0.45
HAND_HEIGHT = 1.0
HAND_JITTER = 0.05
FLOOR_MARGIN = 0.05
CONTACT_GAP = (0.005, 0.015)
NUM_VIEWS = 4


class RelationTriplet(NamedTuple):
    subject: int
    predicate: int
    object: int


@dataclass
class Entity:
    class_id: int
    box2d: Box2D
    box3d: Optional[Box3D] = None
    hand_anchor: Optional[np.ndarray] = None

    @property
    def class_name(self):
        return ENTITY_CLASSES[self.class_id]

    def to_dict(self):
        doc = {'class': self.class_name, 'box2d': self.box2d.as_list()}
        if self.box3d is not None:
            doc['box3d'] = self.box3d.to_dict()
        if self.hand_anchor is not None:
            doc['hand_anchor'] = [float(v) for v in self.hand_anchor]
        return doc


@dataclass
class AnnotationSet:
    entities: List[Entity] = field(default_factory=list)
    relations: List[RelationTriplet] = field(default_factory=list)

    def validate(self):
        n = len(self.entities)
        seen = set()
        for k, (s, p, o) in enumerate(self.relations):
            if not (0 <= s < n and 0 <= o < n):
                raise SchemaError(f'relations[{k}]', f'entity index out of range for {n} entities')
            if s == o:
                raise SchemaError(f'relations[{k}]', 'subject and object must differ')
            if not 0 <= p < len(PREDICATES):
                raise SchemaError(f'relations[{k}]', f'predicate id {p} out of range')
            if (s, p, o) in seen:
                raise SchemaError(f'relations[{k}]', 'duplicate triplet')
            seen.add((s, p, o))
        for i, e in enumerate(self.entities):
            if not 0 <= e.class_id < len(ENTITY_CLASSES):
                raise SchemaError(f'entities[{i}].class', f'class id {e.class_id} out of range')
        return self

    def to_dict(self):
        return {
            'entities': [e.to_dict() for e in self.entities],
            'relations': [[r.subject, PREDICATES[r.predicate], r.object] for r in self.relations],
            'wrists': [],
        }


@dataclass
class SceneSample:
    views: List[np.ndarray]             # 4 x (H, W, 3) uint8, views[0] is the main view
    cloud: np.ndarray                   # (N, 3) world meters
    cameras: List[CameraModel]
    annotations: Optional[AnnotationSet] = None
    name: str = ''

    def __post_init__(self):
        if len(self.views) != NUM_VIEWS or len(self.cameras) != NUM_VIEWS:
            raise SchemaError('views', f'expected {NUM_VIEWS} views and cameras, got '
                                       f'{len(self.views)} / {len(self.cameras)}')
        if self.cloud.ndim != 2 or self.cloud.shape[1] != 3 or self.cloud.shape[0] < 1:
            raise SchemaError('cloud', f'expected (N>=1, 3) points, got {self.cloud.shape}')

    @property
    def main_size(self):
        return self.cameras[0].image_size


@dataclass(frozen=True)
class SyntheticConfig:
    entities: tuple = (3, 6)
    classes: tuple = ()
    close_to: float = 1.0
    lying_on_overlap: float = 0.5
    lying_on_gap: float = 0.05
    holding_radius: float = 0.15
    touching_gap: float = 0.02
    adjacent_prob: float = 0.3
    point_noise: float = 0.01
    points_per_m2: float = 400.0
    floor_points: int = 512
    image_size: tuple = (480, 640)   # H, W
    room: tuple = (6.0, 6.0)
    max_retries: int = 200
    seed: int = 0

    @classmethod
    def from_config(cls, cfg):
        syn = dict(cfg['synthetic'])
        for key in ('entities', 'classes', 'image_size', 'room'):
            syn[key] = tuple(syn[key])
        return cls(**syn)

    @property
    def palette(self):
        names = self.classes or tuple(ENTITY_CLASSES)
        unknown = [c for c in names if c not in CLASS_ID]
        if unknown:
            raise SchemaError('synthetic.classes', f'unknown classes {unknown}')
        return names


# -- relation rules -------------------------------------------------------------------------------

def _aabb(box: Box3D):
    return box.axis_aligned_extents()


def _footprint_overlap(a: Box3D, b: Box3D):
    (amin, amax), (bmin, bmax) = _aabb(a), _aabb(b)
    dx = min(amax[0], bmax[0]) - max(amin[0], bmin[0])
    dy = min(amax[1], bmax[1]) - max(amin[1], bmin[1])
    return max(dx, 0.0) * max(dy, 0.0)


def _aabb_gap(a: Box3D, b: Box3D):
    (amin, amax), (bmin, bmax) = _aabb(a), _aabb(b)
    sep = np.maximum(0.0, np.maximum(amin - bmax, bmin - amax))
    return float(np.linalg.norm(sep))


def _lying_on(a: Box3D, b: Box3D, syn: SyntheticConfig):
    (amin, amax), (bmin, bmax) = _aabb(a), _aabb(b)
    if abs(amin[2] - bmax[2]) > syn.lying_on_gap:
        return False
    inter = _footprint_overlap(a, b)
    area_a = (amax[0] - amin[0]) * (amax[1] - amin[1])
    area_b = (bmax[0] - bmin[0]) * (bmax[1] - bmin[1])
    return inter / (area_a + area_b - inter) > syn.lying_on_overlap


def derive_relations(entities: List[Entity], syn: SyntheticConfig) -> List[RelationTriplet]:
    """Rule-based labels from the 3D layout; entities without a 3D box take no part."""
    rels = []
    n = len(entities)
    for i in range(n):
        a = entities[i]
        if a.box3d is None:
            continue
        for j in range(n):
            b = entities[j]
            if i == j or b.box3d is None:
                continue
            dist = np.linalg.norm(np.subtract(a.box3d.center, b.box3d.center))
            if dist < syn.close_to:
                rels.append(RelationTriplet(i, PREDICATE_ID['close_to'], j))
            on_ab = _lying_on(a.box3d, b.box3d, syn)
            if on_ab:
                rels.append(RelationTriplet(i, PREDICATE_ID['lying_on'], j))
            if (a.hand_anchor is not None and b.class_name in INSTRUMENT_CLASSES
                    and np.linalg.norm(np.subtract(b.box3d.center, a.hand_anchor)) <= syn.holding_radius):
                rels.append(RelationTriplet(i, PREDICATE_ID['holding'], j))
            if (_aabb_gap(a.box3d, b.box3d) < syn.touching_gap
                    and not on_ab and not _lying_on(b.box3d, a.box3d, syn)):
                rels.append(RelationTriplet(i, PREDICATE_ID['touching'], j))
    return sorted(rels)


# -- synthetic generation -------------------------------------------------------------------------

def _yaw_rotation(yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s], [s, c]])


def _collides_2d(box: Box3D, others, margin):
    bmin, bmax = _aabb(box)
    for other in others:
        omin, omax = _aabb(other)
        if (bmin[0] < omax[0] + margin and bmax[0] > omin[0] - margin
                and bmin[1] < omax[1] + margin and bmax[1] > omin[1] - margin):
            return True
    return False


def _collides_3d(box: Box3D, others, margin=0.01):
    bmin, bmax = _aabb(box)
    for other in others:
        omin, omax = _aabb(other)
        if np.all(bmin < omax + margin) and np.all(bmax > omin - margin):
            return True
    return False


def _hand_anchor(box: Box3D):
    forward = _yaw_rotation(box.yaw) @ np.array([HAND_FORWARD, 0.0])
    return np.array([box.center[0] + forward[0], box.center[1] + forward[1], HAND_HEIGHT])


def _in_room(box: Box3D, half_room):
    bmin, bmax = _aabb(box)
    return bmin[0] >= -half_room[0] and bmax[0] <= half_room[0] and bmin[1] >= -half_room[1] and bmax[1] <= half_room[1]


class _Layout:
    """Placement state for one synthetic scene."""

    def __init__(self, syn: SyntheticConfig, rng: np.random.Generator):
        self.syn = syn
        self.rng = rng
        self.half_room = (0.35 * syn.room[0], 0.35 * syn.room[1])
        self.floor_boxes = []     # footprints that block floor placement
        self.solid_boxes = []     # every placed 3D box
        self.placed = []          # (class_name, Box3D, hand_anchor)

    def _sample_floor_box(self, half):
        yaw = float(self.rng.choice([0.0, 0.5 * math.pi, math.pi, 1.5 * math.pi]))
        x = self.rng.uniform(-self.half_room[0], self.half_room[0])
        y = self.rng.uniform(-self.half_room[1], self.half_room[1])
        return Box3D((float(x), float(y), half[2]), half, yaw)

    def place_floor(self, name, footprint_half=None):
        """Floor entity; `footprint_half` enlarges the collision footprint (a table that will carry a patient)."""
        half = CLASS_HALF_EXTENTS[name]
        for _ in range(self.syn.max_retries):
            box = self._sample_floor_box(half)
            probe = box if footprint_half is None else Box3D(box.center, footprint_half, box.yaw)
            if _in_room(probe, self.half_room) and not _collides_2d(probe, self.floor_boxes, FLOOR_MARGIN):
                self.floor_boxes.append(probe)
                return self._commit(name, box)
        raise GenerationError(f'could not place {name} after {self.syn.max_retries} attempts')

    def place_adjacent(self, name, tables):
        """Human standing a few millimeters from one side of a table."""
        half = CLASS_HALF_EXTENTS[name]
        for _ in range(self.syn.max_retries):
            table = tables[int(self.rng.integers(len(tables)))]
            tmin, tmax = _aabb(table)
            axis = int(self.rng.integers(2))
            side = float(self.rng.choice([-1.0, 1.0]))
            # face the table along the chosen axis
            yaw = {(0, 1.0): math.pi, (0, -1.0): 0.0, (1, 1.0): 1.5 * math.pi, (1, -1.0): 0.5 * math.pi}[(axis, side)]
            extent = np.abs(np.array(_yaw_rotation(yaw)) @ np.array(half[:2]))
            gap = self.rng.uniform(*CONTACT_GAP)
            center = [0.0, 0.0, half[2]]
            if side > 0:
                center[axis] = tmax[axis] + gap + extent[axis]
            else:
                center[axis] = tmin[axis] - gap - extent[axis]
            other = 1 - axis
            center[other] = self.rng.uniform(tmin[other], tmax[other])
            box = Box3D(tuple(float(c) for c in center), half, yaw)
            blockers = [b for b in self.floor_boxes if not _same_footprint(b, table)]
            if (_in_room(box, self.half_room) and not _collides_2d(box, blockers, FLOOR_MARGIN)
                    and not _collides_3d(box, self.solid_boxes, margin=0.0)):
                self.floor_boxes.append(box)
                return self._commit(name, box)
        return None

    def place_on(self, name, support: Box3D, centered=False):
        half = CLASS_HALF_EXTENTS[name]
        smin, smax = _aabb(support)
        for _ in range(self.syn.max_retries if not centered else 1):
            yaw = support.yaw if centered else float(self.rng.choice([0.0, 0.5 * math.pi]))
            extent = np.abs(_yaw_rotation(yaw) @ np.array(half[:2]))
            if centered:
                x, y = support.center[0], support.center[1]
            else:
                lo, hi = smin[:2] + extent, smax[:2] - extent
                if np.any(lo > hi):
                    return None
                x, y = self.rng.uniform(lo[0], hi[0]), self.rng.uniform(lo[1], hi[1])
            box = Box3D((float(x), float(y), float(smax[2] + half[2])), half, yaw)
            if not _collides_3d(box, [b for b in self.solid_boxes if b is not support]):
                return self._commit(name, box)
        return None

    def place_held(self, name, human: Box3D):
        half = CLASS_HALF_EXTENTS[name]
        anchor = _hand_anchor(human)
        for _ in range(max(1, self.syn.max_retries // 10)):
            jitter = self.rng.uniform(-HAND_JITTER, HAND_JITTER, size=3)
            center = anchor + jitter
            box = Box3D(tuple(float(c) for c in center), half, human.yaw)
            if not _collides_3d(box, self.solid_boxes):
                return self._commit(name, box)
        return None

    def _commit(self, name, box, hand_anchor=None):
        if name in HUMAN_CLASSES:
            hand_anchor = _hand_anchor(box)
        self.solid_boxes.append(box)
        self.placed.append((name, box, hand_anchor))
        return box


def _same_footprint(a: Box3D, b: Box3D):
    return np.allclose(a.center[:2], b.center[:2]) and a.yaw == b.yaw


def _sample_classes(syn: SyntheticConfig, rng):
    palette = syn.palette
    lo, hi = syn.entities
    n = int(rng.integers(lo, hi + 1))
    names = [str(c) for c in rng.choice(palette, size=n)]
    if 'patient' in names and n > 1 and not any(c in PATIENT_SUPPORTS for c in names):
        supports = [c for c in PATIENT_SUPPORTS if c in palette]
        if supports:
            k = next(i for i, c in enumerate(names) if c != 'patient')
            names[k] = supports[0]
    return names


def _layout_scene(syn: SyntheticConfig, rng) -> List[tuple]:
    names = _sample_classes(syn, rng)
    layout = _Layout(syn, rng)
    patients = [c for c in names if c == 'patient']
    instruments = [c for c in names if c in INSTRUMENT_CLASSES]
    floor = [c for c in names if c not in INSTRUMENT_CLASSES and c != 'patient']
    tables = [c for c in floor if c in TABLE_CLASSES]
    humans = [c for c in floor if c in HUMAN_CLASSES]
    others = [c for c in floor if c not in TABLE_CLASSES and c not in HUMAN_CLASSES]

    supports_needed = list(patients)
    table_boxes = []
    patient_supports = []
    for name in tables:
        footprint = None
        if supports_needed and name in PATIENT_SUPPORTS:
            supports_needed.pop()
            ph, th = CLASS_HALF_EXTENTS['patient'], CLASS_HALF_EXTENTS[name]
            footprint = (max(ph[0], th[0]), max(ph[1], th[1]), th[2])
        box = layout.place_floor(name, footprint_half=footprint)
        table_boxes.append(box)
        if footprint is not None:
            patient_supports.append(box)
    for name in others:
        layout.place_floor(name)

    for support in patient_supports:
        if layout.place_on('patient', support, centered=True) is None:
            logger.warning('[WARNING] patient does not fit on its support at (%.2f, %.2f), dropped',
                           support.center[0], support.center[1])
    for _ in range(len(patients) - len(patient_supports)):
        layout.place_floor('patient')

    human_boxes = []
    for name in humans:
        box = None
        if table_boxes and rng.random() < syn.adjacent_prob:
            box = layout.place_adjacent(name, table_boxes)
        if box is None:
            box = layout.place_floor(name)
        human_boxes.append(box)

    free_hands = list(human_boxes)
    for name in instruments:
        box = None
        if free_hands and rng.random() < 0.7:
            box = layout.place_held(name, free_hands[0])
            if box is not None:
                free_hands.pop(0)
        for table in table_boxes:
            if box is not None:
                break
            box = layout.place_on(name, table)
        if box is None:
            box = layout.place_floor(name)
    return layout.placed


def _default_cameras(syn: SyntheticConfig, rng):
    height, width = syn.image_size
    hx, hy = 0.5 * syn.room[0], 0.5 * syn.room[1]
    focal = 0.6 * width
    corners = [(-hx, -hy), (hx, -hy), (hx, hy), (-hx, hy)]
    cams = []
    for x, y in corners:
        jitter = rng.uniform(-0.2, 0.2, size=3)
        eye = (x + jitter[0], y + jitter[1], 2.8 + jitter[2])
        cams.append(CameraModel.look_at(eye, (0.0, 0.0, 0.5), focal, (width, height)))
    return cams


_FACES = [  # corner indices of Box3D.corners(), outward normal in the local frame
    ((0, 1, 3, 2), (-1, 0, 0)), ((4, 6, 7, 5), (1, 0, 0)),
    ((0, 4, 5, 1), (0, -1, 0)), ((2, 3, 7, 6), (0, 1, 0)),
    ((0, 2, 6, 4), (0, 0, -1)), ((1, 5, 7, 3), (0, 0, 1)),
]
_FACE_SHADE = {(0, 0, 1): 1.0, (0, 0, -1): 0.45}


def render_view(placed, cam: CameraModel) -> np.ndarray:
    """Painter's algorithm over the visible faces of every cuboid, flat class colors."""
    width, height = cam.image_size
    image = Image.new('RGB', (width, height), BACKGROUND_COLOR)
    draw = ImageDraw.Draw(image)
    eye = -cam.extrinsics[:3, :3].T @ cam.extrinsics[:3, 3]
    faces = []
    for name, box, _ in placed:
        corners = box.corners()
        pixels, depth, _ = project_points(corners, cam)
        for idx, normal in _FACES:
            idx = list(idx)
            if np.any(depth[idx] <= 0.05):
                continue
            world_normal = box.rotation() @ np.array(normal, dtype=float)
            face_center = corners[idx].mean(axis=0)
            if np.dot(world_normal, eye - face_center) <= 0:
                continue
            shade = _FACE_SHADE.get(tuple(normal), 0.8 if normal[0] else 0.65)
            color = tuple(int(round(c * shade)) for c in CLASS_COLORS[name])
            faces.append((float(depth[idx].mean()), [tuple(p) for p in pixels[idx]], color))
    for _, polygon, color in sorted(faces, key=lambda f: -f[0]):
        draw.polygon(polygon, fill=color)
    return np.asarray(image, dtype=np.uint8).copy()


def sample_surface_points(placed, syn: SyntheticConfig, rng) -> np.ndarray:
    chunks = []
    for _, box, _ in placed:
        corners = box.corners()
        for idx, _ in _FACES:
            a, b, _, d = (corners[i] for i in idx)
            e1, e2 = b - a, d - a
            area = np.linalg.norm(e1) * np.linalg.norm(e2)
            count = max(1, int(round(area * syn.points_per_m2)))
            uv = rng.random((count, 2))
            chunks.append(a + uv[:, :1] * e1 + uv[:, 1:] * e2)
    if syn.floor_points > 0:
        hx, hy = 0.5 * syn.room[0], 0.5 * syn.room[1]
        floor = np.column_stack([
            rng.uniform(-hx, hx, syn.floor_points),
            rng.uniform(-hy, hy, syn.floor_points),
            np.zeros(syn.floor_points),
        ])
        chunks.append(floor)
    cloud = np.concatenate(chunks, axis=0)
    return cloud + rng.normal(0.0, syn.point_noise, size=cloud.shape)


def _main_view_entities(placed, cam: CameraModel, min_visible):
    entities = []
    for name, box, anchor in placed:
        if visible_fraction(box, cam) < min_visible:
            continue
        try:
            box2d = project_box3d(box, cam)
        except NoProjectionError:
            continue
        entities.append(Entity(CLASS_ID[name], box2d, box, anchor))
    return entities


def generate_scene(syn: SyntheticConfig, seed, min_visible=0.25, name='') -> SceneSample:
    rng = np.random.default_rng(seed)
    placed = _layout_scene(syn, rng)
    cameras = _default_cameras(syn, rng)
    views = [render_view(placed, cam) for cam in cameras]
    cloud = sample_surface_points(placed, syn, rng)
    entities = _main_view_entities(placed, cameras[0], min_visible)
    annotations = AnnotationSet(entities, derive_relations(entities, syn)).validate()
    return SceneSample(views, cloud, cameras, annotations, name=name or f'synthetic_{seed}')


def generate_dataset(cfg, out_dir, count, seed=None):
    """Write `count` synthetic records under out_dir/scene_XXXXX."""
    syn = SyntheticConfig.from_config(cfg)
    base = syn.seed if seed is None else seed
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        sample = generate_scene(syn, base + i, cfg['data']['min_visible'], name=f'scene_{i:05d}')
        path = save_record(sample, out_dir / sample.name)
        paths.append(path)
        logger.debug('[OK] %s: %d entities, %d relations', sample.name,
                     len(sample.annotations.entities), len(sample.annotations.relations))
    logger.info('[OK] Generated %d synthetic scenes in %s', count, out_dir)
    return paths


# -- record I/O -----------------------------------------------------------------------------------

def write_ply(points, path):
    points = np.asarray(points, dtype=float)
    header = ['ply', 'format ascii 1.0', f'element vertex {len(points)}',
              'property float x', 'property float y', 'property float z', 'end_header']
    with open(path, 'w', encoding='utf-8') as f:
        f.write('\n'.join(header) + '\n')
        np.savetxt(f, points, fmt='%.6f')


def read_ply(path) -> np.ndarray:
    with open(path, 'r', encoding='utf-8') as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != 'ply':
        raise SchemaError(str(path), 'not a ply file')
    count, body = None, None
    for i, line in enumerate(lines):
        if line.startswith('format') and 'ascii' not in line:
            raise SchemaError(str(path), 'only ascii ply is supported')
        if line.startswith('element vertex'):
            count = int(line.split()[-1])
        if line.strip() == 'end_header':
            body = lines[i + 1:]
            break
    if count is None or body is None:
        raise SchemaError(str(path), 'malformed ply header')
    if count == 0:
        return np.zeros((0, 3))
    data = np.loadtxt(body[:count], ndmin=2)
    return data[:, :3].astype(float)


def save_record(sample: SceneSample, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for i, view in enumerate(sample.views, start=1):
        Image.fromarray(view).save(path / f'view{i}.png')
    write_ply(sample.cloud, path / 'cloud.ply')
    with open(path / 'cameras.json', 'w', encoding='utf-8') as f:
        json.dump([cam.to_dict() for cam in sample.cameras], f, indent=2)
    if sample.annotations is not None:
        with open(path / 'annotations.json', 'w', encoding='utf-8') as f:
            json.dump(sample.annotations.to_dict(), f, indent=2)
    return path


def _class_id(value, key):
    if isinstance(value, str):
        if value not in CLASS_ID:
            raise SchemaError(key, f'unknown entity class {value!r}')
        return CLASS_ID[value]
    if isinstance(value, int) and 0 <= value < len(ENTITY_CLASSES):
        return value
    raise SchemaError(key, f'invalid entity class {value!r}')


def _predicate_id(value, key):
    if isinstance(value, str):
        if value not in PREDICATE_ID:
            raise SchemaError(key, f'unknown predicate {value!r}')
        return PREDICATE_ID[value]
    if isinstance(value, int) and 0 <= value < len(PREDICATES):
        return value
    raise SchemaError(key, f'invalid predicate {value!r}')


def parse_annotations(doc, main_cam: CameraModel, min_visible=0.25) -> AnnotationSet:
    """Annotation document -> AnnotationSet in main-view pixels.

    Entities given only as 3D boxes are projected into the main view and dropped when less
    than `min_visible` of their projected footprint lies inside the image; relations that
    touch a dropped entity are dropped with them. Wrist entries become 100x100 boxes
    appended after the regular entities.
    """
    if not isinstance(doc, dict) or 'entities' not in doc:
        raise SchemaError('entities', 'missing from annotation file')
    entities, index_map = [], {}
    for i, ent in enumerate(doc['entities']):
        key = f'entities[{i}]'
        if not isinstance(ent, dict) or 'class' not in ent:
            raise SchemaError(f'{key}.class', 'missing')
        class_id = _class_id(ent['class'], f'{key}.class')
        box3d = Box3D.from_dict(ent['box3d']) if ent.get('box3d') is not None else None
        anchor = np.asarray(ent['hand_anchor'], dtype=float) if ent.get('hand_anchor') is not None else None
        if ent.get('box2d') is not None:
            try:
                box2d = Box2D.from_seq(ent['box2d']).clipped(main_cam.image_size)
            except (ValueError, TypeError) as e:
                raise SchemaError(f'{key}.box2d', str(e))
        elif box3d is not None:
            if visible_fraction(box3d, main_cam) < min_visible:
                logger.debug('[SKIP] %s: less than %.0f%% visible', key, 100 * min_visible)
                continue
            try:
                box2d = project_box3d(box3d, main_cam)
            except NoProjectionError:
                logger.debug('[SKIP] %s: does not project into the main view', key)
                continue
        else:
            raise SchemaError(key, 'needs box2d or box3d')
        index_map[i] = len(entities)
        entities.append(Entity(class_id, box2d, box3d, anchor))

    num_listed = len(doc['entities'])
    for k, wrist in enumerate(doc.get('wrists', []) or []):
        key = f'wrists[{k}]'
        if not isinstance(wrist, dict) or 'xy' not in wrist:
            raise SchemaError(f'{key}.xy', 'missing')
        class_id = _class_id(wrist.get('class', 'instrument'), f'{key}.class')
        try:
            box2d = wrist_instrument_box(wrist['xy'], main_cam.image_size)
        except OutOfImageError as e:
            raise SchemaError(f'{key}.xy', str(e))
        index_map[num_listed + k] = len(entities)
        entities.append(Entity(class_id, box2d))

    total = num_listed + len(doc.get('wrists', []) or [])
    relations, seen = [], set()
    for k, rel in enumerate(doc.get('relations', [])):
        key = f'relations[{k}]'
        if not isinstance(rel, (list, tuple)) or len(rel) != 3:
            raise SchemaError(key, 'expected [subject, predicate, object]')
        s, p, o = rel
        if not (isinstance(s, int) and isinstance(o, int) and 0 <= s < total and 0 <= o < total):
            raise SchemaError(key, f'entity index out of range for {total} entities')
        pred = _predicate_id(p, f'{key}[1]')
        if s not in index_map or o not in index_map:
            continue
        triplet = RelationTriplet(index_map[s], pred, index_map[o])
        if triplet in seen:
            logger.warning('[WARNING] %s duplicates an earlier triplet, ignored', key)
            continue
        seen.add(triplet)
        relations.append(triplet)
    return AnnotationSet(entities, relations).validate()


def load_4dor_record(path, with_annotations=True, min_visible=0.25) -> SceneSample:
    path = Path(path)
    if not path.is_dir():
        raise RecordIOError('record directory', path)
    views = []
    for i in range(1, NUM_VIEWS + 1):
        view_path = path / f'view{i}.png'
        if not view_path.exists():
            raise RecordIOError(f'view{i} image', view_path)
        with Image.open(view_path) as img:
            views.append(np.asarray(img.convert('RGB'), dtype=np.uint8).copy())
    cloud_path = path / 'cloud.ply'
    if not cloud_path.exists():
        raise RecordIOError('point cloud', cloud_path)
    cloud = read_ply(cloud_path)
    cam_path = path / 'cameras.json'
    if not cam_path.exists():
        raise RecordIOError('camera parameters', cam_path)
    with open(cam_path, 'r', encoding='utf-8') as f:
        cam_doc = json.load(f)
    if isinstance(cam_doc, dict):
        cam_doc = cam_doc.get('cameras', [])
    if len(cam_doc) != NUM_VIEWS:
        raise SchemaError('cameras', f'expected {NUM_VIEWS} cameras, got {len(cam_doc)}')
    cameras = [CameraModel.from_dict(c) for c in cam_doc]
    for i, (view, cam) in enumerate(zip(views, cameras), start=1):
        if (view.shape[1], view.shape[0]) != cam.image_size:
            raise SchemaError(f'cameras[{i - 1}]', f'size {cam.image_size} does not match view{i} '
                                                   f'{view.shape[1]}x{view.shape[0]}')

    annotations = None
    if with_annotations:
        ann_path = path / 'annotations.json'
        if not ann_path.exists():
            raise RecordIOError('annotations', ann_path)
        with open(ann_path, 'r', encoding='utf-8') as f:
            try:
                doc = json.load(f)
            except json.JSONDecodeError as e:
                raise SchemaError(str(ann_path), f'invalid JSON ({e})')
        annotations = parse_annotations(doc, cameras[0], min_visible)
    if cloud.shape[0] < 1:
        raise SchemaError('cloud', f'{cloud_path} holds no points')
    return SceneSample(views, cloud, cameras, annotations, name=path.name)


def list_records(root):
    root = Path(root)
    if not root.is_dir():
        raise RecordIOError('dataset directory', root)
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / 'view1.png').exists())


# -- augmentation ---------------------------------------------------------------------------------

def _map_annotations(annotations, fn):
    if annotations is None:
        return None
    entities = [replace(e, box2d=fn(e.box2d)) for e in annotations.entities]
    return AnnotationSet(entities, list(annotations.relations))


def resize_sample(sample: SceneSample, short_edge) -> SceneSample:
    views, cameras = [], []
    for view, cam in zip(sample.views, sample.cameras):
        h, w = view.shape[:2]
        scale = short_edge / min(h, w)
        new_w, new_h = max(1, int(round(w * scale))), max(1, int(round(h * scale)))
        img = Image.fromarray(view).resize((new_w, new_h), Image.BILINEAR)
        views.append(np.asarray(img, dtype=np.uint8).copy())
        cameras.append(cam.scaled(new_w / w, new_h / h, (new_w, new_h)))
    (w0, h0), (w1, h1) = sample.cameras[0].image_size, cameras[0].image_size
    annotations = _map_annotations(sample.annotations, lambda b: b.scaled(w1 / w0, h1 / h0).clipped((w1, h1)))
    return SceneSample(views, sample.cloud, cameras, annotations, sample.name)


def flip_sample(sample: SceneSample) -> SceneSample:
    """Horizontal mirror of every view; cameras and main-view boxes follow, triplets unchanged."""
    views = [np.ascontiguousarray(v[:, ::-1]) for v in sample.views]
    cameras = [cam.flipped() for cam in sample.cameras]
    width = sample.cameras[0].image_size[0]
    annotations = _map_annotations(sample.annotations, lambda b: b.flipped(width))
    return SceneSample(views, sample.cloud, cameras, annotations, sample.name)


def color_jitter(view: np.ndarray, rng, strength) -> np.ndarray:
    img = Image.fromarray(view)
    for enhancer in (ImageEnhance.Brightness, ImageEnhance.Contrast, ImageEnhance.Color):
        img = enhancer(img).enhance(float(rng.uniform(1.0 - strength, 1.0 + strength)))
    return np.asarray(img, dtype=np.uint8).copy()


def augment(sample: SceneSample, rng: np.random.Generator, train_cfg, training=True) -> SceneSample:
    if not training:
        return resize_sample(sample, train_cfg['eval_size'])
    sample = resize_sample(sample, rng.uniform(train_cfg['min_size'], train_cfg['max_size']))
    if rng.random() < train_cfg['flip_prob']:
        sample = flip_sample(sample)
    if train_cfg['jitter'] > 0:
        views = [color_jitter(v, rng, train_cfg['jitter']) for v in sample.views]
        sample = replace(sample, views=views)
    return sample


class SceneDataset(Dataset):
    """Records under a directory, augmented on access; items are SceneSample objects."""

    def __init__(self, root, cfg, training=True, with_annotations=True):
        self.paths = list_records(root)
        self.cfg = cfg
        self.training = training
        self.with_annotations = with_annotations
        self.epoch = 0

    def set_epoch(self, epoch):
        self.epoch = epoch

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, index):
        sample = load_4dor_record(self.paths[index], self.with_annotations, self.cfg['data']['min_visible'])
        rng = np.random.default_rng([self.cfg['train']['seed'], self.epoch, index])
        return augment(sample, rng, self.cfg['train'], training=self.training)


def collate_scenes(batch):
    return list(batch)


def image_to_tensor(view: np.ndarray, data_cfg) -> torch.Tensor:
    """(H, W, 3) uint8 -> normalized (3, H, W) float tensor."""
    x = torch.from_numpy(np.ascontiguousarray(view)).permute(2, 0, 1).float() / 255.0
    mean = torch.tensor(data_cfg['image_mean']).view(3, 1, 1)
    std = torch.tensor(data_cfg['image_std']).view(3, 1, 1)
    return (x - mean) / std
