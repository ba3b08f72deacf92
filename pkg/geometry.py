"""
Camera models, 3D->2D projection, box arithmetic, spatial pair features and
foreground-union masks.

World frame: z up, meters. Camera frame: x right, y down, z forward.
"""

import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
import torch
from torchvision.ops import box_convert
from torchvision.ops import box_iou as _tv_box_iou

from errors import NoProjectionError, OutOfImageError, SchemaError, ShapeError

WRIST_BOX_SIZE = 100.0
NEG_INF = float('-inf')


@dataclass(frozen=True)
class Box2D:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ShapeError(f'degenerate 2D box: {self.as_list()}')

    @classmethod
    def from_seq(cls, values):
        if len(values) != 4:
            raise ShapeError(f'2D box needs 4 values, got {len(values)}')
        return cls(*(float(v) for v in values))

    def as_list(self):
        return [self.x1, self.y1, self.x2, self.y2]

    @property
    def width(self):
        return self.x2 - self.x1

    @property
    def height(self):
        return self.y2 - self.y1

    @property
    def area(self):
        return self.width * self.height

    @property
    def center(self):
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def clipped(self, image_size):
        width, height = image_size
        return Box2D(
            min(max(self.x1, 0.0), width), min(max(self.y1, 0.0), height),
            min(max(self.x2, 0.0), width), min(max(self.y2, 0.0), height),
        )

    def scaled(self, sx, sy):
        return Box2D(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)

    def flipped(self, image_width):
        return Box2D(image_width - self.x2, self.y1, image_width - self.x1, self.y2)

    def union(self, other):
        return Box2D(min(self.x1, other.x1), min(self.y1, other.y1),
                     max(self.x2, other.x2), max(self.y2, other.y2))


@dataclass(frozen=True)
class Box3D:
    center: Tuple[float, float, float]
    half_extents: Tuple[float, float, float]
    yaw: float = 0.0

    def __post_init__(self):
        if len(self.center) != 3 or len(self.half_extents) != 3:
            raise ShapeError('3D box needs a 3-vector center and 3-vector half-extents')
        if min(self.half_extents) <= 0:
            raise ShapeError(f'3D box half-extents must be > 0, got {self.half_extents}')

    @classmethod
    def from_dict(cls, doc):
        try:
            return cls(tuple(float(v) for v in doc['center']),
                       tuple(float(v) for v in doc['half_extents']),
                       float(doc.get('yaw', 0.0)))
        except KeyError as e:
            raise SchemaError(f'box3d.{e.args[0]}', 'missing')
        except (TypeError, ShapeError) as e:
            raise SchemaError('box3d', str(e))

    def to_dict(self):
        return {'center': list(self.center), 'half_extents': list(self.half_extents), 'yaw': self.yaw}

    def rotation(self):
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def corners(self):
        """8x3 world-frame corners."""
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
        local = signs * np.asarray(self.half_extents, dtype=float)
        return local @ self.rotation().T + np.asarray(self.center, dtype=float)

    def axis_aligned_extents(self):
        """(min_xyz, max_xyz) of the world-axis-aligned bounding box."""
        corners = self.corners()
        return corners.min(axis=0), corners.max(axis=0)


@dataclass(frozen=True)
class CameraModel:
    intrinsics: np.ndarray   # 3x3, pixels
    extrinsics: np.ndarray   # 4x4, world -> camera
    image_size: Tuple[int, int]  # (W, H)

    def __post_init__(self):
        object.__setattr__(self, 'intrinsics', np.asarray(self.intrinsics, dtype=float).reshape(3, 3))
        object.__setattr__(self, 'extrinsics', np.asarray(self.extrinsics, dtype=float).reshape(4, 4))
        object.__setattr__(self, 'image_size', (int(self.image_size[0]), int(self.image_size[1])))

    def validate(self, tol=1e-6):
        k = self.intrinsics
        if abs(k[1, 0]) > 0 or abs(k[2, 0]) > 0 or abs(k[2, 1]) > 0:
            raise SchemaError('intrinsics', 'must be upper-triangular')
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise SchemaError('intrinsics', 'focal entries must be positive')
        rot = self.extrinsics[:3, :3]
        if np.linalg.norm(rot.T @ rot - np.eye(3)) >= tol:
            raise SchemaError('extrinsics', 'rotation block is not orthonormal')
        if self.image_size[0] < 1 or self.image_size[1] < 1:
            raise SchemaError('width/height', 'image size must be positive')
        return self

    @classmethod
    def from_dict(cls, doc):
        for key in ('intrinsics', 'extrinsics', 'width', 'height'):
            if key not in doc:
                raise SchemaError(key, 'missing from camera entry')
        if len(doc['intrinsics']) != 9:
            raise SchemaError('intrinsics', 'expected 9 row-major values')
        if len(doc['extrinsics']) != 16:
            raise SchemaError('extrinsics', 'expected 16 row-major values')
        return cls(np.array(doc['intrinsics'], dtype=float), np.array(doc['extrinsics'], dtype=float),
                   (doc['width'], doc['height'])).validate()

    def to_dict(self):
        return {
            'intrinsics': [float(v) for v in self.intrinsics.reshape(-1)],
            'extrinsics': [float(v) for v in self.extrinsics.reshape(-1)],
            'width': self.image_size[0],
            'height': self.image_size[1],
        }

    @classmethod
    def look_at(cls, eye, target, focal, image_size, up=(0.0, 0.0, 1.0)):
        """Pinhole camera at `eye` looking at `target`, principal point at the image center."""
        eye, target, up = (np.asarray(v, dtype=float) for v in (eye, target, up))
        forward = target - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        ext = np.eye(4)
        ext[:3, :3] = rot
        ext[:3, 3] = -rot @ eye
        width, height = image_size
        k = np.array([[focal, 0.0, width / 2.0], [0.0, focal, height / 2.0], [0.0, 0.0, 1.0]])
        return cls(k, ext, (width, height))

    def scaled(self, sx, sy, image_size):
        k = self.intrinsics.copy()
        k[0] *= sx
        k[1] *= sy
        return CameraModel(k, self.extrinsics.copy(), image_size)

    def flipped(self):
        """Camera whose projections are mirrored about the vertical image axis (u -> W - u)."""
        k = self.intrinsics.copy()
        k[0, 2] = self.image_size[0] - k[0, 2]
        k[0, 1] = -k[0, 1]
        ext = self.extrinsics.copy()
        ext[0] = -ext[0]
        return CameraModel(k, ext, self.image_size)

    def to_camera(self, points):
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        return points @ self.extrinsics[:3, :3].T + self.extrinsics[:3, 3]


def project_points(points, cam: CameraModel):
    """World points (M, 3) -> (pixels (M, 2), depth (M,), valid (M,))."""
    cam_pts = cam.to_camera(points)
    depth = cam_pts[:, 2]
    safe = np.where(np.abs(depth) > 1e-12, depth, 1e-12)
    uvw = cam_pts @ cam.intrinsics.T
    pixels = uvw[:, :2] / safe[:, None]
    width, height = cam.image_size
    valid = (
        (depth > 0)
        & (pixels[:, 0] >= 0) & (pixels[:, 0] <= width)
        & (pixels[:, 1] >= 0) & (pixels[:, 1] <= height)
    )
    return pixels, depth, valid


def project_box3d(box: Box3D, cam: CameraModel) -> Box2D:
    """Axis-aligned hull of the corners in front of the camera, clipped to the image.

    Corners outside the image still widen the hull, so a box that straddles the border
    keeps its whole visible extent.
    """
    pixels, depth, _ = project_points(box.corners(), cam)
    front = depth > 0
    if not front.any():
        raise NoProjectionError(f'box at {box.center} lies behind the camera')
    pts = pixels[front]
    x1, y1 = pts.min(axis=0)
    x2, y2 = pts.max(axis=0)
    width, height = cam.image_size
    if x2 < 0 or y2 < 0 or x1 > width or y1 > height:
        raise NoProjectionError(f'box at {box.center} projects outside the image')
    x1, x2 = float(np.clip(x1, 0, width)), float(np.clip(x2, 0, width))
    y1, y2 = float(np.clip(y1, 0, height)), float(np.clip(y2, 0, height))
    # a flat box can collapse to a line; keep a one-pixel sliver inside the image
    if x2 - x1 < 1e-6:
        x1, x2 = max(0.0, x1 - 0.5), min(float(width), x2 + 0.5)
    if y2 - y1 < 1e-6:
        y1, y2 = max(0.0, y1 - 0.5), min(float(height), y2 + 0.5)
    return Box2D(x1, y1, x2, y2)


def visible_fraction(box: Box3D, cam: CameraModel) -> float:
    """Clipped hull area / unclipped hull area of the in-front corners (0 when none)."""
    pixels, depth, _ = project_points(box.corners(), cam)
    front = depth > 0
    if not front.any():
        return 0.0
    pts = pixels[front]
    x1, y1 = pts.min(axis=0)
    x2, y2 = pts.max(axis=0)
    full = (x2 - x1) * (y2 - y1)
    if full <= 0:
        return 0.0
    width, height = cam.image_size
    cx1, cy1 = np.clip(x1, 0, width), np.clip(y1, 0, height)
    cx2, cy2 = np.clip(x2, 0, width), np.clip(y2, 0, height)
    return float(max(cx2 - cx1, 0.0) * max(cy2 - cy1, 0.0) / full)


def spatial_feature(box_a: Box2D, box_b: Box2D) -> np.ndarray:
    """[dx, dy, dist, area_a, area_b] in pixels, offsets taken as center_a - center_b."""
    (ax, ay), (bx, by) = box_a.center, box_b.center
    dx, dy = ax - bx, ay - by
    return np.array([dx, dy, math.hypot(dx, dy), box_a.area, box_b.area])


def spatial_features(boxes_a: torch.Tensor, boxes_b: torch.Tensor, image_size) -> torch.Tensor:
    """Batched, standardized pair features: offsets/distance over the image diagonal,
    areas over the image area. Boxes are (P, 4) xyxy pixels."""
    width, height = image_size
    diag = math.hypot(width, height)
    ca = 0.5 * (boxes_a[:, :2] + boxes_a[:, 2:])
    cb = 0.5 * (boxes_b[:, :2] + boxes_b[:, 2:])
    offset = (ca - cb) / diag
    # sqrt has an infinite derivative at 0; identical centers are common for self-similar boxes
    dist = torch.sqrt((offset ** 2).sum(dim=-1, keepdim=True) + 1e-12)
    area_a = ((boxes_a[:, 2] - boxes_a[:, 0]) * (boxes_a[:, 3] - boxes_a[:, 1])).unsqueeze(-1)
    area_b = ((boxes_b[:, 2] - boxes_b[:, 0]) * (boxes_b[:, 3] - boxes_b[:, 1])).unsqueeze(-1)
    return torch.cat([offset, dist, area_a / (width * height), area_b / (width * height)], dim=-1)


def wrist_instrument_box(wrist_xy, image_size, size=WRIST_BOX_SIZE) -> Box2D:
    width, height = image_size
    x, y = float(wrist_xy[0]), float(wrist_xy[1])
    if not (0 <= x <= width and 0 <= y <= height):
        raise OutOfImageError(f'wrist ({x:.1f}, {y:.1f}) outside image {width}x{height}')
    half = size / 2.0
    return Box2D(x - half, y - half, x + half, y + half).clipped(image_size)


def boxes_to_tensor(boxes: Sequence[Box2D], dtype=torch.float32) -> torch.Tensor:
    if not boxes:
        return torch.zeros(0, 4, dtype=dtype)
    return torch.tensor([b.as_list() for b in boxes], dtype=dtype)


def box_iou(a: Box2D, b: Box2D) -> float:
    return float(_tv_box_iou(boxes_to_tensor([a], torch.float64), boxes_to_tensor([b], torch.float64))[0, 0])


def box_iou_matrix(a, b) -> np.ndarray:
    """IoU between two (n, 4) / (m, 4) xyxy arrays."""
    a = torch.as_tensor(np.asarray(a, dtype=float).reshape(-1, 4))
    b = torch.as_tensor(np.asarray(b, dtype=float).reshape(-1, 4))
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    return _tv_box_iou(a, b).numpy()


def xyxy_to_normalized_cxcywh(boxes: torch.Tensor, image_size) -> torch.Tensor:
    width, height = image_size
    scale = boxes.new_tensor([width, height, width, height])
    return box_convert(boxes / scale, 'xyxy', 'cxcywh')


def normalized_cxcywh_to_xyxy(boxes: torch.Tensor, image_size) -> torch.Tensor:
    width, height = image_size
    scale = boxes.new_tensor([width, height, width, height])
    return box_convert(boxes, 'cxcywh', 'xyxy').clamp(0.0, 1.0) * scale


def union_foreground_mask(boxes: Sequence[Box2D], grid, image_size):
    """(mask h x w bool, empty_flag). A cell is foreground when its image-space
    footprint overlaps any box with positive area."""
    h, w = grid
    if not boxes:
        return np.zeros((h, w), dtype=bool), True
    mask = pair_union_masks(boxes_to_tensor(list(boxes), torch.float64), None, grid, image_size)
    return mask.numpy(), False


def pair_union_masks(boxes: torch.Tensor, pairs, grid, image_size) -> torch.Tensor:
    """Foreground masks over a (h, w) grid.

    With `pairs` (P, 2) the result is (P, h, w): union of the subject and object boxes.
    With `pairs=None` the result is (h, w): union of every box.
    """
    h, w = grid
    width, height = image_size
    cell_w, cell_h = width / w, height / h
    boxes = boxes.detach()
    col_lo = torch.arange(w, dtype=boxes.dtype, device=boxes.device) * cell_w
    row_lo = torch.arange(h, dtype=boxes.dtype, device=boxes.device) * cell_h
    cols = (boxes[:, None, 0] < col_lo + cell_w) & (boxes[:, None, 2] > col_lo)   # (n, w)
    rows = (boxes[:, None, 1] < row_lo + cell_h) & (boxes[:, None, 3] > row_lo)   # (n, h)
    per_box = rows[:, :, None] & cols[:, None, :]                                 # (n, h, w)
    if pairs is None:
        return per_box.any(dim=0)
    pairs = torch.as_tensor(pairs, dtype=torch.long, device=boxes.device).reshape(-1, 2)
    return per_box[pairs[:, 0]] | per_box[pairs[:, 1]]


def mask_to_bias(mask, dtype=torch.float32) -> torch.Tensor:
    """Boolean foreground mask -> additive attention bias (0 on foreground, -inf elsewhere)."""
    mask = torch.as_tensor(mask)
    bias = torch.zeros(mask.shape, dtype=dtype, device=mask.device)
    return bias.masked_fill(~mask.bool(), NEG_INF)
