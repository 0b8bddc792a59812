"""Box arithmetic: IoU, NMS, anchors and the center/log-size offset transform.

Boxes are closed continuous regions ``(x1, y1, x2, y2)`` in pixels with
area ``(x2 - x1) * (y2 - y1)``; there is no +1 pixel convention.  Array
functions take ``(n, 4)`` float arrays; :class:`BBox` wraps a single box.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(np.isfinite(c) for c in coords):
            raise DataError(f"non-finite box {coords}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise DataError(f"degenerate box {coords}")

    @classmethod
    def from_array(cls, a) -> "BBox":
        return cls(*(float(v) for v in a))

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height


@dataclass(frozen=True)
class BoxOffset:
    tx: float
    ty: float
    tw: float
    th: float

    def as_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tw, self.th], dtype=np.float64)


@dataclass(frozen=True)
class AnchorSpec:
    scales: tuple[float, ...] = (16.0, 26.0, 40.0, 60.0)
    aspect_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)

    def __post_init__(self):
        if not self.scales or not self.aspect_ratios:
            raise ConfigError("anchor spec needs at least one scale and one ratio")
        if any(s <= 0 for s in self.scales) or any(r <= 0 for r in self.aspect_ratios):
            raise ConfigError("anchor scales and ratios must be positive")

    @property
    def anchors_per_cell(self) -> int:
        return len(self.scales) * len(self.aspect_ratios)


def _as_boxes(boxes) -> np.ndarray:
    if isinstance(boxes, BBox):
        return boxes.as_array()[None]
    arr = np.asarray(boxes, dtype=np.float64)
    return arr.reshape(-1, 4)


def area(boxes) -> np.ndarray:
    b = _as_boxes(boxes)
    return (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between ``(n, 4)`` and ``(m, 4)`` box arrays."""
    a, b = _as_boxes(a), _as_boxes(b)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    union = area(a)[:, None] + area(b)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return np.clip(out, 0.0, 1.0)


def iou(a: BBox, b: BBox) -> float:
    return float(iou_matrix(a, b)[0, 0])


def nms(boxes, scores, iou_threshold: float) -> list[int]:
    """Greedy NMS; returns kept indices ordered by descending score.

    A box is suppressed when its IoU with an already kept box is strictly
    greater than ``iou_threshold``.  Equal scores are ordered by index.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ConfigError(f"NMS threshold must lie in [0, 1], got {iou_threshold}")
    b = _as_boxes(boxes)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(s) != len(b):
        raise ConfigError("boxes and scores differ in length")
    if not np.all(np.isfinite(s)):
        raise ConfigError("NMS scores must be finite")
    order = np.lexsort((np.arange(len(s)), -s))
    keep: list[int] = []
    x1, y1, x2, y2 = b.T
    areas = area(b)
    while order.size:
        i = int(order[0])
        keep.append(i)
        rest = order[1:]
        ix1 = np.maximum(x1[i], x1[rest])
        iy1 = np.maximum(y1[i], y1[rest])
        ix2 = np.minimum(x2[i], x2[rest])
        iy2 = np.minimum(y2[i], y2[rest])
        inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
        union = areas[i] + areas[rest] - inter
        ov = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
        order = rest[ov <= iou_threshold]
    return keep


def encode_offsets(targets, anchors) -> np.ndarray:
    t, a = _as_boxes(targets), _as_boxes(anchors)
    aw, ah = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    ax, ay = a[:, 0] + 0.5 * aw, a[:, 1] + 0.5 * ah
    tw, th = t[:, 2] - t[:, 0], t[:, 3] - t[:, 1]
    tx, ty = t[:, 0] + 0.5 * tw, t[:, 1] + 0.5 * th
    return np.stack([(tx - ax) / aw, (ty - ay) / ah, np.log(tw / aw), np.log(th / ah)], axis=1)


# exp() argument cap so a wild regression cannot overflow; log(1000/16)
_MAX_LOG_SCALE = float(np.log(1000.0 / 16.0))


def decode_offsets(offsets, anchors) -> np.ndarray:
    """Inverse of :func:`encode_offsets` (no clipping)."""
    d = np.asarray(offsets, dtype=np.float64).reshape(-1, 4)
    a = _as_boxes(anchors)
    aw, ah = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    ax, ay = a[:, 0] + 0.5 * aw, a[:, 1] + 0.5 * ah
    cx, cy = d[:, 0] * aw + ax, d[:, 1] * ah + ay
    w = aw * np.exp(np.minimum(d[:, 2], _MAX_LOG_SCALE))
    h = ah * np.exp(np.minimum(d[:, 3], _MAX_LOG_SCALE))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def clip_boxes(boxes, width: float, height: float) -> np.ndarray:
    b = _as_boxes(boxes).copy()
    b[:, [0, 2]] = np.clip(b[:, [0, 2]], 0.0, width)
    b[:, [1, 3]] = np.clip(b[:, [1, 3]], 0.0, height)
    return b


def valid_mask(boxes, min_size: float = 1e-6) -> np.ndarray:
    b = _as_boxes(boxes)
    return ((b[:, 2] - b[:, 0]) > min_size) & ((b[:, 3] - b[:, 1]) > min_size)


def encode_offset(target: BBox, anchor: BBox) -> BoxOffset:
    return BoxOffset(*encode_offsets(target, anchor)[0])


def decode_offset(offset: BoxOffset, anchor: BBox, image_size: tuple[float, float] | None = None) -> BBox | None:
    """Decode ``offset`` against ``anchor``; clip to ``(width, height)`` when given.

    Returns ``None`` when the clipped box has no area (a rejected prediction).
    """
    box = decode_offsets(offset.as_array(), anchor)
    if image_size is not None:
        box = clip_boxes(box, *image_size)
    if not valid_mask(box)[0]:
        return None
    return BBox.from_array(box[0])


def generate_anchors(spec: AnchorSpec, feat_h: int, feat_w: int, downsample: int) -> np.ndarray:
    """Anchors for every feature cell, ordered ``(row, col, scale, ratio)``.

    Cell ``(i, j)`` is centered at ``((j + 0.5) * downsample, (i + 0.5) * downsample)``;
    a ratio ``r`` is width/height at constant area ``scale**2``.
    """
    if downsample <= 0:
        raise ConfigError("downsample must be positive")
    shapes = []
    for s in spec.scales:
        for r in spec.aspect_ratios:
            w = s * np.sqrt(r)
            h = s / np.sqrt(r)
            shapes.append((w, h))
    shapes = np.asarray(shapes)
    ys, xs = np.meshgrid((np.arange(feat_h) + 0.5) * downsample, (np.arange(feat_w) + 0.5) * downsample, indexing="ij")
    centers = np.stack([xs.ravel(), ys.ravel()], axis=1)
    cx = centers[:, None, 0]
    cy = centers[:, None, 1]
    w = shapes[None, :, 0]
    h = shapes[None, :, 1]
    anchors = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)
    return anchors.reshape(-1, 4)


def connected_components(boxes, threshold: float) -> list[list[int]]:
    """Group indices into components of the ``IoU > threshold`` relation."""
    b = _as_boxes(boxes)
    n = len(b)
    if n == 0:
        return []
    adj = iou_matrix(b, b) > threshold
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if adj[i, j]:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])
