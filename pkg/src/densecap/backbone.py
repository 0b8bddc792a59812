"""Region detection stage: conv backbone, RPN, anchor sampling, proposals, ROI pooling."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import geometry as G
from . import tensor as T
from .errors import ConfigError, DimensionError, UsageError
from .nn import Conv2d, Linear, Module
from .tensor import Tensor

logger = logging.getLogger(__name__)

DOWNSAMPLE = 16


@dataclass(frozen=True)
class BackboneConfig:
    channels: int = 64
    pool_size: int = 7
    feature_dim: int = 512
    anchors: G.AnchorSpec = field(default_factory=G.AnchorSpec)
    rpn_batch: int = 256
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    image_side: int = 128

    def __post_init__(self):
        if self.channels < 4:
            raise ConfigError("backbone needs at least 4 channels")
        if self.pool_size < 1 or self.feature_dim < 1 or self.rpn_batch < 2:
            raise ConfigError("pool_size, feature_dim and rpn_batch must be positive")
        if not 0.0 <= self.rpn_neg_iou <= self.rpn_pos_iou <= 1.0:
            raise ConfigError("need 0 <= rpn_neg_iou <= rpn_pos_iou <= 1")


@dataclass
class FeatureMap:
    tensor: Tensor  # C×h×w
    downsample: int
    image_size: tuple[int, int]  # (width, height) of the network input

    @property
    def height(self) -> int:
        return self.tensor.shape[1]

    @property
    def width(self) -> int:
        return self.tensor.shape[2]


@dataclass
class ProposalSet:
    boxes: np.ndarray  # (n, 4) clipped, valid, score-descending
    scores: np.ndarray
    anchor_index: np.ndarray

    def __len__(self) -> int:
        return len(self.boxes)


@dataclass
class AnchorSample:
    indices: np.ndarray  # sampled anchor ids
    labels: np.ndarray  # 1 = foreground, 0 = background, aligned with indices
    gt_index: np.ndarray  # matched GT per sampled anchor (-1 for negatives)
    targets: np.ndarray  # (n_pos, 4) offset targets for the positive entries, in order


# -- image preparation -------------------------------------------------------------

def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    C, H, W = image.shape
    if (H, W) == (out_h, out_w):
        return image.copy()
    ys = (np.arange(out_h) + 0.5) * H / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * W / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, H - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, W - 1)
    y1, x1 = np.clip(y0 + 1, 0, H - 1), np.clip(x0 + 1, 0, W - 1)
    wy = np.clip(ys - y0, 0, 1)[:, None]
    wx = np.clip(xs - x0, 0, 1)[None, :]
    top = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bot = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def prepare_image(image: np.ndarray, longer_side: int) -> tuple[np.ndarray, float]:
    """Resize so the longer side equals ``longer_side``, then zero-pad to multiples of 16.

    Returns the network input and the scale applied to box coordinates.
    """
    _, H, W = image.shape
    scale = longer_side / max(H, W)
    if scale != 1.0:
        image = resize_bilinear(image, max(1, round(H * scale)), max(1, round(W * scale)))
    _, h, w = image.shape
    ph, pw = -h % DOWNSAMPLE, -w % DOWNSAMPLE
    if ph or pw:
        image = np.pad(image, ((0, 0), (0, ph), (0, pw)))
    return image, scale


# -- networks ------------------------------------------------------------------------------

class Backbone(Module):
    """Four (3×3 conv, relu, 2×2 max-pool) blocks: cumulative stride 16."""

    def __init__(self, rng: np.random.Generator, channels: int = 64):
        widths = [3, max(channels // 4, 1), max(channels // 2, 1), channels, channels]
        self.convs = [Conv2d(rng, widths[i], widths[i + 1], 3, pad=1) for i in range(4)]
        self.channels = channels

    def __call__(self, image) -> FeatureMap:
        x = T.as_tensor(image)
        if x.ndim != 3 or x.shape[0] != 3:
            raise DimensionError(f"backbone expects a 3×H×W image, got {x.shape}")
        _, H, W = x.shape
        if H < DOWNSAMPLE or W < DOWNSAMPLE:
            raise DimensionError(f"image {H}x{W} smaller than {DOWNSAMPLE}x{DOWNSAMPLE}")
        if H % DOWNSAMPLE or W % DOWNSAMPLE:
            raise DimensionError(f"image {H}x{W} not a multiple of {DOWNSAMPLE}; use prepare_image")
        for conv in self.convs:
            x = T.max_pool2d(T.relu(conv(x)), 2)
        return FeatureMap(x, DOWNSAMPLE, (W, H))


class RPN(Module):
    """Shared 3×3 conv followed by 1×1 objectness and offset heads."""

    def __init__(self, rng: np.random.Generator, channels: int, anchors_per_cell: int):
        self.shared = Conv2d(rng, channels, channels, 3, pad=1)
        self.cls = Conv2d(rng, channels, 2 * anchors_per_cell, 1, pad=0)
        self.reg = Conv2d(rng, channels, 4 * anchors_per_cell, 1, pad=0)
        self.A = anchors_per_cell

    def __call__(self, fm: FeatureMap) -> tuple[Tensor, Tensor]:
        h = T.relu(self.shared(fm.tensor))
        logits = T.transpose(self.cls(h), (1, 2, 0)).reshape(-1, 2)
        offsets = T.transpose(self.reg(h), (1, 2, 0)).reshape(-1, 4)
        return logits, offsets


def fg_probability(logits: np.ndarray) -> np.ndarray:
    return T.softmax_np(np.asarray(logits))[:, 1]


# -- training targets -----------------------------------------------------------------------

def label_anchors(anchors: np.ndarray, gt_boxes: np.ndarray, pos_iou: float = 0.7, neg_iou: float = 0.3):
    """Per-anchor label (1 pos, 0 neg, -1 ignore) and argmax-GT index."""
    ious = G.iou_matrix(anchors, gt_boxes)
    best_gt = ious.argmax(axis=1)
    best = ious[np.arange(len(anchors)), best_gt]
    labels = np.full(len(anchors), -1, dtype=np.int64)
    labels[best < neg_iou] = 0
    gt_max = ious.max(axis=0)
    for g in range(gt_boxes.shape[0]):
        if gt_max[g] <= 0:
            continue
        hits = np.flatnonzero(ious[:, g] == gt_max[g])
        labels[hits] = 1
        # an anchor that is the argmax for this GT regresses toward it
        best_gt[hits] = np.where(best[hits] > gt_max[g], best_gt[hits], g)
    labels[best >= pos_iou] = 1
    return labels, best_gt


def sample_training_boxes(
    anchors: np.ndarray,
    gt_boxes: np.ndarray,
    n: int,
    rng: np.random.Generator,
    pos_iou: float = 0.7,
    neg_iou: float = 0.3,
) -> AnchorSample:
    """Sample up to ``n`` labelled anchors with at most ``n // 2`` positives."""
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(gt_boxes) == 0:
        raise UsageError("sample_training_boxes needs at least one GT box")
    labels, best_gt = label_anchors(anchors, gt_boxes, pos_iou, neg_iou)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if len(pos) > n // 2:
        pos = np.sort(rng.choice(pos, n // 2, replace=False))
    n_neg = min(len(neg), n - len(pos))
    if n_neg == 0:
        logger.warning("degenerate scene: no negative anchors available")
    neg = np.sort(rng.choice(neg, n_neg, replace=False)) if n_neg else neg[:0]
    idx = np.concatenate([pos, neg])
    lab = np.concatenate([np.ones(len(pos), np.int64), np.zeros(len(neg), np.int64)])
    gt_idx = np.concatenate([best_gt[pos], np.full(len(neg), -1)])
    targets = G.encode_offsets(gt_boxes[best_gt[pos]], anchors[pos]) if len(pos) else np.zeros((0, 4))
    return AnchorSample(idx, lab, gt_idx, targets)


def propose(
    logits: np.ndarray,
    offsets: np.ndarray,
    anchors: np.ndarray,
    image_size: tuple[int, int],
    k: int,
    nms_r1: float,
    min_size: float = 1.0,
) -> ProposalSet:
    """Decode every anchor, clip, drop tiny boxes, NMS at ``nms_r1``, keep the top ``k``."""
    if k < 1:
        raise ConfigError("proposal budget k must be at least 1")
    scores = fg_probability(logits)
    boxes = G.clip_boxes(G.decode_offsets(offsets, anchors), *image_size)
    ok = np.flatnonzero(G.valid_mask(boxes, min_size))
    keep = G.nms(boxes[ok], scores[ok], nms_r1)[:k]
    sel = ok[keep]
    return ProposalSet(boxes[sel], scores[sel], sel)


# -- ROI pooling -------------------------------------------------------------------------------

def roi_bins(box: np.ndarray, P: int, downsample: int, feat_h: int, feat_w: int) -> list[tuple[int, int, int, int]]:
    """Feature-cell ranges ``(hs, he, ws, we)`` of the P×P bins of ``box`` (row-major)."""
    x1, y1, x2, y2 = np.asarray(box, dtype=np.float64) / downsample
    cs = int(np.clip(np.floor(x1), 0, feat_w))
    ce = int(np.clip(np.ceil(x2), 0, feat_w))
    rs = int(np.clip(np.floor(y1), 0, feat_h))
    re_ = int(np.clip(np.ceil(y2), 0, feat_h))
    if ce <= cs or re_ <= rs:
        raise UsageError(f"box {box} lies outside the feature map")
    bw, bh = (ce - cs) / P, (re_ - rs) / P
    bins = []
    for i in range(P):
        hs = min(rs + int(np.floor(i * bh)), re_)
        he = min(rs + int(np.ceil((i + 1) * bh)), re_)
        for j in range(P):
            ws = min(cs + int(np.floor(j * bw)), ce)
            we = min(cs + int(np.ceil((j + 1) * bw)), ce)
            bins.append((hs, he, ws, we))
    return bins


def roi_pool(fm: FeatureMap | Tensor, boxes, P: int, downsample: int = DOWNSAMPLE) -> Tensor:
    """Max-pool each box into a P×P grid; returns ``(n, C*P*P)`` (channel-major rows).

    Empty bins produce 0 and pass no gradient; the gradient of a bin goes to
    its (first) argmax cell.
    """
    x = fm.tensor if isinstance(fm, FeatureMap) else fm
    C, H, W = x.shape
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = len(boxes)
    flat = x.data.reshape(C, H * W)
    idx = np.zeros((n, C, P * P), dtype=np.int64)
    valid = np.zeros((n, 1, P * P), dtype=bool)
    cell = np.arange(H * W).reshape(H, W)
    for b, box in enumerate(boxes):
        for k, (hs, he, ws, we) in enumerate(roi_bins(box, P, downsample, H, W)):
            if he <= hs or we <= ws:
                continue
            cells = cell[hs:he, ws:we].ravel()
            arg = flat[:, cells].argmax(axis=1)
            idx[b, :, k] = cells[arg]
            valid[b, 0, k] = True
    chan = np.arange(C)[None, :, None]
    out = np.where(valid, flat[chan, idx], 0.0).reshape(n, C * P * P)

    def back(g):
        g = g.reshape(n, C, P * P) * valid
        d = np.zeros_like(flat)
        np.add.at(d, (np.broadcast_to(chan, idx.shape), idx), g)
        return (d.reshape(C, H, W),)

    return Tensor._result(out, (x,), back, "roi_pool")


class RegionEncoder(Module):
    """ROI pool followed by one fully connected layer + relu to a D-vector."""

    def __init__(self, rng: np.random.Generator, channels: int, pool_size: int, feature_dim: int):
        self.fc = Linear(rng, channels * pool_size * pool_size, feature_dim)
        self.pool_size = pool_size

    def __call__(self, fm: FeatureMap, boxes) -> Tensor:
        return T.relu(self.fc(roi_pool(fm, boxes, self.pool_size, fm.downsample)))

    def context(self, fm: FeatureMap) -> Tensor:
        W, H = fm.image_size
        return self(fm, np.array([[0.0, 0.0, W, H]]))
