"""The integrated two-stage model and its inference pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry as G
from . import tensor as T
from .backbone import RPN, Backbone, BackboneConfig, FeatureMap, RegionEncoder, fg_probability, propose
from .dataset import Vocabulary
from .heads import CaptionHead, DecodeBatch, ModelConfig
from .nn import Module
from .tensor import Tensor


@dataclass
class Prediction:
    box: G.BBox
    confidence: float
    caption: list[str]
    image_id: str = ""


@dataclass
class DecodeResult:
    """Beam-1 decode of one proposal."""

    proposal: np.ndarray
    caption: list[str]
    logprobs: list[float]
    confidence: float
    final_offset: G.BoxOffset
    intermediate_offsets: list[G.BoxOffset]
    fed_words: list[str]  # word fed at each step, starting with <SOS>
    final_box: G.BBox | None
    intermediate_boxes: list[G.BBox | None] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.intermediate_offsets)


class DenseCapModel(Module):
    def __init__(self, backbone_cfg: BackboneConfig, head_cfg: ModelConfig, vocab: Vocabulary, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.backbone_cfg = backbone_cfg
        self.head_cfg = head_cfg
        self.vocab = vocab
        self.backbone = Backbone(rng, backbone_cfg.channels)
        self.rpn = RPN(rng, backbone_cfg.channels, backbone_cfg.anchors.anchors_per_cell)
        self.encoder = RegionEncoder(rng, backbone_cfg.channels, backbone_cfg.pool_size, backbone_cfg.feature_dim)
        self.head = CaptionHead(rng, head_cfg, backbone_cfg.feature_dim, len(vocab))
        self._anchor_cache: dict[tuple[int, int], np.ndarray] = {}

    def anchors(self, fm: FeatureMap) -> np.ndarray:
        key = (fm.height, fm.width)
        if key not in self._anchor_cache:
            self._anchor_cache[key] = G.generate_anchors(self.backbone_cfg.anchors, fm.height, fm.width, fm.downsample)
        return self._anchor_cache[key]

    def features(self, image: np.ndarray) -> FeatureMap:
        return self.backbone(image)

    def context(self, fm: FeatureMap) -> Tensor | None:
        return self.encoder.context(fm) if self.head_cfg.uses_context else None

    def decode_boxes(self, fm: FeatureMap, boxes: np.ndarray, max_steps: int | None = None):
        """Detection scores and beam-1 decodes for ``boxes`` on one feature map."""
        with T.no_grad():
            region = self.encoder(fm, boxes)
            ctx = self.context(fm)
            conf = fg_probability(self.head.detection_logits(region).data)
            batch = self.head.decode(region, ctx, max_steps)
        return conf, batch

    def proposals(self, fm: FeatureMap, k: int, nms_r1: float):
        with T.no_grad():
            logits, offsets = self.rpn(fm)
        return propose(logits.data, offsets.data, self.anchors(fm), fm.image_size, k, nms_r1)


def decode_results(model: DenseCapModel, proposals: np.ndarray, conf: np.ndarray, batch: DecodeBatch,
                   image_size: tuple[int, int]) -> list[DecodeResult]:
    out = []
    words = model.vocab.itos
    for i, prop in enumerate(proposals):
        anchor = G.BBox.from_array(prop)
        inter = [G.BoxOffset(*o) for o in batch.intermediate[i]]
        caption = [words[t] for t in batch.tokens[i]]
        out.append(
            DecodeResult(
                proposal=prop,
                caption=caption,
                logprobs=batch.logprobs[i],
                confidence=float(conf[i]),
                final_offset=G.BoxOffset(*batch.final_offsets[i]),
                intermediate_offsets=inter,
                fed_words=["<SOS>"] + caption[: len(inter) - 1],
                final_box=G.decode_offset(G.BoxOffset(*batch.final_offsets[i]), anchor, image_size),
                intermediate_boxes=[G.decode_offset(o, anchor, image_size) for o in inter],
            )
        )
    return out


@dataclass
class ImageInference:
    proposals: np.ndarray
    decodes: list[DecodeResult]
    predictions: list[Prediction]
    dropped_degenerate: int = 0
    dropped_empty: int = 0


def infer_image(model: DenseCapModel, image: np.ndarray, k: int = 300, nms_r1: float = 0.7, nms_r2: float = 0.3,
                image_id: str = "") -> ImageInference:
    """Propose, decode every proposal, then suppress final boxes at ``nms_r2``."""
    with T.no_grad():
        fm = model.features(image)
    props = model.proposals(fm, k, nms_r1)
    if len(props) == 0:
        return ImageInference(props.boxes, [], [])
    conf, batch = model.decode_boxes(fm, props.boxes)
    decodes = decode_results(model, props.boxes, conf, batch, fm.image_size)
    return finalize(decodes, props.boxes, nms_r2, image_id)


def finalize(decodes: list[DecodeResult], proposals: np.ndarray, nms_r2: float, image_id: str = "") -> ImageInference:
    boxes, scores, keep_src = [], [], []
    degenerate = empty = 0
    for i, d in enumerate(decodes):
        if d.final_box is None:
            degenerate += 1
            continue
        if not d.caption:
            empty += 1
            continue
        boxes.append(d.final_box.as_array())
        scores.append(d.confidence)
        keep_src.append(i)
    preds = []
    if boxes:
        for j in G.nms(np.array(boxes), np.array(scores), nms_r2):
            d = decodes[keep_src[j]]
            preds.append(Prediction(d.final_box, d.confidence, d.caption, image_id))
    return ImageInference(proposals, decodes, preds, degenerate, empty)
