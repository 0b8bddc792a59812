"""Approximate joint training: one image per step, one backward over the summed loss."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence, TextIO

import numpy as np

from . import geometry as G
from . import tensor as T
from .backbone import prepare_image, propose, sample_training_boxes
from .checkpoint import save_checkpoint
from .dataset import Scene
from .errors import ConfigError, NumericError, UsageError
from .heads import TrainOutputs
from .model import DenseCapModel
from .tensor import SgdState, Tensor

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "l_cap", "l_det_rpn", "l_det_final", "l_bbox_rpn", "l_bbox_final", "total", "lr")


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.1
    beta: float = 0.01

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass(frozen=True)
class TrainSchedule:
    base_lr: float = 0.001
    halving_interval: int = 2000
    momentum: float = 0.98
    iterations: int = 5000
    clip_norm: float = 10.0
    checkpoint_every: int = 1000
    train_proposals: int = 300
    train_nms: float = 0.7
    head_batch: int = 64
    head_pos_fraction: float = 0.5

    def __post_init__(self):
        if self.base_lr <= 0 or self.halving_interval < 1 or self.iterations < 0:
            raise ConfigError("base_lr and halving_interval must be positive, iterations non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if not 0.0 < self.head_pos_fraction <= 1.0 or self.head_batch < 1:
            raise ConfigError("head_batch must be positive and head_pos_fraction in (0, 1]")

    def lr(self, iteration: int) -> float:
        return self.base_lr * 0.5 ** (iteration // self.halving_interval)


@dataclass
class LossBreakdown:
    l_cap: float
    l_det_rpn: float
    l_det_final: float
    l_bbox_rpn: float
    l_bbox_final: float
    total: float
    tensor: Tensor | None = field(default=None, repr=False)

    def row(self) -> tuple[float, ...]:
        return (self.l_cap, self.l_det_rpn, self.l_det_final, self.l_bbox_rpn, self.l_bbox_final, self.total)


@dataclass
class ImageOutputs:
    """Model outputs for one image together with their matched targets."""

    rpn_logits: Tensor
    rpn_labels: np.ndarray
    rpn_offsets: Tensor | None  # positives only
    rpn_targets: np.ndarray
    det_logits: Tensor
    det_labels: np.ndarray
    head: TrainOutputs | None  # positives only
    bbox_targets: np.ndarray
    n_positive: int = 0


def _zero() -> Tensor:
    return Tensor(0.0)


def compute_loss(out: ImageOutputs, cfg: LossConfig) -> LossBreakdown:
    """``L = L_cap + alpha (L_det_rpn + L_det_final) + beta (L_bbox_rpn + L_bbox_final)``."""
    det_rpn = T.softmax_cross_entropy(out.rpn_logits, out.rpn_labels)
    det_final = T.softmax_cross_entropy(out.det_logits, out.det_labels)
    bbox_rpn = T.smooth_l1(out.rpn_offsets, out.rpn_targets) if out.rpn_offsets is not None else _zero()
    if out.head is not None:
        cap = T.softmax_cross_entropy(out.head.word_logits, out.head.word_targets, out.head.word_mask)
        bbox_final = T.smooth_l1(out.head.offsets, out.bbox_targets)
    else:
        cap, bbox_final = _zero(), _zero()
    total = cap + cfg.alpha * (det_rpn + det_final) + cfg.beta * (bbox_rpn + bbox_final)
    return LossBreakdown(cap.item(), det_rpn.item(), det_final.item(), bbox_rpn.item(), bbox_final.item(),
                         total.item(), total)


def _caption_ids(model: DenseCapModel, words: Sequence[str]) -> list[int]:
    return model.vocab.encode(words)[: model.head_cfg.max_steps - 1]


def forward_image(model: DenseCapModel, scene: Scene, rng: np.random.Generator, schedule: TrainSchedule) -> ImageOutputs:
    """RPN forward, anchor sampling, proposals (+GT), head sampling, teacher-forced heads."""
    bcfg = model.backbone_cfg
    gt = scene.gt_boxes()
    if len(gt) == 0:
        raise UsageError(f"scene {scene.image_id!r} has no regions")
    image, scale = prepare_image(scene.image, bcfg.image_side)
    gt = gt * scale
    fm = model.features(image)
    anchors = model.anchors(fm)
    logits, offsets = model.rpn(fm)
    sample = sample_training_boxes(anchors, gt, bcfg.rpn_batch, rng, bcfg.rpn_pos_iou, bcfg.rpn_neg_iou)
    rpn_logits = T.getitem(logits, sample.indices)
    pos_anchor = sample.indices[sample.labels == 1]
    rpn_offsets = T.getitem(offsets, pos_anchor) if len(pos_anchor) else None

    # proposal coordinates carry no gradient (approximate joint training)
    props = propose(logits.data, offsets.data, anchors, fm.image_size, schedule.train_proposals, schedule.train_nms)
    boxes = np.vstack([props.boxes, gt])
    ious = G.iou_matrix(boxes, gt)
    best = ious.argmax(axis=1)
    best_iou = ious[np.arange(len(boxes)), best]
    pos = np.flatnonzero(best_iou >= bcfg.rpn_pos_iou)
    neg = np.flatnonzero(best_iou < bcfg.rpn_neg_iou)
    n_pos = min(len(pos), max(1, int(schedule.head_batch * schedule.head_pos_fraction)))
    pos = np.sort(rng.choice(pos, n_pos, replace=False))
    n_neg = min(len(neg), schedule.head_batch - n_pos)
    neg = np.sort(rng.choice(neg, n_neg, replace=False)) if n_neg else neg[:0]
    chosen = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(len(pos), np.int64), np.zeros(len(neg), np.int64)])

    region = model.encoder(fm, boxes[chosen])
    det_logits = model.head.detection_logits(region)
    head_out = None
    bbox_targets = np.zeros((0, 4))
    if len(pos):
        captions = []
        for p in pos:
            refs = scene.regions[best[p]].captions
            captions.append(_caption_ids(model, refs[int(rng.integers(len(refs)))]))
        region_pos = T.getitem(region, slice(0, len(pos)))
        head_out = model.head.forward_train(region_pos, model.context(fm), captions)
        bbox_targets = G.encode_offsets(gt[best[pos]], boxes[pos])
    return ImageOutputs(rpn_logits, sample.labels, rpn_offsets, sample.targets, det_logits, labels, head_out,
                        bbox_targets, len(pos))


@dataclass
class TrainResult:
    history: list[tuple[float, ...]]  # rows matching LOG_COLUMNS
    checkpoints: list[Path]
    iterations: int
    aborted: bool = False


def train(
    model: DenseCapModel,
    corpus: Sequence[Scene],
    schedule: TrainSchedule,
    loss_cfg: LossConfig = LossConfig(),
    seed: int = 0,
    out_dir: str | Path | None = None,
    config_text: str = "",
    log: TextIO | None = None,
    params: dict[str, Tensor] | None = None,
    progress: Callable[[int, LossBreakdown], None] | None = None,
) -> TrainResult:
    """Run ``schedule.iterations`` SGD steps, one image each.

    ``params`` restricts which parameters are updated (defaults to all).  When
    ``out_dir`` is given, ``initial.ckpt`` is written before the first step and
    ``last.ckpt`` every ``checkpoint_every`` steps and at the end.  A NaN/Inf
    anywhere aborts the run with :class:`NumericError` after keeping the last
    good checkpoint.
    """
    if not corpus:
        raise UsageError("training corpus is empty")
    rng = np.random.default_rng(seed)
    params = model.named_parameters() if params is None else params
    state = SgdState(schedule.base_lr, schedule.momentum)
    out = Path(out_dir) if out_dir is not None else None
    checkpoints: list[Path] = []

    def save(name: str, iteration: int) -> None:
        if out is None:
            return
        path = out / name
        save_checkpoint(path, model, config_text, iteration, state)
        if path not in checkpoints:
            checkpoints.append(path)

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    save("initial.ckpt", 0)
    if log is not None:
        log.write("# " + " ".join(LOG_COLUMNS) + "\n")
    history: list[tuple[float, ...]] = []
    order = rng.permutation(len(corpus))
    pos = 0
    for it in range(schedule.iterations):
        if pos == len(order):
            order, pos = rng.permutation(len(corpus)), 0
        scene = corpus[order[pos]]
        pos += 1
        state.learning_rate = schedule.lr(it)
        try:
            outputs = forward_image(model, scene, rng, schedule)
            losses = compute_loss(outputs, loss_cfg)
            if not math.isfinite(losses.total):
                raise NumericError(f"non-finite loss at iteration {it}")
            T.backward(losses.tensor)
            grads_ok = all(np.all(np.isfinite(p.grad)) for p in params.values())
            if not grads_ok:
                raise NumericError(f"non-finite gradient at iteration {it}")
        except NumericError:
            logger.error("numeric failure at iteration %d; last good checkpoint kept", it)
            raise
        T.clip_grad_norm(list(params.values()), schedule.clip_norm)
        T.sgd_step(params, state)
        # frozen parameters must not accumulate gradient across steps
        if len(params) != len(model.named_parameters()):
            T.zero_grad(model.parameters())
        row = (it, *losses.row(), state.learning_rate)
        history.append(row)
        if log is not None:
            log.write(" ".join(_fmt(v) for v in row) + "\n")
        if progress is not None:
            progress(it, losses)
        if schedule.checkpoint_every and (it + 1) % schedule.checkpoint_every == 0:
            save("last.ckpt", it + 1)
    if schedule.iterations:
        save("last.ckpt", schedule.iterations)
    return TrainResult(history, checkpoints, schedule.iterations)


def _fmt(v) -> str:
    return str(v) if isinstance(v, (int, np.integer)) else repr(float(v))


def finetune_with_context(base: DenseCapModel, fusion: str, op: str, seed: int = 0) -> DenseCapModel:
    """Build a context-fusion model that starts as an exact copy of ``base``.

    Shared parameters are copied; the fusion parameters start at the
    identity of their operator so predictions match ``base`` until the first
    update.
    """
    if base.head_cfg.uses_context:
        raise ConfigError("fine-tuning base must be a no-context model")
    cfg = replace(base.head_cfg, fusion=fusion, op=op)
    model = DenseCapModel(base.backbone_cfg, cfg, base.vocab, seed)
    base_params = base.named_parameters()
    fusion_names = {f"head.{n}" for n in model.head.fusion_parameter_names()}
    for name, p in model.named_parameters().items():
        if name in fusion_names:
            continue
        src = base_params.get(name)
        if src is None:
            raise ConfigError(f"base checkpoint lacks parameter {name}")
        if name == "head.word.weight" and src.shape != p.shape:
            # late concat: base weights on the caption half; the context half keeps its
            # fresh init (the context projection starts at zero, so outputs still match)
            p.data = p.data.copy()
            p.data[: src.shape[0]] = src.data
            continue
        if src.shape != p.shape:
            raise ConfigError(f"shape mismatch for {name}: {src.shape} vs {p.shape}")
        p.data = src.data.copy()
    return model
