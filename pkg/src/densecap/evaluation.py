"""Dense-captioning evaluation: Meteor-lite similarity, joint matching, the AP grid, sweeps."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import geometry as G
from . import tensor as T
from .backbone import prepare_image
from .dataset import RegionAnnotation, Scene, merge_ground_truth
from .errors import ConfigError, DataError, UsageError
from .model import DenseCapModel, Prediction, decode_results, finalize

IOU_THRESHOLDS = (0.3, 0.4, 0.5, 0.6, 0.7)
SIM_THRESHOLDS = (0.0, 0.05, 0.1, 0.15, 0.2, 0.25)
ALIGNMENT_CAP = 20000


# -- Meteor-lite ---------------------------------------------------------------------------

def _chunks(pairs: Sequence[tuple[int, int]]) -> int:
    pairs = sorted(pairs)
    ch = 1
    for (p0, r0), (p1, r1) in zip(pairs, pairs[1:]):
        if not (p1 == p0 + 1 and r1 == r0 + 1):
            ch += 1
    return ch


def _crossings(pairs: Sequence[tuple[int, int]]) -> int:
    return sum(1 for (p0, r0), (p1, r1) in itertools.combinations(pairs, 2) if (p0 - p1) * (r0 - r1) < 0)


def _type_options(pp: list[int], rp: list[int]) -> list[list[tuple[int, int]]]:
    if len(pp) <= len(rp):
        return [list(zip(pp, perm)) for perm in itertools.permutations(rp, len(pp))]
    return [list(zip(perm, rp)) for perm in itertools.permutations(pp, len(rp))]


def _monotone(pp: list[int], rp: list[int]) -> list[tuple[int, int]]:
    return list(zip(pp, rp))


def align(pred: Sequence[str], ref: Sequence[str]) -> list[tuple[int, int]]:
    """Exact-match unigram alignment of maximum size with the fewest crossings.

    Ties are broken by the fewest chunks, then lexicographically.  When the
    number of candidate alignments exceeds ``ALIGNMENT_CAP`` the occurrences of
    each token are paired in order instead (a crossing-free choice per token).
    """
    where_p: dict[str, list[int]] = {}
    where_r: dict[str, list[int]] = {}
    for i, w in enumerate(pred):
        where_p.setdefault(w, []).append(i)
    for j, w in enumerate(ref):
        where_r.setdefault(w, []).append(j)
    common = sorted(set(where_p) & set(where_r))
    if not common:
        return []
    total = 1
    for w in common:
        a, b = len(where_p[w]), len(where_r[w])
        total *= math.perm(max(a, b), min(a, b))
    if total > ALIGNMENT_CAP:
        return sorted(p for w in common for p in _monotone(where_p[w], where_r[w]))
    best, best_key = None, None
    for combo in itertools.product(*(_type_options(where_p[w], where_r[w]) for w in common)):
        pairs = sorted(p for part in combo for p in part)
        key = (_crossings(pairs), _chunks(pairs), pairs)
        if best_key is None or key < best_key:
            best, best_key = pairs, key
    return best


@lru_cache(maxsize=200_000)
def _meteor_cached(pred: tuple[str, ...], ref: tuple[str, ...]) -> float:
    pairs = align(pred, ref)
    m = len(pairs)
    if m == 0:
        return 0.0
    p, r = m / len(pred), m / len(ref)
    f = 10 * p * r / (r + 9 * p)
    penalty = 0.5 * (_chunks(pairs) / m) ** 3
    return f * (1 - penalty)


def meteor_lite(pred: Sequence[str], ref: Sequence[str]) -> float:
    """Exact-match Meteor: harmonic F (recall-weighted 9:1) times a fragmentation penalty."""
    if len(pred) == 0 or len(ref) == 0:
        raise UsageError("meteor_lite needs non-empty token sequences")
    return _meteor_cached(tuple(pred), tuple(ref))


def similarity(pred: Sequence[str], references: Iterable[Sequence[str]]) -> float:
    """Best Meteor-lite score over all references."""
    refs = list(references)
    if not refs:
        raise UsageError("similarity needs at least one reference")
    return max(meteor_lite(pred, r) for r in refs)


# -- matching and AP -----------------------------------------------------------------------

@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple[float, ...] = IOU_THRESHOLDS
    sim_thresholds: tuple[float, ...] = SIM_THRESHOLDS
    k: int = 300
    nms_r1: float = 0.7
    nms_r2: float = 0.3
    merge_iou: float = 0.7

    def __post_init__(self):
        for name in ("iou_thresholds", "sim_thresholds"):
            vals = tuple(float(v) for v in getattr(self, name))
            object.__setattr__(self, name, vals)
            if not vals or list(vals) != sorted(vals) or not all(0.0 <= v <= 1.0 for v in vals):
                raise ConfigError(f"{name} must be non-empty, ascending and within [0, 1]")
        if self.k < 1:
            raise ConfigError("proposal budget k must be at least 1")
        for name in ("nms_r1", "nms_r2", "merge_iou"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")


@dataclass
class ScoredImage:
    """Pairwise IoU and similarity between one image's predictions and its merged GT."""

    confidences: np.ndarray  # (n_pred,)
    ious: np.ndarray  # (n_pred, n_gt)
    sims: np.ndarray  # (n_pred, n_gt)

    @property
    def n_gt(self) -> int:
        return self.ious.shape[1]

    @property
    def n_pred(self) -> int:
        return len(self.confidences)


def score_image(predictions: Sequence[Prediction], gt: Sequence[RegionAnnotation]) -> ScoredImage:
    conf = np.array([p.confidence for p in predictions], dtype=np.float64)
    if len(predictions) == 0 or len(gt) == 0:
        empty = np.zeros((len(predictions), len(gt)))
        return ScoredImage(conf, empty, empty.copy())
    pb = np.stack([p.box.as_array() for p in predictions])
    gb = np.stack([g.box.as_array() for g in gt])
    sims = np.array([[similarity(p.caption, g.captions) for g in gt] for p in predictions])
    return ScoredImage(conf, G.iou_matrix(pb, gb), sims)


def _order(conf: np.ndarray) -> np.ndarray:
    return np.argsort(-conf, kind="stable")


def match_image(img: ScoredImage, iou_t: float, sim_t: float) -> np.ndarray:
    """Greedy matching in descending confidence; returns TP flags in prediction order."""
    tp = np.zeros(img.n_pred, dtype=bool)
    if img.n_gt == 0:
        return tp
    used = np.zeros(img.n_gt, dtype=bool)
    ok = (img.ious >= iou_t) & (img.sims >= sim_t)
    for i in _order(img.confidences):
        cand = np.flatnonzero(ok[i] & ~used)
        if len(cand) == 0:
            continue
        j = cand[np.argmax(img.ious[i, cand])]  # argmax returns the first (lowest index) on ties
        used[j] = True
        tp[i] = True
    return tp


def average_precision(tp_sorted: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP of a confidence-ranked TP/FP sequence."""
    if n_gt == 0 or len(tp_sorted) == 0:
        return 0.0
    tp = np.cumsum(tp_sorted)
    recall = tp / n_gt
    precision = tp / np.arange(1, len(tp_sorted) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


def pooled_ap(images: Sequence[ScoredImage], iou_t: float, sim_t: float) -> float:
    """AP with predictions from all images ranked together against all GT."""
    n_gt = sum(img.n_gt for img in images)
    flags = [match_image(img, iou_t, sim_t) for img in images]
    conf = np.concatenate([img.confidences for img in images]) if images else np.zeros(0)
    tp = np.concatenate(flags) if flags else np.zeros(0, dtype=bool)
    return average_precision(tp[_order(conf)], n_gt)


def match_and_ap(predictions: Sequence[Prediction], gt: Sequence[RegionAnnotation], iou_t: float,
                 sim_t: float) -> float:
    return pooled_ap([score_image(predictions, gt)], iou_t, sim_t)


def ap_grid(images: Sequence[ScoredImage], cfg: EvalConfig) -> np.ndarray:
    return np.array([[pooled_ap(images, it, st) for st in cfg.sim_thresholds] for it in cfg.iou_thresholds])


# -- reports -------------------------------------------------------------------------------

@dataclass
class ImageDiagnostics:
    image_id: str
    n_proposals: int
    n_predictions: int
    n_gt: int
    dropped_degenerate: int = 0
    dropped_empty: int = 0


@dataclass
class EvalReport:
    ap_grid: np.ndarray
    iou_thresholds: tuple[float, ...]
    sim_thresholds: tuple[float, ...]
    per_image: list[ImageDiagnostics] = field(default_factory=list)

    @property
    def map(self) -> float:
        return float(np.mean(self.ap_grid))

    @property
    def counts(self) -> dict[str, int]:
        return {
            "images": len(self.per_image),
            "predictions": sum(d.n_predictions for d in self.per_image),
            "gt_regions": sum(d.n_gt for d in self.per_image),
            "dropped_degenerate": sum(d.dropped_degenerate for d in self.per_image),
            "dropped_empty": sum(d.dropped_empty for d in self.per_image),
        }

    def format_table(self) -> str:
        head = "iou\\sim " + " ".join(f"{s:>7.2f}" for s in self.sim_thresholds)
        rows = [head]
        for it, row in zip(self.iou_thresholds, self.ap_grid):
            rows.append(f"{it:>7.2f} " + " ".join(f"{v:>7.4f}" for v in row))
        rows.append(f"mAP {self.map:.6f}")
        return "\n".join(rows)

    def machine_lines(self) -> list[str]:
        lines = [f"ap\tiou={it!r}\tsim={st!r}\t{v!r}" for it, row in zip(self.iou_thresholds, self.ap_grid)
                 for st, v in zip(self.sim_thresholds, row)]
        lines.append(f"map\t{self.map!r}")
        lines += [f"count\t{k}\t{v}" for k, v in self.counts.items()]
        return lines


def report_from_scored(images: Sequence[ScoredImage], cfg: EvalConfig,
                       diagnostics: list[ImageDiagnostics] | None = None) -> EvalReport:
    return EvalReport(ap_grid(images, cfg), cfg.iou_thresholds, cfg.sim_thresholds, diagnostics or [])


# -- model inference over a corpus ---------------------------------------------------------

@dataclass
class _ImageCache:
    fm: object
    scale: float
    gt: list[RegionAnnotation]
    decodes: dict = field(default_factory=dict)  # (k, r1) -> (proposals, decode results)


def _prepare(model: DenseCapModel, scene: Scene, merge_iou: float) -> _ImageCache:
    image, scale = prepare_image(scene.image, model.backbone_cfg.image_side)
    with T.no_grad():
        fm = model.features(image)
    return _ImageCache(fm, scale, merge_ground_truth(scene.regions, merge_iou))


def _decodes(model: DenseCapModel, cache: _ImageCache, k: int, nms_r1: float):
    key = (k, nms_r1)
    if key not in cache.decodes:
        props = model.proposals(cache.fm, k, nms_r1)
        if len(props) == 0:
            cache.decodes[key] = (props.boxes, [])
        else:
            conf, batch = model.decode_boxes(cache.fm, props.boxes)
            cache.decodes[key] = (props.boxes, decode_results(model, props.boxes, conf, batch, cache.fm.image_size))
    return cache.decodes[key]


def rescale_prediction(pred: Prediction, scale: float) -> Prediction:
    if scale == 1.0:
        return pred
    return Prediction(G.BBox.from_array(pred.box.as_array() / scale), pred.confidence, pred.caption, pred.image_id)


def _predict_cached(model, cache: _ImageCache, scene: Scene, k: int, r1: float, r2: float):
    props, decodes = _decodes(model, cache, k, r1)
    inf = finalize(decodes, props, r2, scene.image_id)
    preds = [rescale_prediction(p, cache.scale) for p in inf.predictions]
    diag = ImageDiagnostics(scene.image_id, len(props), len(preds), len(cache.gt), inf.dropped_degenerate,
                            inf.dropped_empty)
    return preds, diag


def predict_corpus(model: DenseCapModel, corpus: Sequence[Scene], cfg: EvalConfig = EvalConfig()):
    """Predictions and diagnostics for every scene, in corpus order."""
    out = []
    for scene in corpus:
        cache = _prepare(model, scene, cfg.merge_iou)
        out.append(_predict_cached(model, cache, scene, cfg.k, cfg.nms_r1, cfg.nms_r2))
    return out


def evaluate(model: DenseCapModel, corpus: Sequence[Scene], cfg: EvalConfig = EvalConfig()) -> EvalReport:
    if not corpus:
        raise UsageError("evaluation corpus is empty")
    scored, diags = [], []
    for scene in corpus:
        cache = _prepare(model, scene, cfg.merge_iou)
        preds, diag = _predict_cached(model, cache, scene, cfg.k, cfg.nms_r1, cfg.nms_r2)
        scored.append(score_image(preds, cache.gt))
        diags.append(diag)
    return report_from_scored(scored, cfg, diags)


def teacher_forced_accuracy(model: DenseCapModel, corpus: Sequence[Scene]) -> float:
    """Next-word accuracy on GT boxes with GT previous words (first caption, EOS included)."""
    correct = total = 0
    for scene in corpus:
        if not scene.regions:
            continue
        image, scale = prepare_image(scene.image, model.backbone_cfg.image_side)
        with T.no_grad():
            fm = model.features(image)
            region = model.encoder(fm, scene.gt_boxes() * scale)
            caps = [model.vocab.encode(r.captions[0]) for r in scene.regions]
            out = model.head.forward_train(region, model.context(fm), caps)
        valid = out.word_mask > 0
        pred = out.word_logits.data.argmax(axis=1)
        correct += int(np.sum(pred[valid] == out.word_targets[valid]))
        total += int(valid.sum())
    return correct / total if total else 0.0


def region_caption_accuracy(model: DenseCapModel, corpus: Sequence[Scene],
                            ambiguous_only: bool = False) -> tuple[float, int]:
    """Fraction of GT boxes whose greedy caption equals one of their references exactly."""
    hits = n = 0
    for scene in corpus:
        regions = [r for r in scene.regions if r.ambiguous or not ambiguous_only]
        if not regions:
            continue
        image, scale = prepare_image(scene.image, model.backbone_cfg.image_side)
        with T.no_grad():
            fm = model.features(image)
        boxes = np.array([r.box.as_array() for r in regions]) * scale
        _, batch = model.decode_boxes(fm, boxes)
        for r, tokens in zip(regions, batch.tokens):
            hits += [model.vocab.itos[t] for t in tokens] in [list(c) for c in r.captions]
            n += 1
    return (hits / n if n else 0.0), n


def evaluate_predictions(predictions: Sequence[Prediction], corpus: Sequence[Scene],
                         cfg: EvalConfig = EvalConfig()) -> EvalReport:
    """Score externally produced predictions (matched to scenes by image id)."""
    if not corpus:
        raise UsageError("evaluation corpus is empty")
    by_image: dict[str, list[Prediction]] = {}
    for p in predictions:
        by_image.setdefault(p.image_id, []).append(p)
    known = {s.image_id for s in corpus}
    unknown = sorted(set(by_image) - known)
    if unknown:
        raise DataError(f"predictions reference unknown image ids: {unknown[:5]}")
    scored, diags = [], []
    for scene in corpus:
        preds = by_image.get(scene.image_id, [])
        gt = merge_ground_truth(scene.regions, cfg.merge_iou)
        scored.append(score_image(preds, gt))
        diags.append(ImageDiagnostics(scene.image_id, 0, len(preds), len(gt)))
    return report_from_scored(scored, cfg, diags)


# -- hyper-parameter sweep -----------------------------------------------------------------

def frange(lo: float, hi: float, step: float) -> tuple[float, ...]:
    if step <= 0:
        raise ConfigError("sweep step must be positive")
    n = int(math.floor((hi - lo) / step + 1e-9))
    return tuple(round(lo + i * step, 10) for i in range(n + 1))


@dataclass(frozen=True)
class SweepRow:
    k: int
    nms_r1: float
    nms_r2: float
    map: float


@dataclass
class SweepResult:
    rows: list[SweepRow]
    best: SweepRow

    def format_table(self) -> str:
        lines = [f"{'k':>5} {'nms_r1':>7} {'nms_r2':>7} {'mAP':>9}"]
        for r in self.rows:
            mark = "  *" if r == self.best else ""
            lines.append(f"{r.k:>5} {r.nms_r1:>7.2f} {r.nms_r2:>7.2f} {r.map:>9.6f}{mark}")
        return "\n".join(lines)

    def machine_lines(self) -> list[str]:
        lines = [f"sweep\tk={r.k}\tnms_r1={r.nms_r1!r}\tnms_r2={r.nms_r2!r}\t{r.map!r}" for r in self.rows]
        b = self.best
        lines.append(f"best\tk={b.k}\tnms_r1={b.nms_r1!r}\tnms_r2={b.nms_r2!r}\t{b.map!r}")
        return lines


def best_row(rows: Sequence[SweepRow]) -> SweepRow:
    """Highest mAP; ties prefer smaller k, then larger nms_r2, then smaller nms_r1."""
    return min(rows, key=lambda r: (-r.map, r.k, -r.nms_r2, r.nms_r1))


def sweep(model: DenseCapModel, corpus: Sequence[Scene], ks: Sequence[int] = (100, 300),
          r1s: Sequence[float] | None = None, r2s: Sequence[float] | None = None, step: float = 0.1,
          cfg: EvalConfig = EvalConfig()) -> SweepResult:
    if not corpus:
        raise UsageError("sweep corpus is empty")
    r1s = frange(0.4, 0.9, step) if r1s is None else tuple(r1s)
    r2s = frange(0.3, 0.8, step) if r2s is None else tuple(r2s)
    if not ks or not r1s or not r2s:
        raise ConfigError("sweep grid must be non-empty in every axis")
    caches = [_prepare(model, s, cfg.merge_iou) for s in corpus]
    rows = []
    for k in ks:
        for r1 in r1s:
            for r2 in r2s:
                scored = []
                for scene, cache in zip(corpus, caches):
                    preds, _ = _predict_cached(model, cache, scene, k, r1, r2)
                    scored.append(score_image(preds, cache.gt))
                rows.append(SweepRow(int(k), float(r1), float(r2), float(np.mean(ap_grid(scored, cfg)))))
            for cache in caches:
                cache.decodes.pop((k, r1), None)
    return SweepResult(rows, best_row(rows))


# -- predictions file ----------------------------------------------------------------------

def format_prediction(p: Prediction) -> str:
    x1, y1, x2, y2 = p.box.as_array()
    return "\t".join([p.image_id, repr(float(x1)), repr(float(y1)), repr(float(x2)), repr(float(y2)),
                      repr(float(p.confidence)), " ".join(p.caption)])


def write_predictions(path: str | Path, predictions: Iterable[Prediction]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# image_id\tx1\ty1\tx2\ty2\tconfidence\tcaption\n")
        for p in predictions:
            fh.write(format_prediction(p) + "\n")


def read_predictions(path: str | Path) -> list[Prediction]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 7:
                raise DataError(f"{path}:{lineno}: expected 7 tab-separated fields, got {len(parts)}")
            try:
                coords = [float(v) for v in parts[1:6]]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            caption = parts[6].split()
            if not caption or not math.isfinite(coords[4]):
                raise DataError(f"{path}:{lineno}: empty caption or non-finite confidence")
            out.append(Prediction(G.BBox(*coords[:4]), coords[4], caption, parts[0]))
    return out
