"""Scenes, vocabularies, the synthetic generator and the Visual Genome reader.

Synthetic scenes are colored shapes on a neutral background with a
theme-colored band along the top edge.  Region captions come from a small
grammar::

    object  -> COLOR SHAPE                      "red circle"
    part    -> SIDE of COLOR SHAPE              "top of blue square"
    pair    -> COLOR SHAPE REL COLOR SHAPE      "red circle left of green triangle"
    ambig   -> GRAY|WHITE NOUN(theme)           "gray mouse" / "gray stone"

Ambiguous objects are placed far enough below the band that nothing within
the backbone's receptive field of their box depends on the theme, so only
the global context can tell "mouse" from "stone".

On disk a corpus split is a directory holding ``scenes.jsonl`` plus one binary
PPM (P6) per scene.  Each JSON line has the keys ``image`` (file name),
``image_id``, ``theme``, ``width``, ``height`` and ``regions``; every region
carries ``x1, y1, x2, y2`` (float pixels), ``captions`` (list of
space-joined token strings), ``kind`` and ``ambiguous``.
"""

from __future__ import annotations

import json
import logging
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, GenerationError, UsageError
from .geometry import BBox, connected_components, iou_matrix

logger = logging.getLogger(__name__)

PAD, UNK, SOS, EOS = "<PAD>", "<UNK>", "<SOS>", "<EOS>"
SPECIALS = (PAD, UNK, SOS, EOS)
PAD_ID, UNK_ID, SOS_ID, EOS_ID = range(4)

COLORS = {
    "red": (0.90, 0.12, 0.12),
    "green": (0.15, 0.75, 0.20),
    "blue": (0.15, 0.25, 0.90),
    "yellow": (0.95, 0.85, 0.10),
}
SHAPES = ("circle", "square", "triangle")
SIDES = ("top", "bottom")
RELATIONS = {"left": ("left", "of"), "right": ("right", "of"), "above": ("above",), "below": ("below",)}
THEMES = {"kitchen": (0.92, 0.55, 0.18), "garden": (0.45, 0.75, 0.95)}
# ambiguous kinds: (color word, rgb, shape) -> noun per theme
AMBIGUOUS = {
    ("gray", "circle"): {"kitchen": "mouse", "garden": "stone"},
    ("white", "square"): {"kitchen": "plate", "garden": "cloud"},
}
AMBIGUOUS_RGB = {"gray": (0.55, 0.55, 0.55), "white": (0.97, 0.97, 0.97)}
BACKGROUND = (0.22, 0.22, 0.26)


def grammar_terminals() -> set[str]:
    words = set(COLORS) | set(SHAPES) | set(SIDES) | {"of"}
    for toks in RELATIONS.values():
        words.update(toks)
    for (color, _), nouns in AMBIGUOUS.items():
        words.add(color)
        words.update(nouns.values())
    return words


# -- core records -------------------------------------------------------------------

@dataclass
class RegionAnnotation:
    box: BBox
    captions: list[list[str]]
    kind: str = "object"
    ambiguous: bool = False

    def __post_init__(self):
        if not self.captions or any(len(c) == 0 for c in self.captions):
            raise DataError("region needs at least one non-empty caption")


@dataclass
class Scene:
    image: np.ndarray  # 3×H×W in [0, 1]
    regions: list[RegionAnnotation]
    theme: str | None = None
    image_id: str = ""

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]

    def gt_boxes(self) -> np.ndarray:
        if not self.regions:
            return np.zeros((0, 4))
        return np.stack([r.box.as_array() for r in self.regions])


# -- tokenization and vocabulary --------------------------------------------------------

_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")


def tokenize(text: str) -> list[str]:
    """Lowercase, strip ASCII punctuation, split on whitespace."""
    return _PUNCT.sub("", text.lower()).split()


class Vocabulary:
    """Token/id bijection with ids 0..3 reserved for PAD, UNK, SOS, EOS."""

    def __init__(self, tokens: Sequence[str]):
        self.itos: list[str] = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ConfigError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def words(self) -> list[str]:
        return self.itos[len(SPECIALS):]

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos


def build_vocab(scenes: Iterable[Scene], cap: int = 10000) -> Vocabulary:
    """Keep the ``cap`` most frequent tokens; ties go to the lexicographically smaller."""
    if cap < 1:
        raise ConfigError("vocabulary cap must be at least 1")
    counts: Counter[str] = Counter()
    for scene in scenes:
        for region in scene.regions:
            for caption in region.captions:
                counts.update(caption)
    if not counts:
        raise UsageError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary([t for t, _ in ranked[:cap]])


# -- PPM -------------------------------------------------------------------------------

def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Write a 3×H×W float image in [0, 1] as binary P6."""
    _, h, w = image.shape
    raster = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(raster.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PPM header")
        fields.append(data[start:pos])
    pos += 1
    if fields[0] != b"P6":
        raise DataError(f"{path}: not a binary PPM (P6)")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PPM supported")
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def quantize(image: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid a PPM roundtrip would produce."""
    return np.clip(np.rint(image * 255.0), 0, 255) / 255.0


# -- synthetic generator ---------------------------------------------------------------

@dataclass(frozen=True)
class GeneratorConfig:
    image_size: int = 128
    object_count: tuple[int, int] = (2, 5)
    object_size: tuple[int, int] = (16, 40)
    overlap_pressure: float = 0.6
    part_prob: float = 0.6
    pair_prob: float = 0.5
    max_pairs: int = 2
    ambiguity: float = 0.0
    max_object_iou: float = 0.35
    max_caption_len: int = 10
    max_retries: int = 200
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.object_count
        if lo < 1 or hi < lo:
            raise ConfigError(f"bad object_count range {self.object_count}")
        smin, smax = self.object_size
        if smin < 4 or smax < smin:
            raise ConfigError(f"bad object_size range {self.object_size}")
        for name in ("overlap_pressure", "part_prob", "pair_prob", "ambiguity"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.image_size < 32 or self.image_size % 16:
            raise ConfigError("image_size must be a multiple of 16 and at least 32")

    @property
    def band_height(self) -> int:
        return self.image_size // 8

    @property
    def ambiguous_top(self) -> int:
        # ambiguous boxes start this far down; keeps the band outside their receptive field
        return self.band_height + max(24, (5 * self.image_size) // 16)


@dataclass
class PlacedObject:
    color: str
    shape: str
    box: tuple[int, int, int, int]
    ambiguous: bool = False


@dataclass
class Layout:
    """Theme-independent part of a scene: object placement and region specs."""

    size: int
    band_height: int
    objects: list[PlacedObject]
    parts: list[tuple[int, str]] = field(default_factory=list)
    pairs: list[tuple[int, int, str]] = field(default_factory=list)


def _box_iou(a, b) -> float:
    return float(iou_matrix(np.asarray(a, float), np.asarray(b, float))[0, 0])


def sample_layout(cfg: GeneratorConfig, rng: np.random.Generator) -> Layout:
    S = cfg.image_size
    lo, hi = cfg.object_count
    n = int(rng.integers(lo, hi + 1))
    objects: list[PlacedObject] = []
    smin, smax = cfg.object_size
    for _ in range(n):
        ambiguous = rng.random() < cfg.ambiguity
        if ambiguous:
            keys = sorted(AMBIGUOUS)
            color, shape = keys[int(rng.integers(len(keys)))]
        else:
            color = sorted(COLORS)[int(rng.integers(len(COLORS)))]
            shape = SHAPES[int(rng.integers(len(SHAPES)))]
        top = cfg.ambiguous_top if ambiguous else cfg.band_height
        for _attempt in range(cfg.max_retries):
            s = int(rng.integers(smin, smax + 1))
            if top + s > S:
                continue
            plain = [o for o in objects if not o.ambiguous]
            if plain and not ambiguous and rng.random() < cfg.overlap_pressure:
                ref = plain[int(rng.integers(len(plain)))].box
                rcx, rcy = (ref[0] + ref[2]) / 2, (ref[1] + ref[3]) / 2
                spread = 0.6 * (ref[2] - ref[0] + s) / 2
                cx = rcx + rng.uniform(-spread, spread)
                cy = rcy + rng.uniform(-spread, spread)
                x1, y1 = int(round(cx - s / 2)), int(round(cy - s / 2))
            else:
                x1 = int(rng.integers(0, S - s + 1))
                y1 = int(rng.integers(top, S - s + 1))
            box = (x1, y1, x1 + s, y1 + s)
            if x1 < 0 or y1 < top or box[2] > S or box[3] > S:
                continue
            limit = 0.0 if ambiguous else cfg.max_object_iou
            clash = False
            for o in objects:
                ov = _box_iou(box, o.box)
                if (o.ambiguous or ambiguous) and ov > 0:
                    clash = True
                elif ov > limit:
                    clash = True
                if clash:
                    break
            if not clash:
                objects.append(PlacedObject(color, shape, box, ambiguous))
                break
        else:
            raise GenerationError(f"could not place object {len(objects) + 1}/{n} after {cfg.max_retries} retries")

    layout = Layout(S, cfg.band_height, objects)
    plain_idx = [i for i, o in enumerate(objects) if not o.ambiguous]
    if len(objects) >= 2:
        for i in plain_idx:
            if rng.random() < cfg.part_prob:
                layout.parts.append((i, SIDES[int(rng.integers(len(SIDES)))]))
    candidates = []
    for a in range(len(plain_idx)):
        for b in range(a + 1, len(plain_idx)):
            i, j = plain_idx[a], plain_idx[b]
            oi, oj = objects[i].box, objects[j].box
            gap_x = max(oi[0], oj[0]) - min(oi[2], oj[2])
            gap_y = max(oi[1], oj[1]) - min(oi[3], oj[3])
            if max(gap_x, gap_y) <= 8:
                candidates.append((i, j))
    for i, j in candidates:
        if len(layout.pairs) >= cfg.max_pairs:
            break
        if rng.random() < cfg.pair_prob:
            layout.pairs.append((i, j, _relation(objects[i].box, objects[j].box)))
    return layout


def _relation(a, b) -> str:
    dx = (a[0] + a[2]) / 2 - (b[0] + b[2]) / 2
    dy = (a[1] + a[3]) / 2 - (b[1] + b[3]) / 2
    if abs(dx) >= abs(dy):
        return "left" if dx < 0 else "right"
    return "above" if dy < 0 else "below"


def _shape_mask(shape: str, s: int) -> np.ndarray:
    c = (np.arange(s) + 0.5) / s  # pixel centers in unit box
    yy, xx = np.meshgrid(c, c, indexing="ij")
    if shape == "square":
        return np.ones((s, s), dtype=bool)
    if shape == "circle":
        return (xx - 0.5) ** 2 + (yy - 0.5) ** 2 <= 0.25
    if shape == "triangle":
        return np.abs(xx - 0.5) <= 0.5 * yy
    raise ConfigError(f"unknown shape {shape}")


def render_layout(layout: Layout, theme: str, image_id: str = "") -> Scene:
    """Rasterise ``layout`` under ``theme`` and attach its region captions."""
    S = layout.size
    img = np.empty((3, S, S))
    img[:] = np.asarray(BACKGROUND)[:, None, None]
    img[:, : layout.band_height, :] = np.asarray(THEMES[theme])[:, None, None]
    for o in sorted(layout.objects, key=lambda o: o.ambiguous):
        x1, y1, x2, y2 = o.box
        mask = _shape_mask(o.shape, x2 - x1)
        rgb = AMBIGUOUS_RGB[o.color] if o.ambiguous else COLORS[o.color]
        patch = img[:, y1:y2, x1:x2]
        for ch in range(3):
            patch[ch][mask] = rgb[ch]
    img = quantize(img)

    regions: list[RegionAnnotation] = []
    for o in layout.objects:
        if o.ambiguous:
            words = [o.color, AMBIGUOUS[(o.color, o.shape)][theme]]
        else:
            words = [o.color, o.shape]
        regions.append(RegionAnnotation(BBox(*map(float, o.box)), [words], "object", o.ambiguous))
    for i, side in layout.parts:
        o = layout.objects[i]
        x1, y1, x2, y2 = o.box
        mid = (y1 + y2) / 2
        box = BBox(x1, y1, x2, mid) if side == "top" else BBox(x1, mid, x2, y2)
        regions.append(RegionAnnotation(box, [[side, "of", o.color, o.shape]], "part"))
    for i, j, rel in layout.pairs:
        a, b = layout.objects[i], layout.objects[j]
        box = BBox(
            min(a.box[0], b.box[0]), min(a.box[1], b.box[1]), max(a.box[2], b.box[2]), max(a.box[3], b.box[3])
        )
        words = [a.color, a.shape, *RELATIONS[rel], b.color, b.shape]
        regions.append(RegionAnnotation(box, [words], "pair"))
    return Scene(img, regions, theme, image_id)


def generate_scene(cfg: GeneratorConfig, rng: np.random.Generator, image_id: str = "") -> Scene:
    layout = sample_layout(cfg, rng)
    themes = sorted(THEMES)
    theme = themes[int(rng.integers(len(themes)))]
    return render_layout(layout, theme, image_id)


def generate_corpus(cfg: GeneratorConfig, n: int, seed: int | None = None, prefix: str = "") -> list[Scene]:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    return [generate_scene(cfg, rng, f"{prefix}{i:06d}") for i in range(n)]


# -- ground-truth merge and statistics ----------------------------------------------------

def merge_ground_truth(regions: Sequence[RegionAnnotation], merge_iou: float = 0.7) -> list[RegionAnnotation]:
    """Collapse connected components of ``IoU > merge_iou`` into single regions.

    The merged box is the coordinate-wise mean of all member boxes; captions are
    the union of member captions.  Merging repeats until no pair of output
    boxes exceeds the threshold.
    """
    if not 0.0 < merge_iou <= 1.0:
        raise ConfigError(f"merge_iou must lie in (0, 1], got {merge_iou}")
    groups = [[i] for i in range(len(regions))]
    boxes = np.array([r.box.as_array() for r in regions]).reshape(-1, 4)
    while True:
        means = np.array([boxes[g].mean(axis=0) for g in groups]).reshape(-1, 4)
        comps = connected_components(means, merge_iou)
        if len(comps) == len(groups):
            break
        groups = [sorted(i for c in comp for i in groups[c]) for comp in comps]
    merged = []
    for g, box in zip(groups, means):
        captions: list[list[str]] = []
        for i in g:
            for c in regions[i].captions:
                if c not in captions:
                    captions.append(list(c))
        kind = regions[g[0]].kind if len(g) == 1 else "merged"
        merged.append(RegionAnnotation(BBox.from_array(box), captions, kind, any(regions[i].ambiguous for i in g)))
    return merged


def max_ious(regions: Sequence[RegionAnnotation]) -> np.ndarray:
    if len(regions) < 2:
        return np.zeros(len(regions))
    boxes = np.stack([r.box.as_array() for r in regions])
    m = iou_matrix(boxes, boxes)
    np.fill_diagonal(m, 0.0)
    return m.max(axis=1)


@dataclass
class IouHistogram:
    counts: np.ndarray  # 10 bins of width 0.1 over [0, 1]
    n_regions: int

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, 11)

    def fraction_above(self, threshold: float) -> float:
        k = int(round(threshold * 10))
        return float(self.counts[k:].sum() / max(self.n_regions, 1))


def max_iou_values(scenes: Sequence[Scene], merge_iou: float = 0.7) -> np.ndarray:
    vals = [max_ious(merge_ground_truth(s.regions, merge_iou)) for s in scenes]
    return np.concatenate(vals) if vals else np.zeros(0)


def max_iou_stats(scenes: Sequence[Scene], merge_iou: float = 0.7) -> IouHistogram:
    """Histogram of each region's max IoU against the other merged regions of its image."""
    if not scenes:
        raise UsageError("max_iou_stats needs at least one scene")
    vals = max_iou_values(scenes, merge_iou)
    # bin k holds (k/10, (k+1)/10]; exact zeros go to bin 0
    bins = np.clip(np.ceil(vals * 10 - 1e-12).astype(int) - 1, 0, 9)
    return IouHistogram(np.bincount(bins, minlength=10), len(vals))


# -- corpus on disk ------------------------------------------------------------------------

def scene_record(scene: Scene, image_name: str) -> dict:
    return {
        "image": image_name,
        "image_id": scene.image_id,
        "theme": scene.theme,
        "width": scene.width,
        "height": scene.height,
        "regions": [
            {
                "x1": r.box.x1,
                "y1": r.box.y1,
                "x2": r.box.x2,
                "y2": r.box.y2,
                "captions": [" ".join(c) for c in r.captions],
                "kind": r.kind,
                "ambiguous": r.ambiguous,
            }
            for r in scene.regions
        ],
    }


def save_split(scenes: Sequence[Scene], directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "scenes.jsonl", "w", encoding="utf-8") as fh:
        for i, scene in enumerate(scenes):
            name = f"{scene.image_id or f'{i:06d}'}.ppm"
            write_ppm(directory / name, scene.image)
            fh.write(json.dumps(scene_record(scene, name), sort_keys=True) + "\n")


def load_split(directory: str | Path) -> list[Scene]:
    directory = Path(directory)
    index = directory / "scenes.jsonl"
    if not index.exists():
        raise DataError(f"{index} not found")
    scenes = []
    with open(index, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                image = read_ppm(directory / rec["image"])
                regions = [
                    RegionAnnotation(
                        BBox(r["x1"], r["y1"], r["x2"], r["y2"]),
                        [c.split() for c in r["captions"]],
                        r.get("kind", "object"),
                        bool(r.get("ambiguous", False)),
                    )
                    for r in rec["regions"]
                ]
            except (KeyError, ValueError, TypeError, OSError) as exc:
                raise DataError(f"{index}:{lineno}: {exc}") from exc
            scenes.append(Scene(image, regions, rec.get("theme"), rec.get("image_id", "")))
    return scenes


# -- Visual Genome region descriptions ---------------------------------------------------------

@dataclass
class VgLoadStats:
    scenes: int = 0
    regions: int = 0
    malformed: int = 0
    degenerate: int = 0
    too_long: int = 0
    missing_images: int = 0


def load_vg_regions_with_stats(
    regions_path: str | Path, images_dir: str | Path, max_caption_len: int = 10
) -> tuple[list[Scene], VgLoadStats]:
    """Read a region-descriptions JSON file plus ``<image_id>.ppm`` rasters.

    The file is a list of ``{"id"|"image_id": ..., "regions": [{x, y, width,
    height, phrase}, ...]}``.  Bad records are skipped and tallied.
    """
    stats = VgLoadStats()
    images_dir = Path(images_dir)
    try:
        entries = json.loads(Path(regions_path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {regions_path}: {exc}") from exc
    scenes = []
    for entry in entries:
        image_id = entry.get("image_id", entry.get("id")) if isinstance(entry, dict) else None
        if image_id is None or not isinstance(entry.get("regions"), list):
            stats.malformed += 1
            logger.warning("skipping malformed image record %r", entry)
            continue
        path = images_dir / f"{image_id}.ppm"
        if not path.exists():
            stats.missing_images += 1
            logger.warning("image %s missing; scene skipped", path)
            continue
        image = read_ppm(path)
        H, W = image.shape[1:]
        regions = []
        for rec in entry["regions"]:
            try:
                x, y = float(rec["x"]), float(rec["y"])
                w, h = float(rec["width"]), float(rec["height"])
                phrase = str(rec["phrase"])
            except (KeyError, TypeError, ValueError):
                stats.malformed += 1
                logger.warning("skipping malformed region %r in image %s", rec, image_id)
                continue
            tokens = tokenize(phrase)
            if not tokens or len(tokens) > max_caption_len:
                stats.too_long += 1
                continue
            x1, y1 = min(max(x, 0.0), W), min(max(y, 0.0), H)
            x2, y2 = min(max(x + w, 0.0), W), min(max(y + h, 0.0), H)
            if not (x2 > x1 and y2 > y1):
                stats.degenerate += 1
                continue
            regions.append(RegionAnnotation(BBox(x1, y1, x2, y2), [tokens]))
        stats.scenes += 1
        stats.regions += len(regions)
        scenes.append(Scene(image, regions, None, str(image_id)))
    if stats.degenerate:
        logger.info("dropped %d degenerate regions", stats.degenerate)
    return scenes, stats


def load_vg_regions(regions_path: str | Path, images_dir: str | Path, max_caption_len: int = 10) -> list[Scene]:
    return load_vg_regions_with_stats(regions_path, images_dir, max_caption_len)[0]
