"""Run configuration: one dataclass per component, serialized as ``section.key = value`` lines.

Every key has a default; unknown keys and unparsable values are hard errors.
Tuples are written comma-separated, booleans as ``true``/``false``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .backbone import BackboneConfig
from .checkpoint import CheckpointData, load_parameters, read_checkpoint
from .dataset import GeneratorConfig, Vocabulary
from .errors import ConfigError, DenseCapError
from .evaluation import EvalConfig
from .geometry import AnchorSpec
from .heads import ModelConfig
from .model import DenseCapModel
from .training import LossConfig, TrainSchedule


@dataclass(frozen=True)
class DataConfig:
    train_scenes: int = 200
    val_scenes: int = 50
    test_scenes: int = 50
    vocab_cap: int = 10000

    def __post_init__(self):
        if min(self.train_scenes, self.val_scenes, self.test_scenes) < 0 or self.vocab_cap < 5:
            raise ConfigError("scene counts must be non-negative and vocab_cap at least 5")


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    log_every: int = 100


@dataclass(frozen=True)
class RunConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSchedule = field(default_factory=TrainSchedule)
    loss: LossConfig = field(default_factory=LossConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: DataConfig = field(default_factory=DataConfig)
    run: RunSection = field(default_factory=RunSection)

    @classmethod
    def desk(cls) -> "RunConfig":
        """Small dimensions that train in minutes on one CPU core.

        A from-scratch backbone needs the detection and box terms weighted up
        and a later learning-rate halving to localize within 5k iterations.
        """
        return cls(
            backbone=BackboneConfig(channels=16, pool_size=3, feature_dim=64),
            model=ModelConfig(hidden_dim=64, embed_dim=64),
            train=TrainSchedule(halving_interval=4000),
            loss=LossConfig(alpha=1.0, beta=1.0),
        )

    @classmethod
    def paper(cls) -> "RunConfig":
        """Full-size input and the long schedule (not trainable on a desk machine)."""
        return cls(
            backbone=BackboneConfig(image_side=720),
            generator=GeneratorConfig(image_size=720, object_size=(90, 225)),
            train=TrainSchedule(iterations=600_000, halving_interval=100_000, checkpoint_every=10_000),
        )

    def with_values(self, **sections: dict[str, Any]) -> "RunConfig":
        out = self
        for name, values in sections.items():
            out = replace(out, **{name: replace(getattr(out, name), **values)})
        return out


PRESETS = {"default": RunConfig, "desk": RunConfig.desk, "paper": RunConfig.paper}

# flattened keys for nested values
_ANCHOR_KEYS = {"anchor_scales": "scales", "anchor_ratios": "aspect_ratios"}


def _section_items(name: str, obj) -> list[tuple[str, Any]]:
    items = []
    for f in fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, AnchorSpec):
            items += [(key, getattr(value, attr)) for key, attr in _ANCHOR_KEYS.items()]
        else:
            items.append((f.name, value))
    return items


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_scalar(text: str, like, where: str):
    try:
        if isinstance(like, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError(f"expected true/false, got {text!r}")
            return text.lower() == "true"
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _parse(text: str, like, where: str):
    if isinstance(like, tuple):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        proto = like[0] if like else 0.0
        return tuple(_parse_scalar(p, proto, where) for p in parts)
    return _parse_scalar(text, like, where)


def to_text(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        section = getattr(cfg, f.name)
        for key, value in _section_items(f.name, section):
            lines.append(f"{f.name}.{key} = {_format(value)}")
    return "\n".join(lines) + "\n"


def apply_assignments(cfg: RunConfig, assignments: list[tuple[str, str, str]]) -> RunConfig:
    """Apply ``(where, dotted key, raw value)`` triples on top of ``cfg``."""
    staged: dict[str, dict[str, Any]] = {}
    for where, key, raw in assignments:
        if "." not in key:
            raise ConfigError(f"{where}: key {key!r} must look like section.name")
        section, name = key.split(".", 1)
        if section not in {f.name for f in fields(cfg)}:
            raise ConfigError(f"{where}: unknown section {section!r}")
        current = dict(_section_items(section, getattr(cfg, section)))
        if name not in current:
            raise ConfigError(f"{where}: unknown key {key!r}")
        staged.setdefault(section, {})[name] = _parse(raw, current[name], where)
    for section, values in staged.items():
        obj = getattr(cfg, section)
        anchors = {_ANCHOR_KEYS[k]: values.pop(k) for k in list(values) if k in _ANCHOR_KEYS}
        if anchors:
            values["anchors"] = replace(obj.anchors, **anchors)
        try:
            cfg = replace(cfg, **{section: replace(obj, **values)})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid values for section {section!r}: {exc}") from exc
    return cfg


def parse_assignment(line: str, where: str) -> tuple[str, str, str] | None:
    line = line.split("#", 1)[0].strip()
    if not line:
        return None
    if "=" not in line:
        raise ConfigError(f"{where}: expected 'section.key = value'")
    key, value = (s.strip() for s in line.split("=", 1))
    return where, key, value


def from_text(text: str, base: RunConfig | None = None, source: str = "<config>") -> RunConfig:
    assignments = []
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        a = parse_assignment(line, f"{source}:{lineno}")
        if a is None:
            continue
        if a[1] in seen:
            raise ConfigError(f"{a[0]}: duplicate key {a[1]!r}")
        seen.add(a[1])
        assignments.append(a)
    return apply_assignments(base if base is not None else RunConfig(), assignments)


def load_config(path: str | Path | None, preset: str = "default", overrides: list[str] = ()) -> RunConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[preset]()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = from_text(text, cfg, str(path))
    extra = [parse_assignment(o, f"--set {o}") for o in overrides]
    return apply_assignments(cfg, [a for a in extra if a is not None])


# -- model construction ----------------------------------------------------------------------

def build_model(cfg: RunConfig, vocab: Vocabulary, seed: int | None = None) -> DenseCapModel:
    return DenseCapModel(cfg.backbone, cfg.model, vocab, cfg.run.seed if seed is None else seed)


@dataclass
class LoadedCheckpoint:
    model: DenseCapModel
    config: RunConfig
    data: CheckpointData


def load_model(path: str | Path) -> LoadedCheckpoint:
    data = read_checkpoint(path)
    try:
        cfg = from_text(data.config_text, source=f"{path}[config]")
        vocab = Vocabulary(data.meta["vocab"])
    except (KeyError, DenseCapError) as exc:
        raise ConfigError(f"checkpoint {path} carries an unusable configuration: {exc}") from exc
    model = build_model(cfg, vocab)
    load_parameters(model, data)
    return LoadedCheckpoint(model, cfg, data)
