"""Command-line interface: ``densecap <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(missing/corrupt files, checkpoint validation), 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import config as C
from .backbone import prepare_image
from .checkpoint import save_checkpoint
from .dataset import (
    Scene,
    build_vocab,
    generate_corpus,
    load_split,
    max_iou_stats,
    read_ppm,
    save_split,
)
from .errors import ConfigError, DataError, DenseCapError, NumericError, UsageError
from .evaluation import (
    EvalConfig,
    evaluate,
    evaluate_predictions,
    format_prediction,
    read_predictions,
    rescale_prediction,
    sweep,
    write_predictions,
)
from .model import decode_results, infer_image
from .training import finetune_with_context, train

logger = logging.getLogger("densecap")

SPLITS = ("train", "val", "test")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def split_seeds(seed: int) -> dict[str, int]:
    """Disjoint generator seeds for the three splits."""
    return {name: 3 * seed + i for i, name in enumerate(SPLITS)}


def _config(args) -> C.RunConfig:
    cfg = C.load_config(args.config, args.preset, args.set)
    if args.seed is not None:
        cfg = cfg.with_values(run={"seed": args.seed}, generator={"seed": args.seed})
    logger.info("resolved configuration:\n%s", C.to_text(cfg))
    return cfg


def _emit(lines: Sequence[str], out=None) -> None:
    out = out or sys.stdout
    for line in lines:
        out.write(line + "\n")


def _report_dir(args) -> Path | None:
    if getattr(args, "report_dir", None) is None:
        return None
    path = Path(args.report_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_split(data: str, split: str) -> list[Scene]:
    path = Path(data) / split
    if not path.is_dir():
        raise DataError(f"split directory {path} does not exist")
    return load_split(path)


def _load_image(path: str) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"image {p} does not exist")
    if p.suffix.lower() in (".ppm", ".pnm"):
        return read_ppm(p)
    from matplotlib import image as mpimg

    try:
        arr = np.asarray(mpimg.imread(p), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {p}: {exc}") from exc
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    if arr.max() > 1.0:
        arr = arr / 255.0
    return np.transpose(arr[..., :3], (2, 0, 1)).copy()


def _eval_config(cfg: C.RunConfig, args) -> EvalConfig:
    values = {k: getattr(args, k) for k in ("k", "nms_r1", "nms_r2") if getattr(args, k, None) is not None}
    return replace(cfg.eval, **values) if values else cfg.eval


# -- commands --------------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} exists and is not empty; pass --force to overwrite")
    counts = {"train": cfg.data.train_scenes, "val": cfg.data.val_scenes, "test": cfg.data.test_scenes}
    if args.scenes is not None:
        counts = {name: args.scenes for name in SPLITS}
    seeds = split_seeds(cfg.generator.seed)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"seeds": seeds, "counts": counts, "splits": {}}
    for name in SPLITS:
        scenes = generate_corpus(cfg.generator, counts[name], seed=seeds[name], prefix=f"{name}-")
        save_split(scenes, out / name)
        entry = {"scenes": len(scenes), "regions": sum(len(s.regions) for s in scenes),
                 "ambiguous_regions": sum(r.ambiguous for s in scenes for r in s.regions)}
        if scenes:
            hist = max_iou_stats(scenes, cfg.eval.merge_iou)
            entry["max_iou_histogram"] = hist.counts.tolist()
            entry["fraction_max_iou_above_0.3"] = hist.fraction_above(0.3)
        manifest["splits"][name] = entry
        _emit([f"split\t{name}\tscenes={entry['scenes']}\tregions={entry['regions']}"])
    (out / "config.txt").write_text(C.to_text(cfg), encoding="utf-8")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.iterations is not None:
        cfg = cfg.with_values(train={"iterations": args.iterations})
    corpus = _load_split(args.data, "train")
    if not corpus:
        raise DataError("training split is empty")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.init is not None:
        base = C.load_model(args.init)
        if base.model.head_cfg.variant != cfg.model.variant:
            raise ConfigError(f"base checkpoint variant {base.model.head_cfg.variant!r} does not match "
                              f"configured variant {cfg.model.variant!r}")
        model = finetune_with_context(base.model, cfg.model.fusion, cfg.model.op, cfg.run.seed)
        cfg = replace(cfg, model=model.head_cfg, backbone=base.config.backbone)
    else:
        model = C.build_model(cfg, build_vocab(corpus, cfg.data.vocab_cap))
    config_text = C.to_text(cfg)
    (out / "config.txt").write_text(config_text, encoding="utf-8")

    val = _load_split(args.data, "val") if args.eval_every else []
    best = {"map": -1.0}

    def progress(it: int, losses) -> None:
        if cfg.run.log_every and it % cfg.run.log_every == 0:
            logger.info("iteration %d total %.6f", it, losses.total)
        if val and (it + 1) % args.eval_every == 0:
            rep = evaluate(model, val, cfg.eval)
            _emit([f"val\t{it + 1}\t{rep.map!r}"])
            if rep.map > best["map"]:
                best["map"] = rep.map
                save_checkpoint(out / "best.ckpt", model, config_text, it + 1, extra={"val_map": rep.map})

    with open(out / "train.log", "w", encoding="utf-8") as log:
        log.write("".join(f"# {line}\n" for line in config_text.splitlines()))
        result = train(model, corpus, cfg.train, cfg.loss, cfg.run.seed, out, config_text, log, progress=progress)
    if result.history:
        last = result.history[-1]
        _emit([f"final\titeration={int(last[0])}\ttotal={last[6]!r}"])
    _emit([f"checkpoint\t{p}" for p in result.checkpoints])
    report = _report_dir(args)
    if report is not None and result.history:
        from .plots import plot_loss_curve

        _emit([f"figure\t{plot_loss_curve(result.history, report / 'loss_curve.png')}"])
    return 0


def cmd_eval(args) -> int:
    loaded = C.load_model(args.checkpoint)
    ecfg = _eval_config(loaded.config, args)
    corpus = _load_split(args.data, args.split)
    if args.predictions is not None:
        report = evaluate_predictions(read_predictions(args.predictions), corpus, ecfg)
    else:
        report = evaluate(loaded.model, corpus, ecfg)
    print(report.format_table())
    _emit(report.machine_lines())
    out = _report_dir(args)
    if out is not None:
        from .plots import plot_ap_grid

        (out / "report.txt").write_text(report.format_table() + "\n" + "\n".join(report.machine_lines()) + "\n",
                                        encoding="utf-8")
        _emit([f"figure\t{plot_ap_grid(report, out / 'ap_grid.png')}"])
    return 0


def cmd_predict(args) -> int:
    loaded = C.load_model(args.checkpoint)
    ecfg = _eval_config(loaded.config, args)
    raw = _load_image(args.image)
    image, scale = prepare_image(raw, loaded.config.backbone.image_side)
    image_id = args.image_id or Path(args.image).stem
    inf = infer_image(loaded.model, image, ecfg.k, ecfg.nms_r1, ecfg.nms_r2, image_id)
    preds = [rescale_prediction(p, scale) for p in inf.predictions]
    out = Path(args.out) if args.out else None
    if out is not None:
        write_predictions(out, preds)
    else:
        _emit([format_prediction(p) for p in preds])
    if args.svg:
        from .render import overlay_svg

        Path(args.svg).write_text(overlay_svg(raw, preds), encoding="utf-8")
    _emit([f"count\tpredictions\t{len(preds)}", f"count\tdropped_degenerate\t{inf.dropped_degenerate}",
           f"count\tdropped_empty\t{inf.dropped_empty}"], sys.stderr if out is None else None)
    return 0


def cmd_sweep(args) -> int:
    loaded = C.load_model(args.checkpoint)
    corpus = _load_split(args.data, args.split)
    ks = [int(v) for v in args.ks.split(",")]
    result = sweep(loaded.model, corpus, ks=ks, step=args.step, cfg=loaded.config.eval)
    print(result.format_table())
    _emit(result.machine_lines())
    out = _report_dir(args)
    if out is not None:
        from .plots import plot_sweep

        (out / "sweep.txt").write_text(result.format_table() + "\n" + "\n".join(result.machine_lines()) + "\n",
                                       encoding="utf-8")
        _emit([f"figure\t{plot_sweep(result, out / 'sweep.png')}"])
    return 0


def cmd_stats(args) -> int:
    cfg = _config(args)
    if args.data is not None:
        scenes = _load_split(args.data, args.split)
    else:
        scenes = generate_corpus(cfg.generator, args.scenes, seed=cfg.generator.seed)
    hist = max_iou_stats(scenes, cfg.eval.merge_iou)
    lo = np.linspace(0.0, 0.9, 10)
    _emit([f"bin\t{a:.1f}\t{a + 0.1:.1f}\t{c}" for a, c in zip(lo, hist.counts)])
    _emit([f"regions\t{hist.n_regions}", f"fraction_above_0.3\t{hist.fraction_above(0.3)!r}"])
    out = _report_dir(args)
    if out is not None:
        from .plots import plot_iou_histogram

        _emit([f"figure\t{plot_iou_histogram(hist, out / 'max_iou_hist.png')}"])
    return 0


def cmd_render_steps(args) -> int:
    from .render import render_steps_svg

    loaded = C.load_model(args.checkpoint)
    model = loaded.model
    ecfg = _eval_config(loaded.config, args)
    raw = _load_image(args.image)
    image, scale = prepare_image(raw, loaded.config.backbone.image_side)
    fm = model.features(image)
    props = model.proposals(fm, ecfg.k, ecfg.nms_r1)
    if not 0 <= args.index < len(props):
        raise UsageError(f"proposal index {args.index} out of range (0..{len(props) - 1})")
    boxes = props.boxes[args.index:args.index + 1]
    conf, batch = model.decode_boxes(fm, boxes)
    decode = decode_results(model, boxes, conf, batch, fm.image_size)[0]
    Path(args.out).write_text(render_steps_svg(image, decode), encoding="utf-8")
    _emit([f"steps\t{decode.steps}", f"caption\t{' '.join(decode.caption)}"])
    return 0


# -- parser ----------------------------------------------------------------------------------

def _add_config(p) -> None:
    p.add_argument("--config", help="config file of 'section.key = value' lines")
    p.add_argument("--preset", default="desk", choices=sorted(C.PRESETS), help="base configuration (default: desk)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")


def _add_nms(p) -> None:
    p.add_argument("--k", type=int, help="proposal budget")
    p.add_argument("--nms-r1", type=float, help="proposal NMS IoU ratio")
    p.add_argument("--nms-r2", type=float, help="final-box NMS IoU ratio")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="densecap", description="Dense captioning with joint inference and context fusion.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--seed", type=int, help="override run and generator seed")
        p.set_defaults(func=func)
        return p

    p = command("gen-data", cmd_gen_data, "generate train/val/test synthetic splits")
    _add_config(p)
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, help="scenes per split (overrides data.*_scenes)")
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")

    p = command("train", cmd_train, "train a model; writes checkpoints and a loss log")
    _add_config(p)
    p.add_argument("--data", required=True, help="directory produced by gen-data")
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int)
    p.add_argument("--init", help="no-context checkpoint to fine-tune with the configured fusion")
    p.add_argument("--eval-every", type=int, default=0, help="evaluate on val and keep best.ckpt")
    p.add_argument("--report-dir", help="write loss_curve.png here")

    p = command("eval", cmd_eval, "evaluate a checkpoint (or a predictions file) on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--predictions", help="score this predictions file instead of running the model")
    p.add_argument("--report-dir", help="write report.txt and ap_grid.png here")
    _add_nms(p)

    p = command("predict", cmd_predict, "predict regions and captions for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="PPM or PNG image")
    p.add_argument("--image-id")
    p.add_argument("--out", help="predictions file (default: stdout)")
    p.add_argument("--svg", help="write an annotated SVG overlay")
    _add_nms(p)

    p = command("sweep", cmd_sweep, "grid-search k, nms_r1 and nms_r2 on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val", choices=SPLITS)
    p.add_argument("--ks", default="100,300")
    p.add_argument("--step", type=float, default=0.1)
    p.add_argument("--report-dir", help="write sweep.txt and sweep.png here")

    p = command("stats", cmd_stats, "max-IoU statistics of a split or a freshly generated corpus")
    _add_config(p)
    p.add_argument("--data")
    p.add_argument("--split", default="train", choices=SPLITS)
    p.add_argument("--scenes", type=int, default=200, help="scenes to generate when --data is absent")
    p.add_argument("--report-dir", help="write max_iou_hist.png here")

    p = command("render-steps", cmd_render_steps, "SVG of the per-timestep boxes of one proposal")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--index", type=int, required=True, help="proposal index after the first NMS")
    p.add_argument("--out", required=True)
    _add_nms(p)
    return parser


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, NumericError):
        return 3
    if isinstance(exc, DataError):
        return 2
    return 1


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except DenseCapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
