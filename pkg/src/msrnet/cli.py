"""Command line entry point: ``msrnet <command> --config <path> --out <dir> [--seed N]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
Every command stages its files in a temporary directory and moves them into
``--out`` only after the command succeeded.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from .annotations import load_annotation_file
from .config import ConfigError, RunConfig
from .estimator import MSRNetSegmenter
from .evaluation import annotations_as_predictions, evaluate
from .labels import build_targets, foreground_target
from .losses import NonFiniteLossError
from .synth import PlacementError, generate_dataset, load_split, png_bytes
from .tensor import encode_checkpoint
from .training import recenter

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(RuntimeError):
    pass


@contextlib.contextmanager
def staged_output(out_dir):
    """Yield a scratch directory whose files replace those under ``out_dir`` on success."""
    out = Path(out_dir)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.staging-", dir=out.parent))
    try:
        yield tmp
        for src in sorted(p for p in tmp.rglob("*") if p.is_file()):
            dst = out / src.relative_to(tmp)
            dst.parent.mkdir(parents=True, exist_ok=True)
            os.replace(src, dst)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _write_json(path: Path, doc) -> None:
    _write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _manifest_path(args, cfg: RunConfig, staging: Path | None = None) -> Path:
    """``--manifest`` wins over the config; with neither, synthesize the configured dataset."""
    if getattr(args, "manifest", None):
        return Path(args.manifest)
    if cfg.data.manifest:
        p = Path(cfg.data.manifest)
        if not p.is_absolute() and args.config:
            p = Path(args.config).parent / p
        return p
    existing = Path(args.out) / "data" / "manifest.json"
    if existing.exists():
        return existing
    if staging is None:
        raise ConfigError("no manifest given (--manifest or data.manifest)")
    return generate_dataset(cfg.data.seed, cfg.data.scene_config(), cfg.data.n_images, cfg.data.ratios,
                            staging / "data")


def _load(manifest: Path, split: str):
    try:
        items = load_split(manifest, split)
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    if not items:
        raise DataError(f"split {split!r} of {manifest} is empty")
    return np.stack([img for img, _ in items]), [anns for _, anns in items]


def _load_model(path) -> MSRNetSegmenter:
    try:
        return MSRNetSegmenter.load(path)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from exc


def _upscale(grid: np.ndarray, stride: int) -> np.ndarray:
    return np.kron(grid, np.ones((stride, stride)))


def _gray_png(values: np.ndarray) -> bytes:
    return png_bytes(np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8))


# ---------------------------------------------------------------- commands

def cmd_synth(args, cfg: RunConfig) -> int:
    with staged_output(args.out) as tmp:
        try:
            path = generate_dataset(cfg.data.seed, cfg.data.scene_config(), cfg.data.n_images, cfg.data.ratios, tmp)
        except PlacementError as exc:
            raise ConfigError(str(exc)) from exc
        _write_text(tmp / "config.json", cfg.to_json())
        sizes = {k: len(v) for k, v in json.loads(path.read_text()).items()}
    print(json.dumps({"manifest": str(Path(args.out) / "manifest.json"), "splits": sizes}, sort_keys=True))
    return EXIT_OK


def cmd_labelgen(args, cfg: RunConfig) -> int:
    manifest = _manifest_path(args, cfg)
    try:
        doc = json.loads(manifest.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {manifest}: {exc}") from exc
    lab = cfg.labels
    report = []
    with staged_output(args.out) as tmp:
        for split in ("train", "val", "test"):
            for entry in doc.get(split, []):
                try:
                    ann_doc, cells = load_annotation_file(manifest.parent / entry["annotation"])
                except (OSError, KeyError, ValueError) as exc:
                    raise DataError(f"{entry}: {exc}") from exc
                h, w = ann_doc["height"], ann_doc["width"]
                cells = recenter(cells, lab.center_mode)
                try:
                    maps = build_targets(cells, h, w, lab.policy(), lab.stride)
                except ValueError as exc:
                    raise DataError(f"{entry['annotation']}: {exc}") from exc
                name = Path(entry["annotation"]).stem
                arrays = {"gaussian": maps.gaussian, "point": maps.point, "hw": maps.hw,
                          "valid": maps.valid.astype(np.float64),
                          "foreground": foreground_target(cells, h, w, lab.stride)}
                (tmp / "targets").mkdir(exist_ok=True)
                (tmp / "targets" / f"{name}.bin").write_bytes(
                    encode_checkpoint(arrays, {"image": entry["image"], "stride": lab.stride}))
                (tmp / "previews").mkdir(exist_ok=True)
                (tmp / "previews" / f"{name}_gaussian.png").write_bytes(_gray_png(maps.gaussian))
                (tmp / "previews" / f"{name}_point.png").write_bytes(_gray_png(maps.point))
                row = {"image": entry["image"], "split": split, "cells": len(cells),
                       "point_collisions": maps.point_collisions, "hw_collisions": maps.hw_collisions,
                       "skipped": maps.skipped}
                report.append(row)
                if maps.point_collisions or maps.hw_collisions:
                    print(f"collision: {entry['image']}: {maps.point_collisions} center collision(s), "
                          f"{maps.hw_collisions} size-target overwrite(s)")
        _write_json(tmp / "labelgen_report.json", report)
        _write_text(tmp / "config.json", cfg.to_json())
    return EXIT_OK


def _train_model(cfg: RunConfig, X, y, guidance=None, on_step=None) -> MSRNetSegmenter:
    return MSRNetSegmenter(cfg, guidance=guidance).fit(X, y, on_step=on_step)


def cmd_train(args, cfg: RunConfig) -> int:
    with staged_output(args.out) as tmp:
        manifest = _manifest_path(args, cfg, tmp)
        X, y = _load(manifest, "train")
        lines = io.StringIO()
        guidance = False if args.no_guidance else None
        model = _train_model(cfg, X, y, guidance,
                             on_step=lambda rec: lines.write(json.dumps(rec, sort_keys=True) + "\n"))
        model.save(tmp / "checkpoint.bin")
        _write_text(tmp / "metrics.jsonl", lines.getvalue())
        summary = {"initial_loss": model.initial_loss_.as_dict(), "final_loss": model.final_loss_.as_dict(),
                   "steps": cfg.optimizer.steps, "train_images": len(X),
                   "guidance": model.net_config_.guidance}
        _write_json(tmp / "summary.json", summary)
        _write_text(tmp / "config.json", cfg.to_json())
    print(json.dumps({"initial_total": summary["initial_loss"]["total"],
                      "final_total": summary["final_loss"]["total"]}, sort_keys=True))
    return EXIT_OK


def _eval_doc(model: MSRNetSegmenter | None, X, y, cfg: RunConfig, oracle: bool, guidance: bool) -> dict:
    if oracle:
        preds = [annotations_as_predictions(a) for a in y]
    else:
        preds = model.predict(X)
    result = evaluate(preds, y, cfg.eval.failure_iou).to_dict()
    result["config"] = {"guidance": guidance, "oracle": oracle, "split": cfg.eval.split,
                        "peak_thresh": cfg.eval.peak_thresh, "use_foreground": cfg.eval.use_foreground,
                        "max_radius": cfg.labels.max_radius}
    return result


def cmd_eval(args, cfg: RunConfig) -> int:
    manifest = _manifest_path(args, cfg)
    X, y = _load(manifest, args.split or cfg.eval.split)
    model = None
    guidance = not args.no_guidance
    if not args.oracle:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint (or --oracle)")
        model = _load_model(args.checkpoint)
        model.config = replace(model._cfg(), eval=cfg.eval)
        if args.no_guidance:
            model.net_config_ = replace(model.net_config_, guidance=False)
        guidance = model.net_config_.guidance
    doc = _eval_doc(model, X, y, cfg, args.oracle, guidance)
    with staged_output(args.out) as tmp:
        _write_json(tmp / "eval.json", doc)
        _write_text(tmp / "config.json", cfg.to_json())
    print(json.dumps(doc, sort_keys=True))
    return EXIT_OK


def sweep_rows(cfg: RunConfig, X, y, Xe, ye, radii) -> list[dict]:
    rows = []
    for r in radii:
        run = replace(cfg, labels=replace(cfg.labels, max_radius=int(r)))
        model = _train_model(run, X, y)
        res = evaluate(model.predict(Xe), ye, cfg.eval.failure_iou)
        rows.append({"radius": int(r), "ap50": res.ap50, "ap75": res.ap75})
    return rows


def cmd_sweep_radius(args, cfg: RunConfig) -> int:
    try:
        radii = [int(v) for v in args.radii.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"--radii must be comma separated integers: {exc}") from exc
    if not radii or min(radii) < 1:
        raise ConfigError("--radii needs at least one radius >= 1")
    with staged_output(args.out) as tmp:
        manifest = _manifest_path(args, cfg, tmp)
        X, y = _load(manifest, "train")
        Xe, ye = _load(manifest, args.split or cfg.eval.split)
        rows = sweep_rows(cfg, X, y, Xe, ye, radii)
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["radius", "ap50", "ap75"], lineterminator="\n")
        writer.writeheader()
        writer.writerows({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()} for row in rows)
        _write_text(tmp / "sweep.csv", buf.getvalue())
        _write_json(tmp / "sweep.json", rows)
        _write_text(tmp / "config.json", cfg.to_json())
    print(buf.getvalue(), end="")
    return EXIT_OK


def cmd_viz(args, cfg: RunConfig) -> int:
    if not args.checkpoint or not args.image:
        raise ConfigError("viz needs --checkpoint and --image")
    model = _load_model(args.checkpoint)
    model.config = replace(model._cfg(), eval=cfg.eval)
    try:
        with Image.open(args.image) as im:
            image = np.asarray(im.convert("L"))
    except OSError as exc:
        raise DataError(f"cannot read image {args.image}: {exc}") from exc
    S = model.net_config_.stride
    try:
        maps = model.predict_maps(image[None])
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    instances = model.decode(maps, 0, image.shape)
    palette = np.random.default_rng(0).integers(64, 256, size=(max(len(instances), 1), 3))
    overlay = np.repeat(image[:, :, None], 3, axis=2).astype(np.float64)
    for k, inst in enumerate(instances):
        overlay[inst.mask] = 0.5 * overlay[inst.mask] + 0.5 * palette[k]
    buf = io.BytesIO()
    Image.fromarray(np.rint(overlay).astype(np.uint8), mode="RGB").save(buf, format="PNG")
    with staged_output(args.out) as tmp:
        for key in ("m_g", "m_p", "foreground"):
            if key in maps:
                (tmp / f"{key}.png").write_bytes(_gray_png(_upscale(maps[key][0], S)))
        (tmp / "overlay.png").write_bytes(buf.getvalue())
        _write_json(tmp / "instances.json", [{"score": i.score, "box": list(i.box), "pixels": int(i.mask.sum())}
                                             for i in instances])
        _write_text(tmp / "config.json", cfg.to_json())
    print(json.dumps({"instances": len(instances)}))
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "labelgen": cmd_labelgen, "train": cmd_train, "eval": cmd_eval,
            "sweep-radius": cmd_sweep_radius, "viz": cmd_viz}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msrnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration (defaults when omitted)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="overrides the optimizer and data seeds")
        if name in ("labelgen", "train", "eval", "sweep-radius"):
            p.add_argument("--manifest", help="dataset manifest (overrides data.manifest)")
        if name in ("eval", "viz"):
            p.add_argument("--checkpoint")
        if name in ("eval", "sweep-radius"):
            p.add_argument("--split", help="manifest split to evaluate (default eval.split)")
        if name in ("train", "eval"):
            p.add_argument("--no-guidance", action="store_true", help="disable both guidance branches")
        if name == "eval":
            p.add_argument("--oracle", action="store_true", help="score ground truth as predictions")
        if name == "sweep-radius":
            p.add_argument("--radii", default="1,2,3,4,5")
        if name == "viz":
            p.add_argument("--image")
    return parser


def load_config(path: str | None, seed: int | None) -> RunConfig:
    cfg = RunConfig.load(path) if path else RunConfig()
    return cfg.with_seed(seed)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"msrnet: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLossError as exc:
        print(f"msrnet: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, ValueError) as exc:
        print(f"msrnet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
