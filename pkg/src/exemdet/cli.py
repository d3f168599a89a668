"""Command-line surface.

Subcommands: gen-synth (synthetic scenes and training pairs), train-ran
(train the alignment head), detect (run the pipeline on one query), evaluate
(AP metrics plus optional pair accuracy and bucket analysis).

Standard output carries only machine-readable results; the fully-resolved
config, diagnostics, and timing reports go to standard error. Exit codes:
0 ok, 2 usage, 3 I/O or parse failure, 4 numeric failure, 5 checkpoint or
config incompatibility.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .geometry import Box, Detection, GtObject, Image, iou
from .imgio import read_image, write_density, write_density_pgm, write_image
from .metrics import bucket_analysis, evaluate_detections, pair_accuracy
from .mlp import NonFiniteLossError, TrainConfig, load_head, save_head
from .pipeline import PipelineConfig, SupportSet, detect
from .proposals import ProposalParseError, load_external_proposals
from .ran import PairSample, RanConfig, RanTarget, decode, pair_features, train_ran
from .sdm import Exemplar
from .synth import JitterConfig, SynthConfig, gen_dataset, gen_ran_pairs

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_COMPAT = 5


class CompatibilityError(RuntimeError):
    """Checkpoint and requested config disagree on L / W / H."""


def _echo_config(name: str, cfg: dict) -> None:
    print(json.dumps({"command": name, "config": cfg}, sort_keys=True), file=sys.stderr)


def _load_config_file(path: str) -> dict:
    p = Path(path)
    text = p.read_text(encoding="utf-8")
    if p.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib
        return tomllib.loads(text)
    return json.loads(text)


def _apply_config_file(args: argparse.Namespace) -> None:
    # File values fill in flags the user did not pass (tracked via None defaults).
    if not getattr(args, "config", None):
        return
    file_cfg = _load_config_file(args.config)
    for key, value in file_cfg.items():
        attr = key.replace("-", "_")
        if hasattr(args, attr) and getattr(args, attr) is None:
            setattr(args, attr, value)


def _defaulted(args: argparse.Namespace, defaults: dict) -> None:
    for attr, value in defaults.items():
        if getattr(args, attr) is None:
            setattr(args, attr, value)


# ---------------------------------------------------------------- gen-synth


def _cmd_gen_synth(args) -> int:
    _apply_config_file(args)
    _defaulted(args, {"instances": 3, "noise": 0.05, "first_category": 0,
                      "pairs_per_instance": 2, "size": "128x128"})
    w, h = (int(v) for v in args.size.lower().split("x"))
    cfg = SynthConfig(width=w, height=h, n_categories=args.categories,
                      instances_per_scene=args.instances, noise_amplitude=args.noise,
                      first_category=args.first_category, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {"out": str(out), "scenes": args.scenes, "categories": args.categories,
                "seed": args.seed, "pairs": bool(args.pairs), "size": args.size,
                "instances": args.instances, "noise": args.noise,
                "first_category": args.first_category,
                "pairs_per_instance": args.pairs_per_instance}
    _echo_config("gen-synth", resolved)

    scenes = gen_dataset(cfg, args.scenes)
    with open(out / "annotations.jsonl", "w", encoding="utf-8") as fh:
        for i, (img, objects) in enumerate(scenes):
            name = f"scene_{i:04d}.png"
            write_image(out / name, img)
            fh.write(json.dumps({
                "image": name,
                "objects": [{"box": [o.box.cx, o.box.cy, o.box.w, o.box.h],
                             "category": o.category} for o in objects],
            }, sort_keys=True) + "\n")

    if args.pairs:
        pair_dir = out / "pairs"
        pair_dir.mkdir(exist_ok=True)
        jitter = JitterConfig(seed=args.seed)
        pairs = gen_ran_pairs(scenes, jitter, RanConfig(),
                              pairs_per_instance=args.pairs_per_instance)
        with open(out / "pairs.jsonl", "w", encoding="utf-8") as fh:
            for i, p in enumerate(pairs):
                gt_name = f"pairs/pair_{i:06d}_gt.png"
                cand_name = f"pairs/pair_{i:06d}_cand.png"
                write_image(out / gt_name, p.gt_patch)
                write_image(out / cand_name, p.cand_patch)
                fh.write(json.dumps({
                    "gt_patch": gt_name, "cand_patch": cand_name,
                    "gt_box": [p.gt_box.cx, p.gt_box.cy, p.gt_box.w, p.gt_box.h],
                    "cand_box": [p.cand_box.cx, p.cand_box.cy, p.cand_box.w, p.cand_box.h],
                    "target": {"c": p.target.c, "dx": p.target.dx, "dy": p.target.dy,
                               "sw": p.target.sw, "sh": p.target.sh},
                    "gt_category": p.gt_category, "cand_category": p.cand_category,
                }, sort_keys=True) + "\n")

    manifest_cfg = {k: v for k, v in resolved.items() if k != "out"}
    manifest = {"tool": "exemdet", "version": __version__, "command": "gen-synth",
                "config": manifest_cfg}
    (out / "MANIFEST.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    return EXIT_OK


def load_pairs_file(path: str | Path) -> list[PairSample]:
    """Read a pairs.jsonl produced by gen-synth; patch paths resolve relative to it."""
    path = Path(path)
    base = path.parent
    pairs = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            target = RanTarget(row["target"]["c"], row["target"]["dx"], row["target"]["dy"],
                               row["target"]["sw"], row["target"]["sh"])
            pairs.append(PairSample(
                gt_box=Box(*row["gt_box"]), cand_box=Box(*row["cand_box"]),
                gt_patch=read_image(base / row["gt_patch"]),
                cand_patch=read_image(base / row["cand_patch"]),
                target=target, gt_category=row["gt_category"],
                cand_category=row.get("cand_category")))
        except (KeyError, ValueError, TypeError) as exc:
            raise ValueError(f"{path}:{lineno}: bad pair record: {exc}") from exc
    return pairs


# ---------------------------------------------------------------- train-ran


def _cmd_train_ran(args) -> int:
    _apply_config_file(args)
    _defaulted(args, {"epochs": 30, "lr": 1e-3, "batch_size": 64,
                      "embed_len": 128, "patch_size": 256})
    resolved = {"pairs": args.pairs, "out": args.out, "epochs": args.epochs,
                "seed": args.seed, "lr": args.lr, "batch_size": args.batch_size,
                "embed_len": args.embed_len, "patch_size": args.patch_size}
    _echo_config("train-ran", resolved)
    pairs = load_pairs_file(args.pairs)
    if not pairs:
        raise ValueError(f"{args.pairs}: no pairs to train on")
    ran_cfg = RanConfig(patch_w=args.patch_size, patch_h=args.patch_size,
                        embed_len=args.embed_len)
    train_cfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch_size,
                            epochs=args.epochs, seed=args.seed)
    head, losses = train_ran(pairs, ran_cfg, train_cfg)
    meta = {"patch_w": ran_cfg.patch_w, "patch_h": ran_cfg.patch_h,
            "embed_len": ran_cfg.embed_len, "epochs": args.epochs, "seed": args.seed,
            "learning_rate": args.lr, "batch_size": args.batch_size,
            "n_pairs": len(pairs), "final_loss": losses[-1] if losses else None}
    save_head(args.out, head, meta)
    with open(str(args.out) + ".losses.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss"])
        for i, value in enumerate(losses):
            writer.writerow([i, f"{value!r}"])
    print(f"checkpoint written: {args.out} ({len(pairs)} pairs, "
          f"{args.epochs} epochs)", file=sys.stderr)
    return EXIT_OK


# ------------------------------------------------------------------- detect


def _parse_support(spec: str) -> list[tuple[str, Box]]:
    entries = []
    for item in spec.split(","):
        parts = item.rsplit(":", 4)
        if len(parts) != 5:
            raise ValueError(f"support entry {item!r} is not IMG:cx:cy:w:h")
        path = parts[0]
        cx, cy, w, h = (float(v) for v in parts[1:])
        entries.append((path, Box(cx, cy, w, h)))
    return entries


def _load_gt_file(path: str | Path) -> dict[str, list[GtObject]]:
    gts: dict[str, list[GtObject]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            gts[row["image"]] = [GtObject(Box(*o["box"]), o["category"])
                                 for o in row["objects"]]
        except (KeyError, ValueError, TypeError) as exc:
            raise ValueError(f"{path}:{lineno}: bad annotation record: {exc}") from exc
    return gts


def _render_overlay(path: str, query: Image, candidates: list[Box],
                    detections: list[Detection], gts: list[GtObject]) -> None:
    from PIL import Image as PilImage
    from PIL import ImageDraw

    base = np.round(query.pixels * 255.0).astype(np.uint8)
    if query.channels == 1:
        base = np.repeat(base, 3, axis=2)
    pil = PilImage.fromarray(base, mode="RGB")
    draw = ImageDraw.Draw(pil)
    for b in candidates:
        draw.rectangle([b.x0, b.y0, b.x1, b.y1], outline=(255, 0, 0))
    for g in gts:
        draw.rectangle([g.box.x0, g.box.y0, g.box.x1, g.box.y1], outline=(255, 255, 0))
    for d in detections:
        draw.rectangle([d.box.x0, d.box.y0, d.box.x1, d.box.y1], outline=(0, 0, 255))
    pil.save(path, format="PNG")


def _cmd_detect(args) -> int:
    _apply_config_file(args)
    _defaulted(args, {"category": "object", "nms_iou": 0.5, "threads": 1})
    support_entries = _parse_support(args.support)
    head = None
    embed_len, patch_w, patch_h = args.embed_len, args.patch_size, args.patch_size
    if not args.no_ran:
        head, meta = load_head(args.ckpt)
        if embed_len is not None and embed_len != head.embed_len:
            raise CompatibilityError(
                f"--embed-len {embed_len} conflicts with checkpoint L={head.embed_len}")
        embed_len = head.embed_len
        meta_w, meta_h = meta.get("patch_w"), meta.get("patch_h")
        if patch_w is not None and meta_w is not None and patch_w != meta_w:
            raise CompatibilityError(
                f"--patch-size {patch_w} conflicts with checkpoint patch {meta_w}x{meta_h}")
        patch_w = meta_w or patch_w or 256
        patch_h = meta_h or patch_h or 256
    embed_len = embed_len or 128
    patch_w = patch_w or 256
    patch_h = patch_h or 256

    ran_cfg = RanConfig(patch_w=patch_w, patch_h=patch_h, embed_len=embed_len)
    cfg = PipelineConfig(ran=ran_cfg, nms_iou=args.nms_iou,
                         purify_on=not args.no_purify, ran_on=not args.no_ran)
    resolved = {"query": args.query, "support": args.support, "ckpt": args.ckpt,
                "category": args.category, "no_purify": args.no_purify,
                "no_ran": args.no_ran, "proposals": args.proposals,
                "nms_iou": args.nms_iou, "embed_len": embed_len,
                "patch_size": patch_w, "threads": args.threads, "seed": None}
    _echo_config("detect", resolved)

    query = read_image(args.query)
    exemplars = []
    for path, box in support_entries:
        img = read_image(path)
        patch = img if args.support_is_patch else None
        if patch is None:
            from .geometry import crop_resize
            patch = crop_resize(img, box, max(1, round(box.w)), max(1, round(box.h)))
        exemplars.append(Exemplar(patch, box, args.category))
    support = SupportSet(args.category, tuple(exemplars))

    external = load_external_proposals(args.proposals) if args.proposals else None
    collect: dict = {}
    detections, timings = detect(query, support, head, cfg, proposals=external,
                                 collect=collect)

    if args.dump_sdm:
        write_density(args.dump_sdm, collect["sdm"])
        write_density_pgm(str(args.dump_sdm) + ".pgm", collect["sdm"])
    if args.render:
        gts = []
        if args.gt:
            by_image = _load_gt_file(args.gt)
            gts = by_image.get(Path(args.query).name, [])
        _render_overlay(args.render, query, collect.get("candidates", []), detections, gts)

    for d in detections:
        print(json.dumps({"image": args.query, "category": d.category,
                          "score": round(d.score, 6),
                          "box": [round(v, 4) for v in (d.box.cx, d.box.cy, d.box.w, d.box.h)]},
                         sort_keys=True))
    print(json.dumps({"timings_ms": timings.as_millis()}), file=sys.stderr)
    return EXIT_OK


# ----------------------------------------------------------------- evaluate


def _load_dets_file(path: str | Path) -> dict[str, list[Detection]]:
    dets: dict[str, list[Detection]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            key = Path(row["image"]).name
            dets.setdefault(key, []).append(
                Detection(Box(*row["box"]), row["category"], float(row["score"])))
        except (KeyError, ValueError, TypeError) as exc:
            raise ValueError(f"{path}:{lineno}: bad detection record: {exc}") from exc
    return dets


def _cmd_evaluate(args) -> int:
    _apply_config_file(args)
    resolved = {"dets": args.dets, "gt": args.gt, "pairs": args.pairs, "ckpt": args.ckpt,
                "bucket_csv": args.bucket_csv}
    _echo_config("evaluate", resolved)
    dets = _load_dets_file(args.dets)
    gts = _load_gt_file(args.gt)
    report = evaluate_detections(dets, gts)

    if args.pairs:
        if not args.ckpt:
            raise ValueError("--pairs requires --ckpt")
        head, meta = load_head(args.ckpt)
        ran_cfg = RanConfig(patch_w=meta.get("patch_w", 256), patch_h=meta.get("patch_h", 256),
                            embed_len=head.embed_len)
        pairs = load_pairs_file(args.pairs)
        x, t = pair_features(pairs, ran_cfg)
        from .mlp import forward
        preds = forward(head, x)
        report["pair_accuracy"] = pair_accuracy(preds[:, 0], t[:, 0],
                                                ran_cfg.classify_threshold)
        rows = []
        for p, pred in zip(pairs, preds):
            if p.target.c != 1.0:
                continue
            before = iou(p.gt_box, p.cand_box)
            aligned = decode(p.cand_box, RanTarget.from_array(pred), ran_cfg)
            rows.append((before, iou(p.gt_box, aligned)))
        buckets = bucket_analysis(rows)
        report["buckets"] = buckets.to_dicts()
        if args.bucket_csv:
            with open(args.bucket_csv, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(["lo", "hi", "count", "before_mean", "after_mean",
                                 "mean_increment"])
                for b in buckets.buckets:
                    writer.writerow([b.lo, b.hi, b.count,
                                     "" if b.before is None else b.before.mean,
                                     "" if b.after is None else b.after.mean,
                                     "" if b.mean_increment is None else b.mean_increment])

    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="exemdet",
                                     description="Exemplar detection toolkit")
    parser.add_argument("--version", action="version", version=f"exemdet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate synthetic scenes and training pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--categories", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--pairs", action="store_true")
    p.add_argument("--instances", type=int, default=None)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--size", default=None, help="scene size WxH (default 128x128)")
    p.add_argument("--first-category", type=int, default=None)
    p.add_argument("--pairs-per-instance", type=int, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_gen_synth)

    p = sub.add_parser("train-ran", help="train the region alignment head")
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--embed-len", type=int, default=None)
    p.add_argument("--patch-size", type=int, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_train_ran)

    p = sub.add_parser("detect", help="detect the support category in a query image")
    p.add_argument("--query", required=True)
    p.add_argument("--support", required=True,
                   help="IMG:cx:cy:w:h[,IMG:cx:cy:w:h...]; the box crops the exemplar")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--category", default=None)
    p.add_argument("--no-purify", action="store_true")
    p.add_argument("--no-ran", action="store_true")
    p.add_argument("--proposals", default=None, help="external proposal file (cx cy w h lines)")
    p.add_argument("--dump-sdm", default=None)
    p.add_argument("--render", default=None)
    p.add_argument("--gt", default=None, help="annotations JSONL for GT overlays")
    p.add_argument("--nms-iou", type=float, default=None)
    p.add_argument("--embed-len", type=int, default=None)
    p.add_argument("--patch-size", type=int, default=None)
    p.add_argument("--support-is-patch", action="store_true",
                   help="treat each support image as an already-cropped patch")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_detect)

    p = sub.add_parser("evaluate", help="score detections against ground truth")
    p.add_argument("--dets", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--pairs", default=None)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--bucket-csv", default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "detect" and not args.no_ran and not args.ckpt:
        parser.error("detect requires --ckpt unless --no-ran is given")
    if args.command == "detect" and not args.support.strip():
        parser.error("empty --support")
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CompatibilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except (OSError, ProposalParseError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
