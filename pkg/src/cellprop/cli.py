"""Command line entry point: ``cellprop {synth,train,segment,eval}``.

Exit codes: 0 success, 2 input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
import zlib
from pathlib import Path

import numpy as np

from . import __version__
from .detector import TilingError, TrainingDivergedError, parse_config, train
from .evaluation import f_measure, format_table, mdice, write_scores_csv
from .graphcut import GraphCutParams
from .likelihood import AnnotationError, load_annotations, render_likelihood
from .nn import ModelFormatError, Network, ShapeError
from .peaks import match_points, write_detections
from .pipeline import run
from .pngio import (
    read_image,
    read_labels,
    write_fused_contributions,
    write_labels,
    write_map16,
    write_overlay,
)
from .synth import PlacementError, format_scene_spec, generate, parse_scene_spec, write_scene

log = logging.getLogger("cellprop")

EXIT_INPUT = 2
EXIT_NUMERIC = 3


class InputError(Exception):
    pass


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for one named consumer of the run seed."""
    return np.random.default_rng([seed, zlib.crc32(name.encode()), *extra])


def write_manifest(path, subcommand, config: dict, inputs, outputs, seed, started, warnings=()):
    lines = [
        f"subcommand = {subcommand}",
        f"version = {__version__}",
        f"seed = {seed}",
        f"wall_clock_seconds = {time.time() - started:.3f}",
    ]
    lines += [f"config.{k} = {v}" for k, v in config.items()]
    lines += [f"input = {p}" for p in inputs]
    lines += [f"output = {p}" for p in outputs]
    lines += [f"warning = {w}" for w in warnings]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------


def cmd_synth(args):
    started = time.time()
    text = Path(args.spec).read_text() if args.spec else ""
    spec = parse_scene_spec(text, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "scene_spec.txt").write_text(format_scene_spec(spec))
    names = []
    for i in range(args.count):
        image, ann, labels = generate(spec, substream(spec.seed, "synth", i))
        name = f"scene_{i:04d}"
        ann.image_id = name
        write_scene(out, name, image, ann, labels)
        names.append(name)
    write_manifest(out / "manifest.txt", "synth", {"count": args.count, **vars(spec)},
                   [args.spec or "<defaults>"], names, spec.seed, started)
    print(f"wrote {len(names)} scenes to {out}")


def _training_pairs(data_dir, sigma):
    data = Path(data_dir)
    images = sorted((data / "images").glob("*.png"))
    if not images:
        raise InputError(f"no images found in {data / 'images'}")
    pairs = []
    for p in images:
        csv = data / "annotations" / f"{p.stem}.csv"
        if not csv.exists():
            raise InputError(f"missing annotation file {csv}")
        img = read_image(p)
        ann = load_annotations(csv, img.shape[1], img.shape[0])
        pairs.append((img, render_likelihood(ann, img.shape[1], img.shape[0], sigma)))
    return images, pairs


def cmd_train(args):
    started = time.time()
    text = Path(args.config).read_text() if args.config else ""
    cfg = parse_config(text, seed=args.seed, sigma=args.sigma, steps=args.steps, modality=args.modality)
    images, pairs = _training_pairs(args.data, cfg.sigma)
    net, report = train(cfg, pairs, substream(cfg.seed, "train"))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    net.save(out)
    loss_path = out.with_name(out.name + ".loss.csv")
    with open(loss_path, "w") as fh:
        fh.write("step,loss\n")
        for i, v in enumerate(report.losses):
            fh.write(f"{i},{v!r}\n")
    write_manifest(out.with_name(out.name + ".manifest.txt"), "train",
                   {**vars(cfg), "checksum": report.checksum, "train_seconds": round(report.seconds, 3)},
                   [args.config or "<defaults>", args.data], [out, loss_path], cfg.seed, started)
    print(f"trained {cfg.steps} steps, final loss {report.losses[-1]:.6g}, checksum {report.checksum}")


def _image_paths(spec):
    p = Path(spec)
    if p.is_dir():
        paths = sorted(p.glob("*.png"))
        if not paths:
            raise InputError(f"no PNG images in {p}")
        return paths
    if not p.exists():
        raise InputError(f"image not found: {p}")
    return [p]


def cmd_segment(args):
    started = time.time()
    net = Network.load(args.model)
    params = GraphCutParams(lam=args.lam, beta=args.beta, seed_frac=args.seed_frac)
    out = Path(args.out)
    for sub in ("labels", "overlays", "detections", "likelihood", "fused", "contributions"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    warnings, outputs, report_lines = [], [], []
    for path in _image_paths(args.image):
        image = read_image(path)
        res = run(net, image, args.threshold, params, args.modality, args.jobs)
        stem = path.stem
        write_labels(out / "labels" / f"{stem}.png", res.labels)
        write_overlay(out / "overlays" / f"{stem}.png", image, res.labels)
        write_detections(out / "detections" / f"{stem}.csv", res.regions)
        write_map16(out / "likelihood" / f"{stem}.png", res.likelihood)
        chdir = out / "contributions" / stem
        chdir.mkdir(exist_ok=True)
        for u, ch in zip(res.stack.ids, res.stack.projected):
            peak = ch.max()
            write_map16(chdir / f"ch_{u:03d}.png", ch / peak if peak > 0 else ch)
        if len(res.stack):
            write_fused_contributions(out / "fused" / f"{stem}.png", res.stack.projected)
        if not res.regions:
            warnings.append(f"{stem}: no cells detected")
        rep = res.report
        report_lines.append(
            f"{stem} cells={rep.cells} empty_seeds={','.join(map(str, rep.empty_seeds)) or '-'} "
            f"seed_conflicts={rep.conflicts}"
        )
        outputs.append(out / "labels" / f"{stem}.png")
    (out / "report.txt").write_text("\n".join(report_lines) + "\n")
    cfg = {"threshold": args.threshold, "lambda": args.lam, "beta": args.beta,
           "seed_frac": args.seed_frac, "modality": args.modality, "jobs": args.jobs}
    write_manifest(out / "manifest.txt", "segment", cfg, [args.model, args.image], outputs,
                   args.seed, started, warnings)
    for w in warnings:
        log.warning(w)
    print(f"segmented {len(outputs)} image(s) into {out}")


def _label_centroids(labels):
    pts = []
    for k in np.unique(labels):
        if k == 0:
            continue
        rr, cc = np.nonzero(labels == k)
        pts.append((cc.mean(), rr.mean()))
    return np.asarray(pts, dtype=float).reshape(-1, 2)


def cmd_eval(args):
    started = time.time()
    pred_dir, truth_dir = Path(args.pred), Path(args.truth)
    preds = {p.name for p in pred_dir.glob("*.png")}
    truths = {p.name for p in truth_dir.glob("*.png")}
    if preds != truths:
        odd = sorted(preds ^ truths)
        raise InputError(f"unpaired files: {', '.join(odd[:5])}{' ...' if len(odd) > 5 else ''}")
    if not preds:
        raise InputError("no label images to compare")
    rows, dices = [], []
    tp = fp = fn = 0
    for name in sorted(preds):
        pred = read_labels(pred_dir / name)
        truth = read_labels(truth_dir / name)
        scores = mdice(pred, truth)
        stem = Path(name).stem
        if args.annotations:
            truth_pts = load_annotations(Path(args.annotations) / f"{stem}.csv").as_array()
        else:
            truth_pts = _label_centroids(truth)
        m = match_points(_label_centroids(pred), truth_pts, args.radius)
        tp, fp, fn = tp + m.tp, fp + m.fp, fn + m.fn
        dices += scores.dice
        if scores.cells:
            rows.append((stem, "mDice", scores.mdice))
        if m.tp + m.fp + m.fn:
            rows.append((stem, "F-measure", f_measure(m.tp, m.fp, m.fn)))
    total = {}
    if dices:
        total["mDice"] = float(np.mean(dices))
    if tp + fp + fn:
        total["F-measure"] = f_measure(tp, fp, fn)
        total["precision"] = tp / (tp + fp) if tp + fp else 0.0
        total["recall"] = tp / (tp + fn) if tp + fn else 0.0
    rows += [("ALL", k, v) for k, v in total.items()]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_scores_csv(out, rows)
    table = format_table({pred_dir.name: total})
    out.with_suffix(".txt").write_text(table)
    write_manifest(out.with_name(out.stem + ".manifest.txt"), "eval", {"radius": args.radius},
                   [pred_dir, truth_dir], [out, out.with_suffix(".txt")], args.seed, started)
    print(table, end="")


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="cellprop", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--jobs", type=int, default=1)

    s = sub.add_parser("synth", help="generate a synthetic data set")
    s.add_argument("--spec", help="scene spec file (key = value lines)")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=10)
    common(s)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train the likelihood regressor")
    t.add_argument("--config", help="network config file (key = value lines)")
    t.add_argument("--data", required=True, help="directory with images/ and annotations/")
    t.add_argument("--out", required=True, help="model file to write")
    t.add_argument("--sigma", type=float)
    t.add_argument("--steps", type=int)
    t.add_argument("--modality", choices=("phase-contrast", "direct"))
    common(t)
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("segment", help="segment image(s) with a trained model")
    g.add_argument("--model", required=True)
    g.add_argument("--image", required=True, help="PNG file or directory of PNGs")
    g.add_argument("--out", required=True)
    g.add_argument("--threshold", type=float, default=0.3)
    g.add_argument("--lambda", dest="lam", type=float, default=1.0)
    g.add_argument("--beta", type=float, default=50.0)
    g.add_argument("--seed-frac", dest="seed_frac", type=float, default=GraphCutParams.seed_frac)
    g.add_argument("--modality", choices=("phase-contrast", "direct"), default="phase-contrast")
    common(g)
    g.set_defaults(func=cmd_segment)

    e = sub.add_parser("eval", help="score predicted labelings against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--out", required=True, help="scores CSV")
    e.add_argument("--radius", type=float, default=5.0)
    e.add_argument("--annotations", help="truth centroid CSVs; default: centroids of truth labels")
    common(e)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (TrainingDivergedError, FloatingPointError) as exc:
        print(f"cellprop: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, OSError, ValueError, AnnotationError, ModelFormatError, PlacementError,
            TilingError, ShapeError) as exc:
        print(f"cellprop: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return 0


if __name__ == "__main__":
    sys.exit(main())
