"""Command line entry point: ``annotate``, ``synth``, ``synth-db``, ``evaluate``, ``render-overlays``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .annotations import read_annotation, write_annotation
from .cad_db import load_database
from .config import load_config
from .errors import CadAlignError, NoOverlap
from .scene import load_scan, write_json

logger = logging.getLogger("cadalign")

EXIT_OK, EXIT_MANIFEST, EXIT_DATABASE, EXIT_ALL_FAILED = 0, 2, 3, 4


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file")
    p.add_argument("--preset", choices=["scannet", "arkitscenes", "custom"], help="objective weight preset")
    p.add_argument("--threads", type=int, default=1, help="worker threads (output does not depend on it)")
    p.add_argument("--seed", type=int, help="sampling / synthesis seed")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--cache-dir", type=Path, help="on-disk surface sample cache")
    p.add_argument("-v", "--verbose", action="store_true")


def _config(args):
    cfg = load_config(args.config, args.preset)
    if args.seed is not None:
        cfg = replace(cfg, sample_seed=args.seed)
    return cfg


def _load_db(path, args, gravity="z"):
    return load_database(path, gravity, cache_dir=args.cache_dir)


def cmd_annotate(args) -> int:
    from .retrieval import annotate_scene

    try:
        cfg = _config(args)
    except (ValueError, TypeError, OSError, json.JSONDecodeError) as exc:
        logger.error("config error: %s", exc)
        return EXIT_MANIFEST
    try:
        scan = load_scan(args.scene)
    except (CadAlignError, OSError) as exc:
        logger.error("scene manifest error: %s", exc)
        return EXIT_MANIFEST
    try:
        db = _load_db(args.db, args, "xyz"[scan.gravity_axis])
    except (CadAlignError, OSError) as exc:
        logger.error("database error: %s", exc)
        return EXIT_DATABASE
    result = annotate_scene(scan, db, cfg, threads=args.threads)
    out = args.out / "annotations.json"
    write_annotation(result, out)
    failed = [o.object_id for o in result.objects if o.status != "ok"]
    if failed:
        logger.warning("failed objects: %s", failed)
    logger.info("wrote %s", out)
    if result.objects and len(failed) == len(result.objects):
        return EXIT_ALL_FAILED
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synth import SceneSpec, cmd_synth as synth

    doc = json.loads(Path(args.spec).read_text())
    if args.seed is not None:
        doc["seed"] = args.seed
    spec = SceneSpec.from_dict(doc)
    db = _load_db(args.db, args)
    manifest, gt = synth(spec, db, args.out)
    logger.info("wrote %s and %s", manifest, gt)
    return EXIT_OK


def cmd_synth_db(args) -> int:
    from .synth import write_database

    counts = {}
    for item in args.counts.split(","):
        cat, n = item.split("=")
        counts[cat.strip()] = int(n)
    path = write_database(args.out, counts, args.seed or 0)
    logger.info("wrote %s", path)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .evaluate import evaluate, plot_histograms

    pred, ref = read_annotation(args.pred), read_annotation(args.ref)
    db = _load_db(args.db, args)
    try:
        report = evaluate(pred, ref, db)
    except NoOverlap as exc:
        logger.error("%s", exc)
        return EXIT_MANIFEST
    write_json(args.out / "deviation_report.json", report)
    plot_histograms(report, args.out / "deviations.png")
    return EXIT_OK


def cmd_render_overlays(args) -> int:
    from .overlays import render_overlays

    cfg = _config(args)
    scan = load_scan(args.scene)
    db = _load_db(args.db, args, "xyz"[scan.gravity_axis])
    render_overlays(scan, read_annotation(args.annotations), db, args.out, cfg.n_t)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cadalign", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("annotate", help="retrieve and align CAD models for a scan")
    p.add_argument("--scene", type=Path, required=True, help="scan manifest (JSON)")
    p.add_argument("--db", type=Path, required=True, help="CAD database manifest (JSON lines)")
    _common(p)
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("synth", help="render a synthetic scan with ground truth")
    p.add_argument("--spec", type=Path, required=True, help="synthetic scene spec (JSON)")
    p.add_argument("--db", type=Path, required=True, help="CAD database manifest (JSON lines)")
    _common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("synth-db", help="write a procedural CAD database")
    p.add_argument("--counts", default="chair=20,table=10,cabinet=5", help="e.g. chair=51,table=5")
    _common(p)
    p.set_defaults(func=cmd_synth_db)

    p = sub.add_parser("evaluate", help="deviation report between two annotation files")
    p.add_argument("--pred", type=Path, required=True, help="predicted annotations (JSON)")
    p.add_argument("--ref", type=Path, required=True, help="reference annotations (JSON)")
    p.add_argument("--db", type=Path, required=True, help="CAD database manifest (JSON lines)")
    _common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("render-overlays", help="export depth and silhouette images")
    p.add_argument("--scene", type=Path, required=True, help="scan manifest (JSON)")
    p.add_argument("--annotations", type=Path, required=True, help="annotations to overlay (JSON)")
    p.add_argument("--db", type=Path, required=True, help="CAD database manifest (JSON lines)")
    _common(p)
    p.set_defaults(func=cmd_render_overlays)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except CadAlignError as exc:
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
