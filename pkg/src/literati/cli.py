"""Command-line entry point exposing the pipeline.

Subcommands: parse, split, mix, decode, tune, eval, gradcheck, demo.
Exit codes: 0 success, 1 validation error, 2 I/O error. Logs go to
standard error; every subcommand is deterministic given its seed, and the
LITERATI_THREADS environment variable caps per-image worker counts.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import FORMAT_VERSIONS, __version__
from . import annotation_store as store
from . import eval_harness as harness
from . import map_decoder as decoder
from . import numeric_heads as heads
from . import report_parser as parser_mod
from . import synthetic
from . import tpe_tuner as tpe

logger = logging.getLogger("literati")


class UsageError(Exception):
    pass


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _version_string() -> str:
    formats = " ".join(f"{k}={v}" for k, v in sorted(FORMAT_VERSIONS.items()))
    return f"literati {__version__} (formats: {formats})"


def _worker_count() -> int:
    env = os.environ.get("LITERATI_THREADS")
    if env:
        n = int(env)
        if n < 1:
            raise ValueError("LITERATI_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


def _map_over(items, fn):
    workers = _worker_count()
    if workers == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def build_parser() -> argparse.ArgumentParser:
    p = _ArgumentParser(prog="literati", description=__doc__)
    p.add_argument("--version", action="version", version=_version_string())
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("parse", parents=[], help="reports JSONL -> expressions JSONL")
    sp.add_argument("--reports", required=True)
    sp.add_argument("--lexicon", default=None, help="lexicon JSON (default: bundled)")
    sp.add_argument("--level", required=True, choices=parser_mod.LEVELS)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_parse)

    sp = sub.add_parser("split", help="deterministic train/val/test split")
    sp.add_argument("--ids", required=True, help="text file, one id per line")
    sp.add_argument("--ratios", default="0.8,0.1,0.1")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_split)

    sp = sub.add_parser("mix", help="mix negatives into a positive id list")
    sp.add_argument("--pos", required=True)
    sp.add_argument("--neg", required=True)
    sp.add_argument("--ratio", type=float, default=1.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default=None, help="default: stdout")
    sp.set_defaults(func=cmd_mix)

    sp = sub.add_parser("decode", help="logit maps -> detections.json")
    sp.add_argument("--maps", required=True, help="directory of .npy maps + sidecars")
    sp.add_argument("--d", type=int, default=decoder.DecodeParams.d)
    sp.add_argument("--tau", type=float, default=decoder.DecodeParams.tau)
    sp.add_argument("--alpha", type=float, default=decoder.DecodeParams.alpha)
    sp.add_argument("--space", choices=("map", "net416"), default="map",
                    help="coordinate space of the emitted boxes")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("tune", help="TPE search over decode parameters")
    sp.add_argument("--maps", required=True)
    sp.add_argument("--ann", required=True, help="COCO JSON with ground truth")
    sp.add_argument("--space", default=None, help="space JSON (default: built-in d/tau/alpha)")
    sp.add_argument("--budget", type=int, default=40)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--iou", type=float, default=0.1)
    sp.add_argument("--mode", choices=harness.MATCH_MODES, default="top1")
    sp.add_argument("--out", required=True, help="trial log JSON")
    sp.set_defaults(func=cmd_tune)

    sp = sub.add_parser("eval", help="score detections against ground truth")
    sp.add_argument("--detections", required=True)
    sp.add_argument("--ann", required=True)
    sp.add_argument("--mode", choices=harness.MATCH_MODES, default="top1")
    sp.add_argument("--format", choices=("csv", "markdown"), default="csv")
    sp.add_argument("--method", default="detections", help="row label in the table")
    sp.add_argument("--out", required=True)
    sp.add_argument("--diagnostics", default=None, help="per-image match dump JSON")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="verify analytic gradients")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--h", type=float, default=1e-6)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("demo", help="synthetic end-to-end run")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n-images", type=int, default=50)
    sp.add_argument("--out", default="literati_demo")
    sp.set_defaults(func=cmd_demo)
    return p


def cmd_parse(args) -> int:
    lexicon = (parser_mod.Lexicon.from_file(args.lexicon)
               if args.lexicon else parser_mod.default_lexicon())
    reports = parser_mod.read_reports_jsonl(args.reports)
    expressions = []
    for report in reports:
        expressions.extend(parser_mod.parse_report(report, lexicon, args.level))
    parser_mod.write_expressions_jsonl(args.out, expressions)
    logger.info("parsed %d reports into %d expressions", len(reports), len(expressions))
    return 0


def cmd_split(args) -> int:
    ids = store.read_id_file(args.ids)
    ratios = tuple(float(r) for r in args.ratios.split(","))
    split = store.make_split(ids, ratios, args.seed)
    Path(args.out).write_text(json.dumps(split.to_dict(), indent=2) + "\n", encoding="utf-8")
    logger.info("split %d ids into %d/%d/%d", len(ids),
                len(split.train_ids), len(split.val_ids), len(split.test_ids))
    return 0


def cmd_mix(args) -> int:
    positives = store.read_id_file(args.pos)
    pool = store.read_id_file(args.neg)
    mixed = store.mix_negatives(positives, pool, args.ratio, args.seed)
    text = "\n".join(mixed) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    logger.info("mixed %d positives with %d negatives", len(positives),
                len(mixed) - len(positives))
    return 0


def cmd_decode(args) -> int:
    maps = decoder.load_maps_dir(args.maps)
    params = decoder.DecodeParams(d=args.d, tau=args.tau, alpha=args.alpha)

    def run_one(m):
        dets = decoder.decode(m.logits, params)
        if args.space == "net416":
            dets = [decoder.detection_to_net416(det, m.meta) for det in dets]
        return m.meta.image_id, dets

    results = dict(_map_over(maps, run_one))
    classes = {m.meta.image_id: m.meta.classes for m in maps}
    Path(args.out).write_text(decoder.detections_to_json(results, classes) + "\n",
                              encoding="utf-8")
    n = sum(len(v) for v in results.values())
    logger.info("decoded %d maps -> %d detections", len(maps), n)
    return 0


def _gts_net416(ann_path) -> dict[str, list[store.Box]]:
    images, annotations = store.load_coco(ann_path)
    dims = {im.image_id: (im.width, im.height) for im in images}
    gts: dict[str, list[store.Box]] = {}
    for ann in annotations:
        for box in ann.boxes:
            scaled = store.rescale_box(box, dims[ann.image_id],
                                       (store.NET_SIZE, store.NET_SIZE), to_space="net416")
            gts.setdefault(ann.image_id, []).append(scaled)
    return gts


def cmd_tune(args) -> int:
    maps = decoder.load_maps_dir(args.maps)
    gts = _gts_net416(args.ann)
    space = tpe.SearchSpace.from_file(args.space) if args.space else None
    cfg = tpe.TpeConfig(seed=args.seed)
    best_params, best, history = tpe.tune_decoder(
        maps, gts, space=space, budget=args.budget, cfg=cfg,
        iou_threshold=args.iou, mode=args.mode,
    )
    tpe.write_trials(args.out, history)
    summary = {
        "best_params": {"d": best_params.d, "tau": best_params.tau,
                        "alpha": best_params.alpha},
        "objective": best.objective,
        "iou_threshold": args.iou,
        "trials": len(history),
    }
    sys.stdout.write(json.dumps(summary, indent=2) + "\n")
    logger.info("best accuracy %.3f at d=%d tau=%.3f alpha=%.3f", best.objective,
                best_params.d, best_params.tau, best_params.alpha)
    return 0


def cmd_eval(args) -> int:
    per_image = decoder.detections_from_json(args.detections)
    images, annotations = store.load_coco(args.ann)
    dims = {im.image_id: (im.width, im.height) for im in images}

    det_spaces = {d.box.space for dets in per_image.values() for d in dets}
    if len(det_spaces) > 1:
        raise ValueError(f"detections mix coordinate spaces: {sorted(det_spaces)}")
    det_space = det_spaces.pop() if det_spaces else "native"

    gts: dict[str, list[store.Box]] = {im.image_id: [] for im in images}
    for ann in annotations:
        for box in ann.boxes:
            if det_space == "net416":
                box = store.rescale_box(box, dims[ann.image_id],
                                        (store.NET_SIZE, store.NET_SIZE),
                                        to_space="net416")
            gts[ann.image_id].append(box)

    results = [
        harness.match_image(per_image.get(image_id, []), gt_boxes,
                            harness.IOU_THRESHOLDS, mode=args.mode, image_id=image_id)
        for image_id, gt_boxes in sorted(gts.items())
    ]
    table = harness.accuracy_table(results, method=args.method)
    rendered = harness.render_table(table, format=args.format)
    Path(args.out).write_text(rendered, encoding="utf-8")
    sys.stdout.write(rendered)
    if args.diagnostics:
        Path(args.diagnostics).write_text(harness.diagnostics_json(results) + "\n",
                                          encoding="utf-8")
    excluded = sum(1 for r in results if r.excluded)
    logger.info("evaluated %d images (%d excluded, mode=%s)",
                len(results) - excluded, excluded, args.mode)
    return 0


def cmd_gradcheck(args) -> int:
    import numpy as np

    rng = np.random.default_rng(args.seed)
    rows = []
    failed = False
    for op in heads.GRAD_CHECK_OPS:
        inputs = heads.make_grad_check_inputs(op, rng)
        err = heads.grad_check(op, inputs, h=args.h, projection_seed=args.seed)
        bound = heads.GRAD_CHECK_BOUNDS[op]
        ok = err < bound
        failed |= not ok
        rows.append((op, err, bound, "ok" if ok else "FAIL"))
    width = max(len(op) for op, *_ in rows)
    sys.stdout.write(f"{'op':<{width}}  {'max_rel_err':>12}  {'bound':>8}  status\n")
    for op, err, bound, status in rows:
        sys.stdout.write(f"{op:<{width}}  {err:>12.3e}  {bound:>8.0e}  {status}\n")
    return 1 if failed else 0


def cmd_demo(args) -> int:
    out_dir = Path(args.out)
    maps_dir = out_dir / "maps"
    planted = synthetic.make_planted_maps(args.n_images, args.seed)
    for p in planted:
        decoder.save_map(maps_dir, p.meta, p.logits)
    ann_path = out_dir / "annotations.json"
    ann_path.write_text(json.dumps(synthetic.planted_coco(planted), indent=2) + "\n",
                        encoding="utf-8")

    params = decoder.DecodeParams()

    def run_one(p):
        dets = [decoder.detection_to_net416(det, p.meta)
                for det in decoder.decode(p.logits, params)]
        return p.meta.image_id, dets

    results = dict(_map_over(planted, run_one))
    classes = {p.meta.image_id: p.meta.classes for p in planted}
    (out_dir / "detections.json").write_text(
        decoder.detections_to_json(results, classes) + "\n", encoding="utf-8")

    gts = _gts_net416(ann_path)
    matches = [
        harness.match_image(results[p.meta.image_id], gts[p.meta.image_id],
                            harness.IOU_THRESHOLDS, mode="top1",
                            image_id=p.meta.image_id)
        for p in planted
    ]
    table = harness.accuracy_table(matches, method=f"synthetic demo (seed {args.seed})")
    rendered = harness.render_table(table, format="csv")
    (out_dir / "table.csv").write_text(rendered, encoding="utf-8")
    sys.stdout.write(rendered)
    logger.info("demo wrote maps, detections and table under %s", out_dir)
    return 0


def run(argv=None) -> int:
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        sys.stderr.write(f"literati: error: {e}\n")
        return 1
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    try:
        return args.func(args)
    except OSError as e:
        logger.error("I/O error: %s", e)
        return 2
    except (ValueError, RuntimeError) as e:
        logger.error("%s", e)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
