"""``road-tubes`` command line: build, eval, synth, validate."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from typing import Any, Dict, Optional, Sequence

from . import __version__
from .composition import CompositionMode
from .detections import DetectionStreamError, TubeFileError, read_detection_stream, read_tubes, write_detection_stream, write_tubes
from .evaluation import (
    DEFAULT_BAND,
    DEFAULT_VIDEO_DELTAS,
    FRAME,
    VIDEO,
    EvalConfig,
    FrameCountMismatch,
    VocabMismatch,
    av_action_map,
    default_jobs,
    format_table,
    frame_map,
    parse_deltas,
    remap_composite,
    video_map,
)
from .linker import LinkerConfig, OutOfOrderFrame
from .pipeline import build_tubes
from .schema import (
    SCHEMA_VERSION,
    SchemaError,
    TaskKind,
    derive_composite_vocabs,
    load_composite_vocab,
    load_json_document,
    load_vocab,
    parse_annotations,
    serialize_annotations,
    validate_annotations,
)
from .synth import SynthConfig, SynthConfigError, stream_header, synth_generate, synth_perturb
from .trimming import TrimConfig

logger = logging.getLogger("roadtubes")

EXIT_OK = 0
EXIT_FINDINGS = 1
EXIT_USAGE = 2
EXIT_IO = 3

DATA_ERRORS = (
    OSError,
    SchemaError,
    DetectionStreamError,
    TubeFileError,
    VocabMismatch,
    FrameCountMismatch,
    OutOfOrderFrame,
    SynthConfigError,
)


class UsageError(Exception):
    pass


def _load_config(path: Optional[str]) -> Dict[str, Any]:
    if path is None:
        return {}
    with open(path, "rb") as fh:
        doc = load_json_document(fh.read())
    if not isinstance(doc, dict):
        raise SchemaError("config file must be a JSON object")
    version = doc.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise SchemaError(f"unsupported config version {version!r}")
    return doc


def _pick(flag: Any, section: Dict[str, Any], key: str, default: Any = None) -> Any:
    """Flag wins over config file, config file over default."""
    if flag is not None:
        return flag
    return section.get(key, default)


# ---------------------------------------------------------------------------
# build


def run_build(args: argparse.Namespace) -> int:
    conf = _load_config(args.config)
    lconf = conf.get("linker", {})
    tconf = conf.get("trim", {})
    try:
        link_cfg = LinkerConfig(
            lam=_pick(args.lam, lconf, "lambda", 0.5),
            k=_pick(args.k, lconf, "k", 4),
            patience=_pick(args.patience, lconf, "patience", 5),
            min_score=_pick(args.min_score, lconf, "min_score", 0.025),
            nms_iou=_pick(args.nms_iou, lconf, "nms_iou", 0.45),
            min_len=_pick(args.min_len, lconf, "min_len", 0),
        )
        trim_cfg = TrimConfig(
            theta=_pick(args.theta, tconf, "theta", 0.5),
            alpha=_pick(args.alpha, tconf, "alpha", 1.0),
            enabled=bool(_pick(args.trim, tconf, "enabled", False)),
        )
        mode = CompositionMode(_pick(args.compose, conf, "compose", "product"))
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    dets = _pick(args.dets, conf, "dets")
    out = _pick(args.out, conf, "out")
    if dets is None or out is None:
        raise UsageError("build needs --dets and --out")
    vocab_spec = _pick(args.vocab, conf, "vocab", "road-v1")
    vocab, cv = load_vocab(vocab_spec)
    composite = _pick(args.composite, conf, "composite")
    if composite is not None:
        cv = load_composite_vocab(composite)

    effective = {
        "version": SCHEMA_VERSION,
        "dets": dets,
        "vocab": vocab_spec,
        "composite": composite,
        "compose": mode.value,
        "linker": link_cfg.to_json(),
        "trim": trim_cfg.to_json(),
    }
    print(f"linker: lambda={link_cfg.lam:g} k={link_cfg.k} patience={link_cfg.patience} "
          f"min_score={link_cfg.min_score:g} nms_iou={link_cfg.nms_iou:g} compose={mode.value}")
    start = time.perf_counter()
    tubes = build_tubes(read_detection_stream(dets, vocab, cv), vocab, link_cfg, cv, mode, trim_cfg)
    with open(out, "wb") as fh:
        write_tubes(tubes, fh, effective, vocab, cv)
    elapsed = time.perf_counter() - start
    n_tubes = len({t.uid for t in tubes})
    print(f"built {n_tubes} tubes ({len(tubes)} labelled) in {elapsed:.3f}s -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def run_eval(args: argparse.Namespace) -> int:
    conf = _load_config(args.config)
    gt_path = _pick(args.gt, conf, "gt")
    pred_path = _pick(args.pred, conf, "pred")
    task_name = _pick(args.task, conf, "task")
    if gt_path is None or pred_path is None or task_name is None:
        raise UsageError("eval needs --gt, --pred and --task")
    try:
        task = TaskKind(task_name)
        level = _pick(args.level, conf, "level", FRAME)
        mode = CompositionMode(_pick(args.compose, conf, "compose", "product"))
        delta_text = _pick(args.delta, conf, "delta")
        if delta_text is None:
            deltas, band = ((0.5,), None) if level == FRAME else (DEFAULT_VIDEO_DELTAS, DEFAULT_BAND)
        else:
            deltas, band = parse_deltas(str(delta_text))
        jobs = int(_pick(args.jobs, conf, "jobs", default_jobs()))
        cfg = EvalConfig(task=task, level=level, deltas=deltas, band=band, jobs=jobs)
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    with open(gt_path, "rb") as fh:
        gt = parse_annotations(fh.read())
    composite = _pick(args.composite, conf, "composite")
    cv = load_composite_vocab(composite) if composite else derive_composite_vocabs(gt)

    if task is TaskKind.AV:
        frames = read_detection_stream(pred_path, gt.vocab)
        scores = {f.t: f.av_action for f in frames if f.av_action is not None}
        reports = [av_action_map(gt, scores)]
    elif level == FRAME:
        reports = frame_map(gt, read_detection_stream(pred_path, gt.vocab, cv), cfg, cv, mode)
    else:
        tube_file = read_tubes(pred_path)
        sizes = tube_file.vocab_sizes
        if sizes is not None and sizes != gt.vocab.sizes():
            raise VocabMismatch(f"tube file vocabulary sizes {sizes} differ from ground truth {gt.vocab.sizes()}")
        tubes = tube_file.tubes
        if tube_file.composite_vocab is not None and tube_file.composite_vocab != cv:
            tubes = remap_composite(tubes, tube_file.composite_vocab, cv)
        reports = video_map(gt, tubes, cfg, cv)

    for report in reports:
        print(format_table(report))
        print()
    out = _pick(args.out, conf, "out")
    if out is not None:
        doc = {
            "version": SCHEMA_VERSION,
            "config": {"gt": gt_path, "pred": pred_path, "compose": mode.value, **cfg.to_json()},
            "reports": [r.to_json() for r in reports],
        }
        with open(out, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1)
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth / validate


def run_synth(args: argparse.Namespace) -> int:
    conf = _load_config(args.config)
    if args.seed is not None:
        conf["seed"] = args.seed
    cfg = SynthConfig.from_json(conf)
    ann, clean = synth_generate(cfg)
    cv = derive_composite_vocabs(ann) if cfg.joint else None
    noisy = synth_perturb(clean, cfg.noise, cfg.seed, cfg.width, cfg.height, cfg.vocab, cv)
    os.makedirs(args.out_dir, exist_ok=True)
    ann_path = os.path.join(args.out_dir, "annotations.json")
    det_path = os.path.join(args.out_dir, "detections.jsonl")
    with open(ann_path, "wb") as fh:
        fh.write(serialize_annotations(ann))
    with open(det_path, "w", encoding="utf-8") as fh:
        write_detection_stream(noisy, fh, stream_header(cfg))
    print(f"wrote {len(ann.tubes)} tubes over {cfg.num_frames} frames -> {ann_path}, {det_path}")
    return EXIT_OK


def run_validate(args: argparse.Namespace) -> int:
    with open(args.ann, "rb") as fh:
        ann = parse_annotations(fh.read())
    report = validate_annotations(ann)
    for line in report.lines():
        print(line)
    print(f"{len(report.errors)} errors, {len(report.warnings)} warnings")
    return EXIT_OK if report.ok else EXIT_FINDINGS


# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="road-tubes", description="Online road-event tube building and evaluation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build", help="link a detection stream into labelled tubes")
    b.add_argument("--config")
    b.add_argument("--dets")
    b.add_argument("--vocab", help="'road-v1', a vocabulary JSON, or an annotation file")
    b.add_argument("--composite", help="annotation file or composite vocabulary JSON")
    b.add_argument("--lambda", dest="lam", type=float)
    b.add_argument("--k", type=int)
    b.add_argument("--patience", type=int)
    b.add_argument("--min-score", type=float)
    b.add_argument("--nms-iou", type=float)
    b.add_argument("--min-len", type=int)
    b.add_argument("--trim", action="store_true", default=None)
    b.add_argument("--theta", type=float)
    b.add_argument("--alpha", type=float)
    b.add_argument("--compose", choices=[m.value for m in CompositionMode])
    b.add_argument("--out")
    b.set_defaults(func=run_build)

    e = sub.add_parser("eval", help="frame/video mAP against ground truth")
    e.add_argument("--config")
    e.add_argument("--gt")
    e.add_argument("--pred", help="tube file (video level) or detection JSONL (frame level, av)")
    e.add_argument("--task", choices=[t.value for t in TaskKind])
    e.add_argument("--level", choices=[FRAME, VIDEO])
    e.add_argument("--delta", help="comma list of thresholds, bands as lo:hi, e.g. 0.2,0.5,0.5:0.95")
    e.add_argument("--compose", choices=[m.value for m in CompositionMode])
    e.add_argument("--composite")
    e.add_argument("--jobs", type=int)
    e.add_argument("--out", help="write the report JSON here")
    e.set_defaults(func=run_eval)

    s = sub.add_parser("synth", help="generate a synthetic annotation + detection pair")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=run_synth)

    v = sub.add_parser("validate", help="check an annotation file")
    v.add_argument("--ann", required=True)
    v.set_defaults(func=run_validate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"road-tubes: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"road-tubes: error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
