"""Frame-mAP, video-mAP and AV-action frame mAP."""

from __future__ import annotations

import math
import os
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .composition import CompositionMode, compose_scores
from .detections import FrameDetections, LabeledTube
from .geometry import BBox, TubeGeometry, box_iou, tube_iou
from .schema import AnnotationSet, CompositeVocab, TaskKind, extract_gt_tubes, task_class_count, task_class_names

FRAME = "frame"
VIDEO = "video"

MATCHED_FIRST = "matched_first"
GROUPED = "grouped"

BAND_STEP = 0.05
BAND_PRESETS = {"0.5:0.95": (0.5, 0.95), "0.5:0.9": (0.5, 0.9)}
DEFAULT_VIDEO_DELTAS = (0.2, 0.5, 0.75)
DEFAULT_BAND = "0.5:0.95"


class VocabMismatch(ValueError):
    pass


class FrameCountMismatch(ValueError):
    pass


def band_thresholds(lo: float, hi: float, step: float = BAND_STEP) -> Tuple[float, ...]:
    n = int(round((hi - lo) / step))
    return tuple(round(lo + i * step, 10) for i in range(n + 1))


def parse_deltas(text: str) -> Tuple[Tuple[float, ...], Optional[str]]:
    """``"0.2,0.5,0.5:0.95"`` -> ``((0.2, 0.5), "0.5:0.95")``."""
    deltas, band = [], None
    for part in (p.strip() for p in text.split(",")):
        if not part:
            continue
        if ":" in part:
            lo, hi = (float(x) for x in part.split(":"))
            if not 0 < lo <= hi <= 1:
                raise ValueError(f"bad delta band {part!r}")
            band = f"{lo:g}:{hi:g}"
        else:
            d = float(part)
            if not 0 < d <= 1:
                raise ValueError(f"delta must be in (0, 1], got {d}")
            deltas.append(d)
    return tuple(deltas), band


def _band_range(band: str) -> Tuple[float, float]:
    if band in BAND_PRESETS:
        return BAND_PRESETS[band]
    lo, hi = (float(x) for x in band.split(":"))
    return lo, hi


@dataclass(frozen=True)
class EvalConfig:
    task: TaskKind
    level: str = FRAME
    deltas: Tuple[float, ...] = (0.5,)
    band: Optional[str] = None
    jobs: int = 1

    def __post_init__(self) -> None:
        if self.level not in (FRAME, VIDEO):
            raise ValueError(f"level must be frame or video, got {self.level!r}")
        for d in self.deltas:
            if not 0 < d <= 1:
                raise ValueError(f"delta must be in (0, 1], got {d}")

    @classmethod
    def video_default(cls, task: TaskKind, jobs: int = 1) -> "EvalConfig":
        return cls(task, VIDEO, DEFAULT_VIDEO_DELTAS, DEFAULT_BAND, jobs)

    def to_json(self) -> Dict[str, Any]:
        return {"task": TaskKind(self.task).value, "level": self.level, "deltas": list(self.deltas), "band": self.band}


@dataclass
class ClassResult:
    class_id: int
    name: str
    ap: float
    gt_count: int
    pred_count: int


@dataclass
class EvalReport:
    task: TaskKind
    level: str
    delta: str
    classes: List[ClassResult]
    config: Dict[str, Any] = field(default_factory=dict)

    @property
    def mean_ap(self) -> float:
        aps = [c.ap for c in self.classes if c.gt_count > 0]
        return float(np.mean(aps)) if aps else math.nan

    def ap_of(self, class_id: int) -> float:
        return next(c.ap for c in self.classes if c.class_id == class_id)

    def to_json(self) -> Dict[str, Any]:
        m = self.mean_ap
        return {
            "task": self.task.value,
            "level": self.level,
            "delta": self.delta,
            "mean_ap": None if math.isnan(m) else m,
            "classes": [
                {
                    "class_id": c.class_id,
                    "name": c.name,
                    "ap": c.ap if c.gt_count > 0 else None,
                    "gt_count": c.gt_count,
                    "pred_count": c.pred_count,
                }
                for c in self.classes
            ],
            "config": self.config,
        }


def format_table(report: EvalReport) -> str:
    width = max([len("class")] + [len(c.name) for c in report.classes])
    lines = [
        f"task={report.task.value} level={report.level} delta={report.delta}",
        f"{'class':<{width}}  {'GT':>7}  {'pred':>7}  {'AP':>6}",
    ]
    for c in report.classes:
        ap = f"{c.ap:6.3f}" if c.gt_count > 0 else f"{'-':>6}"
        lines.append(f"{c.name:<{width}}  {c.gt_count:>7d}  {c.pred_count:>7d}  {ap}")
    m = report.mean_ap
    lines.append(f"{'mAP':<{width}}  {'':>7}  {'':>7}  {'-' if math.isnan(m) else format(m, '6.3f'):>6}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# AP


def average_precision(preds: Sequence[Tuple[float, bool]], gt_count: int, ties: str = MATCHED_FIRST) -> float:
    """All-point interpolated AP from already-matched predictions.

    ``ties`` controls equal scores: ``matched_first`` ranks true positives
    ahead of false positives and otherwise keeps input order; ``grouped``
    puts a whole tie group on the PR curve as a single point.
    """
    if gt_count <= 0:
        raise ValueError("AP needs at least one ground-truth instance")
    if not preds:
        return 0.0
    order = sorted(range(len(preds)), key=lambda i: (-preds[i][0], not preds[i][1], i))
    scores = np.array([preds[i][0] for i in order], dtype=float)
    hits = np.array([bool(preds[i][1]) for i in order], dtype=float)
    tp = np.cumsum(hits)
    fp = np.cumsum(1.0 - hits)
    if ties == GROUPED:
        # keep only the last rank of every run of equal scores
        last = np.append(scores[1:] != scores[:-1], True)
        tp, fp = tp[last], fp[last]
    elif ties != MATCHED_FIRST:
        raise ValueError(f"unknown tie rule {ties!r}")
    recall = tp / gt_count
    precision = tp / (tp + fp)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def greedy_match(order: Sequence[int], overlaps: np.ndarray, delta: float) -> List[bool]:
    """Match predictions (visited in ``order``) to ground truth.

    ``overlaps[p, g]`` is the IoU of prediction ``p`` and GT ``g``; a
    prediction takes the unmatched GT of highest IoU ``>= delta`` (lowest
    index on ties). Returns the hit flag per prediction index.
    """
    hit = [False] * overlaps.shape[0]
    if overlaps.shape[1] == 0:
        return hit
    free = np.ones(overlaps.shape[1], dtype=bool)
    for p in order:
        cand = np.where(free & (overlaps[p] >= delta), overlaps[p], -1.0)
        g = int(np.argmax(cand))
        if cand[g] >= 0.0:
            free[g] = False
            hit[p] = True
    return hit


def _run(fn: Callable, items: Sequence, jobs: int) -> List:
    if jobs <= 1 or len(items) < 2:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, items))


def default_jobs() -> int:
    env = os.environ.get("ROAD_TUBES_JOBS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# frame level


def frame_gt_boxes(
    gt: AnnotationSet, task: TaskKind, cv: Optional[CompositeVocab] = None
) -> Dict[int, Dict[int, List[BBox]]]:
    """class -> frame -> GT boxes of that class."""
    index: Dict[Tuple[int, ...], int] = {}
    if task is TaskKind.DUPLEX:
        index = {c: i for i, c in enumerate(cv.duplex)}
    elif task is TaskKind.EVENT:
        index = {c: i for i, c in enumerate(cv.event)}
    out: Dict[int, Dict[int, List[BBox]]] = defaultdict(lambda: defaultdict(list))
    for tube in gt.tubes:
        for f in tube.frames:
            if task is TaskKind.AGENT:
                classes = {tube.agent_id}
            elif task is TaskKind.ACTION:
                classes = set(f.action_ids)
            elif task is TaskKind.LOC:
                classes = set(f.loc_ids)
            elif task is TaskKind.DUPLEX:
                classes = {index[(tube.agent_id, c)] for c in f.action_ids if (tube.agent_id, c) in index}
            else:
                classes = {
                    index[(tube.agent_id, c, l)]
                    for c in f.action_ids
                    for l in f.loc_ids
                    if (tube.agent_id, c, l) in index
                }
            for c in classes:
                out[c][f.t].append(f.box)
    return out


def _frame_class_ap(args) -> Tuple[float, int, int]:
    scores, frame_ids, boxes, gt_by_frame, delta = args
    n = len(scores)
    gt_count = sum(len(v) for v in gt_by_frame.values())
    # canonical order: score, then frame, then coordinates
    order = sorted(range(n), key=lambda i: (-scores[i], frame_ids[i], tuple(boxes[i])))
    hit = [False] * n
    used: Dict[int, List[bool]] = {t: [False] * len(v) for t, v in gt_by_frame.items()}
    for i in order:
        gts = gt_by_frame.get(frame_ids[i])
        if not gts:
            continue
        box = BBox(*boxes[i])
        best, best_iou = -1, -1.0
        for g, gbox in enumerate(gts):
            if used[frame_ids[i]][g]:
                continue
            iou = box_iou(box, gbox)
            if iou >= delta and iou > best_iou:
                best, best_iou = g, iou
        if best >= 0:
            used[frame_ids[i]][best] = True
            hit[i] = True
    if gt_count == 0:
        return math.nan, 0, n
    return average_precision([(scores[i], hit[i]) for i in order], gt_count), gt_count, n


def _task_scores(det, task: TaskKind, cv: Optional[CompositeVocab], mode: CompositionMode) -> np.ndarray:
    if task in (TaskKind.DUPLEX, TaskKind.EVENT):
        duplex, event = compose_scores(det, cv, mode)
        return duplex if task is TaskKind.DUPLEX else event
    return np.asarray(det.scores(task), dtype=float)


def frame_map(
    gt: AnnotationSet,
    frames: Iterable[FrameDetections],
    cfg: EvalConfig,
    cv: Optional[CompositeVocab] = None,
    mode: CompositionMode = CompositionMode.PRODUCT,
) -> List[EvalReport]:
    """Frame-level mAP, one report per configured threshold."""
    task = TaskKind(cfg.task)
    if task is TaskKind.AV:
        raise ValueError("use av_action_map for AV actions")
    n_classes = task_class_count(task, gt.vocab, cv)
    names = task_class_names(task, gt.vocab, cv)

    frame_ids: List[int] = []
    boxes: List[List[float]] = []
    rows: List[np.ndarray] = []
    for frame in frames:
        for det in frame.detections:
            vec = _task_scores(det, task, cv, mode)
            if len(vec) != n_classes:
                raise VocabMismatch(
                    f"t={frame.t}: {task.value} scores have length {len(vec)}, vocabulary has {n_classes}"
                )
            frame_ids.append(frame.t)
            boxes.append(det.box.to_list())
            rows.append(vec)
    score_mat = np.vstack(rows) if rows else np.zeros((0, n_classes))

    gt_boxes = frame_gt_boxes(gt, task, cv)
    reports = []
    for delta in _all_deltas(cfg):
        jobs = [
            (score_mat[:, c].tolist(), frame_ids, boxes, dict(gt_boxes.get(c, {})), delta)
            for c in range(n_classes)
        ]
        results = _run(_frame_class_ap, jobs, cfg.jobs)
        reports.append(_report(task, FRAME, f"{delta:g}", names, results, cfg))
    return _with_band(reports, cfg, task, FRAME, names)


def _all_deltas(cfg: EvalConfig) -> Tuple[float, ...]:
    deltas = list(cfg.deltas)
    if cfg.band is not None:
        deltas += [d for d in band_thresholds(*_band_range(cfg.band)) if d not in deltas]
    return tuple(deltas)


def _report(task, level, delta, names, results, cfg: EvalConfig) -> EvalReport:
    classes = [
        ClassResult(class_id=c, name=names[c], ap=ap, gt_count=g, pred_count=p)
        for c, (ap, g, p) in enumerate(results)
    ]
    return EvalReport(task, level, delta, classes, cfg.to_json())


def _with_band(reports: List[EvalReport], cfg: EvalConfig, task, level, names) -> List[EvalReport]:
    """Keep the explicitly requested thresholds; fold band thresholds
    into one averaged report."""
    if cfg.band is None:
        return reports
    by_delta = {r.delta: r for r in reports}
    band = [by_delta[f"{d:g}"] for d in band_thresholds(*_band_range(cfg.band))]
    classes = []
    for c, name in enumerate(names):
        first = band[0].classes[c]
        ap = float(np.mean([r.classes[c].ap for r in band])) if first.gt_count > 0 else math.nan
        classes.append(ClassResult(c, name, ap, first.gt_count, first.pred_count))
    kept = [by_delta[f"{d:g}"] for d in cfg.deltas]
    return kept + [EvalReport(task, level, cfg.band, classes, cfg.to_json())]


# ---------------------------------------------------------------------------
# video level


def remap_composite(
    tubes: Sequence[LabeledTube], src: CompositeVocab, dst: CompositeVocab
) -> List[LabeledTube]:
    """Re-index duplex/event class ids from ``src`` to ``dst`` ordering;
    composite classes unknown to ``dst`` are dropped."""
    maps = {
        TaskKind.DUPLEX: {i: dst.duplex.index(c) for i, c in enumerate(src.duplex) if c in dst.duplex},
        TaskKind.EVENT: {i: dst.event.index(c) for i, c in enumerate(src.event) if c in dst.event},
    }
    out = []
    for tube in tubes:
        if tube.task in maps:
            new = maps[tube.task].get(tube.class_id)
            if new is None:
                continue
            tube = LabeledTube(tube.uid, tube.task, new, tube.score, tube.frames, tube.interpolated)
        out.append(tube)
    return out


def _video_class_ap(args) -> List[Tuple[float, int, int]]:
    preds, gts, deltas = args
    gt_count = len(gts)
    order = sorted(range(len(preds)), key=lambda i: (-preds[i][0], preds[i][1], preds[i][2].start))
    overlaps = np.zeros((len(preds), gt_count))
    for i, (_, _, geom) in enumerate(preds):
        for g, ggeom in enumerate(gts):
            overlaps[i, g] = tube_iou(geom, ggeom)
    out = []
    for delta in deltas:
        if gt_count == 0:
            out.append((math.nan, 0, len(preds)))
            continue
        hit = greedy_match(order, overlaps, delta)
        out.append((average_precision([(preds[i][0], hit[i]) for i in order], gt_count), gt_count, len(preds)))
    return out


def video_map(
    gt: AnnotationSet,
    tubes: Sequence[LabeledTube],
    cfg: EvalConfig,
    cv: Optional[CompositeVocab] = None,
) -> List[EvalReport]:
    """Video-level mAP: one report per threshold and, if configured, the
    band average."""
    task = TaskKind(cfg.task)
    if task is TaskKind.AV:
        raise ValueError("use av_action_map for AV actions")
    n_classes = task_class_count(task, gt.vocab, cv)
    names = task_class_names(task, gt.vocab, cv)

    preds: Dict[int, list] = defaultdict(list)
    for tube in tubes:
        if tube.task is not task:
            continue
        if not 0 <= tube.class_id < n_classes:
            raise VocabMismatch(f"tube {tube.uid}: {task.value} class {tube.class_id} outside vocabulary")
        preds[tube.class_id].append((tube.score, tube.uid, TubeGeometry(tube.frames)))
    gts: Dict[int, List[TubeGeometry]] = defaultdict(list)
    for class_id, geom in extract_gt_tubes(gt, task, cv):
        gts[class_id].append(geom)

    deltas = _all_deltas(cfg)
    per_class = _run(_video_class_ap, [(preds[c], gts[c], deltas) for c in range(n_classes)], cfg.jobs)
    reports = [
        _report(task, VIDEO, f"{d:g}", names, [per_class[c][j] for c in range(n_classes)], cfg)
        for j, d in enumerate(deltas)
    ]
    return _with_band(reports, cfg, task, VIDEO, names)


# ---------------------------------------------------------------------------
# AV actions


def av_action_map(
    gt: AnnotationSet,
    frame_scores: Union[Mapping[int, Sequence[float]], Iterable[Tuple[int, Sequence[float]]]],
) -> EvalReport:
    """Per-class AP of frame-wise AV-action scores.

    Positives are frames whose AV label is the class; tied scores enter
    the PR curve as one group so that uninformative scores earn exactly
    the class prevalence.
    """
    scores = dict(frame_scores.items() if isinstance(frame_scores, Mapping) else frame_scores)
    labels = gt.av_label_at()
    if set(scores) != set(labels):
        missing = sorted(set(labels) - set(scores))[:5]
        extra = sorted(set(scores) - set(labels))[:5]
        raise FrameCountMismatch(
            f"{len(scores)} scored frames vs {len(labels)} labelled (missing {missing}, extra {extra})"
        )
    n_classes = len(gt.vocab.av_action)
    frames = sorted(labels)
    mat = np.array([scores[t] for t in frames], dtype=float).reshape(len(frames), -1)
    if mat.shape[1] != n_classes:
        raise VocabMismatch(f"AV scores have length {mat.shape[1]}, vocabulary has {n_classes}")
    classes = []
    for c in range(n_classes):
        positives = [labels[t] == c for t in frames]
        n_pos = sum(positives)
        ap = average_precision(list(zip(mat[:, c].tolist(), positives)), n_pos, GROUPED) if n_pos else math.nan
        classes.append(ClassResult(c, gt.vocab.av_action[c], ap, n_pos, len(frames)))
    return EvalReport(TaskKind.AV, FRAME, "-", classes, {"task": TaskKind.AV.value, "level": FRAME})
