"""Online agentness-based tube linking.

Tubes are built once per stream on the agentness score, then labelled
per task with the classes of highest mean score over the tube.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .composition import CompositionMode, compose_scores
from .detections import Detection, FrameDetections, VectorLengthMismatch
from .geometry import BBox, box_iou, nms_agentness
from .schema import CompositeVocab, LabelVocab, TaskKind

logger = logging.getLogger(__name__)

ACTIVE = "active"
TERMINATED = "terminated"


class OutOfOrderFrame(ValueError):
    pass


@dataclass(frozen=True)
class LinkerConfig:
    lam: float = 0.5
    k: int = 4
    patience: int = 5
    min_score: float = 0.025
    nms_iou: float = 0.45
    min_len: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.lam <= 1.0:
            raise ValueError(f"lambda must be in (0, 1], got {self.lam}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.patience < 0:
            raise ValueError(f"patience must be >= 0, got {self.patience}")
        if not 0.0 <= self.min_score < 1.0:
            raise ValueError(f"min_score must be in [0, 1), got {self.min_score}")
        if not 0.0 < self.nms_iou <= 1.0:
            raise ValueError(f"nms_iou must be in (0, 1], got {self.nms_iou}")
        if self.min_len < 0:
            raise ValueError(f"min_len must be >= 0, got {self.min_len}")

    def to_json(self) -> Dict[str, Any]:
        return {
            "lambda": self.lam,
            "k": self.k,
            "patience": self.patience,
            "min_score": self.min_score,
            "nms_iou": self.nms_iou,
            "min_len": self.min_len,
        }

    @classmethod
    def from_json(cls, obj: Dict[str, Any]) -> "LinkerConfig":
        keys = {"lambda": "lam", "k": "k", "patience": "patience", "min_score": "min_score",
                "nms_iou": "nms_iou", "min_len": "min_len"}
        return cls(**{attr: obj[key] for key, attr in keys.items() if key in obj})


@dataclass
class ActiveTube:
    uid: int
    frames: List[Tuple[int, BBox]]
    interpolated: List[bool]
    agentness: List[float]
    score_sums: Dict[TaskKind, np.ndarray]
    matched: int = 1
    agentness_sum: float = 0.0
    missed: int = 0
    status: str = ACTIVE
    # index into frames of the most recent matched detection
    last_match: int = 0

    @property
    def start(self) -> int:
        return self.frames[0][0]

    @property
    def end(self) -> int:
        return self.frames[-1][0]

    @property
    def last_box(self) -> BBox:
        return self.frames[self.last_match][1]

    @property
    def mean_agentness(self) -> float:
        return self.agentness_sum / self.matched

    def mean_scores(self, task: TaskKind) -> np.ndarray:
        if self.matched == 0:
            raise ValueError(f"tube {self.uid} has no matched frames")
        return self.score_sums[task] / self.matched

    def add_match(self, t: int, det: Detection, scores: Dict[TaskKind, np.ndarray]) -> None:
        # frames after last_match are held placeholders; replace them by
        # linear interpolation between the two matched boxes
        t0, b0 = self.frames[self.last_match]
        a0 = self.agentness[self.last_match]
        del self.frames[self.last_match + 1 :]
        del self.interpolated[self.last_match + 1 :]
        del self.agentness[self.last_match + 1 :]
        gap = t - t0
        for s in range(t0 + 1, t):
            w = (s - t0) / gap
            self.frames.append((s, b0.lerp(det.box, w)))
            self.interpolated.append(True)
            self.agentness.append(a0 + w * (det.agentness - a0))
        self.frames.append((t, det.box))
        self.interpolated.append(False)
        self.agentness.append(det.agentness)
        self.last_match = len(self.frames) - 1
        self.matched += 1
        self.agentness_sum += det.agentness
        for task, vec in scores.items():
            self.score_sums[task] += vec
        self.missed = 0

    def add_miss(self, t: int) -> None:
        self.missed += 1
        self.frames.append((t, self.last_box))
        self.interpolated.append(True)
        self.agentness.append(self.agentness[self.last_match])

    def terminate(self) -> None:
        del self.frames[self.last_match + 1 :]
        del self.interpolated[self.last_match + 1 :]
        del self.agentness[self.last_match + 1 :]
        self.status = TERMINATED

    def segment(self, lo: int, hi: int) -> "ActiveTube":
        """Frames ``lo..hi`` (list positions, inclusive) sharing this
        tube's label statistics."""
        return ActiveTube(
            uid=self.uid,
            frames=self.frames[lo : hi + 1],
            interpolated=self.interpolated[lo : hi + 1],
            agentness=self.agentness[lo : hi + 1],
            score_sums={k: v.copy() for k, v in self.score_sums.items()},
            matched=self.matched,
            agentness_sum=self.agentness_sum,
            status=self.status,
            last_match=hi - lo,
        )


@dataclass
class StepReport:
    opened: List[int] = field(default_factory=list)
    extended: List[int] = field(default_factory=list)
    terminated: List[int] = field(default_factory=list)

    def __bool__(self) -> bool:
        return bool(self.opened or self.extended or self.terminated)

    def merge(self, other: "StepReport") -> None:
        self.opened += other.opened
        self.extended += other.extended
        self.terminated += other.terminated


class Linker:
    """Incremental tube builder for one detection stream.

    Feed frames in increasing ``t`` with :meth:`step` and call
    :meth:`finalize` once the stream is exhausted. Frame indices skipped
    by the stream count as frames without detections.
    """

    def __init__(
        self,
        cfg: LinkerConfig,
        vocab: LabelVocab,
        cv: Optional[CompositeVocab] = None,
        mode: CompositionMode = CompositionMode.PRODUCT,
    ):
        self.cfg = cfg
        self.vocab = vocab
        self.cv = cv
        self.mode = CompositionMode(mode)
        self.active: List[ActiveTube] = []
        self.closed: List[ActiveTube] = []
        self.last_t: Optional[int] = None
        self.next_uid = 0
        self._sizes = {
            TaskKind.AGENT: len(vocab.agent),
            TaskKind.ACTION: len(vocab.action),
            TaskKind.LOC: len(vocab.loc),
        }
        if cv is not None:
            self._sizes[TaskKind.DUPLEX] = len(cv.duplex)
            self._sizes[TaskKind.EVENT] = len(cv.event)

    @property
    def tasks(self) -> Tuple[TaskKind, ...]:
        return tuple(self._sizes)

    def _scores(self, det: Detection) -> Dict[TaskKind, np.ndarray]:
        out = {}
        for task in (TaskKind.AGENT, TaskKind.ACTION, TaskKind.LOC):
            vec = det.scores(task)
            if len(vec) != self._sizes[task]:
                raise VectorLengthMismatch(
                    f"{task.value} vector has {len(vec)} scores, vocabulary has {self._sizes[task]}"
                )
            out[task] = np.asarray(vec, dtype=float)
        if self.cv is not None:
            out[TaskKind.DUPLEX], out[TaskKind.EVENT] = compose_scores(det, self.cv, self.mode)
            for task in (TaskKind.DUPLEX, TaskKind.EVENT):
                if len(out[task]) != self._sizes[task]:
                    raise VectorLengthMismatch(
                        f"{task.value} vector has {len(out[task])} scores, "
                        f"composite vocabulary has {self._sizes[task]}"
                    )
        return out

    def step(self, frame: FrameDetections) -> StepReport:
        if self.last_t is not None and frame.t <= self.last_t:
            raise OutOfOrderFrame(f"frame t={frame.t} does not follow t={self.last_t}")
        report = StepReport()
        if self.last_t is not None:
            for t in range(self.last_t + 1, frame.t):
                report.merge(self._advance(t, ()))
        report.merge(self._advance(frame.t, frame.detections))
        self.last_t = frame.t
        return report

    def _advance(self, t: int, dets: Sequence[Detection]) -> StepReport:
        cfg = self.cfg
        report = StepReport()
        scored = [(d, self._scores(d)) for d in dets if d.agentness >= cfg.min_score]
        order = nms_agentness([(d.box, d.agentness) for d, _ in scored], cfg.nms_iou)

        claimed = set()
        still_active = []
        for tube in sorted(self.active, key=lambda tb: (-tb.mean_agentness, tb.uid)):
            best = None
            for i in order:
                if i not in claimed and box_iou(tube.last_box, scored[i][0].box) >= cfg.lam:
                    best = i
                    break
            if best is not None:
                claimed.add(best)
                tube.add_match(t, *scored[best])
                report.extended.append(tube.uid)
                still_active.append(tube)
            elif tube.missed + 1 > cfg.patience:
                tube.missed += 1
                tube.terminate()
                report.terminated.append(tube.uid)
                self.closed.append(tube)
            else:
                tube.add_miss(t)
                still_active.append(tube)

        for i in order:
            if i in claimed:
                continue
            det, scores = scored[i]
            tube = ActiveTube(
                uid=self.next_uid,
                frames=[(t, det.box)],
                interpolated=[False],
                agentness=[det.agentness],
                score_sums={k: v.copy() for k, v in scores.items()},
                matched=1,
                agentness_sum=det.agentness,
            )
            self.next_uid += 1
            still_active.append(tube)
            report.opened.append(tube.uid)

        self.active = sorted(still_active, key=lambda tb: tb.uid)
        return report

    def finalize(self) -> List[ActiveTube]:
        """Terminate all tubes; returns every tube of the stream by uid."""
        for tube in self.active:
            tube.terminate()
            self.closed.append(tube)
        self.active = []
        self.closed.sort(key=lambda tb: tb.uid)
        return list(self.closed)


def link_stream(
    frames: Iterable[FrameDetections],
    cfg: LinkerConfig,
    vocab: LabelVocab,
    cv: Optional[CompositeVocab] = None,
    mode: CompositionMode = CompositionMode.PRODUCT,
) -> List[ActiveTube]:
    linker = Linker(cfg, vocab, cv, mode)
    for frame in frames:
        linker.step(frame)
    return linker.finalize()


def tube_top_k_labels(tube: ActiveTube, task: TaskKind, k: int) -> List[Tuple[int, float]]:
    """The ``k`` classes with highest mean score over the tube's matched
    frames, descending; equal means keep the lower class id first."""
    means = tube.mean_scores(task)
    order = sorted(range(len(means)), key=lambda c: (-means[c], c))
    return [(c, float(means[c])) for c in order[:k]]
