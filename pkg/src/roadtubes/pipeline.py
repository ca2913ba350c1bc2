"""Detection stream -> labelled tubes, the path behind ``road-tubes build``."""

from __future__ import annotations

from typing import Iterable, List, Optional, Sequence

from .composition import CompositionMode
from .detections import FrameDetections, LabeledTube
from .linker import ActiveTube, LinkerConfig, link_stream, tube_top_k_labels
from .schema import CompositeVocab, LabelVocab, TaskKind
from .trimming import TrimConfig, trim_tube


def label_tubes(
    tubes: Sequence[ActiveTube],
    tasks: Sequence[TaskKind],
    k: int,
    min_len: int = 0,
    trim: Optional[TrimConfig] = None,
) -> List[LabeledTube]:
    """Expand each tube into one labelled tube per task and top-k class.

    With trimming enabled, every surviving segment inherits its parent's
    labels and receives a fresh sequential uid.
    """
    trim = trim or TrimConfig()
    out: List[LabeledTube] = []
    next_uid = 0
    for tube in tubes:
        labels = {task: tube_top_k_labels(tube, task, k) for task in tasks}
        for seg in trim_tube(tube, trim):
            if len(seg.frames) < min_len:
                continue
            uid = next_uid if trim.enabled else seg.uid
            next_uid += 1
            for task in tasks:
                for class_id, score in labels[task]:
                    out.append(
                        LabeledTube(
                            uid=uid,
                            task=task,
                            class_id=class_id,
                            score=score,
                            frames=tuple(seg.frames),
                            interpolated=tuple(seg.interpolated),
                        )
                    )
    return out


def build_tubes(
    frames: Iterable[FrameDetections],
    vocab: LabelVocab,
    cfg: Optional[LinkerConfig] = None,
    cv: Optional[CompositeVocab] = None,
    mode: CompositionMode = CompositionMode.PRODUCT,
    trim: Optional[TrimConfig] = None,
) -> List[LabeledTube]:
    cfg = cfg or LinkerConfig()
    tubes = link_stream(frames, cfg, vocab, cv, mode)
    tasks = [TaskKind.AGENT, TaskKind.ACTION, TaskKind.LOC]
    if cv is not None:
        tasks += [TaskKind.DUPLEX, TaskKind.EVENT]
    return label_tubes(tubes, tasks, cfg.k, cfg.min_len, trim)
