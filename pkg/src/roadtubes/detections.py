"""Per-frame detector output streams (JSONL) and predicted-tube files."""

from __future__ import annotations

import io
import json
import math
import os
from dataclasses import dataclass, field
from typing import IO, Any, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

from .geometry import BBox, InvalidBox
from .schema import SCHEMA_VERSION, CompositeVocab, LabelVocab, TaskKind

# sigmoid outputs serialized at low precision may step just outside [0, 1]
CLAMP_TOLERANCE = 1e-6

Scores = Tuple[float, ...]


class DetectionStreamError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class MalformedLine(DetectionStreamError):
    pass


class NonMonotoneTime(DetectionStreamError):
    pass


class VectorLengthMismatch(DetectionStreamError):
    pass


class ScoreOutOfRange(DetectionStreamError):
    pass


class TubeFileError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    box: BBox
    agentness: float
    agent: Scores
    action: Scores
    loc: Scores
    duplex: Optional[Scores] = None
    event: Optional[Scores] = None

    def scores(self, task: TaskKind) -> Optional[Scores]:
        return getattr(self, task.value)

    def to_json(self) -> Dict[str, Any]:
        d: Dict[str, Any] = {
            "box": self.box.to_list(),
            "agentness": self.agentness,
            "agent": list(self.agent),
            "action": list(self.action),
            "loc": list(self.loc),
        }
        if self.duplex is not None:
            d["duplex"] = list(self.duplex)
        if self.event is not None:
            d["event"] = list(self.event)
        return d


@dataclass(frozen=True)
class FrameDetections:
    t: int
    detections: Tuple[Detection, ...] = ()
    # optional per-frame AV-action score vector
    av_action: Optional[Scores] = None

    def to_json(self) -> Dict[str, Any]:
        d: Dict[str, Any] = {"t": self.t, "dets": [det.to_json() for det in self.detections]}
        if self.av_action is not None:
            d["av_action"] = list(self.av_action)
        return d


def clamp_score(value: float, line: Optional[int] = None) -> float:
    if not math.isfinite(value):
        raise ScoreOutOfRange(f"non-finite score {value!r}", line)
    if 0.0 <= value <= 1.0:
        return value
    if -CLAMP_TOLERANCE <= value < 0.0:
        return 0.0
    if 1.0 < value <= 1.0 + CLAMP_TOLERANCE:
        return 1.0
    raise ScoreOutOfRange(f"score {value!r} outside [0, 1]", line)


def _vector(raw: Any, expected: Optional[int], name: str, line: int) -> Scores:
    if not isinstance(raw, list):
        raise MalformedLine(f"'{name}' must be a list of numbers", line)
    if expected is not None and len(raw) != expected:
        raise VectorLengthMismatch(f"'{name}' has {len(raw)} scores, vocabulary has {expected}", line)
    out = []
    for v in raw:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise MalformedLine(f"'{name}' contains non-number {v!r}", line)
        out.append(clamp_score(float(v), line))
    return tuple(out)


def parse_detection(
    raw: Any, vocab: LabelVocab, cv: Optional[CompositeVocab] = None, line: int = 0
) -> Detection:
    if not isinstance(raw, dict):
        raise MalformedLine("detection must be an object", line)
    for key in ("box", "agentness", "agent", "action", "loc"):
        if key not in raw:
            raise MalformedLine(f"detection missing '{key}'", line)
    box_raw = raw["box"]
    if not isinstance(box_raw, list) or len(box_raw) != 4:
        raise MalformedLine("'box' must be [x1, y1, x2, y2]", line)
    try:
        box = BBox.from_list(box_raw)
    except (InvalidBox, TypeError, ValueError) as exc:
        raise MalformedLine(str(exc), line) from None
    agentness = raw["agentness"]
    if isinstance(agentness, bool) or not isinstance(agentness, (int, float)):
        raise MalformedLine("'agentness' must be a number", line)
    joint = {}
    for key in ("duplex", "event"):
        if raw.get(key) is not None:
            expected = None if cv is None else cv.size(TaskKind(key))
            joint[key] = _vector(raw[key], expected, key, line)
    return Detection(
        box=box,
        agentness=clamp_score(float(agentness), line),
        agent=_vector(raw["agent"], len(vocab.agent), "agent", line),
        action=_vector(raw["action"], len(vocab.action), "action", line),
        loc=_vector(raw["loc"], len(vocab.loc), "loc", line),
        **joint,
    )


Source = Union[str, os.PathLike, IO[str], IO[bytes], Iterable[str]]


def _lines(source: Source) -> Iterator[str]:
    if isinstance(source, (str, os.PathLike)):
        with open(source, "r", encoding="utf-8") as fh:
            yield from fh
        return
    for line in source:
        yield line.decode("utf-8") if isinstance(line, bytes) else line


def read_detection_stream(
    source: Source,
    vocab: LabelVocab,
    cv: Optional[CompositeVocab] = None,
    header: Optional[Dict[str, Any]] = None,
) -> Iterator[FrameDetections]:
    """Lazily yield frames from a detection JSONL stream.

    A first line of the form ``{"header": {...}}`` is metadata; when a dict
    is passed as ``header`` it is filled with that line's content. Blank
    lines are skipped. Each record is validated as it is read.
    """
    last_t = None
    for lineno, text in enumerate(_lines(source), 1):
        if not text.strip():
            continue
        try:
            rec = json.loads(text)
        except json.JSONDecodeError as exc:
            raise MalformedLine(f"invalid JSON: {exc.msg}", lineno) from None
        if not isinstance(rec, dict):
            raise MalformedLine("record must be a JSON object", lineno)
        if "header" in rec and "t" not in rec:
            if last_t is not None:
                raise MalformedLine("header after frame records", lineno)
            if header is not None:
                header.update(rec["header"])
            continue
        t = rec.get("t")
        if isinstance(t, bool) or not isinstance(t, int) or t < 0:
            raise MalformedLine("'t' must be a non-negative integer", lineno)
        if last_t is not None and t <= last_t:
            raise NonMonotoneTime(f"t={t} does not exceed previous t={last_t}", lineno)
        dets = rec.get("dets")
        if not isinstance(dets, list):
            raise MalformedLine("'dets' must be a list", lineno)
        av = rec.get("av_action")
        yield FrameDetections(
            t=t,
            detections=tuple(parse_detection(d, vocab, cv, lineno) for d in dets),
            av_action=None if av is None else _vector(av, len(vocab.av_action), "av_action", lineno),
        )
        last_t = t


def dumps_line(obj: Any) -> str:
    return json.dumps(obj, separators=(",", ":")) + "\n"


def write_detection_stream(
    frames: Iterable[FrameDetections], sink: IO[str], header: Optional[Dict[str, Any]] = None
) -> int:
    n = 0
    if header is not None:
        n += sink.write(dumps_line({"header": header}))
    for frame in frames:
        n += sink.write(dumps_line(frame.to_json()))
    return n


# ---------------------------------------------------------------------------
# predicted tubes


@dataclass(frozen=True)
class LabeledTube:
    """A finalized tube carrying one class label of one task."""

    uid: int
    task: TaskKind
    class_id: int
    score: float
    frames: Tuple[Tuple[int, BBox], ...]
    interpolated: Tuple[bool, ...] = field(default=(), compare=False)

    def sort_key(self) -> Tuple[int, int, int]:
        return (self.uid, _TASK_ORDER[self.task], self.class_id)


_TASK_ORDER = {task: i for i, task in enumerate(TaskKind)}


def tubes_to_json(
    tubes: Sequence[LabeledTube],
    config: Optional[Dict[str, Any]] = None,
    vocab: Optional[LabelVocab] = None,
    cv: Optional[CompositeVocab] = None,
) -> Dict[str, Any]:
    doc: Dict[str, Any] = {"version": SCHEMA_VERSION}
    if config is not None:
        doc["config"] = config
    if vocab is not None:
        doc["vocab_sizes"] = vocab.sizes()
    if cv is not None:
        doc["composite_vocab"] = cv.to_json()
    out = []
    for tube in sorted(tubes, key=LabeledTube.sort_key):
        frames = []
        flags = tube.interpolated or (False,) * len(tube.frames)
        for (t, box), interp in zip(tube.frames, flags):
            f: Dict[str, Any] = {"t": t, "box": box.to_list()}
            if interp:
                f["interpolated"] = True
            frames.append(f)
        out.append(
            {
                "uid": tube.uid,
                "task": tube.task.value,
                "class_id": tube.class_id,
                "score": tube.score,
                "frames": frames,
            }
        )
    doc["tubes"] = out
    return doc


def write_tubes(
    tubes: Sequence[LabeledTube],
    sink: Union[IO[str], IO[bytes]],
    config: Optional[Dict[str, Any]] = None,
    vocab: Optional[LabelVocab] = None,
    cv: Optional[CompositeVocab] = None,
) -> int:
    """Serialize deterministically (ordered by uid, task, class id).
    Returns the number of bytes written."""
    text = json.dumps(tubes_to_json(tubes, config, vocab, cv), separators=(",", ":")) + "\n"
    data = text.encode("utf-8")
    if isinstance(sink, io.TextIOBase):
        sink.write(text)
    else:
        sink.write(data)  # type: ignore[arg-type]
    return len(data)


@dataclass
class TubeFile:
    tubes: List[LabeledTube]
    config: Optional[Dict[str, Any]] = None
    vocab_sizes: Optional[Dict[str, int]] = None
    composite_vocab: Optional[CompositeVocab] = None


def read_tubes(source: Union[str, os.PathLike, bytes, IO]) -> TubeFile:
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            data = fh.read()
    elif isinstance(source, bytes):
        data = source
    else:
        data = source.read()
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise TubeFileError(f"tube file is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("version") != SCHEMA_VERSION:
        raise TubeFileError("not a road-lite/1 tube file")
    tubes = []
    try:
        for rt in doc["tubes"]:
            frames = tuple((int(f["t"]), BBox.from_list(f["box"])) for f in rt["frames"])
            flags = tuple(bool(f.get("interpolated", False)) for f in rt["frames"])
            tubes.append(
                LabeledTube(
                    uid=int(rt["uid"]),
                    task=TaskKind(rt["task"]),
                    class_id=int(rt["class_id"]),
                    score=float(rt["score"]),
                    frames=frames,
                    interpolated=flags,
                )
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise TubeFileError(f"malformed tube record: {exc!r}") from None
    cv = doc.get("composite_vocab")
    return TubeFile(
        tubes=tubes,
        config=doc.get("config"),
        vocab_sizes=doc.get("vocab_sizes"),
        composite_vocab=None if cv is None else CompositeVocab.from_json(cv),
    )
