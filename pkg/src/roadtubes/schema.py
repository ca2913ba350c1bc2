"""Road-event ground truth: label vocabularies, agent tubes with per-frame
multi-label annotations, and derived duplex/event labels."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

from .geometry import BBox, InvalidBox, TubeGeometry

SCHEMA_VERSION = "road-lite/1"


class TaskKind(str, enum.Enum):
    AGENT = "agent"
    ACTION = "action"
    LOC = "loc"
    DUPLEX = "duplex"
    EVENT = "event"
    AV = "av"


BOX_TASKS = (TaskKind.AGENT, TaskKind.ACTION, TaskKind.LOC, TaskKind.DUPLEX, TaskKind.EVENT)


class SchemaError(ValueError):
    """Structural defect in an annotation or vocabulary document."""


class MalformedDocument(SchemaError):
    pass


class UnknownVersion(SchemaError):
    pass


class MissingField(SchemaError):
    pass


class DanglingLabel(SchemaError):
    pass


@dataclass(frozen=True)
class LabelVocab:
    agent: Tuple[str, ...]
    action: Tuple[str, ...]
    loc: Tuple[str, ...]
    av_action: Tuple[str, ...]

    def __post_init__(self) -> None:
        for name in ("agent", "action", "loc", "av_action"):
            names = getattr(self, name)
            if not names:
                raise SchemaError(f"{name} vocabulary is empty")
            if len(set(names)) != len(names):
                raise SchemaError(f"{name} vocabulary has duplicate names")

    def sizes(self) -> Dict[str, int]:
        return {
            "agent": len(self.agent),
            "action": len(self.action),
            "loc": len(self.loc),
            "av_action": len(self.av_action),
        }

    def to_json(self) -> Dict[str, List[str]]:
        return {
            "agent": list(self.agent),
            "action": list(self.action),
            "loc": list(self.loc),
            "av_action": list(self.av_action),
        }

    @classmethod
    def from_json(cls, obj: Any) -> "LabelVocab":
        if not isinstance(obj, dict):
            raise MalformedDocument("label_vocab must be an object")
        lists = {}
        for key in ("agent", "action", "loc", "av_action"):
            if key not in obj:
                raise MissingField(f"label_vocab.{key}")
            value = obj[key]
            if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
                raise MalformedDocument(f"label_vocab.{key} must be a list of strings")
            lists[key] = tuple(value)
        return cls(**lists)

    def is_traffic_light(self, agent_id: int) -> bool:
        return "traffic light" in self.agent[agent_id].lower()


ROAD_V1 = LabelVocab(
    agent=(
        "Autonomous-vehicle",
        "Car",
        "Medium vehicle",
        "Large vehicle",
        "Bus",
        "Motorbike",
        "Emergency vehicle",
        "Pedestrian",
        "Cyclist",
        "Vehicle traffic light",
        "Other traffic light",
    ),
    action=(
        "Moving away",
        "Moving towards",
        "Moving",
        "Reversing",
        "Braking",
        "Stopped",
        "Indicating left",
        "Indicating right",
        "Hazard lights on",
        "Turning left",
        "Turning right",
        "Moving right",
        "Moving left",
        "Overtaking",
        "Waiting to cross",
        "Crossing road from left",
        "Crossing road from right",
        "Crossing",
        "Pushing object",
        "Traffic light red",
        "Traffic light amber",
        "Traffic light green",
        "Traffic light black",
    ),
    loc=(
        "In vehicle lane",
        "In outgoing lane",
        "In incoming lane",
        "In outgoing bus lane",
        "In incoming bus lane",
        "In outgoing cycle lane",
        "In incoming cycle lane",
        "On left pavement",
        "On right pavement",
        "On pavement",
        "At junction",
        "At crossing",
        "At bus stop",
        "At left parking",
        "At right parking",
    ),
    av_action=(
        "Av-move",
        "Av-stop",
        "Av-turn-right",
        "Av-turn-left",
        "Av-overtake",
        "Av-move-left",
        "Av-move-right",
    ),
)

BUILTIN_VOCABS = {"road-v1": ROAD_V1}


@dataclass(frozen=True)
class AnnotatedFrame:
    t: int
    box: BBox
    action_ids: FrozenSet[int]
    loc_ids: FrozenSet[int]


@dataclass(frozen=True)
class AgentTubeGT:
    uid: int
    agent_id: int
    frames: Tuple[AnnotatedFrame, ...]

    def geometry(self) -> TubeGeometry:
        return TubeGeometry(tuple((f.t, f.box) for f in self.frames))


@dataclass(frozen=True)
class VideoMeta:
    id: str
    fps: float
    width: float
    height: float
    num_frames: int


@dataclass(frozen=True)
class AnnotationSet:
    video: VideoMeta
    vocab: LabelVocab
    tubes: Tuple[AgentTubeGT, ...]
    av_actions: Tuple[Tuple[int, int], ...] = ()
    # free-form provenance echoed by producers; ignored by consumers
    provenance: Optional[Dict[str, Any]] = field(default=None, compare=False)

    def av_label_at(self) -> Dict[int, int]:
        return dict(self.av_actions)


@dataclass(frozen=True)
class CompositeVocab:
    duplex: Tuple[Tuple[int, int], ...]
    event: Tuple[Tuple[int, int, int], ...]

    def to_json(self) -> Dict[str, List[List[int]]]:
        return {"duplex": [list(p) for p in self.duplex], "event": [list(e) for e in self.event]}

    @classmethod
    def from_json(cls, obj: Any) -> "CompositeVocab":
        try:
            duplex = tuple((int(a), int(c)) for a, c in obj["duplex"])
            event = tuple((int(a), int(c), int(l)) for a, c, l in obj["event"])
        except KeyError as exc:
            raise MissingField(f"composite vocab field {exc.args[0]}") from None
        except (TypeError, ValueError) as exc:
            raise MalformedDocument(f"bad composite vocab: {exc}") from None
        if len(set(duplex)) != len(duplex) or len(set(event)) != len(event):
            raise MalformedDocument("composite vocab has duplicate entries")
        return cls(duplex, event)

    def size(self, task: TaskKind) -> int:
        return len(self.duplex) if task is TaskKind.DUPLEX else len(self.event)


def task_class_count(task: TaskKind, vocab: LabelVocab, cv: Optional[CompositeVocab] = None) -> int:
    if task is TaskKind.AGENT:
        return len(vocab.agent)
    if task is TaskKind.ACTION:
        return len(vocab.action)
    if task is TaskKind.LOC:
        return len(vocab.loc)
    if task is TaskKind.AV:
        return len(vocab.av_action)
    if cv is None:
        raise ValueError(f"task {task.value} needs a composite vocabulary")
    return cv.size(task)


def task_class_names(task: TaskKind, vocab: LabelVocab, cv: Optional[CompositeVocab] = None) -> List[str]:
    if task is TaskKind.AGENT:
        return list(vocab.agent)
    if task is TaskKind.ACTION:
        return list(vocab.action)
    if task is TaskKind.LOC:
        return list(vocab.loc)
    if task is TaskKind.AV:
        return list(vocab.av_action)
    if cv is None:
        raise ValueError(f"task {task.value} needs a composite vocabulary")
    if task is TaskKind.DUPLEX:
        return [f"{vocab.agent[a]}/{vocab.action[c]}" for a, c in cv.duplex]
    return [f"{vocab.agent[a]}/{vocab.action[c]}/{vocab.loc[l]}" for a, c, l in cv.event]


# ---------------------------------------------------------------------------
# (de)serialization


def _require(obj: Dict[str, Any], key: str, where: str) -> Any:
    if not isinstance(obj, dict):
        raise MalformedDocument(f"{where} must be an object")
    if key not in obj:
        raise MissingField(f"{where}.{key}" if where else key)
    return obj[key]


def _int(value: Any, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise MalformedDocument(f"{where} must be an integer, got {value!r}")
    return value


def _number(value: Any, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise MalformedDocument(f"{where} must be a number, got {value!r}")
    return float(value)


def _ids(value: Any, size: int, where: str) -> FrozenSet[int]:
    if not isinstance(value, list):
        raise MalformedDocument(f"{where} must be a list")
    ids = [_int(v, where) for v in value]
    for i in ids:
        if not 0 <= i < size:
            raise DanglingLabel(f"{where}: id {i} outside vocabulary of size {size}")
    return frozenset(ids)


def _box(value: Any, where: str) -> BBox:
    if not isinstance(value, list) or len(value) != 4:
        raise MalformedDocument(f"{where} must be [x1, y1, x2, y2]")
    try:
        return BBox(*(_number(v, where) for v in value))
    except InvalidBox as exc:
        raise MalformedDocument(f"{where}: {exc}") from None


def load_json_document(data: bytes | str) -> Any:
    try:
        return json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedDocument(f"not valid JSON: {exc}") from None


def parse_annotations(document: bytes | str | Dict[str, Any]) -> AnnotationSet:
    """Parse a ``road-lite/1`` annotation document.

    Any structural defect raises a :class:`SchemaError` subclass; there are
    no partial results.
    """
    doc = document if isinstance(document, dict) else load_json_document(document)
    if not isinstance(doc, dict):
        raise MalformedDocument("annotation document must be a JSON object")
    version = _require(doc, "version", "")
    if version != SCHEMA_VERSION:
        raise UnknownVersion(f"unsupported schema version {version!r}")

    v = _require(doc, "video", "")
    video = VideoMeta(
        id=str(_require(v, "id", "video")),
        fps=_number(_require(v, "fps", "video"), "video.fps"),
        width=_number(_require(v, "width", "video"), "video.width"),
        height=_number(_require(v, "height", "video"), "video.height"),
        num_frames=_int(_require(v, "num_frames", "video"), "video.num_frames"),
    )
    vocab = LabelVocab.from_json(_require(doc, "label_vocab", ""))

    raw_tubes = _require(doc, "tubes", "")
    if not isinstance(raw_tubes, list):
        raise MalformedDocument("tubes must be a list")
    tubes = []
    for i, rt in enumerate(raw_tubes):
        where = f"tubes[{i}]"
        uid = _int(_require(rt, "uid", where), f"{where}.uid")
        agent_id = _int(_require(rt, "agent_id", where), f"{where}.agent_id")
        if not 0 <= agent_id < len(vocab.agent):
            raise DanglingLabel(f"{where}.agent_id {agent_id} outside agent vocabulary")
        raw_frames = _require(rt, "frames", where)
        if not isinstance(raw_frames, list):
            raise MalformedDocument(f"{where}.frames must be a list")
        frames = []
        for j, rf in enumerate(raw_frames):
            fw = f"{where}.frames[{j}]"
            frames.append(
                AnnotatedFrame(
                    t=_int(_require(rf, "t", fw), f"{fw}.t"),
                    box=_box(_require(rf, "box", fw), f"{fw}.box"),
                    action_ids=_ids(_require(rf, "action_ids", fw), len(vocab.action), f"{fw}.action_ids"),
                    loc_ids=_ids(_require(rf, "loc_ids", fw), len(vocab.loc), f"{fw}.loc_ids"),
                )
            )
        tubes.append(AgentTubeGT(uid=uid, agent_id=agent_id, frames=tuple(frames)))

    raw_av = _require(doc, "av_actions", "")
    if not isinstance(raw_av, list):
        raise MalformedDocument("av_actions must be a list")
    av = []
    for i, ra in enumerate(raw_av):
        where = f"av_actions[{i}]"
        t = _int(_require(ra, "t", where), f"{where}.t")
        label = _int(_require(ra, "label_id", where), f"{where}.label_id")
        if not 0 <= label < len(vocab.av_action):
            raise DanglingLabel(f"{where}.label_id {label} outside av_action vocabulary")
        av.append((t, label))

    provenance = doc.get("provenance")
    return AnnotationSet(video, vocab, tuple(tubes), tuple(av), provenance)


def annotations_to_json(a: AnnotationSet) -> Dict[str, Any]:
    doc: Dict[str, Any] = {
        "version": SCHEMA_VERSION,
        "video": {
            "id": a.video.id,
            "fps": a.video.fps,
            "width": a.video.width,
            "height": a.video.height,
            "num_frames": a.video.num_frames,
        },
        "label_vocab": a.vocab.to_json(),
        "tubes": [
            {
                "uid": tube.uid,
                "agent_id": tube.agent_id,
                "frames": [
                    {
                        "t": f.t,
                        "box": f.box.to_list(),
                        "action_ids": sorted(f.action_ids),
                        "loc_ids": sorted(f.loc_ids),
                    }
                    for f in tube.frames
                ],
            }
            for tube in a.tubes
        ],
        "av_actions": [{"t": t, "label_id": label} for t, label in a.av_actions],
    }
    if a.provenance is not None:
        doc["provenance"] = a.provenance
    return doc


def serialize_annotations(a: AnnotationSet) -> bytes:
    return (json.dumps(annotations_to_json(a), separators=(",", ":")) + "\n").encode("utf-8")


def load_vocab(spec: str) -> Tuple[LabelVocab, Optional[CompositeVocab]]:
    """Resolve ``--vocab``: a built-in name, a bare vocab JSON file, or an
    annotation document (whose composite vocab is derived as well)."""
    if spec in BUILTIN_VOCABS:
        return BUILTIN_VOCABS[spec], None
    with open(spec, "rb") as fh:
        doc = load_json_document(fh.read())
    if isinstance(doc, dict) and "tubes" in doc:
        ann = parse_annotations(doc)
        return ann.vocab, derive_composite_vocabs(ann)
    if isinstance(doc, dict) and "label_vocab" in doc:
        doc = doc["label_vocab"]
    return LabelVocab.from_json(doc), None


def load_composite_vocab(path: str) -> CompositeVocab:
    with open(path, "rb") as fh:
        doc = load_json_document(fh.read())
    if isinstance(doc, dict) and "tubes" in doc:
        return derive_composite_vocabs(parse_annotations(doc))
    if isinstance(doc, dict) and "composite_vocab" in doc:
        doc = doc["composite_vocab"]
    return CompositeVocab.from_json(doc)


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Finding:
    kind: str
    message: str


@dataclass
class ValidationReport:
    errors: List[Finding] = field(default_factory=list)
    warnings: List[Finding] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def __len__(self) -> int:
        return len(self.errors) + len(self.warnings)

    def lines(self) -> List[str]:
        return [f"error {f.kind}: {f.message}" for f in self.errors] + [
            f"warning {f.kind}: {f.message}" for f in self.warnings
        ]


def validate_annotations(a: AnnotationSet) -> ValidationReport:
    report = ValidationReport()
    seen: Dict[int, int] = {}
    for i, tube in enumerate(a.tubes):
        if tube.uid in seen:
            report.errors.append(
                Finding("DuplicateUid", f"tubes[{i}] reuses uid {tube.uid} of tubes[{seen[tube.uid]}]")
            )
        else:
            seen[tube.uid] = i
        if not tube.frames:
            report.errors.append(Finding("EmptyTube", f"tube {tube.uid} has no frames"))
        prev = None
        for f in tube.frames:
            if prev is not None and f.t <= prev:
                report.errors.append(
                    Finding("NonMonotoneTime", f"tube {tube.uid}: t={f.t} follows t={prev}")
                )
            prev = f.t
            if not f.action_ids:
                report.errors.append(Finding("EmptyActionSet", f"tube {tube.uid} t={f.t} has no action label"))
            if not f.loc_ids and not a.vocab.is_traffic_light(tube.agent_id):
                report.warnings.append(
                    Finding("EmptyLocationSet", f"tube {tube.uid} t={f.t} has no location label")
                )
            b = f.box
            if b.x1 < 0 or b.y1 < 0 or b.x2 > a.video.width or b.y2 > a.video.height:
                report.warnings.append(
                    Finding("OutOfBounds", f"tube {tube.uid} t={f.t} box {b.to_list()} exceeds image")
                )
            if not 0 <= f.t < a.video.num_frames:
                report.warnings.append(
                    Finding("FrameOutOfRange", f"tube {tube.uid} t={f.t} outside [0, {a.video.num_frames})")
                )
    av_seen = set()
    for t, _ in a.av_actions:
        if t in av_seen:
            report.errors.append(Finding("DuplicateAvFrame", f"av_actions has two labels for t={t}"))
        av_seen.add(t)
    return report


# ---------------------------------------------------------------------------
# composite labels


def _frame_combos(agent_id: int, f: AnnotatedFrame, task: TaskKind) -> Iterable[Tuple[int, ...]]:
    if task is TaskKind.DUPLEX:
        return ((agent_id, c) for c in f.action_ids)
    return ((agent_id, c, l) for c in f.action_ids for l in f.loc_ids)


def derive_composite_vocabs(a: AnnotationSet) -> CompositeVocab:
    """Duplex/event classes observed in at least one annotated frame,
    with concurrent labels expanded as a Cartesian product."""
    duplex = set()
    event = set()
    for tube in a.tubes:
        for f in tube.frames:
            duplex.update(_frame_combos(tube.agent_id, f, TaskKind.DUPLEX))
            event.update(_frame_combos(tube.agent_id, f, TaskKind.EVENT))
    return CompositeVocab(tuple(sorted(duplex)), tuple(sorted(event)))


def label_runs(present: Sequence[bool]) -> List[Tuple[int, int]]:
    """Maximal runs of True as inclusive ``(first, last)`` index pairs."""
    runs = []
    start = None
    for i, p in enumerate(present):
        if p and start is None:
            start = i
        elif not p and start is not None:
            runs.append((start, i - 1))
            start = None
    if start is not None:
        runs.append((start, len(present) - 1))
    return runs


def _frame_classes(tube: AgentTubeGT, f: AnnotatedFrame, task: TaskKind, index: Dict) -> Iterable[int]:
    if task is TaskKind.ACTION:
        return f.action_ids
    if task is TaskKind.LOC:
        return f.loc_ids
    return (index[c] for c in _frame_combos(tube.agent_id, f, task) if c in index)


def extract_gt_tubes(
    a: AnnotationSet, task: TaskKind, cv: Optional[CompositeVocab] = None
) -> List[Tuple[int, TubeGeometry]]:
    """Ground-truth tubes of one task as ``(class_id, geometry)`` pairs.

    Agent tubes come out whole; every other task yields one tube per
    maximal run of consecutive annotated frames carrying the class.
    """
    if task is TaskKind.AV:
        raise ValueError("AV actions are frame labels, not tubes")
    if task is TaskKind.AGENT:
        return [(tube.agent_id, tube.geometry()) for tube in a.tubes if tube.frames]
    index: Dict = {}
    if task in (TaskKind.DUPLEX, TaskKind.EVENT):
        if cv is None:
            raise ValueError(f"task {task.value} needs a composite vocabulary")
        combos = cv.duplex if task is TaskKind.DUPLEX else cv.event
        index = {c: i for i, c in enumerate(combos)}

    out = []
    for tube in a.tubes:
        per_frame = [set(_frame_classes(tube, f, task, index)) for f in tube.frames]
        for cls in sorted(set().union(*per_frame)) if per_frame else ():
            for lo, hi in label_runs([cls in s for s in per_frame]):
                frames = tube.frames[lo : hi + 1]
                out.append((cls, TubeGeometry(tuple((f.t, f.box) for f in frames))))
    return out
