"""Deterministic synthetic road scenes: paired ground truth and
detection streams with controllable corruption.

All randomness comes from one ``numpy.random.Generator`` backed by PCG64
and seeded with the integer seed, so a (config, seed) pair reproduces the
same bytes wherever numpy's PCG64 stream is available.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .detections import Detection, FrameDetections
from .geometry import BBox
from .schema import (
    ROAD_V1,
    AgentTubeGT,
    AnnotatedFrame,
    AnnotationSet,
    CompositeVocab,
    LabelVocab,
    VideoMeta,
    derive_composite_vocabs,
)

GENERATOR = "numpy.random.PCG64"

# road-v1 ids used by the random scene builder
_TRAFFIC_LIGHT_AGENTS = (9, 10)
_ROAD_AGENTS = tuple(range(1, 9))
_TRAFFIC_LIGHT_ACTIONS = (19, 20, 21, 22)
_ROAD_ACTIONS = tuple(range(0, 19))


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LabelSegment:
    start: int
    end: int  # inclusive
    action_ids: Tuple[int, ...]
    loc_ids: Tuple[int, ...] = ()


@dataclass(frozen=True)
class AgentSpec:
    agent_id: int
    start: int
    end: int  # inclusive
    box: Tuple[float, float, float, float]  # at frame ``start``
    velocity: Tuple[float, float]  # pixels per frame
    schedule: Tuple[LabelSegment, ...]

    def box_at(self, t: int, width: float, height: float) -> BBox:
        dt = t - self.start
        vx, vy = self.velocity
        x1, y1, x2, y2 = self.box
        x1, x2 = np.clip([x1 + vx * dt, x2 + vx * dt], 0.0, width)
        y1, y2 = np.clip([y1 + vy * dt, y2 + vy * dt], 0.0, height)
        if x2 <= x1 or y2 <= y1:
            raise SynthConfigError(f"agent box leaves the image at t={t}")
        return BBox(float(x1), float(y1), float(x2), float(y2))

    def labels_at(self, t: int) -> LabelSegment:
        for seg in self.schedule:
            if seg.start <= t <= seg.end:
                return seg
        raise SynthConfigError(f"schedule does not cover t={t}")


@dataclass(frozen=True)
class NoiseConfig:
    jitter: float = 0.0  # box coordinate sigma, pixels
    dropout: float = 0.0  # per-detection drop probability
    distractors: float = 0.0  # mean spurious detections per frame
    score_noise: float = 0.0  # additive score sigma

    def __post_init__(self) -> None:
        if not 0.0 <= self.dropout <= 1.0:
            raise SynthConfigError(f"dropout must be a probability, got {self.dropout}")
        for name in ("jitter", "distractors", "score_noise"):
            if getattr(self, name) < 0:
                raise SynthConfigError(f"{name} must be >= 0")

    def is_zero(self) -> bool:
        return self.jitter == 0 and self.dropout == 0 and self.distractors == 0 and self.score_noise == 0


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    num_frames: int = 200
    width: float = 1280.0
    height: float = 960.0
    fps: float = 12.0
    # random scene, used when ``agents`` is None
    num_agents: int = 10
    label_changes: int = 0
    agents: Optional[Tuple[AgentSpec, ...]] = None
    av_schedule: Optional[Tuple[Tuple[int, int, int], ...]] = None
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    joint: bool = False
    vocab: LabelVocab = ROAD_V1
    video_id: str = "synth"

    def __post_init__(self) -> None:
        if self.num_frames < 1:
            raise SynthConfigError("num_frames must be >= 1")
        if self.width <= 0 or self.height <= 0:
            raise SynthConfigError("image size must be positive")
        if self.num_agents < 0 or self.label_changes < 0:
            raise SynthConfigError("num_agents and label_changes must be >= 0")

    def to_json(self) -> Dict[str, Any]:
        d = asdict(self)
        d["vocab"] = self.vocab.to_json()
        return d

    @classmethod
    def from_json(cls, obj: Dict[str, Any]) -> "SynthConfig":
        obj = dict(obj)
        obj.pop("version", None)
        if "vocab" in obj:
            v = obj["vocab"]
            obj["vocab"] = ROAD_V1 if v == "road-v1" else LabelVocab.from_json(v)
        if "noise" in obj:
            obj["noise"] = NoiseConfig(**obj["noise"])
        if obj.get("agents") is not None:
            obj["agents"] = tuple(
                AgentSpec(
                    agent_id=a["agent_id"],
                    start=a["start"],
                    end=a["end"],
                    box=tuple(a["box"]),
                    velocity=tuple(a["velocity"]),
                    schedule=tuple(
                        LabelSegment(s["start"], s["end"], tuple(s["action_ids"]), tuple(s.get("loc_ids", ())))
                        for s in a["schedule"]
                    ),
                )
                for a in obj["agents"]
            )
        if obj.get("av_schedule") is not None:
            obj["av_schedule"] = tuple(tuple(s) for s in obj["av_schedule"])
        try:
            return cls(**obj)
        except TypeError as exc:
            raise SynthConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# scene construction


def _random_schedule(rng, start, end, agent_id, changes) -> Tuple[LabelSegment, ...]:
    tl = agent_id in _TRAFFIC_LIGHT_AGENTS
    span = end - start + 1
    cuts = sorted(rng.choice(np.arange(1, span), size=min(changes, span - 1), replace=False)) if span > 1 else []
    bounds = [start] + [start + int(c) for c in cuts] + [end + 1]
    segments = []
    for lo, hi in zip(bounds, bounds[1:]):
        if tl:
            actions = (int(rng.choice(_TRAFFIC_LIGHT_ACTIONS)),)
            locs: Tuple[int, ...] = ()
        else:
            actions = tuple(sorted(int(a) for a in rng.choice(_ROAD_ACTIONS, size=rng.integers(1, 3), replace=False)))
            locs = tuple(sorted(int(l) for l in rng.choice(15, size=rng.integers(1, 3), replace=False)))
        segments.append(LabelSegment(lo, hi - 1, actions, locs))
    return tuple(segments)


def random_agents(
    rng: np.random.Generator, num_agents: int, num_frames: int, width: float, height: float, label_changes: int = 0
) -> Tuple[AgentSpec, ...]:
    """Agents in disjoint horizontal lanes, so no two agents ever overlap
    and every consecutive-frame IoU stays well above 0.5."""
    agents = []
    lane_h = height / max(num_agents, 1)
    for i in range(num_agents):
        agent_id = int(rng.choice(_ROAD_AGENTS + _TRAFFIC_LIGHT_AGENTS))
        length = int(rng.integers(max(2, num_frames // 3), num_frames + 1)) if num_frames > 1 else 1
        start = int(rng.integers(0, num_frames - length + 1))
        end = start + length - 1
        h = float(rng.uniform(0.5, 0.8) * lane_h)
        w = float(rng.uniform(40.0, 160.0))
        lane_top = i * lane_h
        y_a, y_b = rng.uniform(lane_top, lane_top + lane_h - h, size=2)
        max_shift = 0.05 * w * max(length - 1, 1)
        x_a = float(rng.uniform(0.0, width - w))
        x_b = float(np.clip(x_a + rng.uniform(-max_shift, max_shift), 0.0, width - w))
        steps = max(length - 1, 1)
        agents.append(
            AgentSpec(
                agent_id=agent_id,
                start=start,
                end=end,
                box=(x_a, float(y_a), x_a + w, float(y_a) + h),
                velocity=((x_b - x_a) / steps, float(y_b - y_a) / steps),
                schedule=_random_schedule(rng, start, end, agent_id, label_changes),
            )
        )
    return tuple(agents)


def random_av_schedule(rng: np.random.Generator, num_frames: int, n_labels: int) -> Tuple[Tuple[int, int, int], ...]:
    n_seg = int(rng.integers(1, 6))
    cuts = sorted(rng.choice(np.arange(1, num_frames), size=min(n_seg - 1, num_frames - 1), replace=False))
    bounds = [0] + [int(c) for c in cuts] + [num_frames]
    return tuple((lo, hi - 1, int(rng.integers(0, n_labels))) for lo, hi in zip(bounds, bounds[1:]))


def resolve_scene(cfg: SynthConfig) -> Tuple[Tuple[AgentSpec, ...], Tuple[Tuple[int, int, int], ...]]:
    rng = np.random.default_rng(cfg.seed)
    agents = cfg.agents
    if agents is None:
        agents = random_agents(rng, cfg.num_agents, cfg.num_frames, cfg.width, cfg.height, cfg.label_changes)
    av = cfg.av_schedule
    if av is None:
        av = random_av_schedule(rng, cfg.num_frames, len(cfg.vocab.av_action))
    return agents, av


def _check_agent(spec: AgentSpec, cfg: SynthConfig) -> None:
    if not 0 <= spec.start <= spec.end < cfg.num_frames:
        raise SynthConfigError(f"agent lifespan [{spec.start}, {spec.end}] outside the video")
    if not 0 <= spec.agent_id < len(cfg.vocab.agent):
        raise SynthConfigError(f"agent id {spec.agent_id} outside vocabulary")
    if not spec.schedule:
        raise SynthConfigError("agent has an empty label schedule")
    covered = sorted(t for seg in spec.schedule for t in range(seg.start, seg.end + 1))
    if covered != list(range(spec.start, spec.end + 1)):
        raise SynthConfigError(f"schedule must cover frames {spec.start}..{spec.end} exactly once")
    for seg in spec.schedule:
        if not seg.action_ids:
            raise SynthConfigError("every schedule segment needs at least one action")
        if any(not 0 <= a < len(cfg.vocab.action) for a in seg.action_ids):
            raise SynthConfigError("action id outside vocabulary")
        if any(not 0 <= l < len(cfg.vocab.loc) for l in seg.loc_ids):
            raise SynthConfigError("location id outside vocabulary")


def _hot(ids: Sequence[int], n: int) -> Tuple[float, ...]:
    v = [0.0] * n
    for i in ids:
        v[i] = 1.0
    return tuple(v)


def joint_products(agent, action, loc, cv: CompositeVocab) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
    """Generator-side joint scores as exact products of the marginals."""
    duplex = tuple(agent[a] * action[c] for a, c in cv.duplex)
    event = tuple(agent[a] * action[c] * loc[l] for a, c, l in cv.event)
    return duplex, event


def synth_generate(cfg: SynthConfig) -> Tuple[AnnotationSet, List[FrameDetections]]:
    """Ground truth plus a noiseless detection stream.

    Noiseless detections sit exactly on the GT boxes with agentness 1 and
    one-hot (multi-hot for concurrent labels) class vectors. The noise
    settings in ``cfg`` are not applied here; see :func:`synth_perturb`.
    """
    agents, av_schedule = resolve_scene(cfg)
    for spec in agents:
        _check_agent(spec, cfg)
    vocab = cfg.vocab

    tubes = []
    for uid, spec in enumerate(agents):
        frames = []
        for t in range(spec.start, spec.end + 1):
            seg = spec.labels_at(t)
            frames.append(
                AnnotatedFrame(t, spec.box_at(t, cfg.width, cfg.height), frozenset(seg.action_ids), frozenset(seg.loc_ids))
            )
        tubes.append(AgentTubeGT(uid=uid, agent_id=spec.agent_id, frames=tuple(frames)))

    av_actions = []
    for lo, hi, label in av_schedule:
        av_actions.extend((t, label) for t in range(lo, hi + 1))
    av_actions.sort()

    ann = AnnotationSet(
        video=VideoMeta(cfg.video_id, cfg.fps, cfg.width, cfg.height, cfg.num_frames),
        vocab=vocab,
        tubes=tuple(tubes),
        av_actions=tuple(av_actions),
        provenance={"generator": GENERATOR, "seed": cfg.seed},
    )
    cv = derive_composite_vocabs(ann) if cfg.joint else None

    per_frame: List[List[Detection]] = [[] for _ in range(cfg.num_frames)]
    for tube in tubes:
        for f in tube.frames:
            agent = _hot([tube.agent_id], len(vocab.agent))
            action = _hot(sorted(f.action_ids), len(vocab.action))
            loc = _hot(sorted(f.loc_ids), len(vocab.loc))
            joint = joint_products(agent, action, loc, cv) if cv is not None else (None, None)
            per_frame[f.t].append(Detection(f.box, 1.0, agent, action, loc, *joint))
    av_by_t = dict(av_actions)
    stream = [
        FrameDetections(
            t,
            tuple(per_frame[t]),
            _hot([av_by_t[t]], len(vocab.av_action)) if t in av_by_t else None,
        )
        for t in range(cfg.num_frames)
    ]
    return ann, stream


# ---------------------------------------------------------------------------
# corruption


def _noisy(values: Sequence[float], rng, sigma: float) -> Tuple[float, ...]:
    noisy = np.clip(np.asarray(values, dtype=float) + rng.normal(0.0, sigma, len(values)), 0.0, 1.0)
    return tuple(float(v) for v in noisy)


def _clamp_box(coords, width: float, height: float) -> BBox:
    x1, y1, x2, y2 = (float(c) for c in coords)
    x1, x2 = sorted((min(max(x1, 0.0), width), min(max(x2, 0.0), width)))
    y1, y2 = sorted((min(max(y1, 0.0), height), min(max(y2, 0.0), height)))
    # keep at least one pixel of extent, inside the image
    if x2 - x1 < 1.0:
        x1 = min(x1, width - 1.0)
        x2 = x1 + 1.0
    if y2 - y1 < 1.0:
        y1 = min(y1, height - 1.0)
        y2 = y1 + 1.0
    return BBox(x1, y1, x2, y2)


def synth_perturb(
    stream: Sequence[FrameDetections],
    noise: NoiseConfig,
    seed: int,
    width: float,
    height: float,
    vocab: LabelVocab = ROAD_V1,
    cv: Optional[CompositeVocab] = None,
) -> List[FrameDetections]:
    """Apply dropout, box jitter, score noise and distractors.

    Detections that carry joint vectors get them rebuilt as products of
    their perturbed marginals; ``cv`` must then be given. Boxes are
    clamped to the image, scores to [0, 1]. Zero noise returns the input
    frames unchanged.
    """
    if noise.is_zero():
        return list(stream)
    rng = np.random.default_rng(seed)
    joint_cv = cv if any(d.duplex is not None for f in stream for d in f.detections) else None
    out = []
    for frame in stream:
        dets = []
        for det in frame.detections:
            if noise.dropout > 0 and rng.random() < noise.dropout:
                continue
            box = det.box
            if noise.jitter > 0:
                box = _clamp_box(np.asarray(box.to_list()) + rng.normal(0.0, noise.jitter, 4), width, height)
            agentness, agent, action, loc = det.agentness, det.agent, det.action, det.loc
            if noise.score_noise > 0:
                agentness = _noisy([agentness], rng, noise.score_noise)[0]
                agent = _noisy(agent, rng, noise.score_noise)
                action = _noisy(action, rng, noise.score_noise)
                loc = _noisy(loc, rng, noise.score_noise)
            duplex, event = det.duplex, det.event
            if duplex is not None and cv is not None:
                duplex, event = joint_products(agent, action, loc, cv)
            dets.append(Detection(box, agentness, agent, action, loc, duplex, event))
        if noise.distractors > 0:
            for _ in range(int(rng.poisson(noise.distractors))):
                dets.append(_distractor(rng, width, height, vocab, joint_cv))
        av = frame.av_action
        if av is not None and noise.score_noise > 0:
            av = _noisy(av, rng, noise.score_noise)
        out.append(FrameDetections(frame.t, tuple(dets), av))
    return out


def _distractor(rng, width, height, vocab: LabelVocab, cv: Optional[CompositeVocab]) -> Detection:
    w = float(rng.uniform(20.0, 150.0))
    h = float(rng.uniform(20.0, 150.0))
    x = float(rng.uniform(0.0, width - w))
    y = float(rng.uniform(0.0, height - h))
    agent = tuple(float(v) for v in rng.uniform(0.0, 0.3, len(vocab.agent)))
    action = tuple(float(v) for v in rng.uniform(0.0, 0.3, len(vocab.action)))
    loc = tuple(float(v) for v in rng.uniform(0.0, 0.3, len(vocab.loc)))
    duplex, event = joint_products(agent, action, loc, cv) if cv is not None else (None, None)
    return Detection(BBox(x, y, x + w, y + h), float(rng.uniform(0.0, 0.6)), agent, action, loc, duplex, event)


def stream_header(cfg: SynthConfig, seed: Optional[int] = None) -> Dict[str, Any]:
    return {"generator": GENERATOR, "seed": cfg.seed if seed is None else seed, "config": cfg.to_json()}
