import pytest

from roadtubes.detections import Detection, FrameDetections
from roadtubes.geometry import BBox
from roadtubes.schema import (
    AgentTubeGT,
    AnnotatedFrame,
    AnnotationSet,
    LabelVocab,
    VideoMeta,
)

TINY = LabelVocab(
    agent=("Car", "Ped", "Vehicle traffic light"),
    action=("MovAway", "MovTow", "TurLft", "Red"),
    loc=("VehLane", "IncomLane", "LftPav"),
    av_action=("Av-move", "Av-stop", "Av-turn-left"),
)


@pytest.fixture
def tiny_vocab():
    return TINY


def gt_tube(uid, agent_id, frames):
    """``frames``: iterable of (t, box tuple, action ids, loc ids)."""
    return AgentTubeGT(
        uid=uid,
        agent_id=agent_id,
        frames=tuple(AnnotatedFrame(t, BBox(*b), frozenset(a), frozenset(l)) for t, b, a, l in frames),
    )


def annotation(tubes, vocab=TINY, num_frames=20, av=(), width=100.0, height=100.0):
    return AnnotationSet(
        video=VideoMeta("v0", 12.0, width, height, num_frames),
        vocab=vocab,
        tubes=tuple(tubes),
        av_actions=tuple(av),
    )


def det(box, agentness=0.9, agent=None, action=None, loc=None, vocab=TINY, **joint):
    return Detection(
        box=BBox(*box),
        agentness=agentness,
        agent=tuple(agent) if agent is not None else (0.0,) * len(vocab.agent),
        action=tuple(action) if action is not None else (0.0,) * len(vocab.action),
        loc=tuple(loc) if loc is not None else (0.0,) * len(vocab.loc),
        **joint,
    )


def frame(t, *dets):
    return FrameDetections(t, tuple(dets))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
